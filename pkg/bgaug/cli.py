"""
Command-line driver: ``bgaug <subcommand> [options]``.

Every subcommand writes a run directory holding ``config.json`` (the resolved
configuration), ``run.json`` (command, seed, input hash, package version) and
``metrics.jsonl`` (one run record per line).
"""
import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import __version__
from .cachestore import attach_cache, build_cache, dataset_hash
from .config import ExperimentConfig, resolve_workers
from .errors import ConfigError, IntegrityError, NumericalError
from .evalkit import ProbedEncoder, ProbeParams, attack_table, eval_splits, split_accuracies, train_probe
from .imgcore import MaskCorruption
from .learner import load_encoder, predict_supervised, save_training, train_contrastive, train_supervised
from .synthgen import NO_FG, SampleSet, gen_challenge_splits, gen_dataset, load_dataset, save_dataset

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INTEGRITY = 0, 2, 3, 4

ABLATION_ROWS = {
    "a": dict(mode="none"),
    "b": dict(mode="bg_swaps", aug_in_query=True, aug_in_key=False, p_neg=0.0),
    "c": dict(mode="bg_swaps", aug_in_query=False, aug_in_key=True, p_neg=0.0),
    "d": dict(mode="bg_swaps", aug_in_query=True, aug_in_key=True, p_neg=0.0),
    "e": dict(mode="bg_swaps", aug_in_query=True, aug_in_key=True),
}

MASK_NOISE_LEVELS = {
    "rotation": (0, 5, 10, 15, 20, 25),
    "shear": (0, 5, 10, 15, 20, 25),
    "translation": (0.0, 0.05, 0.1, 0.15, 0.2, 0.25),
    "hflip": (0.5,),
}

STRENGTHS = (0.1, 0.2, 0.3, 0.4, 0.5)


def _corruption(kind: str, level: float) -> MaskCorruption:
    if kind == "rotation":
        return MaskCorruption(max_rotation=level)
    if kind == "shear":
        return MaskCorruption(max_shear=level)
    if kind == "translation":
        return MaskCorruption(max_translation=level)
    return MaskCorruption(hflip_prob=level)


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as error:
        raise ConfigError(f"Expected a comma separated list of numbers, got {text!r}") from error


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.apply_seed(args.seed)
    if getattr(args, "objective", None):
        cfg.train.objective = args.objective
    cfg.validate()
    return cfg


def _hash(*parts: str) -> str:
    digest = hashlib.blake2b(digest_size=8)
    for part in parts:
        digest.update(part.encode())
    return digest.hexdigest()


def start_run(out: Path, cfg: ExperimentConfig, command: str, inputs: Sequence[str] = ()) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    config_json = cfg.to_json()
    (out / "config.json").write_text(config_json + "\n")
    run = {
        "command": command,
        "seed": cfg.train.seed,
        "synth_seed": cfg.synth.seed,
        "input_hash": _hash(config_json, *inputs),
        "version": __version__,
    }
    (out / "run.json").write_text(json.dumps(run, indent=1, sort_keys=True) + "\n")
    (out / "metrics.jsonl").write_text("")
    return out


def append_record(run_dir: Path, record: Dict):
    with open(run_dir / "metrics.jsonl", "a") as output:
        output.write(json.dumps(record, sort_keys=True) + "\n")


def _datasets(args, cfg: ExperimentConfig, workers: int, progress: bool) -> Tuple[SampleSet, SampleSet]:
    if args.data:
        data = Path(args.data)
        train, test = load_dataset(data / "train"), load_dataset(data / "test")
    else:
        train, test = gen_dataset(cfg.synth, workers, progress)
    if getattr(args, "cache", None):
        train = attach_cache(train, args.cache)
    return train, test


def _with_aug(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    out = copy.deepcopy(cfg)
    out.aug = dataclasses.replace(out.aug, **changes)
    out.train.aug = out.aug
    out.validate()
    return out


def _challenge_splits(cfg: ExperimentConfig, test: SampleSet):
    splits = gen_challenge_splits(
        test, seed=cfg.eval.split_seed, donor_key=cfg.eval.donor_key, include_no_fg=NO_FG in cfg.eval.splits
    )
    for split in splits.values():
        for flag in split.flags:
            logger.debug(flag)
    return {name: splits[name] for name in cfg.eval.splits}


def run_pipeline(
    cfg: ExperimentConfig,
    train: SampleSet,
    test: SampleSet,
    run_dir: Path,
    label: str,
    workers: int,
    progress: bool,
    kind: str = "pipeline",
    extra: Optional[Dict] = None,
) -> Dict:
    """
    Train an encoder, fit a probe on its frozen features and evaluate every split.
    """
    sub = run_dir / label
    sub.mkdir(parents=True, exist_ok=True)
    trainer = train_contrastive if cfg.train.objective == "contrastive" else train_supervised
    logger.info("Training %s (%s, mode=%s)", label, cfg.train.objective, cfg.aug.mode)
    result = trainer(train, cfg.train, workers=workers, progress=progress, log_path=sub / "train_log.jsonl")
    save_training(sub, result, cfg.train, cfg.to_dict())

    encoder = result.state.theta_q if cfg.train.objective == "contrastive" else result.state.params
    probe = train_probe(encoder, train, cfg.probe)
    model = ProbedEncoder(encoder, probe, cfg.probe.representation)
    table = eval_splits(model, _challenge_splits(cfg, test))
    table.to_csv(sub / "splits.csv", index=False)

    record = {
        "kind": kind,
        "label": label,
        "seed": cfg.train.seed,
        "objective": cfg.train.objective,
        "mode": cfg.aug.mode,
        "final_loss": float(result.log["loss"].iloc[-1]) if len(result.log) else None,
        "probe_converged": probe.converged,
        **{f"acc/{name}": acc for name, acc in split_accuracies(table).items()},
    }
    if cfg.train.objective == "supervised":
        predictions = predict_supervised(encoder, test.images)
        record["test_accuracy"] = float(np.mean(predictions == test.fg_classes))
    record.update(extra or {})
    append_record(run_dir, record)
    return record


def cmd_gen_data(args, cfg, workers, progress) -> int:
    out = Path(args.out or Path(cfg.output_dir) / "data")
    start_run(out, cfg, "gen-data")
    train, test = gen_dataset(cfg.synth, workers, progress)
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    append_record(
        out,
        {
            "kind": "dataset",
            "label": "gen-data",
            "train_hash": dataset_hash(train),
            "test_hash": dataset_hash(test),
            "paired_rate": float(np.mean(train.bg_classes == train.fg_classes % cfg.synth.n_bg_classes)),
        },
    )
    logger.info("Wrote %d train and %d test samples to %s", len(train), len(test), out)
    return EXIT_OK


def cmd_build_cache(args, cfg, workers, progress) -> int:
    if not args.data:
        raise ConfigError("build-cache needs --data pointing at a dataset split directory")
    samples = load_dataset(args.data, external=args.external)
    out = Path(args.out or Path(args.data) / "cache")
    manifest = build_cache(samples, out, workers=workers, progress=progress)
    logger.info("Cache %s holds %d samples (dataset %s)", out, manifest.n_samples, manifest.dataset_hash)
    return EXIT_OK


def cmd_train(args, cfg, workers, progress) -> int:
    train, test = _datasets(args, cfg, workers, progress)
    out = start_run(Path(args.out or Path(cfg.output_dir) / "train"), cfg, "train", [dataset_hash(train)])
    run_pipeline(cfg, train, test, out, cfg.train.objective, workers, progress, kind="train")
    return EXIT_OK


def _load_model(args, cfg, train) -> ProbedEncoder:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    encoder = load_encoder(args.checkpoint)
    if getattr(args, "probe", None):
        with np.load(args.probe) as data:
            probe = ProbeParams(data["weight"], data["bias"])
    else:
        probe = train_probe(encoder, train, cfg.probe)
    return ProbedEncoder(encoder, probe, cfg.probe.representation)


def cmd_probe(args, cfg, workers, progress) -> int:
    train, test = _datasets(args, cfg, workers, progress)
    out = start_run(Path(args.out or Path(cfg.output_dir) / "probe"), cfg, "probe", [dataset_hash(train)])
    model = _load_model(args, cfg, train)
    np.savez(out / "probe.npz", weight=model.probe.weight, bias=model.probe.bias)
    append_record(
        out,
        {
            "kind": "probe",
            "label": "probe",
            "converged": model.probe.converged,
            "iterations": model.probe.iterations,
            "train_loss": model.probe.loss,
            "test_accuracy": float(np.mean(model.predict(test.images) == test.fg_classes)),
        },
    )
    return EXIT_OK


def cmd_eval_splits(args, cfg, workers, progress) -> int:
    train, test = _datasets(args, cfg, workers, progress)
    out = start_run(Path(args.out or Path(cfg.output_dir) / "eval-splits"), cfg, "eval-splits", [dataset_hash(test)])
    model = _load_model(args, cfg, train)
    table = eval_splits(model, _challenge_splits(cfg, test))
    table.to_csv(out / "splits.csv", index=False)
    append_record(out, {"kind": "eval-splits", "label": "eval-splits", **{f"acc/{k}": v for k, v in split_accuracies(table).items()}})
    return EXIT_OK


def cmd_attack(args, cfg, workers, progress) -> int:
    train, test = _datasets(args, cfg, workers, progress)
    out = start_run(Path(args.out or Path(cfg.output_dir) / "attack"), cfg, "attack", [dataset_hash(test)])
    model = _load_model(args, cfg, train)
    n = min(cfg.eval.attack_samples, len(test))
    table = attack_table(model, test.images[:n].astype(np.float64), test.fg_classes[:n], cfg.eval.attacks)
    table.to_csv(out / "attack.csv", index=False)
    for row in table.to_dict(orient="records"):
        append_record(out, {"kind": "attack", "label": f"{row['kind']}@{row['epsilon_255']:g}/255", **row})
    return EXIT_OK


def cmd_ablation(args, cfg, workers, progress) -> int:
    train, test = _datasets(args, cfg, workers, progress)
    out = start_run(Path(args.out or Path(cfg.output_dir) / "ablation"), cfg, "ablation", [dataset_hash(train)])
    p_neg = cfg.aug.p_neg if cfg.aug.p_neg > 0 else 0.2
    for row, changes in ABLATION_ROWS.items():
        changes = dict(changes)
        if row == "e":
            changes["p_neg"] = p_neg
        row_cfg = _with_aug(cfg, **changes)
        run_pipeline(row_cfg, train, test, out, row, workers, progress, kind="ablation", extra={"row": row})
    return EXIT_OK


def cmd_mask_noise_sweep(args, cfg, workers, progress) -> int:
    if cfg.aug.mode == "none":
        logger.warning("Mask corruption has no effect with aug.mode=none")
    kinds = args.kinds.split(",") if args.kinds else list(MASK_NOISE_LEVELS)
    for kind in kinds:
        if kind not in MASK_NOISE_LEVELS:
            raise ConfigError(f"Unknown corruption kind {kind!r}, choose from {sorted(MASK_NOISE_LEVELS)}")
    train, test = _datasets(args, cfg, workers, progress)
    out = start_run(
        Path(args.out or Path(cfg.output_dir) / "mask-noise-sweep"), cfg, "mask-noise-sweep", [dataset_hash(train)]
    )
    for kind in kinds:
        levels = _floats(args.levels) if args.levels else MASK_NOISE_LEVELS[kind]
        for level in levels:
            row_cfg = _with_aug(cfg, corruption=_corruption(kind, level))
            extra = {"corruption": kind, "level": level}
            run_pipeline(row_cfg, train, test, out, f"{kind}-{level:g}", workers, progress, "mask-noise", extra)
    return EXIT_OK


def _strength_grid(cfg: ExperimentConfig, values: Sequence[float]) -> Iterable[Tuple[str, Dict]]:
    mode = cfg.aug.mode
    if mode == "none":
        raise ConfigError("strength-sweep needs aug.mode other than none")
    if mode == "bg_rm":
        return ((f"p_remove-{v:g}", {"p_remove": v}) for v in values)
    if mode == "bg_random":
        return ((f"p_pos-{v:g}", {"p_pos": v}) for v in values)
    return ((f"p_pos-{a:g}_p_neg-{b:g}", {"p_pos": a, "p_neg": b}) for a in values for b in values)


def cmd_strength_sweep(args, cfg, workers, progress) -> int:
    values = _floats(args.values) if args.values else STRENGTHS
    grid = list(_strength_grid(cfg, values))
    train, test = _datasets(args, cfg, workers, progress)
    out = start_run(
        Path(args.out or Path(cfg.output_dir) / "strength-sweep"), cfg, "strength-sweep", [dataset_hash(train)]
    )
    for label, changes in grid:
        run_pipeline(_with_aug(cfg, **changes), train, test, out, label, workers, progress, "strength", changes)
    return EXIT_OK


def read_records(runs: Path) -> List[Dict]:
    records = []
    for path in sorted(runs.rglob("metrics.jsonl")):
        with open(path) as source:
            for line in source:
                if line.strip():
                    record = json.loads(line)
                    record["run"] = str(path.parent.relative_to(runs))
                    records.append(record)
    return records


def summarize(records: List[Dict]) -> Dict[str, pd.DataFrame]:
    """
    One table per record kind: metrics averaged over seeds per label, with the
    per-seed spread for accuracy columns.
    """
    if not records:
        return {}
    frame = pd.DataFrame.from_records(records)
    tables = {"summary": frame}
    for kind, group in frame.groupby("kind", sort=True):
        numeric = group.select_dtypes(include=[np.number]).drop(columns=["seed"], errors="ignore")
        if numeric.empty:
            continue
        numeric = numeric.assign(label=group["label"]).dropna(axis=1, how="all")
        stats = numeric.groupby("label", sort=True).agg(["mean", "std", "count"])
        stats.columns = [f"{column}:{stat}" for column, stat in stats.columns]
        tables[kind] = stats.reset_index()

    if "strength" in tables:
        strength = frame[frame["kind"] == "strength"]
        swaps = strength[strength["mode"] == "bg_swaps"]
        if len(swaps):
            tables["strength-grid"] = _accuracy_pivot(swaps, ["p_pos"], "p_neg")
        single = strength[strength["mode"] != "bg_swaps"]
        if len(single):
            single = single.assign(strength=_column(single, "p_remove").fillna(_column(single, "p_pos")))
            tables["strength-curve"] = _accuracy_pivot(single, ["mode"], "strength")
    if "mask-noise" in tables:
        noise = frame[frame["kind"] == "mask-noise"]
        tables["mask-noise-grid"] = _accuracy_pivot(noise, ["corruption"], "level")
    return tables


def _column(frame: pd.DataFrame, name: str) -> pd.Series:
    return frame[name] if name in frame else pd.Series(np.nan, index=frame.index)


def _accuracy_pivot(frame: pd.DataFrame, index: List[str], column: str) -> pd.DataFrame:
    """Seed-averaged split accuracies, one row per (split, *index), one column per value of ``column``."""
    metrics = [c for c in frame.columns if c.startswith("acc/")]
    long = frame.melt(id_vars=index + [column], value_vars=metrics, var_name="split", value_name="accuracy")
    long["split"] = long["split"].str[len("acc/") :]
    table = long.pivot_table(index=["split"] + index, columns=column, values="accuracy", aggfunc="mean")
    table.columns = [f"{column}={value:g}" for value in table.columns]
    return table.reset_index()


def cmd_report(args, cfg, workers, progress) -> int:
    runs = Path(args.runs or cfg.output_dir)
    out = Path(args.out or runs)
    out.mkdir(parents=True, exist_ok=True)
    records = read_records(runs) if runs.exists() else []
    tables = summarize(records)
    if not tables:
        logger.warning("No run records found under %s", runs)
        pd.DataFrame().to_csv(out / "summary.csv", index=False)
        return EXIT_OK
    for name, table in tables.items():
        table.to_csv(out / f"{name}.csv", index=False)
        logger.info("Wrote %s (%d rows)", out / f"{name}.csv", len(table))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment configuration (JSON)")
    common.add_argument("--seed", type=int, help="overrides the configured seeds")
    common.add_argument("--out", help="run directory")
    common.add_argument("--workers", type=int, help="worker threads (default: $BGAUG_WORKERS or 1)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--quiet", action="store_true", help="hide progress bars")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset directory written by gen-data (default: generate from the config)")
    data.add_argument("--cache", help="cache directory of the training split")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--checkpoint", help="checkpoint directory written by train")
    model.add_argument("--probe", help="probe.npz written by probe (default: fit a new probe)")

    parser = argparse.ArgumentParser(prog="bgaug", description="Background augmentation experiments.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-cache", parents=[common], help="cache masks and tiled backgrounds")
    p.add_argument("--data", help="dataset split directory")
    p.add_argument("--external", action="store_true", help="accept a user-supplied dataset")
    p.set_defaults(func=cmd_build_cache)

    p = sub.add_parser("train", parents=[common, data], help="train an encoder, probe it and evaluate the splits")
    p.add_argument("--objective", choices=["contrastive", "supervised"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", parents=[common, data], help="fit a linear probe on frozen features")
    p.add_argument("--checkpoint", help="checkpoint directory written by train")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval-splits", parents=[common, data, model], help="accuracy on the challenge splits")
    p.set_defaults(func=cmd_eval_splits)

    p = sub.add_parser("attack", parents=[common, data, model], help="FGSM and PGD robust accuracy")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("ablation", parents=[common, data], help="background-swap ablation rows a-e")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("mask-noise-sweep", parents=[common, data], help="train with corrupted masks")
    p.add_argument("--kinds", help="comma separated subset of rotation,shear,translation,hflip")
    p.add_argument("--levels", help="comma separated corruption levels")
    p.set_defaults(func=cmd_mask_noise_sweep)

    p = sub.add_parser("strength-sweep", parents=[common, data], help="sweep augmentation probabilities")
    p.add_argument("--values", help="comma separated probabilities")
    p.set_defaults(func=cmd_strength_sweep)

    p = sub.add_parser("report", parents=[common], help="aggregate run records into CSV tables")
    p.add_argument("--runs", help="directory searched for metrics.jsonl files")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        workers = resolve_workers(args.workers)
        return args.func(args, cfg, workers, not args.quiet)
    except ConfigError as error:
        logger.error("Configuration error: %s", error)
        return EXIT_CONFIG
    except NumericalError as error:
        logger.error("Numerical failure (%s): %s", error.where, error)
        return EXIT_NUMERIC
    except IntegrityError as error:
        logger.error("Integrity failure: %s", error)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
