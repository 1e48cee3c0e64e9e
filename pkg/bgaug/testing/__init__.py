import pathlib

import numpy as np

from bgaug.synthgen import SampleSet, SynthConfig, gen_sample

loc = str(pathlib.Path(__file__).parent)


def tiny_synth(**kwargs) -> SynthConfig:
    """A dataset config small enough for unit tests."""
    values = dict(n_fg_classes=4, n_bg_classes=4, image_size=16, correlation=0.95, n_train=24, n_test=16, seed=3)
    values.update(kwargs)
    return SynthConfig(**values)


def make_set(fg_classes, bg_classes, cfg=None, seed=0, split="test") -> SampleSet:
    """Render one sample per (fg, bg) label pair."""
    cfg = cfg or tiny_synth()
    samples = [
        gen_sample(np.random.default_rng([seed, i]), fg, bg, cfg.image_size, sample_id=i)
        for i, (fg, bg) in enumerate(zip(fg_classes, bg_classes))
    ]
    return SampleSet.from_samples(samples, cfg, split)
