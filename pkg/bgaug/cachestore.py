"""
Offline cache of per-sample masks and tiled backgrounds.

Layout of a cache directory:

* ``cache_manifest.json`` - version, dataset hash and one record per sample
* ``masks.bin`` - run-length encoded masks, little-endian uint32 run lengths
  starting with a run of zeros
* ``tiled.bin`` - tiled backgrounds as little-endian float32, (H, W, C) per sample
"""
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from .errors import IntegrityError
from .imgcore import tiled_background
from .synthgen import SampleSet

logger = logging.getLogger(__name__)

CACHE_VERSION = 1
MANIFEST_NAME = "cache_manifest.json"
MASKS_NAME = "masks.bin"
TILED_NAME = "tiled.bin"


def rle_encode(mask: np.ndarray) -> np.ndarray:
    """
    Run lengths of a binary mask in row-major order, alternating zeros and ones and
    starting with zeros (possibly an empty run).
    """
    flat = np.asarray(mask, dtype=np.uint8).ravel()
    if flat.size == 0:
        return np.zeros(1, dtype=np.uint32)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat[0] == 1:
        runs = np.concatenate([[0], runs])
    return runs.astype(np.uint32)


def rle_decode(runs: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    total = int(np.prod(shape))
    if runs.sum() != total:
        raise IntegrityError(f"Run lengths cover {int(runs.sum())} pixels, expected {total}")
    values = np.arange(len(runs)) % 2
    return np.repeat(values, runs).astype(np.uint8).reshape(shape)


def dataset_hash(samples: SampleSet) -> str:
    """
    Order-sensitive 64-bit digest of every sample's image and mask bytes.
    """
    digest = hashlib.blake2b(digest_size=8)
    for i in range(len(samples)):
        image = np.ascontiguousarray(samples.images[i], dtype="<f4")
        mask = np.ascontiguousarray(samples.masks[i], dtype=np.uint8)
        digest.update(np.array([i, *image.shape], dtype="<i8").tobytes())
        digest.update(image.tobytes())
        digest.update(mask.tobytes())
    return digest.hexdigest()


@dataclass
class CacheManifest:
    version: int
    dataset_hash: str
    n_samples: int
    records: List[Dict] = field(default_factory=list)
    directory: Optional[Path] = field(default=None, compare=False)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data.pop("directory")
        return data

    @classmethod
    def read(cls, directory: Union[str, Path]) -> "CacheManifest":
        directory = Path(directory)
        path = directory / MANIFEST_NAME
        if not path.exists():
            raise IntegrityError(f"No {MANIFEST_NAME} in {directory}")
        with open(path) as source:
            data = json.load(source)
        manifest = cls(directory=directory, **data)
        manifest.check()
        return manifest

    def check(self):
        if self.version != CACHE_VERSION:
            raise IntegrityError(f"Unsupported cache version {self.version}")
        if len(self.records) != self.n_samples:
            raise IntegrityError(f"Manifest lists {len(self.records)} records for {self.n_samples} samples")
        for key in ("mask", "tiled"):
            end = 0
            for record in self.records:
                if record[f"{key}_offset"] != end:
                    raise IntegrityError(f"Record {record['id']} has a non-contiguous {key} offset")
                end += record[f"{key}_length"]


def _cache_record(image: np.ndarray, mask: np.ndarray) -> Tuple[bytes, bytes]:
    tiled = tiled_background(image, mask)
    return rle_encode(mask).astype("<u4").tobytes(), np.ascontiguousarray(tiled, dtype="<f4").tobytes()


def _cleanup(paths):
    for path in paths:
        try:
            os.remove(path)
        except FileNotFoundError:
            pass


def build_cache(
    samples: SampleSet, out_dir: Union[str, Path], workers: int = 1, progress: bool = False
) -> CacheManifest:
    """
    Compute every tiled background and write the cache.

    Rebuilding over a valid cache of the same dataset is a no-op; a cache built from
    different data is never overwritten. Per-sample work runs on ``workers`` threads
    while a single writer appends records in id order, so the bytes do not depend on
    the worker count.
    """
    out_dir = Path(out_dir)
    digest = dataset_hash(samples)
    if (out_dir / MANIFEST_NAME).exists():
        existing = CacheManifest.read(out_dir)
        if existing.dataset_hash != digest:
            raise IntegrityError(
                f"{out_dir} holds a cache of dataset {existing.dataset_hash}, refusing to overwrite it with {digest}"
            )
        logger.info("Cache in %s is up to date", out_dir)
        return existing

    out_dir.mkdir(parents=True, exist_ok=True)
    h, w = samples.images.shape[1:3]
    temporary = [out_dir / f"{MASKS_NAME}.tmp", out_dir / f"{TILED_NAME}.tmp", out_dir / f"{MANIFEST_NAME}.tmp"]
    records = []
    try:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool, open(temporary[0], "wb") as masks_out, open(
            temporary[1], "wb"
        ) as tiled_out:
            encoded = pool.map(lambda i: _cache_record(samples.images[i], samples.masks[i]), range(len(samples)))
            mask_offset = tiled_offset = 0
            for i, (mask_bytes, tiled_bytes) in enumerate(
                tqdm(encoded, total=len(samples), desc="Caching: ", ncols=80, disable=not progress)
            ):
                masks_out.write(mask_bytes)
                tiled_out.write(tiled_bytes)
                records.append(
                    {
                        "id": i,
                        "h": int(h),
                        "w": int(w),
                        "mask_offset": mask_offset,
                        "mask_length": len(mask_bytes),
                        "tiled_offset": tiled_offset,
                        "tiled_length": len(tiled_bytes),
                    }
                )
                mask_offset += len(mask_bytes)
                tiled_offset += len(tiled_bytes)

        manifest = CacheManifest(CACHE_VERSION, digest, len(samples), records, out_dir)
        with open(temporary[2], "w") as output:
            json.dump(manifest.to_dict(), output, indent=1, sort_keys=True)
        os.replace(temporary[0], out_dir / MASKS_NAME)
        os.replace(temporary[1], out_dir / TILED_NAME)
        os.replace(temporary[2], out_dir / MANIFEST_NAME)
    except OSError:
        _cleanup(temporary)
        raise
    logger.info("Cached %d samples in %s", len(samples), out_dir)
    return manifest


class CacheReader:
    """
    Read-only, memory-mapped access to a built cache. Safe to share between threads.
    """

    def __init__(self, manifest: Union[CacheManifest, str, Path]):
        if not isinstance(manifest, CacheManifest):
            manifest = CacheManifest.read(manifest)
        self.manifest = manifest
        self._masks = self._map(MASKS_NAME, "mask")
        self._tiled = self._map(TILED_NAME, "tiled")

    def _map(self, name: str, key: str) -> np.ndarray:
        path = self.manifest.directory / name
        if not path.exists():
            raise IntegrityError(f"Missing {path}")
        size = path.stat().st_size
        needed = sum(r[f"{key}_length"] for r in self.manifest.records)
        if size < needed:
            raise IntegrityError(f"{path} is truncated: {size} bytes, the manifest needs {needed}")
        if size == 0:
            return np.empty(0, dtype=np.uint8)
        return np.memmap(path, dtype=np.uint8, mode="r")

    def __len__(self):
        return self.manifest.n_samples

    def load(self, sample_id: int) -> Tuple[np.ndarray, np.ndarray]:
        if not 0 <= sample_id < self.manifest.n_samples:
            raise IntegrityError(f"Sample id {sample_id} is outside the cache (n={self.manifest.n_samples})")
        record = self.manifest.records[sample_id]
        h, w = record["h"], record["w"]

        mask_bytes = self._masks[record["mask_offset"] : record["mask_offset"] + record["mask_length"]]
        if len(mask_bytes) != record["mask_length"] or record["mask_length"] % 4:
            raise IntegrityError(f"Corrupt mask record for sample {sample_id}")
        try:
            mask = rle_decode(np.frombuffer(mask_bytes, dtype="<u4"), (h, w))
        except IntegrityError as error:
            raise IntegrityError(f"Corrupt mask record for sample {sample_id}: {error}") from error

        tiled_bytes = self._tiled[record["tiled_offset"] : record["tiled_offset"] + record["tiled_length"]]
        n_values = record["tiled_length"] // 4
        if len(tiled_bytes) != record["tiled_length"] or record["tiled_length"] % 4 or n_values % (h * w):
            raise IntegrityError(f"Corrupt tiled-background record for sample {sample_id}")
        tiled = np.frombuffer(tiled_bytes, dtype="<f4").reshape(h, w, n_values // (h * w)).astype(np.float32)
        return mask, tiled


def load_cached(manifest: Union[CacheManifest, str, Path], sample_id: int) -> Tuple[np.ndarray, np.ndarray]:
    """The decoded mask and tiled background of one sample."""
    return CacheReader(manifest).load(sample_id)


def attach_cache(samples: SampleSet, cache_dir: Union[str, Path]) -> SampleSet:
    """
    A copy of ``samples`` whose tiled backgrounds come from the cache built for it.
    """
    reader = CacheReader(cache_dir)
    digest = dataset_hash(samples)
    if reader.manifest.dataset_hash != digest:
        raise IntegrityError(f"Cache {cache_dir} was built for dataset {reader.manifest.dataset_hash}, not {digest}")
    tiled = np.stack([reader.load(i)[1] for i in range(len(samples))]) if len(samples) else samples.tiled.copy()
    return SampleSet(
        images=samples.images,
        masks=samples.masks,
        tiled=tiled,
        fg_classes=samples.fg_classes,
        bg_classes=samples.bg_classes,
        config=samples.config,
        split=samples.split,
    )
