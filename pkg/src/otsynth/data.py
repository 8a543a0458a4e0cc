"""Labeled feature sets: synthetic generation, K-shot sampling, file formats.

Features are stored as float32 (the on-disk precision); training code
upcasts to float64 at the point of use. The binary format is fixed-layout
little-endian so a round trip is exact to the bit:

    magic "OTFS" | u32 version=1 | u32 count | u32 dim |
    count records of (u32 class_id, dim float32)

A sibling JSON manifest (``<path>.json``) carries the class roster, the
dimension, and optional provenance (seed, spec hash).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import (DimensionMismatch, FormatError, NotEnoughSamples)
from .rng import RngState

MAGIC = b"OTFS"
VERSION = 1


@dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    split: str  # "base" or "novel"

    def __post_init__(self):
        if self.split not in ("base", "novel"):
            raise ValueError(f"split must be 'base' or 'novel', got {self.split!r}")


@dataclass
class LabeledFeatureSet:
    """Feature vectors with integer class labels and a base/novel roster."""

    dim: int
    features: np.ndarray            # (n, dim) float32
    labels: np.ndarray              # (n,) int64 class ids
    roster: tuple                   # ClassInfo, sorted by id
    provenance: dict | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32).reshape(-1, self.dim)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise DimensionMismatch("feature/label counts differ")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain NaN or Inf")
        self.roster = tuple(sorted(self.roster, key=lambda ci: ci.id))
        ids = [ci.id for ci in self.roster]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate class ids in roster")
        base = {ci.id for ci in self.roster if ci.split == "base"}
        novel = {ci.id for ci in self.roster if ci.split == "novel"}
        if base & novel:
            raise ValueError("base and novel class ids must be disjoint")
        known = base | novel
        unknown = set(np.unique(self.labels)) - known
        if unknown:
            raise ValueError(f"labels without roster entry: {sorted(unknown)}")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def class_ids(self) -> tuple:
        return tuple(ci.id for ci in self.roster)

    @property
    def base_ids(self) -> tuple:
        return tuple(ci.id for ci in self.roster if ci.split == "base")

    @property
    def novel_ids(self) -> tuple:
        return tuple(ci.id for ci in self.roster if ci.split == "novel")

    def features64(self) -> np.ndarray:
        return self.features.astype(np.float64)

    def indices_of(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)

    def restricted_to(self, class_ids) -> "LabeledFeatureSet":
        """Samples of the given classes only; roster is kept in full."""
        keep = np.isin(self.labels, np.asarray(list(class_ids)))
        return LabeledFeatureSet(self.dim, self.features[keep],
                                 self.labels[keep], self.roster,
                                 self.provenance)


@dataclass
class DatasetSpec:
    """Recipe for a synthetic base/novel feature dataset.

    Class means are placed uniformly at random on a sphere of radius
    ``mean_radius``; per-class clouds are Gaussian with per-dimension
    deviation ``cov_scale`` (optionally ramped by ``anisotropy`` across
    dimensions). Separability is governed by cov_scale / mean_radius.
    """

    dim: int = 32
    base_class_count: int = 15
    novel_class_count: int = 5
    mean_radius: float = 1.0
    cov_scale: float = 0.09
    anisotropy: float | None = None
    train_per_class: int = 200
    pool_per_class: int = 30
    test_per_class: int = 100
    seed: int = 0

    def __post_init__(self):
        if min(self.dim, self.base_class_count, self.novel_class_count,
               self.train_per_class, self.pool_per_class, self.test_per_class) < 1:
            raise ValueError("all counts must be >= 1")
        if self.cov_scale <= 0 or self.mean_radius <= 0:
            raise ValueError("cov_scale and mean_radius must be > 0")

    def sha256(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


def _class_scales(spec: DatasetSpec) -> np.ndarray:
    if spec.anisotropy is None or spec.anisotropy == 1.0:
        return np.full(spec.dim, spec.cov_scale)
    ramp = np.geomspace(1.0, spec.anisotropy, spec.dim)
    return spec.cov_scale * ramp


def make_synthetic_dataset(spec: DatasetSpec, rng: RngState | None = None):
    """Generate (base_train, kshot_pool, test) feature sets.

    base_train holds abundant base-class samples only; kshot_pool holds
    held-out samples of every class; test is disjoint from both.
    """
    if rng is None:
        rng = RngState(spec.seed)
    n_classes = spec.base_class_count + spec.novel_class_count
    roster = tuple(
        ClassInfo(i, f"base{i:02d}", "base") if i < spec.base_class_count
        else ClassInfo(i, f"novel{i - spec.base_class_count:02d}", "novel")
        for i in range(n_classes))

    mean_rng = rng.split(0)
    dirs = mean_rng.standard_normal((n_classes, spec.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = spec.mean_radius * dirs
    scales = _class_scales(spec)

    def draw(class_id: int, count: int, stream: RngState) -> np.ndarray:
        eps = stream.standard_normal((count, spec.dim))
        return (means[class_id] + eps * scales).astype(np.float32)

    prov = {"seed": spec.seed, "spec_sha256": spec.sha256()}

    def build(split_tag: int, class_ids, counts) -> LabeledFeatureSet:
        feats, labels = [], []
        for cid in class_ids:
            n = counts(cid)
            feats.append(draw(cid, n, rng.split(split_tag, cid)))
            labels.append(np.full(n, cid, dtype=np.int64))
        return LabeledFeatureSet(spec.dim, np.vstack(feats),
                                 np.concatenate(labels), roster, dict(prov))

    base_ids = tuple(range(spec.base_class_count))
    all_ids = tuple(range(n_classes))
    base_train = build(1, base_ids, lambda cid: spec.train_per_class)
    kshot_pool = build(2, all_ids, lambda cid: spec.pool_per_class)
    test = build(3, all_ids, lambda cid: spec.test_per_class)
    return base_train, kshot_pool, test


def kshot_sample(pool: LabeledFeatureSet, shots: int,
                 rng: RngState) -> LabeledFeatureSet:
    """Exactly ``shots`` samples per class, drawn without replacement."""
    if shots < 1:
        raise ValueError("shots must be >= 1")
    feats, labels = [], []
    for ci in pool.roster:
        idx = pool.indices_of(ci.id)
        if idx.size < shots:
            raise NotEnoughSamples(
                f"class {ci.id} has {idx.size} samples, wanted {shots}")
        chosen = np.sort(rng.choice(idx.size, shots, replace=False))
        feats.append(pool.features[idx[chosen]])
        labels.append(np.full(shots, ci.id, dtype=np.int64))
    return LabeledFeatureSet(pool.dim, np.vstack(feats),
                             np.concatenate(labels), pool.roster,
                             pool.provenance)


# --- file formats ------------------------------------------------------------


def _atomic_write(path: str, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)),
                               suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def manifest_path(path: str) -> str:
    return str(path) + ".json"


def write_features(path, fs: LabeledFeatureSet) -> None:
    """Write the binary feature file and its JSON manifest atomically."""
    path = str(path)
    n, d = fs.features.shape
    record = np.dtype([("label", "<u4"), ("feat", "<f4", (d,))])
    body = np.empty(n, dtype=record)
    body["label"] = fs.labels.astype(np.uint32)
    body["feat"] = fs.features
    blob = MAGIC + struct.pack("<III", VERSION, n, d) + body.tobytes()
    _atomic_write(path, blob)

    manifest = {
        "format": "otsynth-features",
        "version": VERSION,
        "dim": d,
        "count": n,
        "roster": [{"id": ci.id, "name": ci.name, "split": ci.split}
                   for ci in fs.roster],
        "provenance": fs.provenance,
    }
    _atomic_write(manifest_path(path),
                  (json.dumps(manifest, indent=1) + "\n").encode())


def read_features(path) -> LabeledFeatureSet:
    """Read a feature file plus manifest; bit-exact inverse of write_features."""
    path = str(path)
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise FormatError("file too short for header", offset=len(blob))
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", offset=0)
    version, n, d = struct.unpack("<III", blob[4:16])
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    record = np.dtype([("label", "<u4"), ("feat", "<f4", (d,))])
    expected = 16 + n * record.itemsize
    if len(blob) < expected:
        raise FormatError(f"truncated: expected {expected} bytes", offset=len(blob))
    if len(blob) > expected:
        raise FormatError("trailing bytes after last record", offset=expected)
    body = np.frombuffer(blob, dtype=record, count=n, offset=16)

    mpath = manifest_path(path)
    if not os.path.exists(mpath):
        raise FormatError(f"missing manifest {mpath}")
    with open(mpath) as f:
        manifest = json.load(f)
    if manifest.get("format") != "otsynth-features":
        raise FormatError(f"{mpath} is not a feature manifest")
    if manifest["dim"] != d:
        raise DimensionMismatch(
            f"manifest dim {manifest['dim']} vs file dim {d}")
    if manifest["count"] != n:
        raise FormatError(f"manifest count {manifest['count']} vs file count {n}")
    roster = tuple(ClassInfo(r["id"], r["name"], r["split"])
                   for r in manifest["roster"])
    return LabeledFeatureSet(d, body["feat"].copy(),
                             body["label"].astype(np.int64), roster,
                             manifest.get("provenance"))
