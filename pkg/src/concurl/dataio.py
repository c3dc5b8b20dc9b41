"""Feature-vector datasets, synthetic blobs, view augmentation and batching."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

# Named stream ids; combined with the user seed through SeedSequence so that
# changing one consumer never shifts the draws of another.
STREAM_SHUFFLE = 1
STREAM_AUGMENT = 2
STREAM_INIT = 3
STREAM_NOISE = 4
STREAM_ENSEMBLE = 5
STREAM_KMEANS = 6
STREAM_BANK = 7


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DatasetError(f"features must be a non-empty N x F matrix, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            bad = int(np.argwhere(~np.isfinite(x))[0, 0])
            raise DatasetError(f"non-finite feature value in row {bad}")
        x.setflags(write=False)
        object.__setattr__(self, "features", x)

        ids = np.arange(x.shape[0]) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != (x.shape[0],) or not np.array_equal(np.sort(ids), np.arange(x.shape[0])):
            raise DatasetError("ids must be a permutation of 0..N-1")
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)

        if self.labels is not None:
            y = np.asarray(self.labels)
            if y.shape != (x.shape[0],):
                raise DatasetError(f"labels must have length {x.shape[0]}, got {y.shape}")
            if not np.issubdtype(y.dtype, np.integer):
                if not np.all(np.equal(np.mod(y, 1), 0)):
                    raise DatasetError("labels must be integers")
            y = y.astype(np.int64)
            if y.min() < 0:
                raise DatasetError("labels must be non-negative")
            k_true = int(y.max()) + 1
            missing = np.setdiff1d(np.arange(k_true), y)
            if missing.size:
                raise DatasetError(f"class(es) {missing.tolist()} have no members")
            y.setflags(write=False)
            object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> Optional[int]:
        return None if self.labels is None else int(self.labels.max()) + 1

    def fingerprint(self) -> dict:
        h = hashlib.sha256(self.features.tobytes())
        if self.labels is not None:
            h.update(self.labels.tobytes())
        return {"rows": self.n, "dim": self.dim, "sha256": h.hexdigest()}


@dataclass(frozen=True)
class Batch:
    indices: np.ndarray
    view1: np.ndarray
    view2: np.ndarray

    def __post_init__(self):
        b = len(self.indices)
        if b < 2:
            raise DatasetError("a batch needs at least 2 rows")
        if self.view1.shape != self.view2.shape or self.view1.shape[0] != b:
            raise DatasetError("views must both be B x F with B = len(indices)")


@dataclass(frozen=True)
class AugmentConfig:
    noise_sigma: float = 0.1
    dropout_p: float = 0.1
    scale_jitter: float = 0.1

    def __post_init__(self):
        for name in ("noise_sigma", "dropout_p", "scale_jitter"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite")
        if self.noise_sigma < 0 or self.scale_jitter < 0:
            raise ValueError("noise_sigma and scale_jitter must be >= 0")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")


def make_gaussian_blobs(k: int, n_per_cluster: int, dim: int, spread: float = 0.5,
                        separation: float = 8.0, seed: int = 0, max_tries: int = 1000) -> Dataset:
    """Isotropic Gaussian clusters whose centers are pairwise >= ``separation`` apart.

    Centers are drawn from N(0, s^2 I) with s chosen so that typical pairwise
    distances are 1.5 * separation, then redrawn until the minimum distance
    constraint holds.
    """
    if k < 2 or n_per_cluster < 2 or dim < 2:
        raise ValueError("need k >= 2, n_per_cluster >= 2, dim >= 2")
    if not (spread > 0 and separation > 0):
        raise ValueError("spread and separation must be positive")
    rng = np.random.default_rng(seed)
    s = 1.5 * separation / math.sqrt(2 * dim)
    for _ in range(max_tries):
        centers = rng.normal(scale=s, size=(k, dim))
        diff = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        if dist[np.triu_indices(k, 1)].min() >= separation:
            break
    else:
        raise ValueError(f"could not place {k} centers {separation} apart in {dim}-D after {max_tries} tries")
    labels = np.repeat(np.arange(k), n_per_cluster)
    x = centers[labels] + rng.normal(scale=spread, size=(k * n_per_cluster, dim))
    return Dataset(x, labels)


def parse_synth_spec(spec: str) -> Dataset:
    """``blobs:k=3,n=50,dim=2[,spread=..,separation=..,seed=..]`` -> Dataset."""
    kind, _, rest = spec.partition(":")
    if kind != "blobs":
        raise ValueError(f"unknown synthetic dataset kind {kind!r}")
    kw = {}
    for item in filter(None, rest.split(",")):
        key, _, val = item.partition("=")
        kw[key.strip()] = val.strip()
    known = {"k", "n", "dim", "spread", "separation", "seed"}
    unknown = set(kw) - known
    if unknown:
        raise ValueError(f"unknown synth keys: {sorted(unknown)}")
    return make_gaussian_blobs(
        k=int(kw.get("k", 3)),
        n_per_cluster=int(kw.get("n", 50)),
        dim=int(kw.get("dim", 2)),
        spread=float(kw.get("spread", 0.5)),
        separation=float(kw.get("separation", 8.0)),
        seed=int(kw.get("seed", 0)),
    )


def load_feature_dataset(path, has_labels: Optional[bool] = None) -> Dataset:
    """Read the ``f0,...,f{F-1}[,label]`` CSV format.

    When ``has_labels`` is None the label column is detected from the header.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if has_labels is None:
        has_labels = bool(header) and header[-1] == "label"
    n_feat = len(header) - (1 if has_labels else 0)
    if n_feat < 1:
        raise DatasetError(f"{path}: header declares no feature columns")
    expected = [f"f{i}" for i in range(n_feat)] + (["label"] if has_labels else [])
    if header != expected:
        raise DatasetError(f"{path}: header {header} does not match {expected}")
    body = rows[1:]
    if not body:
        raise DatasetError(f"{path}: no data rows")

    x = np.empty((len(body), n_feat))
    y = np.empty(len(body), dtype=np.int64) if has_labels else None
    for r, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise DatasetError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        try:
            vals = [float(c) for c in row[:n_feat]]
        except ValueError:
            raise DatasetError(f"{path}: row {r} has a non-numeric cell") from None
        if not all(math.isfinite(v) for v in vals):
            raise DatasetError(f"{path}: row {r} has a non-finite value")
        x[r - 1] = vals
        if has_labels:
            try:
                y[r - 1] = int(row[-1])
            except ValueError:
                raise DatasetError(f"{path}: row {r} has a non-integer label") from None
    return Dataset(x, y)


def save_feature_dataset(ds: Dataset, path) -> None:
    # repr() of a Python float round-trips exactly.
    header = [f"f{i}" for i in range(ds.dim)]
    if ds.labels is not None:
        header.append("label")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.features[i]]
            if ds.labels is not None:
                row.append(str(int(ds.labels[i])))
            w.writerow(row)


def augment_view(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative jitter, additive Gaussian noise, then coordinate dropout.

    Works row-wise on a batch as well as on a single vector. Draws are taken in
    a fixed order (jitter, noise, dropout) so identical rng states reproduce.
    """
    x = np.asarray(x, dtype=np.float64)
    y = x
    if cfg.scale_jitter > 0:
        y = y * rng.uniform(1 - cfg.scale_jitter, 1 + cfg.scale_jitter, size=x.shape)
    if cfg.noise_sigma > 0:
        y = y + rng.normal(scale=cfg.noise_sigma, size=x.shape)
    if cfg.dropout_p > 0:
        y = np.where(rng.random(size=x.shape) < cfg.dropout_p, 0.0, y)
    return np.array(y, copy=True)


def batch_iterator(ds: Dataset, batch_size: int, cfg: AugmentConfig, seed: int) -> Iterator[Batch]:
    """One epoch: a seeded shuffle cut into floor(N / batch_size) full batches.

    The short tail is dropped so every batch has the same B.
    """
    if not 2 <= batch_size <= ds.n:
        raise ValueError(f"batch_size must be in [2, {ds.n}], got {batch_size}")
    order = stream(seed, STREAM_SHUFFLE).permutation(ds.ids)
    aug_rng = stream(seed, STREAM_AUGMENT)
    for start in range(0, ds.n - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        rows = ds.features[idx]
        v1 = augment_view(rows, cfg, aug_rng)
        v2 = augment_view(rows, cfg, aug_rng)
        yield Batch(idx, v1, v2)


def standardize(ds: Dataset) -> Dataset:
    """Zero-mean, unit-variance columns (constant columns left centered)."""
    mu = ds.features.mean(0)
    sd = ds.features.std(0)
    sd[sd == 0] = 1.0
    return Dataset((ds.features - mu) / sd, ds.labels, ds.ids)
