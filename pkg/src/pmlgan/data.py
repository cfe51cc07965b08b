"""Multi-label datasets: file formats, rare-label filtering, PML corruption, scaling, splits.

File formats
------------
``dense_csv``
    First line ``N d L`` (whitespace or commas). Then N lines, each with d
    feature values followed by L label flags in {0, 1}, comma separated.
    Floats are written with ``repr`` so a write/read round trip is exact.
``sparse_svm``
    One instance per line: ``l1,l2,... idx:val idx:val ...``. Label and
    feature indices are both 1-based; absent features are 0.
    ``n_features`` and ``n_labels`` are inferred unless given.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CACHE_ENV = "PMLGAN_DATA_DIR"


class DatasetFormatError(ValueError):
    pass


@dataclass
class MultiLabelDataset:
    X: np.ndarray
    Y: np.ndarray                      # candidate labels
    Y_true: np.ndarray | None = None
    label_names: list[str] = field(default_factory=list)
    scaler: tuple[np.ndarray, np.ndarray] | None = None  # per-feature (min, max)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.ndim != 2 or self.Y.ndim != 2 or self.X.shape[0] != self.Y.shape[0]:
            raise ValueError(f"inconsistent shapes X{self.X.shape} Y{self.Y.shape}")
        if self.Y_true is not None:
            self.Y_true = np.asarray(self.Y_true, dtype=np.float64)
            if self.Y_true.shape != self.Y.shape:
                raise ValueError("Y_true and Y differ in shape")
            if np.any(self.Y_true > self.Y):
                raise ValueError("candidate sets must contain every true label")
        if not self.label_names:
            self.label_names = [f"label{j}" for j in range(self.Y.shape[1])]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def n_labels(self) -> int:
        return self.Y.shape[1]

    def avg_candidates(self) -> float:
        return float(self.Y.sum(axis=1).mean()) if self.n else 0.0

    def subset(self, idx) -> "MultiLabelDataset":
        idx = np.asarray(idx, dtype=int)
        return replace(self, X=self.X[idx], Y=self.Y[idx],
                       Y_true=None if self.Y_true is None else self.Y_true[idx],
                       label_names=list(self.label_names))


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "pmlgan"))


# ---------------------------------------------------------------------------
# io

def _split_fields(line: str) -> list[str]:
    return line.replace(",", " ").split()


def _load_dense(lines, path):
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    try:
        n, d, L = (int(v) for v in _split_fields(lines[0]))
    except ValueError:
        raise DatasetFormatError(f"{path}:1: header must be 'N d L'") from None
    body = [(i, ln) for i, ln in enumerate(lines[1:], start=2) if ln.strip()]
    if len(body) != n:
        raise DatasetFormatError(f"{path}: header says {n} rows, found {len(body)}")
    X = np.zeros((n, d))
    Y = np.zeros((n, L))
    for r, (lineno, ln) in enumerate(body):
        vals = _split_fields(ln)
        if len(vals) != d + L:
            raise DatasetFormatError(f"{path}:{lineno}: expected {d + L} fields, got {len(vals)}")
        try:
            X[r] = [float(v) for v in vals[:d]]
            flags = [int(v) for v in vals[d:]]
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: unparsable value") from None
        if any(f not in (0, 1) for f in flags):
            raise DatasetFormatError(f"{path}:{lineno}: label flags must be 0 or 1")
        if not any(flags):
            raise DatasetFormatError(f"{path}:{lineno}: instance has no candidate label")
        Y[r] = flags
    return X, Y


def _load_sparse(lines, path, n_features, n_labels):
    rows = []
    for lineno, ln in enumerate(lines, start=1):
        if not ln.strip():
            continue
        parts = ln.split()
        if ":" in parts[0]:
            raise DatasetFormatError(f"{path}:{lineno}: instance has no candidate label")
        try:
            labels = [int(v) for v in parts[0].split(",") if v != ""]
            feats = []
            for tok in parts[1:]:
                idx, val = tok.split(":")
                feats.append((int(idx), float(val)))
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: malformed line") from None
        if not labels:
            raise DatasetFormatError(f"{path}:{lineno}: instance has no candidate label")
        if any(i < 1 for i, _ in feats) or any(j < 1 for j in labels):
            raise DatasetFormatError(f"{path}:{lineno}: index out of range")
        rows.append((lineno, labels, feats))
    d = n_features or max((i for _, _, fs in rows for i, _ in fs), default=0)
    L = n_labels or max((j for _, ls, _ in rows for j in ls), default=0)
    X = np.zeros((len(rows), d))
    Y = np.zeros((len(rows), L))
    for r, (lineno, labels, feats) in enumerate(rows):
        for i, v in feats:
            if i > d:
                raise DatasetFormatError(f"{path}:{lineno}: feature index {i} exceeds d={d}")
            X[r, i - 1] = v
        for j in labels:
            if j > L:
                raise DatasetFormatError(f"{path}:{lineno}: label {j} exceeds L={L}")
            Y[r, j - 1] = 1.0
    return X, Y


def load_dataset(path, format: str = "dense_csv", n_features: int | None = None,
                 n_labels: int | None = None) -> MultiLabelDataset:
    path = Path(path)
    lines = path.read_text().splitlines()
    if format == "dense_csv":
        X, Y = _load_dense(lines, path)
    elif format == "sparse_svm":
        X, Y = _load_sparse(lines, path, n_features, n_labels)
    else:
        raise ValueError(f"unknown format {format!r}")
    return MultiLabelDataset(X, Y)


def save_dense_csv(ds: MultiLabelDataset, path, labels: np.ndarray | None = None) -> None:
    Y = ds.Y if labels is None else labels
    out = [f"{ds.n} {ds.n_features} {ds.n_labels}"]
    for x, y in zip(ds.X, Y):
        out.append(",".join([repr(float(v)) for v in x] + [str(int(v)) for v in y]))
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# preprocessing

def filter_labels(ds: MultiLabelDataset, max_classes: int = 15) -> MultiLabelDataset:
    """Keep the ``max_classes`` most frequent labels; drop instances left without candidates."""
    if ds.n_labels < 1:
        raise ValueError("dataset has no labels")
    freq = ds.Y.sum(axis=0)
    # stable sort on -freq keeps lower indices first among ties
    keep = np.sort(np.argsort(-freq, kind="stable")[:max_classes])
    Y = ds.Y[:, keep]
    rows = np.flatnonzero(Y.sum(axis=1) > 0)
    if rows.size == 0:
        raise ValueError("label filtering removed every instance")
    return MultiLabelDataset(
        X=ds.X[rows], Y=Y[rows],
        Y_true=None if ds.Y_true is None else ds.Y_true[rows][:, keep],
        label_names=[ds.label_names[j] for j in keep],
        scaler=ds.scaler,
    )


def inject_noise(ds: MultiLabelDataset, target_candidates: int, seed: int = 0) -> MultiLabelDataset:
    """Add random irrelevant labels until each instance has ``target_candidates`` candidates.

    Instance i gains ``max(0, min(c - |true_i|, L - |true_i|))`` labels drawn
    uniformly without replacement from its non-true labels.
    """
    if ds.Y_true is None:
        raise ValueError("noise injection needs ground-truth labels")
    if target_candidates < 1:
        raise ValueError("target candidate count must be >= 1")
    rng = np.random.default_rng(seed)
    Y = ds.Y_true.copy()
    L = ds.n_labels
    for i in range(ds.n):
        negatives = np.flatnonzero(Y[i] == 0)
        k = int(max(0, min(target_candidates - (L - negatives.size), negatives.size)))
        if k:
            Y[i, rng.choice(negatives, size=k, replace=False)] = 1.0
    return replace(ds, Y=Y, Y_true=ds.Y_true.copy())


def fit_scaler(X: np.ndarray):
    return X.min(axis=0), X.max(axis=0)


def apply_scaler(X: np.ndarray, scaler) -> np.ndarray:
    lo, hi = scaler
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = 2.0 * (X - lo) / safe - 1.0
    return np.where(span > 0, out, 0.0)


def normalize_features(train: MultiLabelDataset, *others: MultiLabelDataset):
    """Map training min/max of each feature to [-1, 1] and apply the same map to ``others``."""
    scaler = fit_scaler(train.X)
    scaled = [replace(ds, X=apply_scaler(ds.X, scaler), scaler=scaler) for ds in (train, *others)]
    return scaled[0] if not others else tuple(scaled)


def split(ds: MultiLabelDataset, ratio: float = 0.8, rng=None):
    if ds.n < 5:
        raise ValueError(f"need at least 5 instances to split, got {ds.n}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    perm = rng.permutation(ds.n)
    n_train = int(round(ratio * ds.n))
    n_train = min(max(n_train, 1), ds.n - 1)
    return ds.subset(perm[:n_train]), ds.subset(perm[n_train:])


def make_synthetic(n: int, d: int, n_labels: int, avg_true_labels: float = 3.0,
                   seed: int = 0) -> MultiLabelDataset:
    """Gaussian features with a fixed linear teacher; each instance takes its top-r labels."""
    if n_labels < 2:
        raise ValueError("need at least 2 labels")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    teacher = rng.standard_normal((d, n_labels))
    scores = X @ teacher
    r = np.clip(rng.poisson(max(avg_true_labels - 1.0, 0.0), size=n) + 1, 1, n_labels)
    order = np.argsort(-scores, axis=1, kind="stable")
    Y = np.zeros((n, n_labels))
    for i in range(n):
        Y[i, order[i, :r[i]]] = 1.0
    return MultiLabelDataset(X=X, Y=Y.copy(), Y_true=Y)
