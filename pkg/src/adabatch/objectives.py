"""Finite-sum training problems with exact per-sample gradients.

Three problem kinds are provided, each defined by a per-sample loss over a
synthetic dataset:

* ``quadratic``: least squares, ``0.5 * (<x, w> - y)**2``
* ``logistic``: binary cross-entropy with labels in {0, 1}
* ``mlp``: one hidden ``tanh`` layer regressed with ``0.5 * (f(x) - y)**2``

Gradients are computed by hand (no autodiff), vectorised over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor_core import ParamVector, RngStream, as_vector

KINDS = ("quadratic", "logistic", "mlp")

# Stream ids reserved for dataset synthesis.
_TRUTH_STREAM = 0
_TRAIN_STREAM = 1
_HOLDOUT_STREAM = 2

_TEACHER_HIDDEN = 4


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True, eq=False)
class Dataset:
    kind: str
    X: np.ndarray
    y: np.ndarray
    seed: int
    noise: float = 0.1
    flip_rate: float = 0.05

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError("X must be (n, d) and y must be (n,)")
        self.X.setflags(write=False)
        self.y.setflags(write=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.n

    def to_bytes(self) -> bytes:
        return _format_dataset(self).encode()


def _ground_truth(kind: str, d: int, seed: int) -> np.ndarray:
    rng = RngStream(seed, _TRUTH_STREAM).generator()
    if kind == "mlp":
        # teacher: hidden weights (H, d), output weights (H,)
        return rng.standard_normal((_TEACHER_HIDDEN, d + 1))
    return rng.standard_normal(d) / np.sqrt(d)


def _draw(kind, n, d, seed, stream, noise, flip_rate):
    truth = _ground_truth(kind, d, seed)
    rng = RngStream(seed, stream).generator()
    X = rng.standard_normal((n, d))
    if kind == "quadratic":
        y = X @ truth + noise * rng.standard_normal(n)
    elif kind == "logistic":
        y = (X @ (4.0 * truth) > 0).astype(np.float64)
        flip = rng.random(n) < flip_rate
        y[flip] = 1.0 - y[flip]
    else:
        W, a = truth[:, :d], truth[:, d]
        y = np.tanh(X @ W.T / np.sqrt(d)) @ a + noise * rng.standard_normal(n)
    return X, y


def make_dataset(kind: str, n: int, d: int, seed: int, *, noise: float = 0.1, flip_rate: float = 0.05) -> Dataset:
    """Synthesize ``n`` records with ``d`` features, reproducibly from ``seed``."""
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if n < 2:
        raise ValueError("n must be >= 2")
    if d < 1:
        raise ValueError("d must be >= 1")
    X, y = _draw(kind, n, d, seed, _TRAIN_STREAM, noise, flip_rate)
    return Dataset(kind, X, y, seed, noise, flip_rate)


def make_holdout(ds: Dataset, m: int) -> Dataset:
    """Held-out records from the same ground truth on a reserved random stream."""
    X, y = _draw(ds.kind, m, ds.d, ds.seed, _HOLDOUT_STREAM, ds.noise, ds.flip_rate)
    return Dataset(ds.kind, X, y, ds.seed, ds.noise, ds.flip_rate)


def _format_dataset(ds: Dataset) -> str:
    lines = [f"# kind={ds.kind} n={ds.n} d={ds.d} seed={ds.seed} noise={ds.noise!r} flip_rate={ds.flip_rate!r}"]
    for x, y in zip(ds.X, ds.y):
        lines.append(",".join(repr(float(v)) for v in (*x, y)))
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.write_text(_format_dataset(ds))
    return path


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ValueError(f"{path}: missing dataset header line")
        meta = dict(item.split("=", 1) for item in header[1:].split())
        rows = np.loadtxt(fh, delimiter=",", dtype=np.float64, ndmin=2)
    n, d = int(meta["n"]), int(meta["d"])
    if rows.shape != (n, d + 1):
        raise ValueError(f"{path}: expected {n} rows of {d + 1} values, got {rows.shape}")
    return Dataset(
        meta["kind"], rows[:, :d].copy(), rows[:, d].copy(), int(meta["seed"]),
        float(meta["noise"]), float(meta["flip_rate"]),
    )


@dataclass(eq=False)
class Objective:
    """``L(w) = mean_i loss(w; z_i)`` over ``dataset``.

    For ``mlp`` the parameter vector packs ``(W1, b1, a, c)`` of the model
    ``f(x) = a . tanh(W1 x + b1) + c`` with ``hidden`` units.
    """

    kind: str
    dataset: Dataset
    hidden: int = 16
    smoothness: float | None = field(default=None)

    def __post_init__(self):
        if self.kind != self.dataset.kind:
            raise ValueError(f"objective kind {self.kind!r} does not match dataset kind {self.dataset.kind!r}")
        if self.smoothness is None and self.kind != "mlp":
            X = self.dataset.X
            lam = float(np.linalg.eigvalsh(X.T @ X / self.dataset.n)[-1])
            self.smoothness = lam if self.kind == "quadratic" else lam / 4.0

    @property
    def n(self) -> int:
        return self.dataset.n

    @property
    def dim(self) -> int:
        p = self.dataset.d
        if self.kind == "mlp":
            return self.hidden * p + 2 * self.hidden + 1
        return p

    def with_dataset(self, ds: Dataset) -> "Objective":
        return Objective(self.kind, ds, self.hidden, self.smoothness)

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        if self.kind != "mlp":
            return np.zeros(self.dim)
        p, h = self.dataset.d, self.hidden
        W1 = rng.standard_normal((h, p)) / np.sqrt(p)
        a = rng.standard_normal(h) / np.sqrt(h)
        return np.concatenate([W1.ravel(), np.zeros(h), a, [0.0]])

    # -- evaluation ------------------------------------------------------
    def _indices(self, idx):
        if idx is None:
            return np.arange(self.n)
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        if idx.size and (idx.min() < 0 or idx.max() >= self.n):
            raise IndexError(f"sample index out of range [0, {self.n})")
        return idx

    def _unpack(self, w):
        p, h = self.dataset.d, self.hidden
        W1 = w[: h * p].reshape(h, p)
        b1 = w[h * p: h * p + h]
        a = w[h * p + h: h * p + 2 * h]
        c = w[-1]
        return W1, b1, a, c

    def _check_w(self, w) -> ParamVector:
        w = as_vector(w)
        if w.shape[0] != self.dim:
            raise ValueError(f"parameter vector has dimension {w.shape[0]}, objective expects {self.dim}")
        return w

    def per_sample_losses(self, w, idx=None) -> np.ndarray:
        w = self._check_w(w)
        idx = self._indices(idx)
        X, y = self.dataset.X[idx], self.dataset.y[idx]
        if self.kind == "quadratic":
            r = X @ w - y
            return 0.5 * r * r
        if self.kind == "logistic":
            z = X @ w
            return np.logaddexp(0.0, z) - y * z
        W1, b1, a, c = self._unpack(w)
        r = np.tanh(X @ W1.T + b1) @ a + c - y
        return 0.5 * r * r

    def per_sample_grads(self, w, idx=None) -> np.ndarray:
        """Gradients of each selected sample's loss, shape ``(b, dim)``."""
        w = self._check_w(w)
        idx = self._indices(idx)
        X, y = self.dataset.X[idx], self.dataset.y[idx]
        if self.kind == "quadratic":
            return (X @ w - y)[:, None] * X
        if self.kind == "logistic":
            return (_sigmoid(X @ w) - y)[:, None] * X
        W1, b1, a, c = self._unpack(w)
        T = np.tanh(X @ W1.T + b1)
        r = T @ a + c - y
        dz = (r[:, None] * a) * (1.0 - T * T)
        gW1 = (dz[:, :, None] * X[:, None, :]).reshape(len(idx), -1)
        return np.hstack([gW1, dz, r[:, None] * T, r[:, None]])

    def per_sample_grad(self, w, i: int) -> ParamVector:
        if not 0 <= i < self.n:
            raise IndexError(f"sample index {i} out of range [0, {self.n})")
        return self.per_sample_grads(w, [i])[0]

    def loss(self, w, idx=None) -> float:
        return float(np.mean(self.per_sample_losses(w, idx)))

    def batch_grad(self, w, batch) -> ParamVector:
        batch = np.asarray(batch)
        if batch.size == 0:
            raise ValueError("batch must be non-empty")
        return self.per_sample_grads(w, batch).mean(axis=0)

    def full_grad(self, w) -> ParamVector:
        return self.per_sample_grads(w).mean(axis=0)

    def finite_diff_grad(self, w, h: float = 1e-6, idx=None) -> ParamVector:
        """Central differences of the mean loss over ``idx`` (default: all samples)."""
        if h <= 0:
            raise ValueError("step h must be positive")
        w = self._check_w(w)
        g = np.empty(self.dim)
        e = np.zeros(self.dim)
        for j in range(self.dim):
            e[j] = h
            g[j] = (self.loss(w + e, idx) - self.loss(w - e, idx)) / (2 * h)
            e[j] = 0.0
        return g


def per_sample_grad(obj: Objective, w, i: int) -> ParamVector:
    return obj.per_sample_grad(w, i)


def batch_grad(obj: Objective, w, batch) -> ParamVector:
    return obj.batch_grad(w, batch)


def full_grad(obj: Objective, w) -> ParamVector:
    return obj.full_grad(w)


def finite_diff_grad(obj: Objective, w, h: float = 1e-6) -> ParamVector:
    return obj.finite_diff_grad(w, h)


def sample_batch(rng: np.random.Generator, n: int, b: int) -> np.ndarray:
    """``b`` distinct indices drawn uniformly without replacement from ``range(n)``."""
    if not 1 <= b <= n:
        raise ValueError(f"batch size b={b} must satisfy 1 <= b <= n={n}")
    return rng.choice(n, size=b, replace=False)
