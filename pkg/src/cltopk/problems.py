"""Training problems with stochastic gradient oracles.

Three problems at desk scale: a diagonal quadratic with controllable
conditioning and gradient noise, L2-regularized logistic regression on a
synthetic (or CSV-loaded) dataset, and a tiny tanh MLP with softmax
cross-entropy. Gradients are deterministic functions of (theta, batch), so
paired runs that sample identical batches see identical gradient noise.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import DimensionError, RngStream, as_vector


@dataclass(frozen=True)
class MiniBatch:
    """Sample identifiers for one worker's step."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise ValueError("a mini-batch needs at least one sample index")
        object.__setattr__(self, "indices", idx)

    @property
    def size(self) -> int:
        return int(self.indices.size)


class Problem:
    """Interface shared by all training problems.

    Subclasses are immutable after construction; gradient evaluation is a
    pure function of (theta, batch) and safe to call concurrently.
    """

    p: int

    def loss(self, theta: np.ndarray) -> float:
        raise NotImplementedError

    def full_gradient(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_batch(self, rng: RngStream, batch_size: int) -> MiniBatch:
        raise NotImplementedError

    def stochastic_gradient(
        self, theta: np.ndarray, batch: MiniBatch, rng: RngStream | None = None
    ) -> np.ndarray:
        raise NotImplementedError

    def lipschitz_constant(self) -> float | None:
        """Analytic gradient-Lipschitz constant where one is available."""
        return None


class Quadratic(Problem):
    """f(theta) = 0.5 (theta - theta*)' A (theta - theta*) with diagonal A > 0.

    Per-sample losses replace the linear term's b with b + noise, where the
    noise is Gaussian(0, noise_scale^2 I) keyed on the sample id, so a given
    sample always contributes the same perturbation. The constant making the
    loss equal zero at the optimum is included, which keeps reported losses
    non-negative and directly comparable across runs.
    """

    def __init__(self, diag: np.ndarray, b: np.ndarray, noise_scale: float = 0.0, seed: int = 0):
        diag = as_vector(diag)
        b = as_vector(b, p=diag.size)
        if np.any(diag <= 0):
            raise ValueError("quadratic curvature entries must be positive")
        if noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")
        self.diag = diag
        self.b = b
        self.noise_scale = float(noise_scale)
        self.p = int(diag.size)
        self._noise_key = int(seed) & (2**63 - 1)

    @classmethod
    def with_condition(
        cls, p: int, condition: float, noise_scale: float = 0.0, seed: int = 0, scale: float = 1.0
    ) -> "Quadratic":
        """Spectrum geometrically spaced over [scale/condition, scale]."""
        if condition < 1:
            raise ValueError("condition number must be >= 1")
        diag = np.geomspace(scale / condition, scale, p)
        rng = RngStream(seed, stream=900)
        theta_star = rng.normal(size=p)
        return cls(diag=diag, b=diag * theta_star, noise_scale=noise_scale, seed=seed)

    @property
    def theta_star(self) -> np.ndarray:
        return self.b / self.diag

    def loss(self, theta: np.ndarray) -> float:
        theta = as_vector(theta, p=self.p)
        delta = theta - self.theta_star
        return 0.5 * float(np.dot(delta * self.diag, delta))

    def full_gradient(self, theta: np.ndarray) -> np.ndarray:
        theta = as_vector(theta, p=self.p)
        return self.diag * theta - self.b

    def sample_batch(self, rng: RngStream, batch_size: int) -> MiniBatch:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        # Virtual infinite dataset: ids key the per-sample noise realization.
        return MiniBatch(rng.integers(0, 2**62, size=batch_size))

    def _sample_noise(self, sample_id: int) -> np.ndarray:
        gen = np.random.Generator(
            np.random.Philox(key=self._noise_key, counter=[0, 0, int(sample_id), 0])
        )
        return gen.standard_normal(self.p) * self.noise_scale

    def stochastic_gradient(self, theta, batch, rng=None) -> np.ndarray:
        grad = self.full_gradient(theta)
        if self.noise_scale == 0.0:
            return grad
        noise = np.zeros(self.p)
        for sample_id in batch.indices:
            noise += self._sample_noise(sample_id)
        return grad - noise / batch.size

    def lipschitz_constant(self) -> float:
        return float(self.diag.max())


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Logistic(Problem):
    """L2-regularized binary logistic regression over a fixed dataset."""

    def __init__(self, features: np.ndarray, labels: np.ndarray, l2: float = 0.0):
        X = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError("features must be a non-empty N x p matrix")
        if y.shape != (X.shape[0],) or not np.all(np.isin(y, (0.0, 1.0))):
            raise ValueError("labels must be one 0/1 value per sample")
        if l2 < 0:
            raise ValueError("l2 must be non-negative")
        self.X = X
        self.y = y
        self.l2 = float(l2)
        self.n_samples = int(X.shape[0])
        self.p = int(X.shape[1])

    @classmethod
    def synthetic(
        cls, n_samples: int, p: int, seed: int = 0, separation: float = 1.0, l2: float = 1e-3
    ) -> "Logistic":
        """Balanced two-cluster dataset with symmetric class means."""
        rng = RngStream(seed, stream=901)
        direction = rng.normal(size=p)
        direction /= np.linalg.norm(direction)
        half = n_samples // 2
        labels = np.concatenate([np.zeros(half), np.ones(n_samples - half)])
        signs = 2.0 * labels - 1.0
        X = rng.normal(size=(n_samples, p)) + separation * signs[:, None] * direction[None, :]
        return cls(features=X, labels=labels, l2=l2)

    def _margins(self, theta: np.ndarray) -> np.ndarray:
        return self.X @ theta

    def loss(self, theta: np.ndarray) -> float:
        theta = as_vector(theta, p=self.p)
        z = self._margins(theta)
        # log(1 + exp(z)) - y z, computed stably
        data = np.logaddexp(0.0, z) - self.y * z
        return float(data.mean()) + 0.5 * self.l2 * float(np.dot(theta, theta))

    def full_gradient(self, theta: np.ndarray) -> np.ndarray:
        theta = as_vector(theta, p=self.p)
        residual = _sigmoid(self._margins(theta)) - self.y
        return self.X.T @ residual / self.n_samples + self.l2 * theta

    def sample_batch(self, rng: RngStream, batch_size: int) -> MiniBatch:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if batch_size <= self.n_samples:
            return MiniBatch(rng.choice_without_replacement(self.n_samples, batch_size))
        return MiniBatch(rng.integers(0, self.n_samples, size=batch_size))

    def stochastic_gradient(self, theta, batch, rng=None) -> np.ndarray:
        theta = as_vector(theta, p=self.p)
        Xb = self.X[batch.indices]
        residual = _sigmoid(Xb @ theta) - self.y[batch.indices]
        return Xb.T @ residual / batch.size + self.l2 * theta

    def lipschitz_constant(self) -> float:
        # 0.25 * lambda_max(X'X) / N bounds the data term's curvature.
        sv = np.linalg.svd(self.X, compute_uv=False)[0]
        return 0.25 * float(sv * sv) / self.n_samples + self.l2


class TinyMLP(Problem):
    """One-hidden-layer tanh network with softmax cross-entropy.

    Parameters are a single flat vector (W1, b1, W2, b2 in that order).
    tanh keeps the loss smooth enough for central-difference checks.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray, hidden: int = 8):
        X = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError("features must be a non-empty N x d matrix")
        if labels.shape != (X.shape[0],) or labels.min() < 0:
            raise ValueError("labels must be one class id per sample")
        self.X = X
        self.labels = labels
        self.n_samples, self.d_in = X.shape
        self.hidden = int(hidden)
        self.n_classes = int(labels.max()) + 1
        self.p = (
            self.d_in * self.hidden + self.hidden
            + self.hidden * self.n_classes + self.n_classes
        )

    @classmethod
    def synthetic(
        cls, n_samples: int = 128, d_in: int = 6, hidden: int = 8, n_classes: int = 2, seed: int = 0
    ) -> "TinyMLP":
        rng = RngStream(seed, stream=902)
        centers = rng.normal(size=(n_classes, d_in)) * 2.0
        labels = np.arange(n_samples) % n_classes
        X = centers[labels] + rng.normal(size=(n_samples, d_in))
        return cls(features=X, labels=labels, hidden=hidden)

    def _unpack(self, theta: np.ndarray):
        d, h, c = self.d_in, self.hidden, self.n_classes
        i = 0
        w1 = theta[i : i + d * h].reshape(d, h); i += d * h
        b1 = theta[i : i + h]; i += h
        w2 = theta[i : i + h * c].reshape(h, c); i += h * c
        b2 = theta[i : i + c]
        return w1, b1, w2, b2

    def _forward(self, theta: np.ndarray, X: np.ndarray, labels: np.ndarray):
        w1, b1, w2, b2 = self._unpack(theta)
        hidden = np.tanh(X @ w1 + b1)
        logits = hidden @ w2 + b2
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        loss = float((log_z - shifted[np.arange(X.shape[0]), labels]).mean())
        return loss, hidden, shifted, log_z

    def _loss_grad(self, theta: np.ndarray, idx: np.ndarray):
        X, labels = self.X[idx], self.labels[idx]
        n = X.shape[0]
        loss, hidden, shifted, log_z = self._forward(theta, X, labels)
        probs = np.exp(shifted - log_z[:, None])
        probs[np.arange(n), labels] -= 1.0
        probs /= n
        w1, b1, w2, b2 = self._unpack(theta)
        g_w2 = hidden.T @ probs
        g_b2 = probs.sum(axis=0)
        back = (probs @ w2.T) * (1.0 - hidden * hidden)
        g_w1 = X.T @ back
        g_b1 = back.sum(axis=0)
        grad = np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])
        return loss, grad

    def loss(self, theta: np.ndarray) -> float:
        theta = as_vector(theta, p=self.p)
        loss, _, _, _ = self._forward(theta, self.X, self.labels)
        return loss

    def full_gradient(self, theta: np.ndarray) -> np.ndarray:
        theta = as_vector(theta, p=self.p)
        _, grad = self._loss_grad(theta, np.arange(self.n_samples))
        return grad

    def sample_batch(self, rng: RngStream, batch_size: int) -> MiniBatch:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if batch_size <= self.n_samples:
            return MiniBatch(rng.choice_without_replacement(self.n_samples, batch_size))
        return MiniBatch(rng.integers(0, self.n_samples, size=batch_size))

    def stochastic_gradient(self, theta, batch, rng=None) -> np.ndarray:
        theta = as_vector(theta, p=self.p)
        _, grad = self._loss_grad(theta, batch.indices)
        return grad


def finite_difference_check(prob: Problem, theta: np.ndarray, h: float = 1e-5) -> float:
    """Central-difference check of the full gradient.

    Returns the largest per-coordinate deviation normalized by the largest
    gradient magnitude (plain absolute deviation if the gradient is zero).
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    theta = as_vector(theta, p=prob.p)
    grad = prob.full_gradient(theta)
    fd = np.empty(prob.p)
    for j in range(prob.p):
        bumped = theta.copy()
        bumped[j] = theta[j] + h
        up = prob.loss(bumped)
        bumped[j] = theta[j] - h
        down = prob.loss(bumped)
        if not (np.isfinite(up) and np.isfinite(down)):
            raise ArithmeticError(f"non-finite loss while probing coordinate {j}")
        fd[j] = (up - down) / (2.0 * h)
    scale = float(np.abs(grad).max())
    err = float(np.abs(fd - grad).max())
    return err / scale if scale > 0 else err


@dataclass(frozen=True)
class ConstantEstimates:
    """Empirical (G, L, sigma) along a trajectory."""

    g_bound: float
    lipschitz: float
    sigma: float


def estimate_constants(
    prob: Problem,
    trajectory: list[np.ndarray],
    rng: RngStream,
    batch_size: int = 8,
    probes: int = 64,
) -> ConstantEstimates:
    """Estimate the gradient bound, Lipschitz constant, and noise level.

    G is the max stochastic-gradient norm observed over probe batches at
    trajectory points; sigma^2 the max over points of the mean squared
    deviation from the full gradient; L is analytic when the problem
    provides it, otherwise a secant bound along the trajectory.
    """
    if not trajectory:
        raise ValueError("trajectory must be non-empty")
    g_max = 0.0
    sigma_sq = 0.0
    for theta in trajectory:
        full = prob.full_gradient(theta)
        g_max = max(g_max, float(np.linalg.norm(full)))
        dev = 0.0
        for _ in range(probes):
            batch = prob.sample_batch(rng, batch_size)
            g = prob.stochastic_gradient(theta, batch)
            g_max = max(g_max, float(np.linalg.norm(g)))
            diff = g - full
            dev += float(np.dot(diff, diff))
        sigma_sq = max(sigma_sq, dev / probes)

    lip = prob.lipschitz_constant()
    if lip is None:
        lip = 0.0
        for a, b in zip(trajectory[:-1], trajectory[1:]):
            step = float(np.linalg.norm(b - a))
            if step > 0:
                lip = max(
                    lip,
                    float(np.linalg.norm(prob.full_gradient(b) - prob.full_gradient(a))) / step,
                )
    return ConstantEstimates(g_bound=g_max, lipschitz=float(lip), sigma=float(np.sqrt(sigma_sq)))


def load_csv_dataset(path, delimiter: str = ",") -> tuple[np.ndarray, np.ndarray]:
    """Load a dataset from CSV: feature columns first, label column last.

    A single header row is skipped when its first field is not numeric.
    Labels must be 0/1 for logistic problems; class ids for the MLP.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                if lineno == 1:
                    continue  # header row
                raise ValueError(f"non-numeric value on line {lineno} of {path}")
    if not rows:
        raise ValueError(f"no data rows in {path}")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DimensionError(f"inconsistent column counts in {path}: {sorted(widths)}")
    if widths.pop() < 2:
        raise DimensionError("need at least one feature column and one label column")
    data = np.asarray(rows, dtype=np.float64)
    return data[:, :-1], data[:, -1]
