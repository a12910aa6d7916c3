"""Small models with closed-form gradients and per-worker synthetic data.

Every task exposes the same surface used by the training loop::

    task.d                         parameter count
    task.init_params()             float32 start point
    task.sample(rank, t)           the minibatch worker ``rank`` uses at step ``t``
    task.loss_grad(w, batch)       (loss, float32 gradient)
    task.val_loss(w)               held-out mean loss

``sample`` draws from one sequential stream per rank, so each rank must ask
for steps in increasing order (which the training loop does).
"""

from __future__ import annotations

import numpy as np

from .core import STREAM_BATCH, STREAM_DATA, STREAM_INIT, STREAM_VALIDATION, SeededRng, fill_gaussian, fill_spiky

TASK_KINDS = ("counterexample_ls", "linear_regression", "tiny_mlp")


class GradientCheckError(AssertionError):
    pass


class ModelTask:
    kind = ""
    d = 0

    def __init__(self, seed: int, workers: int = 1):
        self.seed = seed
        self.workers = workers
        self._root = SeededRng(seed)
        self._batch_rngs = {}

    def _batch_rng(self, rank):
        if rank not in self._batch_rngs:
            self._batch_rngs[rank] = self._root.spawn(STREAM_BATCH, rank)
        return self._batch_rngs[rank]

    def reset_sampling(self):
        self._batch_rngs = {}

    def loss(self, w, batch) -> float:
        return self.loss_grad(w, batch)[0]

    def grad(self, w, batch) -> np.ndarray:
        return self.loss_grad(w, batch)[1]

    def check_gradient(self, points: int = 10, rtol: float = 1e-4):
        """Compare the closed-form gradient with central differences in float64.

        Each point uses a random start and a random unit direction; the
        directional derivative must match within ``rtol`` relative.
        """
        rng = self._root.spawn(99)
        batch = self._check_batch()
        for i in range(points):
            w = self.init_params().astype(np.float64) + 0.3 * rng.standard_normal(self.d)
            v = rng.standard_normal(self.d)
            v /= np.linalg.norm(v)
            h = 1e-5
            fd = (self._loss64(w + h * v, batch) - self._loss64(w - h * v, batch)) / (2 * h)
            an = float(self._grad64(w, batch) @ v)
            if abs(fd - an) > rtol * max(abs(fd), abs(an), 1e-8):
                raise GradientCheckError(f"{self.kind}: point {i} analytic {an!r} vs finite-difference {fd!r}")


class CounterexampleTask(ModelTask):
    """``f(w) = ||w||^2`` in 2-D; the stochastic gradient is ``(4 w1, 0)`` or ``(0, 4 w2)`` w.p. 1/2."""

    kind = "counterexample_ls"
    d = 2

    def __init__(self, seed: int = 0, workers: int = 1, check: bool = True):
        super().__init__(seed, workers)
        if check:
            self.check_gradient()

    def init_params(self):
        return np.array([1.0, -1.0], dtype=np.float32)

    def sample(self, rank, t):
        return int(self._batch_rng(rank).integers(0, 2, 1)[0])

    def loss_grad(self, w, branch):
        w = np.asarray(w, dtype=np.float32)
        g = np.zeros(2, dtype=np.float32)
        g[branch] = np.float32(4.0) * w[branch]
        return float(w.astype(np.float64) @ w), g

    def val_loss(self, w):
        w = np.asarray(w, dtype=np.float64)
        return float(w @ w)

    def _check_batch(self):
        return None

    def _loss64(self, w, batch):
        return float(w @ w)

    def _grad64(self, w, batch):
        # expected stochastic gradient equals the true gradient 2w
        return 2.0 * w


class LinearRegressionTask(ModelTask):
    """Least squares ``0.5 * mean((x.w - y)^2)`` with a planted solution and Gaussian label noise."""

    kind = "linear_regression"

    def __init__(
        self,
        seed: int = 0,
        workers: int = 1,
        d: int = 256,
        n_per_worker: int = 512,
        n_val: int = 2048,
        noise: float = 0.5,
        batch: int = 32,
        check: bool = True,
    ):
        super().__init__(seed, workers)
        self.d = d
        self.batch = batch
        self.noise = noise
        # column scales spread over two decades give uneven gradient magnitudes
        scale_rng = self._root.spawn(STREAM_DATA, 10_000)
        self.col_scale = np.exp(np.linspace(np.log(0.1), np.log(3.0), d)).astype(np.float32)
        self.col_scale = self.col_scale[np.argsort(scale_rng.uniform(d))]
        self.w_star = fill_gaussian(self._root.spawn(STREAM_INIT, 1), d) / np.sqrt(np.float32(d))
        self.data = [self._make(self._root.spawn(STREAM_DATA, r), n_per_worker) for r in range(workers)]
        self.val = self._make(self._root.spawn(STREAM_VALIDATION), n_val)
        if check:
            self.check_gradient()

    def _make(self, rng, n):
        x = fill_gaussian(rng, n * self.d).reshape(n, self.d) * self.col_scale
        y = x @ self.w_star + fill_gaussian(rng, n, 0.0, self.noise)
        return x.astype(np.float32), y.astype(np.float32)

    def init_params(self):
        return np.zeros(self.d, dtype=np.float32)

    def sample(self, rank, t):
        x, y = self.data[rank]
        idx = self._batch_rng(rank).integers(0, x.shape[0], self.batch)
        return x[idx], y[idx]

    def loss_grad(self, w, batch):
        x, y = batch
        r = x @ w - y
        g = (x.T @ r) / np.float32(x.shape[0])
        return float(0.5 * np.mean(r.astype(np.float64) ** 2)), g.astype(np.float32)

    def val_loss(self, w):
        x, y = self.val
        r = (x @ np.asarray(w, dtype=np.float32) - y).astype(np.float64)
        return float(0.5 * np.mean(r * r))

    def _check_batch(self):
        x, y = self.val
        return x[:64].astype(np.float64), y[:64].astype(np.float64)

    def _loss64(self, w, batch):
        x, y = batch
        r = x @ w - y
        return 0.5 * float(np.mean(r * r))

    def _grad64(self, w, batch):
        x, y = batch
        return x.T @ (x @ w - y) / x.shape[0]


class TinyMLPTask(ModelTask):
    """One-hidden-layer tanh classifier trained with softmax cross-entropy.

    Labels come from a wider random teacher network sampled through a
    softmax, so the achievable loss is bounded away from zero. A few input
    features carry much larger scale than the rest, which produces
    outlier-heavy first-layer gradients.
    """

    kind = "tiny_mlp"

    def __init__(
        self,
        seed: int = 0,
        workers: int = 1,
        d_in: int = 32,
        hidden: int = 48,
        classes: int = 8,
        n_per_worker: int = 1024,
        n_val: int = 4096,
        batch: int = 32,
        hot_features: int = 2,
        hot_scale: float = 14.0,
        spike_prob: float = 0.0,
        spike_scale: float = 1.0,
        teacher_hidden: int = 96,
        teacher_gain: float = 3.0,
        check: bool = True,
    ):
        super().__init__(seed, workers)
        self.d_in, self.hidden, self.classes, self.batch = d_in, hidden, classes, batch
        self.spike_prob, self.spike_scale = spike_prob, spike_scale
        self.d = hidden * d_in + hidden + classes * hidden + classes
        trng = self._root.spawn(STREAM_DATA, 10_000)
        scale = np.ones(d_in, dtype=np.float32)
        hot = np.argsort(trng.uniform(d_in))[:hot_features]
        scale[hot] = hot_scale
        self.feature_scale = scale
        self.teacher = (
            fill_gaussian(trng, teacher_hidden * d_in).reshape(teacher_hidden, d_in) / np.float32(np.sqrt(d_in)),
            fill_gaussian(trng, classes * teacher_hidden).reshape(classes, teacher_hidden)
            * np.float32(teacher_gain / np.sqrt(teacher_hidden)),
        )
        self.data = [self._make(self._root.spawn(STREAM_DATA, r), n_per_worker) for r in range(workers)]
        self.val = self._make(self._root.spawn(STREAM_VALIDATION), n_val)
        if check:
            self.check_gradient()

    def _make(self, rng, n):
        z = fill_spiky(rng, n * self.d_in, self.spike_prob, self.spike_scale).reshape(n, self.d_in)
        x = z * self.feature_scale
        a, b = self.teacher
        logits = np.tanh(z @ a.T) @ b.T
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        u = rng.uniform(n)[:, None]
        y = np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), self.classes - 1)
        return x.astype(np.float32), y.astype(np.int64)

    def _unpack(self, w):
        H, D, C = self.hidden, self.d_in, self.classes
        i = 0
        w1 = w[i : i + H * D].reshape(H, D)
        i += H * D
        b1 = w[i : i + H]
        i += H
        w2 = w[i : i + C * H].reshape(C, H)
        i += C * H
        return w1, b1, w2, w[i : i + C]

    def init_params(self):
        rng = self._root.spawn(STREAM_INIT)
        H, D, C = self.hidden, self.d_in, self.classes
        w1 = fill_gaussian(rng, H * D, 0.0, 1.0 / np.sqrt(D)) / np.repeat(self.feature_scale[None, :], H, 0).ravel()
        w2 = fill_gaussian(rng, C * H, 0.0, 1.0 / np.sqrt(H))
        return np.concatenate([w1, np.zeros(H), w2, np.zeros(C)]).astype(np.float32)

    def sample(self, rank, t):
        x, y = self.data[rank]
        idx = self._batch_rng(rank).integers(0, x.shape[0], self.batch)
        return x[idx], y[idx]

    def _forward_backward(self, w, x, y, want_grad=True):
        w1, b1, w2, b2 = self._unpack(w)
        a1 = np.tanh(x @ w1.T + b1)
        logits = a1 @ w2.T + b2
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        s = e.sum(axis=1, keepdims=True)
        n = x.shape[0]
        loss = float(np.mean(np.log(s[:, 0].astype(np.float64)) - logits[np.arange(n), y]))
        if not want_grad:
            return loss, None
        dl = e / s
        dl[np.arange(n), y] -= 1
        dl /= n
        gw2 = dl.T @ a1
        gb2 = dl.sum(axis=0)
        dz = (dl @ w2) * (1 - a1 * a1)
        gw1 = dz.T @ x
        gb1 = dz.sum(axis=0)
        return loss, np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])

    def loss_grad(self, w, batch):
        x, y = batch
        loss, g = self._forward_backward(np.asarray(w, dtype=np.float32), x, y)
        return loss, g.astype(np.float32)

    def val_loss(self, w):
        x, y = self.val
        return self._forward_backward(np.asarray(w, dtype=np.float32), x, y, want_grad=False)[0]

    def _check_batch(self):
        x, y = self.val
        return x[:64].astype(np.float64), y[:64]

    def _loss64(self, w, batch):
        return self._forward_backward(w, *batch, want_grad=False)[0]

    def _grad64(self, w, batch):
        return self._forward_backward(w, *batch)[1]


def make_task(kind: str, seed: int, workers: int = 1, **kwargs) -> ModelTask:
    if kind == "counterexample_ls":
        return CounterexampleTask(seed, workers, **kwargs)
    if kind == "linear_regression":
        return LinearRegressionTask(seed, workers, **kwargs)
    if kind == "tiny_mlp":
        return TinyMLPTask(seed, workers, **kwargs)
    raise ValueError(f"unknown task {kind!r}; choose from {TASK_KINDS}")
