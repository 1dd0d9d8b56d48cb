"""Two-layer dropout MLP classifier with hand-derived reverse-mode gradients.

One instance serves each embedding view. The forward map is

    pre    = x @ w1 + b1
    act    = gelu(pre)                      (exact Gaussian-CDF form)
    hidden = act * keep / (1 - dropout)     (inverted dropout, train only)
    logits = hidden @ w2 + b2

Evaluation mode (``keep=None``) is a pure function of the parameters. All
gradients are analytic and certified against ``numerics.finite_diff_grad``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import erf

from .errors import InvalidInputError
from .numerics import PROB_FLOOR, entropy_rows, softmax_rows

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class StudentParams:
    """Weights of one student. Treated as an immutable value."""

    w1: np.ndarray  # (d_in, d_h)
    b1: np.ndarray  # (d_h,)
    w2: np.ndarray  # (d_h, n_classes)
    b2: np.ndarray  # (n_classes,)
    dropout_rate: float = 0.1

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_h(self) -> int:
        return self.w1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.w2.shape[1]


@dataclass(frozen=True)
class Gradients:
    """Parameter-shaped gradient container with the arithmetic the loop needs."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @staticmethod
    def zeros_like(params: StudentParams) -> "Gradients":
        return Gradients(
            np.zeros_like(params.w1),
            np.zeros_like(params.b1),
            np.zeros_like(params.w2),
            np.zeros_like(params.b2),
        )

    def scaled(self, a: float) -> "Gradients":
        return Gradients(a * self.w1, a * self.b1, a * self.w2, a * self.b2)

    def plus(self, other: "Gradients", scale: float = 1.0) -> "Gradients":
        return Gradients(
            self.w1 + scale * other.w1,
            self.b1 + scale * other.b1,
            self.w2 + scale * other.w2,
            self.b2 + scale * other.b2,
        )

    def dot(self, other: "Gradients") -> float:
        return float(
            np.vdot(self.w1, other.w1)
            + np.vdot(self.b1, other.b1)
            + np.vdot(self.w2, other.w2)
            + np.vdot(self.b2, other.b2)
        )

    def inf_norm(self) -> float:
        return max(
            float(np.abs(self.w1).max()),
            float(np.abs(self.b1).max()),
            float(np.abs(self.w2).max()),
            float(np.abs(self.b2).max()),
        )


@dataclass(frozen=True)
class DropoutMask:
    """Bernoulli keep pattern over hidden units, reproducible from its seed."""

    seed: int
    keep: np.ndarray  # (d_h,) bool


@dataclass
class OptimizerState:
    """SGD-momentum state with a cosine learning-rate schedule."""

    velocity: Gradients
    momentum: float
    base_lr: float
    step: int
    total_steps: int
    weight_norm_bound: float | None = None


def init_student(
    d_in: int,
    d_h: int,
    n_classes: int,
    dropout_rate: float = 0.1,
    seed: int = 0,
) -> StudentParams:
    """He-scaled Gaussian weights, zero biases. Deterministic under seed."""
    if not 0.0 <= dropout_rate < 1.0:
        raise InvalidInputError("dropout_rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    w1 = rng.standard_normal((d_in, d_h)) * math.sqrt(2.0 / d_in)
    w2 = rng.standard_normal((d_h, n_classes)) * math.sqrt(2.0 / d_h)
    return StudentParams(
        w1=w1,
        b1=np.zeros(d_h),
        w2=w2,
        b2=np.zeros(n_classes),
        dropout_rate=float(dropout_rate),
    )


def gelu(u: np.ndarray) -> np.ndarray:
    return u * 0.5 * (1.0 + erf(u * _INV_SQRT2))


def gelu_prime(u: np.ndarray) -> np.ndarray:
    phi = np.exp(-0.5 * u * u) * _INV_SQRT2PI
    return 0.5 * (1.0 + erf(u * _INV_SQRT2)) + u * phi


def draw_mask(rng: np.random.Generator, d_h: int, dropout_rate: float) -> DropoutMask:
    """Draw one hidden-unit keep pattern, recording the seed it derives from."""
    seed = int(rng.integers(0, 2**63 - 1))
    return mask_from_seed(seed, d_h, dropout_rate)


def mask_from_seed(seed: int, d_h: int, dropout_rate: float) -> DropoutMask:
    keep = np.random.default_rng(seed).random(d_h) >= dropout_rate
    return DropoutMask(seed=seed, keep=keep)


def draw_keep_matrix(
    rng: np.random.Generator, n: int, d_h: int, dropout_rate: float
) -> np.ndarray:
    """(n, d_h) bool keep matrix, one independent mask per sample."""
    return rng.random((n, d_h)) >= dropout_rate


def _keep_scale(params: StudentParams, keep: np.ndarray | None, n: int) -> np.ndarray | None:
    if keep is None:
        return None
    k = np.asarray(keep)
    if k.ndim == 1:
        k = np.broadcast_to(k, (n, k.size))
    if k.shape != (n, params.d_h):
        raise InvalidInputError(
            f"keep shape {k.shape} does not match batch ({n}, {params.d_h})"
        )
    return k.astype(np.float64) / (1.0 - params.dropout_rate)


class _Cache:
    __slots__ = ("x", "pre", "act", "scale", "hidden", "logits")

    def __init__(self, x, pre, act, scale, hidden, logits):
        self.x = x
        self.pre = pre
        self.act = act
        self.scale = scale
        self.hidden = hidden
        self.logits = logits


def forward_batch(
    params: StudentParams, x: np.ndarray, keep: np.ndarray | None = None
) -> tuple[np.ndarray, _Cache]:
    """Batch forward pass. ``keep=None`` is evaluation mode (no dropout)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != params.d_in:
        raise InvalidInputError(
            f"input dim {x.shape[1]} does not match d_in {params.d_in}"
        )
    pre = x @ params.w1 + params.b1
    act = gelu(pre)
    scale = _keep_scale(params, keep, x.shape[0])
    hidden = act if scale is None else act * scale
    logits = hidden @ params.w2 + params.b2
    return logits, _Cache(x, pre, act, scale, hidden, logits)


def forward(
    params: StudentParams, x: np.ndarray, mask: DropoutMask | None = None
) -> tuple[np.ndarray, _Cache]:
    """Single-sample forward pass; returns the logit vector and the cache."""
    keep = None if mask is None else mask.keep[None, :]
    logits, cache = forward_batch(params, np.asarray(x, dtype=np.float64)[None, :], keep)
    return logits[0], cache


def mc_forward(
    params: StudentParams, x: np.ndarray, n_passes: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """``n_passes`` stochastic softmax outputs, one fresh dropout mask each."""
    if n_passes < 1:
        raise InvalidInputError("n_passes must be >= 1")
    out = []
    for _ in range(n_passes):
        mask = draw_mask(rng, params.d_h, params.dropout_rate)
        logits, _ = forward(params, x, mask)
        out.append(softmax_rows(logits[None, :])[0])
    return out


def mc_forward_batch(
    params: StudentParams,
    x: np.ndarray,
    n_passes: int,
    seed: int,
    sample_ids: np.ndarray | None = None,
) -> np.ndarray:
    """(n_passes, n, c) stochastic softmax outputs for a batch.

    With ``sample_ids`` the mask stream of each row is derived from
    ``(seed, sample_id)`` alone, so results are invariant to how the batch is
    assembled or scheduled; without it masks come from one seeded stream.
    """
    if n_passes < 1:
        raise InvalidInputError("n_passes must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if sample_ids is None:
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        keeps = rng.random((n_passes, n, params.d_h)) >= params.dropout_rate
    else:
        keeps = np.empty((n_passes, n, params.d_h), dtype=bool)
        for j, sid in enumerate(np.asarray(sample_ids)):
            sub = np.random.default_rng(np.random.SeedSequence([seed, int(sid)]))
            keeps[:, j, :] = sub.random((n_passes, params.d_h)) >= params.dropout_rate
    probs = np.empty((n_passes, n, params.n_classes))
    for k in range(n_passes):
        logits, _ = forward_batch(params, x, keeps[k])
        probs[k] = softmax_rows(logits)
    return probs


def _backward(params: StudentParams, cache: _Cache, dlogits: np.ndarray) -> Gradients:
    dw2 = cache.hidden.T @ dlogits
    db2 = dlogits.sum(axis=0)
    dhidden = dlogits @ params.w2.T
    dact = dhidden if cache.scale is None else dhidden * cache.scale
    dpre = dact * gelu_prime(cache.pre)
    dw1 = cache.x.T @ dpre
    db1 = dpre.sum(axis=0)
    return Gradients(w1=dw1, b1=db1, w2=dw2, b2=db2)


def _backward_to_input(params: StudentParams, cache: _Cache, dlogits: np.ndarray) -> np.ndarray:
    dhidden = dlogits @ params.w2.T
    dact = dhidden if cache.scale is None else dhidden * cache.scale
    dpre = dact * gelu_prime(cache.pre)
    return dpre @ params.w1.T


def _ce_dlogits(probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    # Composite softmax-CE gradient; the PROB_FLOOR clamp only guards the
    # reported loss value in saturated regimes.
    d = probs.copy()
    d[np.arange(len(y)), y] -= 1.0
    return d


def _entropy_dlogits(probs: np.ndarray) -> np.ndarray:
    h = entropy_rows(probs)
    logp = np.where(probs > 0.0, np.log(np.maximum(probs, PROB_FLOOR)), 0.0)
    return np.where(probs > 0.0, -probs * (logp + h[:, None]), 0.0)


def loss_and_grads(
    params: StudentParams,
    x: np.ndarray,
    y: np.ndarray | None,
    kind: str = "ce",
    keep: np.ndarray | None = None,
) -> tuple[float, Gradients]:
    """Mean batch loss and its analytic parameter gradients.

    ``kind="ce"`` is cross-entropy against hard labels ``y``; ``kind="entropy"``
    ignores the targets and returns the mean predictive entropy.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    n = x.shape[0]
    if n == 0:
        raise InvalidInputError("empty batch")
    logits, cache = forward_batch(params, x, keep)
    probs = softmax_rows(logits)
    if kind == "ce":
        if y is None:
            raise InvalidInputError("cross-entropy loss requires targets")
        yv = np.asarray(y, dtype=np.int64)
        if yv.min() < 0 or yv.max() >= params.n_classes:
            raise InvalidInputError("target class out of range")
        py = np.maximum(probs[np.arange(n), yv], PROB_FLOOR)
        loss = float(-np.log(py).mean())
        dlogits = _ce_dlogits(probs, yv) / n
    elif kind == "entropy":
        loss = float(entropy_rows(probs).mean())
        dlogits = _entropy_dlogits(probs) / n
    else:
        raise InvalidInputError(f"unknown loss kind {kind!r}")
    return loss, _backward(params, cache, dlogits)


def weighted_ce_grads(
    params: StudentParams,
    x: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray,
    keep: np.ndarray | None = None,
) -> tuple[float, Gradients]:
    """Unnormalized weighted cross-entropy sum and its gradients.

    Returns sum_i weights[i] * CE_i; callers own the normalization. This is
    the building block for soft-gated losses and their threshold derivative.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise InvalidInputError("empty batch")
    yv = np.asarray(y, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    logits, cache = forward_batch(params, x, keep)
    probs = softmax_rows(logits)
    py = np.maximum(probs[np.arange(n), yv], PROB_FLOOR)
    loss = float((w * -np.log(py)).sum())
    dlogits = _ce_dlogits(probs, yv) * w[:, None]
    return loss, _backward(params, cache, dlogits)


def input_entropy_grad(
    params: StudentParams, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample predictive entropy and its gradient w.r.t. the input.

    Evaluation-mode pass: every row's entropy is differentiated against that
    row only, which is what a per-sample perturbation ascent needs.
    """
    x = np.asarray(x, dtype=np.float64)
    logits, cache = forward_batch(params, x)
    probs = softmax_rows(logits)
    h = entropy_rows(probs)
    dx = _backward_to_input(params, cache, _entropy_dlogits(probs))
    return h, dx


def input_mi_grad(
    params: StudentParams, x: np.ndarray, keeps: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample dropout mutual information and its input gradient.

    ``keeps`` is an (n_passes, n, d_h) bool array of frozen masks; freezing
    them is what makes the estimate differentiable in the input.
    """
    x = np.asarray(x, dtype=np.float64)
    n_passes = keeps.shape[0]
    probs = np.empty((n_passes, x.shape[0], params.n_classes))
    caches = []
    for k in range(n_passes):
        logits, cache = forward_batch(params, x, keeps[k])
        probs[k] = softmax_rows(logits)
        caches.append(cache)
    mean = probs.mean(axis=0)
    h_mean = entropy_rows(mean)
    h_each = entropy_rows(probs.reshape(-1, params.n_classes)).reshape(n_passes, -1)
    mi = h_mean - h_each.mean(axis=0)
    log_mean = np.where(mean > 0.0, np.log(np.maximum(mean, PROB_FLOOR)), 0.0)
    dx = np.zeros_like(x)
    for k in range(n_passes):
        pk = probs[k]
        # d H(mean) / d logits_k, plus -1/K of the per-pass entropy term.
        inner = (pk * log_mean).sum(axis=1, keepdims=True)
        d_hmean = pk * (inner - log_mean) / n_passes
        d_hk = _entropy_dlogits(pk) / n_passes
        dx += _backward_to_input(params, caches[k], d_hmean - d_hk)
    return mi, dx


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from base_lr at step 0 to 0 at step == total_steps."""
    t = min(max(step, 0), total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / max(total_steps, 1)))


def param_l2_norm(params: StudentParams) -> float:
    return math.sqrt(
        float(
            np.sum(params.w1**2)
            + np.sum(params.b1**2)
            + np.sum(params.w2**2)
            + np.sum(params.b2**2)
        )
    )


def project_weight_norm(params: StudentParams, bound: float) -> StudentParams:
    """Radial projection onto the ball of L2 norm <= bound over all weights."""
    norm = param_l2_norm(params)
    if norm <= bound:
        return params
    a = bound / norm
    return replace(
        params, w1=a * params.w1, b1=a * params.b1, w2=a * params.w2, b2=a * params.b2
    )


def sgd_step(
    params: StudentParams, grads: Gradients, opt: OptimizerState
) -> tuple[StudentParams, OptimizerState]:
    """One momentum step at the cosine-scheduled rate; returns new values."""
    lr = cosine_lr(opt.base_lr, opt.step, opt.total_steps)
    vel = opt.velocity.scaled(opt.momentum).plus(grads)
    new = StudentParams(
        w1=params.w1 - lr * vel.w1,
        b1=params.b1 - lr * vel.b1,
        w2=params.w2 - lr * vel.w2,
        b2=params.b2 - lr * vel.b2,
        dropout_rate=params.dropout_rate,
    )
    if opt.weight_norm_bound is not None:
        new = project_weight_norm(new, opt.weight_norm_bound)
    return new, OptimizerState(
        velocity=vel,
        momentum=opt.momentum,
        base_lr=opt.base_lr,
        step=opt.step + 1,
        total_steps=opt.total_steps,
        weight_norm_bound=opt.weight_norm_bound,
    )


def fresh_optimizer(
    params: StudentParams,
    base_lr: float,
    momentum: float,
    total_steps: int,
    weight_norm_bound: float | None = None,
) -> OptimizerState:
    if not 0.0 <= momentum < 1.0:
        raise InvalidInputError("momentum must lie in [0, 1)")
    if base_lr <= 0:
        raise InvalidInputError("base_lr must be positive")
    return OptimizerState(
        velocity=Gradients.zeros_like(params),
        momentum=momentum,
        base_lr=base_lr,
        step=0,
        total_steps=total_steps,
        weight_norm_bound=weight_norm_bound,
    )


def params_to_vector(params: StudentParams) -> np.ndarray:
    return np.concatenate(
        [params.w1.ravel(), params.b1.ravel(), params.w2.ravel(), params.b2.ravel()]
    )


def vector_to_params(template: StudentParams, vec: np.ndarray) -> StudentParams:
    sizes = [template.w1.size, template.b1.size, template.w2.size, template.b2.size]
    if vec.size != sum(sizes):
        raise InvalidInputError("vector length does not match parameter count")
    parts = np.split(np.asarray(vec, dtype=np.float64), np.cumsum(sizes)[:-1])
    return StudentParams(
        w1=parts[0].reshape(template.w1.shape),
        b1=parts[1].reshape(template.b1.shape),
        w2=parts[2].reshape(template.w2.shape),
        b2=parts[3].reshape(template.b2.shape),
        dropout_rate=template.dropout_rate,
    )


def grads_to_vector(grads: Gradients) -> np.ndarray:
    return np.concatenate(
        [grads.w1.ravel(), grads.b1.ravel(), grads.w2.ravel(), grads.b2.ravel()]
    )
