"""Per-unit retention probabilities and their stochastic updates.

Each maskable layer carries a probability vector; masks are sampled from
it, and the probabilities themselves are optimized by a score-function
(likelihood-ratio) estimator weighted by how much a sampled mask changes
the predicted label probability, plus the gradient of a sparsity-inducing
powered-beta log-prior. A constant control variate is subtracted from the
payoff weight; it leaves the expected update unchanged and shrinks its
variance.

Units whose probability reaches the guard band around 0 or 1 are frozen:
their mask is deterministic and they take no further updates (the score is
singular at the boundary).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .linalg import Rng, bernoulli_matrix, bernoulli_vector
from .network import MlpParams, forward_batch

GUARD_EPS = 1e-6
PROB_FLOOR = 1e-30


class FrozenUnitError(ValueError):
    """Raised when a scalar score is requested inside the guard band."""


@dataclass
class RetentionParams:
    """One probability vector per gated layer (input through last hidden)."""

    layers: list[np.ndarray]

    def __post_init__(self):
        self.layers = [np.asarray(v, dtype=np.float64) for v in self.layers]

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def validate(self, params: MlpParams | None = None) -> None:
        for i, v in enumerate(self.layers):
            if v.ndim != 1 or v.size == 0:
                raise ValueError(f"retention vector {i} must be a non-empty 1-D array")
            if v.min() < 0.0 or v.max() > 1.0:
                raise ValueError(f"retention vector {i} leaves [0, 1]")
        if params is not None:
            dims = params.layer_dims
            if len(self.layers) != params.n_layers:
                raise ValueError(
                    f"need {params.n_layers} retention vectors, got {len(self.layers)}"
                )
            for i, v in enumerate(self.layers):
                if v.shape != (dims[i],):
                    raise ValueError(f"retention vector {i} shape {v.shape} vs width {dims[i]}")

    def copy(self) -> "RetentionParams":
        return RetentionParams([v.copy() for v in self.layers])

    def active(self, layer: int) -> np.ndarray:
        """Units still inside the open interval (eps, 1-eps)."""
        v = self.layers[layer]
        return (v > GUARD_EPS) & (v < 1.0 - GUARD_EPS)

    @classmethod
    def constant(cls, params: MlpParams, hidden: float, input_value: float = 1.0):
        dims = params.layer_dims
        vecs = [np.full(dims[0], float(input_value))]
        vecs += [np.full(dims[i], float(hidden)) for i in range(1, params.n_layers)]
        return cls(vecs)


@dataclass
class PriorHyper:
    """Powered-beta hyperparameters: density proportional to
    (p^(alpha-1) (1-p)^(beta-1))^gamma, never normalized."""

    alpha: float
    beta: float
    gamma: float

    def validate(self) -> None:
        if not (0.0 < self.alpha <= 1.0 and 0.0 < self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in (0, 1] for the bimodal regime")
        if self.gamma < 0.0:
            raise ValueError("gamma must be non-negative")


@dataclass
class RetentionUpdateConfig:
    learning_rate: float
    control_variate: float = 1.0
    importance_clamp: float = 100.0
    update_input: bool = False

    def validate(self) -> None:
        if self.learning_rate < 0.0:
            raise ValueError("retention learning rate must be non-negative")
        if self.importance_clamp <= 0.0:
            raise ValueError("importance clamp must be positive")


@dataclass
class RetentionStats:
    """Counters for the rare-event guards in the importance weight."""

    examples: int = 0
    clamped: int = 0
    floored: int = 0

    def merge(self, other: "RetentionStats") -> None:
        self.examples += other.examples
        self.clamped += other.clamped
        self.floored += other.floored


def sample_maskset(pi: RetentionParams, rng: Rng) -> list[np.ndarray]:
    """One independent Bernoulli mask vector per layer, in layer order."""
    return [bernoulli_vector(v, rng) for v in pi]


def sample_mask_block(pi: RetentionParams, n_rows: int, rng: Rng) -> list[np.ndarray]:
    """n_rows independent mask sets as one (n_rows, D_l) block per layer."""
    return [bernoulli_matrix(v, n_rows, rng) for v in pi]


def mask_score(masks, pi: RetentionParams) -> list[np.ndarray]:
    """Gradient of the mask log-probability w.r.t. each retention entry:
    m/p - (1-m)/(1-p). Frozen units report 0."""
    out = []
    for layer, m in enumerate(masks):
        m = np.asarray(m, dtype=np.float64)
        p = pi[layer]
        active = pi.active(layer).astype(np.float64)
        p_safe = np.clip(p, GUARD_EPS, 1.0 - GUARD_EPS)
        score = np.empty(np.broadcast_shapes(m.shape, p.shape))
        if m.ndim == 2:
            kernels.mask_score_kernel(np.ascontiguousarray(m), p_safe, active, score)
        else:
            score[...] = (m / p_safe - (1.0 - m) / (1.0 - p_safe)) * active
        out.append(score)
    return out


def prior_score(pi_value: float, hyper: PriorHyper) -> float:
    """Derivative of the unnormalized log-prior at one probability value."""
    if not GUARD_EPS < pi_value < 1.0 - GUARD_EPS:
        raise FrozenUnitError(f"retention value {pi_value} is inside the guard band")
    return hyper.gamma * (
        (hyper.alpha - 1.0) / pi_value - (hyper.beta - 1.0) / (1.0 - pi_value)
    )


def prior_score_vector(p: np.ndarray, hyper: PriorHyper, active: np.ndarray) -> np.ndarray:
    """Vectorized prior derivative with frozen entries zeroed."""
    p_safe = np.clip(p, GUARD_EPS, 1.0 - GUARD_EPS)
    score = hyper.gamma * (
        (hyper.alpha - 1.0) / p_safe - (hyper.beta - 1.0) / (1.0 - p_safe)
    )
    return np.where(active, score, 0.0)


def _label_probs(params, pi_or_masks, x, ks) -> np.ndarray:
    trace = forward_batch(params, x, list(pi_or_masks))
    return trace.probs[np.arange(x.shape[0]), ks]


def importance_weight(
    params: MlpParams,
    pi: RetentionParams,
    x: np.ndarray,
    k: int,
    masks,
    clamp: float = 100.0,
) -> float:
    """Ratio of the masked to the expectation-scaled label probability.

    Both probabilities are floored before dividing and the ratio is clamped
    to [0, clamp] so that rare masks cannot blow up an update.
    """
    x = np.asarray(x, dtype=np.float64)[None, :]
    ks = np.array([int(k)])
    num = max(_label_probs(params, masks, x, ks)[0], PROB_FLOOR)
    den = max(_label_probs(params, pi, x, ks)[0], PROB_FLOOR)
    return float(min(num / den, clamp))


def retention_update(
    pi: RetentionParams,
    params: MlpParams,
    batch: tuple[np.ndarray, np.ndarray],
    hyper: PriorHyper,
    cfg: RetentionUpdateConfig,
    rng: Rng,
    stats: RetentionStats | None = None,
) -> RetentionParams:
    """One clipped stochastic update of the retention probabilities.

    The prior derivative seeds the update once; each batch example then
    adds (w - C) times the mask log-prob gradient under its own sampled
    mask, where w compares the masked forward pass against the
    expectation-scaled one. The result is clipped back into [0, 1].
    """
    x, ks = batch
    x = np.asarray(x, dtype=np.float64)
    ks = np.asarray(ks)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("retention_update needs a non-empty (B, D) batch")
    cfg.validate()
    hyper.validate()

    n_layers = params.n_layers
    update_layers = [
        layer for layer in range(n_layers) if layer > 0 or cfg.update_input
    ]
    active = {layer: pi.active(layer) for layer in update_layers}

    # masks for every gated layer; frozen units draw deterministically
    mask_blocks = []
    for layer in range(n_layers):
        p = pi[layer]
        p_eff = np.where(p <= GUARD_EPS, 0.0, np.where(p >= 1.0 - GUARD_EPS, 1.0, p))
        mask_blocks.append(bernoulli_matrix(p_eff, x.shape[0], rng))

    p_masked = _label_probs(params, mask_blocks, x, ks)
    p_scaled = _label_probs(params, list(pi), x, ks)
    floored = int((p_masked < PROB_FLOOR).sum() + (p_scaled < PROB_FLOOR).sum())
    w = np.maximum(p_masked, PROB_FLOOR) / np.maximum(p_scaled, PROB_FLOOR)
    clamped = int((w > cfg.importance_clamp).sum())
    np.clip(w, 0.0, cfg.importance_clamp, out=w)
    if stats is not None:
        stats.merge(RetentionStats(examples=x.shape[0], clamped=clamped, floored=floored))

    payoff = w - cfg.control_variate
    new_layers = [v.copy() for v in pi.layers]
    for layer in update_layers:
        p = pi[layer]
        act = active[layer]
        delta = prior_score_vector(p, hyper, act)
        p_safe = np.clip(p, GUARD_EPS, 1.0 - GUARD_EPS)
        score = np.empty_like(mask_blocks[layer])
        kernels.mask_score_kernel(
            mask_blocks[layer], p_safe, act.astype(np.float64), score
        )
        delta = delta + payoff @ score
        new_layers[layer] = np.clip(p + cfg.learning_rate * delta, 0.0, 1.0)
    return RetentionParams(new_layers)
