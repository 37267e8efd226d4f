"""Structural surgery on trained networks.

Pruning deletes whole units (matrix rows plus the matching downstream
columns), absorption folds retention scaling into the next layer's
weights, and the SVD path replaces a hidden-to-hidden matrix with a
rank-k linear bottleneck pair. Weight counts exclude biases throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import truncated_svd
from .network import MlpParams
from .retention import RetentionParams


class EmptyLayerError(RuntimeError):
    """Pruning would remove every unit of a hidden layer."""


@dataclass
class CompactionReport:
    kept: list[int]
    removed: list[int]
    weights_before: int
    weights_after: int
    kept_indices: list[np.ndarray]
    unit_map: list[np.ndarray]

    @property
    def compression_ratio(self) -> float:
        """Original weights per remaining weight (>= 1 after pruning)."""
        return self.weights_before / self.weights_after

    def summary(self) -> str:
        layers = ", ".join(
            f"L{i + 1}: kept {k} removed {r}"
            for i, (k, r) in enumerate(zip(self.kept, self.removed))
        )
        return (
            f"{layers}; weights {self.weights_before} -> {self.weights_after}"
            f" ({self.compression_ratio:.2f}x)"
        )


def count_weights(params: MlpParams) -> int:
    """Total weight-matrix entries; biases excluded by convention."""
    return int(sum(w.size for w in params.weights))


def prune_units(
    params: MlpParams, pi: RetentionParams, threshold: float
) -> tuple[MlpParams, RetentionParams, CompactionReport]:
    """Remove hidden units whose retention probability is below threshold.

    Deletes the unit's weight row, bias entry, downstream weight columns
    and retention entry. Input and output layers are never pruned. Raises
    EmptyLayerError if a hidden layer would lose every unit.
    """
    if not 0.0 <= threshold < 1.0:
        raise ValueError(f"prune threshold {threshold} outside [0, 1)")
    pi.validate(params)
    dims = params.layer_dims
    n = params.n_layers

    keep: list[np.ndarray] = [np.arange(dims[0])]
    for layer in range(1, n):
        kept = np.flatnonzero(pi[layer] >= threshold)
        if kept.size == 0:
            raise EmptyLayerError(
                f"pruning at threshold {threshold} empties hidden layer {layer}"
            )
        keep.append(kept)
    keep.append(np.arange(dims[n]))  # output layer untouched

    weights = [
        params.weights[i][np.ix_(keep[i + 1], keep[i])] for i in range(n)
    ]
    biases = [params.biases[i][keep[i + 1]] for i in range(n)]
    pruned = MlpParams(weights, biases, tuple(params.hidden_activations))
    new_pi = RetentionParams([pi[layer][keep[layer]] for layer in range(n)])

    unit_map = []
    for layer in range(n + 1):
        m = np.full(dims[layer], -1, dtype=np.int64)
        m[keep[layer]] = np.arange(keep[layer].size)
        unit_map.append(m)
    report = CompactionReport(
        kept=[int(keep[layer].size) for layer in range(1, n)],
        removed=[int(dims[layer] - keep[layer].size) for layer in range(1, n)],
        weights_before=count_weights(params),
        weights_after=count_weights(pruned),
        kept_indices=keep,
        unit_map=unit_map,
    )
    return pruned, new_pi, report


def absorb_retention(params: MlpParams, pi: RetentionParams) -> MlpParams:
    """Fold retention scaling into the consuming weight matrices.

    Column u of the matrix reading layer l is scaled by that layer's
    retention probability, so a plain all-ones forward pass reproduces the
    expectation-scaled one.
    """
    pi.validate(params)
    weights = [params.weights[i] * pi[i][None, :] for i in range(params.n_layers)]
    return MlpParams(weights, [b.copy() for b in params.biases], tuple(params.hidden_activations))


def svd_compact(params: MlpParams, bottleneck) -> MlpParams:
    """Replace each hidden-to-hidden matrix by a rank-k linear bottleneck.

    ``bottleneck`` is one rank or a sequence with one rank per
    hidden-to-hidden matrix. Each matrix W becomes the pair
    (sqrt(s) V^T, U sqrt(s)): a new zero-bias linear layer of width k
    followed by a layer carrying the original bias and activation. The
    result approximates the original and is meant to be fine-tuned.
    """
    n = params.n_layers
    targets = list(range(1, n - 1))  # matrices touching only hidden layers
    if not targets:
        raise ValueError("network has no hidden-to-hidden matrix to factorize")
    if np.isscalar(bottleneck):
        ranks = [int(bottleneck)] * len(targets)
    else:
        ranks = [int(k) for k in bottleneck]
        if len(ranks) != len(targets):
            raise ValueError(f"need {len(targets)} ranks, got {len(ranks)}")
    for i, k in zip(targets, ranks):
        lo = min(params.weights[i].shape)
        if not 1 <= k <= lo:
            raise ValueError(f"rank {k} out of range for matrix {i + 1} ({lo} max)")

    weights: list[np.ndarray] = []
    biases: list[np.ndarray] = []
    produced_acts: list[str | None] = []  # activation of each produced layer
    rank_of = dict(zip(targets, ranks))
    for i in range(n):
        act = params.hidden_activations[i] if i < n - 1 else None
        if i in rank_of:
            u, s, v = truncated_svd(params.weights[i], rank_of[i])
            root = np.sqrt(s)
            # (k, D_in) zero-bias linear factor; keep C-order for the trainer
            weights.append(np.ascontiguousarray(root[:, None] * v.T))
            biases.append(np.zeros(rank_of[i]))
            produced_acts.append("linear")
            weights.append(np.ascontiguousarray(u * root[None, :]))  # (D_out, k)
            biases.append(params.biases[i].copy())
            produced_acts.append(act)
        else:
            weights.append(params.weights[i].copy())
            biases.append(params.biases[i].copy())
            produced_acts.append(act)
    assert produced_acts[-1] is None
    out = MlpParams(weights, biases, tuple(produced_acts[:-1]))
    out.validate()
    return out
