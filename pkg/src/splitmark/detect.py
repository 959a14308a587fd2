"""Client-side anomaly detection on the gradients returned by the server.

Before federated training starts, the client trains a small shadow copy of
the full model on a fraction of its own shard and records the per-sample
gradients that appear at the split point. Those rows form a reference
cloud of "honest" gradient geometry. During training, each received
final-gradient row is scored by its mean distance to its nearest
reference rows; rows beyond a high quantile of the reference's own
self-distances are counted as outliers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .linalg import RngStream
from .nn import (
    OptimizerConfig,
    SplitSpec,
    backward_segment,
    forward_segment,
    init_split_model,
    softmax_xent,
)

__all__ = ["DetectorState", "build_reference", "score_round", "is_alert"]


@dataclass
class DetectorState:
    """Calibrated reference cloud plus the threshold and running counts."""

    reference: np.ndarray
    k_nn: int
    quantile: float
    threshold: float
    counts: list[int] = field(default_factory=list)


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a**2).sum(axis=1)[:, None]
    bb = (b**2).sum(axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * (a @ b.T), 0.0)


def _knn_mean_distance(rows: np.ndarray, reference: np.ndarray, k: int) -> np.ndarray:
    d2 = _pairwise_sq_dists(rows, reference)
    nearest = np.sort(d2, axis=1)[:, :k]
    return np.sqrt(nearest).mean(axis=1)


def build_reference(
    shard: Dataset,
    shard_fraction: float,
    spec: SplitSpec,
    rng: RngStream,
    opt: OptimizerConfig = OptimizerConfig(),
    epochs: int = 2,
    batch_size: int = 25,
    k_nn: int = 5,
    quantile: float = 0.99,
) -> DetectorState:
    """Shadow-train a local full model and calibrate the outlier threshold.

    The shadow model is freshly initialized from the detector's stream and
    trained for `epochs` passes over a shard_fraction subset of the
    client's data; every batch contributes its per-sample split-point
    gradient rows to the reference. The threshold is the `quantile` of
    each reference row's mean distance to its k_nn nearest other rows, so
    scoring the reference against itself flags at most a (1 - quantile)
    fraction.
    """
    if not 0.0 < shard_fraction <= 1.0:
        raise ValueError(f"shard_fraction must lie in (0, 1], got {shard_fraction}")
    if k_nn < 1 or epochs < 1 or batch_size < 1:
        raise ValueError("k_nn, epochs and batch_size must be >= 1")
    if not 0.0 < quantile < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {quantile}")
    n_sub = max(1, int(round(shard_fraction * len(shard))))
    sel = rng.permutation(len(shard))[:n_sub]
    sub = shard.subset(sel)
    if epochs * n_sub < k_nn + 1:
        raise ValueError(
            f"shadow training would yield {epochs * n_sub} reference rows, "
            f"need at least {k_nn + 1}"
        )
    model = init_split_model(spec, rng)
    optimizer = opt.build()
    rows = []
    for _ in range(epochs):
        order = rng.permutation(len(sub))
        for start in range(0, len(sub), batch_size):
            idx = order[start : start + batch_size]
            x, y = sub.inputs[idx], sub.labels[idx]
            a, tape_b = forward_segment(model.bottom, x)
            s, tape_m = forward_segment(model.middle, a)
            logits, tape_h = forward_segment(model.head, s)
            _, g_logits = softmax_xent(logits, y)
            g_s, head_grads = backward_segment(model.head, tape_h, g_logits)
            g_a, middle_grads = backward_segment(model.middle, tape_m, g_s)
            rows.append(g_a.copy())
            _, bottom_grads = backward_segment(model.bottom, tape_b, g_a)
            optimizer.step(
                [model.bottom, model.middle, model.head],
                [bottom_grads, middle_grads, head_grads],
            )
    reference = np.vstack(rows)
    # Self-calibration: rank each row against the others (never itself).
    d2 = _pairwise_sq_dists(reference, reference)
    np.fill_diagonal(d2, np.inf)
    nearest = np.sort(d2, axis=1)[:, :k_nn]
    self_scores = np.sqrt(nearest).mean(axis=1)
    threshold = float(np.quantile(self_scores, quantile))
    if threshold <= 0.0:
        raise ValueError("degenerate reference: calibrated threshold is zero")
    return DetectorState(reference, k_nn, quantile, threshold)


def score_round(state: DetectorState, received: np.ndarray) -> int:
    """Count outlier rows in one round's received gradients.

    A row is an outlier when its mean distance to its k_nn nearest
    reference rows exceeds the calibrated threshold. The count is appended
    to state.counts and returned.
    """
    rows = np.asarray(received, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != state.reference.shape[1]:
        raise ValueError(
            f"received gradients must be 2-D with width {state.reference.shape[1]}"
        )
    scores = _knn_mean_distance(rows, state.reference, state.k_nn)
    count = int((scores > state.threshold).sum())
    state.counts.append(count)
    return count


def is_alert(count: int, n_received: int) -> bool:
    """Raise the flag when more than half of a round's rows are outliers."""
    return count > n_received // 2
