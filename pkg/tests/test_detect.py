"""kNN outlier detection of tampered gradients at the split point."""

import math

import numpy as np
import pytest

from splitmark.data import make_blobs
from splitmark.detect import DetectorState, build_reference, is_alert, score_round
from splitmark.linalg import RngStream, StreamLabel
from splitmark.nn import LayerSpec, SplitSpec


def _spec(in_dim=6, width=10, classes=3):
    return SplitSpec(
        bottom=(LayerSpec(in_dim, width, "relu"),),
        middle=(LayerSpec(width, width, "relu"),),
        head=(LayerSpec(width, classes, "identity"),),
    )


def _shard(seed=0, per_class=40):
    rng = RngStream(seed, StreamLabel.DATA, (3,))
    return make_blobs(rng, per_class, 3, 6, 0.4, 1.5)


def _state(seed=0, fraction=0.5, quantile=0.99, k_nn=5):
    return build_reference(
        _shard(seed),
        fraction,
        _spec(),
        RngStream(seed, StreamLabel.MODEL_INIT, (5,)),
        k_nn=k_nn,
        quantile=quantile,
    )


def test_reference_rows_score_under_the_quantile_budget():
    # Scoring the reference against itself includes each row's own zero
    # distance, so at most the calibration tail can exceed the threshold.
    state = _state()
    m = state.reference.shape[0]
    count = score_round(state, state.reference)
    assert count <= math.ceil((1.0 - state.quantile) * m)


def test_scaled_gradients_all_flagged():
    state = _state()
    count = score_round(state, state.reference * 1000.0)
    assert count == state.reference.shape[0]


def test_shifted_rows_flagged():
    state = _state()
    spread = np.abs(state.reference).max()
    rows = state.reference[:10] + 50.0 * spread
    assert score_round(state, rows) == 10


def test_counts_accumulate_in_order():
    state = _state()
    a = score_round(state, state.reference[:5])
    b = score_round(state, state.reference[:7] * 1000.0)
    assert state.counts == [a, b]
    assert b == 7


def test_build_reference_deterministic():
    a = _state(seed=4)
    b = _state(seed=4)
    assert np.array_equal(a.reference, b.reference)
    assert a.threshold == b.threshold


def test_threshold_positive_and_state_shape():
    state = _state()
    assert state.threshold > 0.0
    assert state.reference.ndim == 2
    assert state.reference.shape[1] == _spec().split_dim
    assert state.k_nn == 5 and state.counts == []


def test_build_reference_validation():
    shard, spec = _shard(), _spec()
    rng = RngStream(0, StreamLabel.MODEL_INIT, (5,))
    with pytest.raises(ValueError):
        build_reference(shard, 0.0, spec, rng)
    with pytest.raises(ValueError):
        build_reference(shard, 1.5, spec, rng)
    with pytest.raises(ValueError):
        build_reference(shard, 0.5, spec, rng, k_nn=0)
    with pytest.raises(ValueError):
        build_reference(shard, 0.5, spec, rng, quantile=1.0)
    with pytest.raises(ValueError):
        # one epoch on a single row cannot feed a 5-NN calibration
        build_reference(shard.subset(np.array([0])), 1.0, spec, rng, epochs=1)


def test_score_round_rejects_bad_shapes():
    state = _state()
    with pytest.raises(ValueError):
        score_round(state, state.reference[:, :-1])
    with pytest.raises(ValueError):
        score_round(state, state.reference[0])


def test_is_alert_majority_rule():
    assert is_alert(3, 5)
    assert not is_alert(2, 5)
    assert not is_alert(3, 6)
    assert is_alert(4, 6)
    assert not is_alert(0, 0)
