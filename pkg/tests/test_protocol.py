"""The four-message split protocol, FedAvg, and the experiment loop."""

import numpy as np
import pytest

from splitmark.data import PartitionSpec, make_blobs, partition, split_per_class
from splitmark.linalg import RngStream, StreamLabel
from splitmark.nn import (
    Layer,
    LayerSpec,
    OptimizerConfig,
    Segment,
    SplitSpec,
    forward_segment,
    init_split_model,
    segments_equal,
)
from splitmark.protocol import (
    ClientWorker,
    MessageKind,
    MessageLog,
    ProtocolConfig,
    ProtocolError,
    ServerWorker,
    fedavg_segments,
    run_experiment,
    train_batch,
)
from splitmark.watermark import EmbedConfig, adaptive_clip, keygen, wm_gradient
from splitmark.attacks import NoiseSpec


def _spec(width=8, classes=3, in_dim=4):
    return SplitSpec(
        bottom=(LayerSpec(in_dim, width), LayerSpec(width, width)),
        middle=(LayerSpec(width, width),),
        head=(LayerSpec(width, classes, "identity"),),
    )


def _shards(seed=0, n=30, classes=3, in_dim=4, clients=3):
    rng = RngStream(seed, StreamLabel.DATA, (0,))
    full = make_blobs(rng, n, classes, in_dim, 0.5, 3.0)
    train, test = split_per_class(full, 5)
    idx = partition(train, PartitionSpec(clients, "iid", seed=seed))
    return [train.subset(i) for i in idx], test


def _run(seed=0, lam=None, rounds=3, **kw):
    shards, test = _shards(seed)
    spec = _spec()
    cfg = ProtocolConfig(n_rounds=rounds, local_epochs=1, batch_size=5)
    key = embed = None
    if lam is not None:
        key = keygen(RngStream(seed, StreamLabel.WATERMARK_KEY), spec.split_dim, 4)
        embed = EmbedConfig(strength=lam)
    return run_experiment(spec, cfg, shards, test, seed, key=key, embed=embed, **kw)


def test_zero_strength_is_bitwise_vanilla():
    plain = _run(seed=1, lam=None)
    zeroed = _run(seed=1, lam=0.0)
    for a, b in zip(
        (plain.model.bottom, plain.model.middle, plain.model.head),
        (zeroed.model.bottom, zeroed.model.middle, zeroed.model.head),
    ):
        assert segments_equal(a, b)
    for ma, mb in zip(plain.metrics, zeroed.metrics):
        assert ma.main_loss == mb.main_loss
        assert ma.test_acc == mb.test_acc


def test_final_gradient_decomposes():
    # Drive a keyed and an unkeyed server over the same batch from
    # identical states; the keyed reply must equal task gradient plus the
    # independently recomputed clipped watermark term.
    spec = _spec()
    seed = 3
    model = init_split_model(spec, RngStream(seed, StreamLabel.MODEL_INIT))
    key = keygen(RngStream(seed, StreamLabel.WATERMARK_KEY), spec.split_dim, 4)
    embed = EmbedConfig(strength=0.5)
    shards, _ = _shards(seed)
    x, y = shards[0].inputs[:5], shards[0].labels[:5]
    opt = OptimizerConfig()

    outs = {}
    for tag, srv in (
        ("plain", ServerWorker()),
        ("keyed", ServerWorker(key=key, embed=embed)),
    ):
        client = ClientWorker(0)
        client.start_round(model.bottom, model.head, opt)
        srv.start_round(model.middle, opt)
        log = MessageLog()
        stats, g_final = train_batch(client, srv, x, y, log, 0, 0)
        a, _ = forward_segment(model.bottom, x)
        outs[tag] = (g_final, a)

    g_main, a = outs["plain"]
    g_keyed, _ = outs["keyed"]
    expected = g_main + adaptive_clip(wm_gradient(a, key), g_main, embed)
    assert np.allclose(g_keyed, expected, atol=1e-12)


def test_fedavg_single_model_unchanged():
    seg = Segment([Layer(LayerSpec(2, 2, "identity"), np.eye(2) * 3, np.ones(2))])
    out = fedavg_segments([seg], [7.0])
    assert segments_equal(out, seg)


def test_fedavg_equal_weights_mean():
    a = Segment([Layer(LayerSpec(1, 1, "identity"), np.array([[0.0]]), np.zeros(1))])
    b = Segment([Layer(LayerSpec(1, 1, "identity"), np.array([[2.0]]), np.zeros(1))])
    out = fedavg_segments([a, b], [1.0, 1.0])
    assert out.layers[0].w[0, 0] == 1.0


def test_fedavg_weighted_mean():
    a = Segment([Layer(LayerSpec(1, 1, "identity"), np.array([[0.0]]), np.zeros(1))])
    b = Segment([Layer(LayerSpec(1, 1, "identity"), np.array([[4.0]]), np.zeros(1))])
    out = fedavg_segments([a, b], [1.0, 3.0])
    assert out.layers[0].w[0, 0] == 3.0


def test_fedavg_validation():
    a = Segment([Layer(LayerSpec(1, 1, "identity"), np.array([[0.0]]), np.zeros(1))])
    with pytest.raises(ValueError):
        fedavg_segments([], [])
    with pytest.raises(ValueError):
        fedavg_segments([a, a.copy()], [1.0])
    with pytest.raises(ValueError):
        fedavg_segments([a, a.copy()], [0.0, 0.0])


def test_zero_rounds_returns_initial_model():
    res = _run(seed=5, rounds=0)
    reference = init_split_model(_spec(), RngStream(5, StreamLabel.MODEL_INIT))
    assert res.metrics == []
    assert segments_equal(res.model.bottom, reference.bottom)
    assert segments_equal(res.model.middle, reference.middle)
    assert segments_equal(res.model.head, reference.head)


def test_run_determinism():
    a = _run(seed=2, lam=0.1)
    b = _run(seed=2, lam=0.1)
    assert len(a.metrics) == len(b.metrics)
    for ma, mb in zip(a.metrics, b.metrics):
        assert ma == mb
    assert segments_equal(a.model.bottom, b.model.bottom)
    assert [m.kind for m in a.message_log.messages] == [
        m.kind for m in b.message_log.messages
    ]


def test_message_log_ordering_and_kinds():
    res = _run(seed=0, lam=0.1)
    res.message_log.verify_ordering()
    assert res.message_log.kinds() == {
        MessageKind.ACTIVATION,
        MessageKind.LOGITS,
        MessageKind.INITIAL_GRADIENT,
        MessageKind.FINAL_GRADIENT,
    }


def test_message_log_rejects_bad_order():
    log = MessageLog()
    log.append(MessageKind.ACTIVATION, 0, 0, 0, (1, 2))
    log.append(MessageKind.INITIAL_GRADIENT, 0, 0, 0, (1, 2))
    with pytest.raises(ProtocolError):
        log.verify_ordering()


def test_clip_invariant_on_batch_stats():
    lam = 0.1
    res = _run(seed=4, lam=lam, rounds=2)
    checked = 0
    for st in res.batch_stats:
        if st.g_wm_clipped_norm is None:
            continue
        assert st.g_wm_clipped_norm <= lam * st.g_main_norm * (1 + 1e-9)
        checked += 1
    assert checked > 0


def test_wsr_probe_trend_over_seeds():
    # In expectation the embedding makes the probe match rate climb:
    # final-round probe >= first-round probe on a 5-seed average.
    firsts, finals = [], []
    for seed in range(5):
        res = _run(seed=seed, lam=1.0, rounds=4)
        firsts.append(res.metrics[0].wsr_probe)
        finals.append(res.metrics[-1].wsr_probe)
    assert np.mean(finals) >= np.mean(firsts)


def test_watermark_fields_none_without_key():
    res = _run(seed=0, lam=None)
    for m in res.metrics:
        assert m.wm_loss is None and m.g_wm_norm is None and m.wsr_probe is None


def test_grad_rounds_logged_per_sample():
    res = _run(seed=0, lam=0.1, rounds=2)
    shards, _ = _shards(0)
    assert set(res.grad_rounds) == {0, 1}
    rows = res.grad_rounds[0]
    # attacker client 0 sees one row per sample per local epoch
    assert rows.shape == (len(shards[0]), _spec().split_dim)


def test_noise_config_changes_training():
    base = _run(seed=6, lam=0.1)
    noisy = _run(seed=6, lam=0.1, noise=NoiseSpec(snr=1.0))
    assert not segments_equal(base.model.bottom, noisy.model.bottom)


def test_server_worker_requires_key_and_embed_together():
    key = keygen(RngStream(0, StreamLabel.WATERMARK_KEY), 8, 4)
    with pytest.raises(ValueError):
        ServerWorker(key=key)
    with pytest.raises(ValueError):
        ServerWorker(embed=EmbedConfig(strength=0.1))


def test_client_sequencing_errors():
    client = ClientWorker(0)
    spec = _spec()
    model = init_split_model(spec, RngStream(0, StreamLabel.MODEL_INIT))
    client.start_round(model.bottom, model.head, OptimizerConfig())
    with pytest.raises(ProtocolError):
        client.apply_final(np.zeros((5, spec.split_dim)))
    client.bottom_forward(np.zeros((5, 4)))
    with pytest.raises(ProtocolError):
        client.bottom_forward(np.zeros((5, 4)))


def test_run_experiment_validation():
    spec = _spec()
    shards, test = _shards(0)
    cfg = ProtocolConfig(n_rounds=1)
    with pytest.raises(ValueError):
        run_experiment(spec, cfg, [], test, 0)
    bad_key = keygen(RngStream(0, StreamLabel.WATERMARK_KEY), 99, 4)
    with pytest.raises(ValueError):
        run_experiment(
            spec, cfg, shards, test, 0, key=bad_key, embed=EmbedConfig(strength=0.1)
        )
    with pytest.raises(ValueError):
        run_experiment(spec, cfg, shards, test, 0, key=None, embed=EmbedConfig(0.1))


def test_capability_boundary_interfaces():
    # The server type carries no label/input/parameter state beyond its
    # middle segment; the client type carries no watermark state.
    server_attrs = set(vars(ServerWorker()).keys())
    assert {"key", "embed", "middle"} <= server_attrs
    assert not {"labels", "inputs", "bottom", "head"} & server_attrs
    client_attrs = set(vars(ClientWorker(0)).keys())
    assert not {"key", "embed", "bits", "strength"} & client_attrs
