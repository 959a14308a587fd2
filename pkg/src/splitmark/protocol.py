"""U-shaped split federated learning with server-side watermark injection.

The client party owns the bottom and head segments plus its data and
labels; the server party owns the middle segment and, when embedding is
enabled, the watermark secret. One training step exchanges exactly four
messages, always in this order:

    Activation       client -> server   A = bottom(x)
    Logits           server -> client   S = middle(A)
    InitialGradient  client -> server   dL/dS after the client's head step
    FinalGradient    server -> client   dL/dA, plus the clipped watermark
                                        term when a key is loaded

Labels, raw inputs, and client parameters never cross to the server;
the key, bit string, and embedding strength never cross to the client.
The two party classes below have no interface that could carry them, and
the message log records every payload kind so tests can audit the
boundary after a run.

Rounds follow the federated pattern: every client trains locally for a
fixed number of epochs against its own replica of the server segment,
then both sides are aggregated by shard-size-weighted averaging.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .attacks import NoiseSpec, inject_noise
from .data import Dataset
from .detect import DetectorState, score_round
from .linalg import RngStream, StreamLabel, cosine
from .nn import (
    OptimizerConfig,
    Segment,
    SplitModel,
    SplitSpec,
    accuracy,
    backward_segment,
    forward_full,
    forward_segment,
    init_split_model,
    softmax_xent,
)
from .watermark import (
    EmbedConfig,
    WatermarkKey,
    adaptive_clip,
    compose,
    verify,
    wm_gradient,
    wm_loss,
)


class ProtocolError(RuntimeError):
    """A message arrived out of order or a party was driven out of sequence."""


class MessageKind(Enum):
    ACTIVATION = "activation"
    LOGITS = "logits"
    INITIAL_GRADIENT = "initial_gradient"
    FINAL_GRADIENT = "final_gradient"


_BATCH_SEQUENCE = (
    MessageKind.ACTIVATION,
    MessageKind.LOGITS,
    MessageKind.INITIAL_GRADIENT,
    MessageKind.FINAL_GRADIENT,
)


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    round_idx: int
    client: int
    batch: int
    shape: tuple[int, ...]


class MessageLog:
    """Append-only record of every tensor that crossed the split boundary."""

    def __init__(self):
        self.messages: list[Message] = []

    def append(self, kind, round_idx, client, batch, shape) -> None:
        self.messages.append(Message(kind, round_idx, client, batch, tuple(shape)))

    def kinds(self) -> set[MessageKind]:
        return {m.kind for m in self.messages}

    def verify_ordering(self) -> None:
        """Every (round, client, batch) triple must show the exact
        four-message sequence; anything else raises ProtocolError."""
        groups: dict[tuple[int, int, int], list[MessageKind]] = {}
        for m in self.messages:
            groups.setdefault((m.round_idx, m.client, m.batch), []).append(m.kind)
        for key, kinds in groups.items():
            if tuple(kinds) != _BATCH_SEQUENCE:
                raise ProtocolError(
                    f"batch {key} exchanged {[k.value for k in kinds]}, "
                    f"expected {[k.value for k in _BATCH_SEQUENCE]}"
                )


@dataclass
class BatchStats:
    """Scalars observed while processing one batch."""

    main_loss: float
    train_acc: float
    g_main_norm: float
    wm_loss: float | None = None
    g_wm_raw_norm: float | None = None
    g_wm_clipped_norm: float | None = None
    cos_main_wm: float | None = None


class ClientWorker:
    """Client party: bottom + head parameters, label access, local updates.

    Holds no watermark state of any kind. The optional noise spec models a
    malicious client perturbing the gradient it applies (the received
    message itself is left untouched).
    """

    def __init__(
        self,
        index: int,
        noise: NoiseSpec | None = None,
        noise_rng: RngStream | None = None,
    ):
        self.index = index
        self.noise = noise
        self.noise_rng = noise_rng
        if noise is not None and noise_rng is None:
            raise ValueError("noise injection needs a noise stream")
        self.bottom: Segment | None = None
        self.head: Segment | None = None
        self._opt = None
        self._tape_bottom = None
        self._tape_head = None
        self._head_grads = None

    def start_round(self, bottom: Segment, head: Segment, opt_cfg: OptimizerConfig):
        self.bottom = bottom.copy()
        self.head = head.copy()
        self._opt = opt_cfg.build()
        self._tape_bottom = None

    def bottom_forward(self, x: np.ndarray) -> np.ndarray:
        if self._tape_bottom is not None:
            raise ProtocolError("previous batch was never completed")
        a, self._tape_bottom = forward_segment(self.bottom, x)
        return a

    def head_step(self, s: np.ndarray, labels: np.ndarray):
        """Run the head on the returned activations and start backprop.

        Returns (loss, batch accuracy, dLoss/dS). The head's own parameter
        gradients are held back and applied together with the bottom's in
        apply_final.
        """
        logits, self._tape_head = forward_segment(self.head, s)
        loss, g_logits = softmax_xent(logits, labels)
        g_initial, self._head_grads = backward_segment(
            self.head, self._tape_head, g_logits
        )
        return loss, accuracy(logits, labels), g_initial

    def apply_final(self, g_final: np.ndarray) -> None:
        if self._tape_bottom is None or self._head_grads is None:
            raise ProtocolError("apply_final called before the batch exchange")
        g = g_final
        if self.noise is not None:
            g = inject_noise(g_final, self.noise, self.noise_rng)
        _, bottom_grads = backward_segment(self.bottom, self._tape_bottom, g)
        self._opt.step([self.bottom, self.head], [bottom_grads, self._head_grads])
        self._tape_bottom = None
        self._head_grads = None


class ServerWorker:
    """Server party: middle parameters plus (optionally) the watermark secret.

    Sees only activations and gradients; there is no code path through
    which labels, inputs, or client parameters could reach it.
    """

    def __init__(
        self, key: WatermarkKey | None = None, embed: EmbedConfig | None = None
    ):
        if (key is None) != (embed is None):
            raise ValueError("key and embed config must be provided together")
        self.key = key
        self.embed = embed
        self.middle: Segment | None = None
        self._opt = None
        self._tape = None
        self._activation = None

    def start_round(self, middle: Segment, opt_cfg: OptimizerConfig):
        self.middle = middle.copy()
        self._opt = opt_cfg.build()
        self._tape = None

    def middle_forward(self, a: np.ndarray) -> np.ndarray:
        if self._tape is not None:
            raise ProtocolError("previous batch was never completed")
        self._activation = a
        s, self._tape = forward_segment(self.middle, a)
        return s

    def grad_reply(self, g_initial: np.ndarray):
        """Update the middle segment and build the gradient sent back.

        The task gradient at the split point is computed from the forward
        tape before the update is applied. When a key is loaded the
        watermark gradient is derived from the stored activations, clipped
        against the task gradient, and added; with strength exactly zero
        the reply is the task gradient object itself, so a disabled
        embedding is bit-identical to the vanilla protocol.
        """
        if self._tape is None:
            raise ProtocolError("grad_reply called before middle_forward")
        g_main, middle_grads = backward_segment(self.middle, self._tape, g_initial)
        self._opt.step([self.middle], [middle_grads])
        self._tape = None
        stats = {
            "g_main_norm": float(np.sqrt((g_main**2).sum())),
            "wm_loss": None,
            "g_wm_raw_norm": None,
            "g_wm_clipped_norm": None,
            "cos_main_wm": None,
        }
        g_final = g_main
        if self.key is not None:
            a = self._activation
            g_wm = wm_gradient(a, self.key)
            g_clipped = adaptive_clip(g_wm, g_main, self.embed)
            stats["wm_loss"] = wm_loss(a, self.key)
            stats["g_wm_raw_norm"] = float(np.sqrt((g_wm**2).sum()))
            stats["g_wm_clipped_norm"] = float(np.sqrt((g_clipped**2).sum()))
            stats["cos_main_wm"] = cosine(g_main, g_wm)
            if self.embed.strength > 0.0:
                g_final = compose(g_main, g_clipped)
        self._activation = None
        return g_final, stats


def train_batch(
    client: ClientWorker,
    server: ServerWorker,
    x: np.ndarray,
    y: np.ndarray,
    log: MessageLog,
    round_idx: int,
    batch_idx: int,
) -> tuple[BatchStats, np.ndarray]:
    """One full exchange over a batch; returns stats and the final gradient
    as sent by the server (before any client-side noise)."""
    a = client.bottom_forward(x)
    log.append(MessageKind.ACTIVATION, round_idx, client.index, batch_idx, a.shape)
    s = server.middle_forward(a)
    log.append(MessageKind.LOGITS, round_idx, client.index, batch_idx, s.shape)
    loss, acc, g_initial = client.head_step(s, y)
    log.append(
        MessageKind.INITIAL_GRADIENT, round_idx, client.index, batch_idx, g_initial.shape
    )
    g_final, server_stats = server.grad_reply(g_initial)
    log.append(
        MessageKind.FINAL_GRADIENT, round_idx, client.index, batch_idx, g_final.shape
    )
    client.apply_final(g_final)
    stats = BatchStats(main_loss=loss, train_acc=acc, **server_stats)
    return stats, g_final


def fedavg_segments(segments: list[Segment], weights) -> Segment:
    """Parameter-wise weighted average of structurally identical segments."""
    if not segments:
        raise ValueError("nothing to aggregate")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(segments),):
        raise ValueError("one weight per segment is required")
    if np.any(w < 0.0) or w.sum() <= 0.0:
        raise ValueError("weights must be non-negative and not all zero")
    w = w / w.sum()
    ref = segments[0].specs()
    for seg in segments[1:]:
        if seg.specs() != ref:
            raise ValueError("segments must share layer specs to aggregate")
    out = segments[0].copy()
    for li, layer in enumerate(out.layers):
        layer.w = sum(
            wi * seg.layers[li].w for wi, seg in zip(w, segments)
        )
        layer.b = sum(
            wi * seg.layers[li].b for wi, seg in zip(w, segments)
        )
    return out


@dataclass(frozen=True)
class ProtocolConfig:
    n_rounds: int
    local_epochs: int = 2
    batch_size: int = 25
    client_opt: OptimizerConfig = OptimizerConfig()
    server_opt: OptimizerConfig = OptimizerConfig()
    probe_samples: int = 64
    attacker_client: int = 0
    detector_client: int = 0

    def __post_init__(self):
        if self.n_rounds < 0:
            raise ValueError("n_rounds must be >= 0")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be >= 1")
        if self.probe_samples < 1:
            raise ValueError("probe_samples must be >= 1")


@dataclass
class RoundMetrics:
    """Per-round aggregates; watermark and detector fields stay None when
    the corresponding feature is disabled."""

    round_idx: int
    main_loss: float
    g_main_norm: float
    train_acc: float
    test_acc: float | None
    wm_loss: float | None = None
    g_wm_norm: float | None = None
    cos_main_wm: float | None = None
    wsr_probe: float | None = None
    outliers: int | None = None


@dataclass
class RunResult:
    """Everything a run leaves behind.

    grad_rounds maps round index to the final gradients the designated
    attacker client received that round, stacked per sample; this is the
    raw material for subspace estimation.
    """

    metrics: list[RoundMetrics]
    model: SplitModel
    message_log: MessageLog
    batch_stats: list[BatchStats]
    grad_rounds: dict[int, np.ndarray]


def _mean_or_none(values: list) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def run_experiment(
    spec: SplitSpec,
    cfg: ProtocolConfig,
    shards: list[Dataset],
    test: Dataset | None,
    seed: int,
    key: WatermarkKey | None = None,
    embed: EmbedConfig | None = None,
    noise: NoiseSpec | None = None,
    detector: DetectorState | None = None,
) -> RunResult:
    """Train for cfg.n_rounds federated rounds and return the aggregate.

    Determinism contract: every random draw comes from streams derived
    from (seed, purpose label, indices), so two calls with equal arguments
    produce bit-identical models, metrics, and logs. Per round, each
    client trains local_epochs passes over its shard against a private
    replica of the server segment; afterwards client and server sides are
    both averaged with shard-size weights. When a key is given, the
    aggregated bottom is probed after every round with fresh random inputs
    and the match rate is recorded. When a detector state is given, the
    per-sample final gradients received by the detector client are scored
    once per round.
    """
    if (key is None) != (embed is None):
        raise ValueError("key and embed config must be provided together")
    if not shards:
        raise ValueError("at least one client shard is required")
    for i, shard in enumerate(shards):
        if len(shard) < 1:
            raise ValueError(f"client {i} has an empty shard")
        if shard.inputs.shape[1] != spec.in_dim:
            raise ValueError("shard input width does not match the model spec")
    if key is not None and key.d != spec.split_dim:
        raise ValueError(
            f"key dimension {key.d} does not match split width {spec.split_dim}"
        )

    init_rng = RngStream(seed, StreamLabel.MODEL_INIT)
    probe_rng = RngStream(seed, StreamLabel.VERIFICATION, (1,))
    n_clients = len(shards)
    shuffle_rngs = [
        RngStream(seed, StreamLabel.DATA, (2, ci)) for ci in range(n_clients)
    ]
    noise_rngs = [
        RngStream(seed, StreamLabel.NOISE, (ci,)) if noise is not None else None
        for ci in range(n_clients)
    ]

    model = init_split_model(spec, init_rng)
    clients = [
        ClientWorker(ci, noise=noise, noise_rng=noise_rngs[ci])
        for ci in range(n_clients)
    ]
    server = ServerWorker(key=key, embed=embed)
    log = MessageLog()
    weights = np.array([len(s) for s in shards], dtype=np.float64)

    metrics: list[RoundMetrics] = []
    all_stats: list[BatchStats] = []
    grad_rounds: dict[int, np.ndarray] = {}

    for t in range(cfg.n_rounds):
        round_stats: list[BatchStats] = []
        bottoms, heads, middles = [], [], []
        grad_log_rows: list[np.ndarray] = []
        detector_rows: list[np.ndarray] = []
        for ci, client in enumerate(clients):
            client.start_round(model.bottom, model.head, cfg.client_opt)
            server.start_round(model.middle, cfg.server_opt)
            shard = shards[ci]
            batch_idx = 0
            for _ in range(cfg.local_epochs):
                order = shuffle_rngs[ci].permutation(len(shard))
                for start in range(0, len(shard), cfg.batch_size):
                    sel = order[start : start + cfg.batch_size]
                    stats, g_final = train_batch(
                        client,
                        server,
                        shard.inputs[sel],
                        shard.labels[sel],
                        log,
                        t,
                        batch_idx,
                    )
                    batch_idx += 1
                    round_stats.append(stats)
                    if ci == cfg.attacker_client:
                        grad_log_rows.append(g_final)
                    if detector is not None and ci == cfg.detector_client:
                        detector_rows.append(g_final)
            bottoms.append(client.bottom)
            heads.append(client.head)
            middles.append(server.middle)
        model = SplitModel(
            fedavg_segments(bottoms, weights),
            fedavg_segments(middles, weights),
            fedavg_segments(heads, weights),
        )

        test_acc = None
        if test is not None and len(test) > 0:
            test_acc = accuracy(forward_full(model, test.inputs), test.labels)
        wsr = None
        if key is not None:
            wsr = verify(
                model.bottom, key, probe_rng.child(t), n_samples=cfg.probe_samples
            ).wsr
        outliers = None
        if detector is not None and detector_rows:
            outliers = score_round(detector, np.vstack(detector_rows))
        metrics.append(
            RoundMetrics(
                round_idx=t,
                main_loss=_mean_or_none([s.main_loss for s in round_stats]),
                g_main_norm=_mean_or_none([s.g_main_norm for s in round_stats]),
                train_acc=_mean_or_none([s.train_acc for s in round_stats]),
                test_acc=test_acc,
                wm_loss=_mean_or_none([s.wm_loss for s in round_stats]),
                g_wm_norm=_mean_or_none([s.g_wm_clipped_norm for s in round_stats]),
                cos_main_wm=_mean_or_none([s.cos_main_wm for s in round_stats]),
                wsr_probe=wsr,
                outliers=outliers,
            )
        )
        all_stats.extend(round_stats)
        if grad_log_rows:
            grad_rounds[t] = np.vstack(grad_log_rows)

    log.verify_ordering()
    return RunResult(
        metrics=metrics,
        model=model,
        message_log=log,
        batch_stats=all_stats,
        grad_rounds=grad_rounds,
    )
