"""Dense feed-forward networks with hand-written forward and backward passes.

A model is three segments (bottom, middle, head) so it can be cut across
the client/server boundary: the client owns bottom and head, the server
owns middle, and the split activation is the bottom's output. Each
segment is an ordered list of affine layers with relu or identity
activations. Forward passes record a tape (layer inputs plus
pre-activations) and backward passes replay it in reverse, so gradients
are exact up to float64 rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import NumericalError, RngStream

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"layer dimensions must be positive, got {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}"
            )


class Layer:
    """Affine map y = act(x @ w + b) with w of shape (in_dim, out_dim)."""

    __slots__ = ("spec", "w", "b")

    def __init__(self, spec: LayerSpec, w: np.ndarray, b: np.ndarray):
        if w.shape != (spec.in_dim, spec.out_dim) or b.shape != (spec.out_dim,):
            raise ValueError(
                f"parameter shapes {w.shape}/{b.shape} do not match {spec}"
            )
        self.spec = spec
        self.w = np.asarray(w, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)

    def copy(self) -> "Layer":
        return Layer(self.spec, self.w.copy(), self.b.copy())


class Segment:
    """An ordered stack of layers; consecutive dimensions must chain."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("a segment needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.spec.out_dim != nxt.spec.in_dim:
                raise ValueError(
                    f"layer chain breaks: {prev.spec.out_dim} -> {nxt.spec.in_dim}"
                )
        self.layers = layers

    @property
    def in_dim(self) -> int:
        return self.layers[0].spec.in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].spec.out_dim

    def specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    def copy(self) -> "Segment":
        return Segment([layer.copy() for layer in self.layers])


@dataclass
class ForwardTape:
    """Per-layer inputs and pre-activations captured during a forward pass."""

    inputs: list[np.ndarray]
    pre: list[np.ndarray]


def init_segment(specs: list[LayerSpec], rng: RngStream) -> Segment:
    """Gaussian init scaled by 1/sqrt(fan_in); biases start at zero."""
    layers = []
    for spec in specs:
        w = rng.normal(spec.in_dim * spec.out_dim).reshape(spec.in_dim, spec.out_dim)
        w /= np.sqrt(spec.in_dim)
        layers.append(Layer(spec, w, np.zeros(spec.out_dim)))
    return Segment(layers)


def forward_segment(seg: Segment, x: np.ndarray) -> tuple[np.ndarray, ForwardTape]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != seg.in_dim:
        raise ValueError(
            f"segment expects input of shape (batch, {seg.in_dim}), got {x.shape}"
        )
    tape = ForwardTape(inputs=[], pre=[])
    out = x
    for layer in seg.layers:
        tape.inputs.append(out)
        z = out @ layer.w + layer.b
        tape.pre.append(z)
        out = np.maximum(z, 0.0) if layer.spec.activation == "relu" else z
    return out, tape


def backward_segment(
    seg: Segment, tape: ForwardTape, upstream: np.ndarray
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Reverse-mode pass through a taped forward.

    upstream is dLoss/dOutput for the segment's output. Returns
    (input_gradient, grads) where grads[i] = (dW_i, db_i) aligned with
    seg.layers. The loss reduction convention (e.g. batch mean) is
    whatever the upstream gradient already encodes.
    """
    if len(tape.inputs) != len(seg.layers):
        raise ValueError("tape does not match segment depth")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != tape.pre[-1].shape:
        raise ValueError(
            f"upstream gradient shape {g.shape} does not match output {tape.pre[-1].shape}"
        )
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(seg.layers)
    for i in range(len(seg.layers) - 1, -1, -1):
        layer = seg.layers[i]
        if layer.spec.activation == "relu":
            dz = g * (tape.pre[i] > 0.0)
        else:
            dz = g
        grads[i] = (tape.inputs[i].T @ dz, dz.sum(axis=0))
        g = dz @ layer.w.T
    return g, grads


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns (loss, dLoss/dlogits); the gradient is (softmax - onehot) / batch.
    Shifted by the row max before exponentiation so large logits stay finite.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError(f"logits must be a non-empty 2-D array, got shape {z.shape}")
    if y.shape != (z.shape[0],):
        raise ValueError(f"labels shape {y.shape} does not match batch {z.shape[0]}")
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise ValueError("label outside [0, n_classes)")
    batch = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=1, keepdims=True)
    picked = shifted[np.arange(batch), y] - np.log(expz.sum(axis=1))
    loss = float(-picked.mean())
    grad = probs.copy()
    grad[np.arange(batch), y] -= 1.0
    return loss, grad / batch


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    pred = np.asarray(logits).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


@dataclass(frozen=True)
class SplitSpec:
    """Layer specs for the three segments of a split model."""

    bottom: tuple[LayerSpec, ...]
    middle: tuple[LayerSpec, ...]
    head: tuple[LayerSpec, ...]

    def __post_init__(self):
        chain = list(self.bottom) + list(self.middle) + list(self.head)
        if not (self.bottom and self.middle and self.head):
            raise ValueError("every segment needs at least one layer")
        for prev, nxt in zip(chain, chain[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    f"segment chain breaks: {prev.out_dim} -> {nxt.in_dim}"
                )

    @property
    def split_dim(self) -> int:
        return self.bottom[-1].out_dim

    @property
    def in_dim(self) -> int:
        return self.bottom[0].in_dim

    @property
    def n_classes(self) -> int:
        return self.head[-1].out_dim


class SplitModel:
    """Container for the three segments of one model replica."""

    def __init__(self, bottom: Segment, middle: Segment, head: Segment):
        if bottom.out_dim != middle.in_dim or middle.out_dim != head.in_dim:
            raise ValueError("segments do not chain at the split points")
        self.bottom = bottom
        self.middle = middle
        self.head = head

    @property
    def split_dim(self) -> int:
        return self.bottom.out_dim

    def copy(self) -> "SplitModel":
        return SplitModel(self.bottom.copy(), self.middle.copy(), self.head.copy())


def init_split_model(spec: SplitSpec, rng: RngStream) -> SplitModel:
    return SplitModel(
        init_segment(list(spec.bottom), rng),
        init_segment(list(spec.middle), rng),
        init_segment(list(spec.head), rng),
    )


def forward_full(model: SplitModel, x: np.ndarray) -> np.ndarray:
    """Inference pass through all three segments; no tape kept."""
    a, _ = forward_segment(model.bottom, x)
    s, _ = forward_segment(model.middle, a)
    out, _ = forward_segment(model.head, s)
    return out


class SgdOptimizer:
    """SGD with classical momentum and optional decoupled L2 term.

    Update rule per parameter tensor:
        v <- momentum * v + g + weight_decay * theta
        theta <- theta - lr * v
    Velocities start at zero and are keyed by position, so one optimizer
    instance must keep seeing the same segments in the same order.
    """

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr < 0.0 or momentum < 0.0 or weight_decay < 0.0:
            raise ValueError("optimizer hyperparameters must be non-negative")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[int, np.ndarray] = {}

    def step(
        self,
        segments: list[Segment],
        grads: list[list[tuple[np.ndarray, np.ndarray]]],
    ) -> None:
        if len(segments) != len(grads):
            raise ValueError("segments and gradient lists differ in length")
        slot = 0
        for seg, seg_grads in zip(segments, grads):
            if len(seg.layers) != len(seg_grads):
                raise ValueError("gradient list does not match segment depth")
            for layer, (dw, db) in zip(seg.layers, seg_grads):
                if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
                    raise NumericalError("non-finite gradient in optimizer step")
                for param, grad in ((layer.w, dw), (layer.b, db)):
                    v = self._velocity.get(slot)
                    if v is None:
                        v = np.zeros_like(param)
                        self._velocity[slot] = v
                    v *= self.momentum
                    v += grad
                    if self.weight_decay:
                        v += self.weight_decay * param
                    param -= self.lr * v
                    slot += 1


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0

    def build(self) -> SgdOptimizer:
        return SgdOptimizer(self.lr, self.momentum, self.weight_decay)


# Checkpoint format: a line-oriented text file. The header lists each
# segment's layer specs; the body carries parameters in layer order as
# float hex, one tensor per line. Hex round-trips exactly, so saving the
# same model twice produces identical bytes.

_MAGIC = "splitmodel v1"


def _fmt_vec(values: np.ndarray) -> str:
    return " ".join(float(v).hex() for v in values)


def _parse_vec(text: str) -> np.ndarray:
    return np.array([float.fromhex(tok) for tok in text.split()], dtype=np.float64)


def save_model(model: SplitModel, path: str) -> None:
    lines = [_MAGIC]
    for name in ("bottom", "middle", "head"):
        seg: Segment = getattr(model, name)
        lines.append(f"segment {name} {len(seg.layers)}")
        for layer in seg.layers:
            s = layer.spec
            lines.append(f"layer {s.in_dim} {s.out_dim} {s.activation}")
    for name in ("bottom", "middle", "head"):
        seg = getattr(model, name)
        for layer in seg.layers:
            for row in layer.w:
                lines.append("w " + _fmt_vec(row))
            lines.append("b " + _fmt_vec(layer.b))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path: str) -> SplitModel:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != _MAGIC:
        raise ValueError(f"{path} is not a {_MAGIC} checkpoint")
    pos = 1
    seg_specs: dict[str, list[LayerSpec]] = {}
    for _ in range(3):
        tag, name, count = lines[pos].split()
        if tag != "segment":
            raise ValueError(f"malformed checkpoint header at line {pos + 1}")
        pos += 1
        specs = []
        for _ in range(int(count)):
            tag, din, dout, act = lines[pos].split()
            if tag != "layer":
                raise ValueError(f"malformed layer spec at line {pos + 1}")
            specs.append(LayerSpec(int(din), int(dout), act))
            pos += 1
        seg_specs[name] = specs
    segments: dict[str, Segment] = {}
    for name in ("bottom", "middle", "head"):
        layers = []
        for spec in seg_specs[name]:
            rows = []
            for _ in range(spec.in_dim):
                tag, _, payload = lines[pos].partition(" ")
                if tag != "w":
                    raise ValueError(f"expected weight row at line {pos + 1}")
                rows.append(_parse_vec(payload))
                pos += 1
            tag, _, payload = lines[pos].partition(" ")
            if tag != "b":
                raise ValueError(f"expected bias row at line {pos + 1}")
            bias = _parse_vec(payload)
            pos += 1
            layers.append(Layer(spec, np.stack(rows), bias))
        segments[name] = Segment(layers)
    return SplitModel(segments["bottom"], segments["middle"], segments["head"])


def segments_equal(a: Segment, b: Segment) -> bool:
    """Exact (bitwise) parameter equality between two segments."""
    if a.specs() != b.specs():
        return False
    return all(
        np.array_equal(la.w, lb.w) and np.array_equal(la.b, lb.b)
        for la, lb in zip(a.layers, b.layers)
    )
