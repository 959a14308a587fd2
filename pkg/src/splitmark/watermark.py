"""Activation-space watermarking: key generation, embedding gradients,
data-free verification, and null-model threshold calibration.

A key is a random projection matrix M (one column per payload bit) plus a
bit string b. Embedding treats the split activations as the carrier: the
server adds the gradient of a binary cross-entropy between sigmoid(A @ M)
and b to the task gradient it returns, after clipping that extra term to a
fixed fraction of the task gradient's norm. Verification needs no task
data: random probe inputs are pushed through the client's bottom segment
and the recovered bits are compared against b.

The embedding gradient has closed form. With P = A @ M and
C = (sigmoid(P) - b) / (batch * k), the gradient of the mean BCE with
respect to A is C @ M^T, so every row lies in the span of M's columns.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np

from .linalg import RngStream, as_matrix, gaussian_matrix
from .nn import Segment, forward_segment

__all__ = [
    "WatermarkKey",
    "EmbedConfig",
    "VerificationReport",
    "NullCalibration",
    "keygen",
    "wm_loss",
    "wm_gradient",
    "adaptive_clip",
    "compose",
    "predict_bits",
    "verify",
    "summarize_null",
    "calibrate_threshold",
    "save_key",
    "load_key",
]


@dataclass(frozen=True)
class WatermarkKey:
    """Secret key: projection matrix m (d x k) and target bits (k,)."""

    m: np.ndarray
    bits: np.ndarray
    seed: int = 0

    def __post_init__(self):
        m = as_matrix(self.m, "key matrix")
        bits = np.asarray(self.bits, dtype=np.float64)
        if bits.ndim != 1 or bits.shape[0] != m.shape[1]:
            raise ValueError(
                f"bits shape {bits.shape} does not match key width {m.shape[1]}"
            )
        if not np.all((bits == 0.0) | (bits == 1.0)):
            raise ValueError("bits must be 0 or 1")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "bits", bits)

    @property
    def d(self) -> int:
        return self.m.shape[0]

    @property
    def k(self) -> int:
        return self.m.shape[1]


@dataclass(frozen=True)
class EmbedConfig:
    """Embedding strength and clipping behavior.

    strength is the ratio cap: the injected gradient is clipped so its norm
    never exceeds strength times the task gradient's norm. Norms are taken
    over the whole batch tensor unless per_sample is set, which clips each
    row against the matching task-gradient row instead.
    """

    strength: float
    epsilon: float = 1e-12
    per_sample: bool = False

    def __post_init__(self):
        if self.strength < 0.0:
            raise ValueError(f"strength must be >= 0, got {self.strength}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class VerificationReport:
    wsr: float
    per_bit: np.ndarray
    n_samples: int
    threshold: float
    passed: bool


@dataclass(frozen=True)
class NullCalibration:
    """Null WSR statistics over (key, clean model) pairs.

    tau_5sigma = mean + 5 * std, clamped to [0, 1]. degenerate flags a null
    sample whose spread collapsed below the 1e-6 floor (the floor is used
    in that case, so tau stays strictly above the mean).
    """

    null_wsrs: np.ndarray
    mean: float
    std: float
    tau_5sigma: float
    degenerate: bool


def keygen(rng: RngStream, d: int, k: int) -> WatermarkKey:
    """Draw a fresh key: M is d x k IID standard normal, bits fair coins."""
    if d < 1 or k < 1:
        raise ValueError(f"key dimensions must be positive, got d={d}, k={k}")
    if k > d:
        warnings.warn(
            f"key width k={k} exceeds carrier dimension d={d}; key columns "
            "cannot be linearly independent",
            stacklevel=2,
        )
    m = gaussian_matrix(rng, d, k)
    bits = (rng.uniform(k) < 0.5).astype(np.float64)
    return WatermarkKey(m, bits, seed=rng.seed)


def _sigmoid(p: np.ndarray) -> np.ndarray:
    out = np.empty_like(p)
    pos = p >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-p[pos]))
    ep = np.exp(p[~pos])
    out[~pos] = ep / (1.0 + ep)
    return out


def _projections(a_flat: np.ndarray, key: WatermarkKey) -> np.ndarray:
    a = as_matrix(a_flat, "activations")
    if a.shape[0] < 1:
        raise ValueError("activation batch is empty")
    if a.shape[1] != key.d:
        raise ValueError(
            f"activation width {a.shape[1]} does not match key dimension {key.d}"
        )
    return a @ key.m


def wm_loss(a_flat: np.ndarray, key: WatermarkKey) -> float:
    """Mean binary cross-entropy between sigmoid(A @ M) and the key bits.

    Uses the standard overflow-safe form
    max(p, 0) - p * b + log(1 + exp(-|p|)), averaged over batch and bits.
    """
    p = _projections(a_flat, key)
    losses = np.maximum(p, 0.0) - p * key.bits + np.log1p(np.exp(-np.abs(p)))
    return float(losses.mean())


def wm_gradient(a_flat: np.ndarray, key: WatermarkKey) -> np.ndarray:
    """Analytic gradient of wm_loss with respect to the activations.

    Returns (sigmoid(A @ M) - b) / (batch * k) @ M^T; each row is a linear
    combination of key columns, so the whole tensor lies in span(M).
    """
    p = _projections(a_flat, key)
    coeff = (_sigmoid(p) - key.bits) / (p.shape[0] * key.k)
    return coeff @ key.m.T


def adaptive_clip(
    g_wm: np.ndarray, g_main: np.ndarray, cfg: EmbedConfig
) -> np.ndarray:
    """Scale the watermark gradient to at most strength * ||task gradient||.

    factor = min(1, strength * ||g_main|| / (||g_wm|| + epsilon)); the
    gradient is only ever shrunk, never amplified.
    """
    gw = as_matrix(g_wm, "watermark gradient")
    gm = as_matrix(g_main, "task gradient")
    if gw.shape != gm.shape:
        raise ValueError(f"gradient shapes differ: {gw.shape} vs {gm.shape}")
    if cfg.per_sample:
        wm_norms = np.sqrt((gw**2).sum(axis=1))
        main_norms = np.sqrt((gm**2).sum(axis=1))
        factor = np.minimum(1.0, cfg.strength * main_norms / (wm_norms + cfg.epsilon))
        return gw * factor[:, None]
    wm_norm = float(np.sqrt((gw**2).sum()))
    main_norm = float(np.sqrt((gm**2).sum()))
    factor = min(1.0, cfg.strength * main_norm / (wm_norm + cfg.epsilon))
    return gw * factor


def compose(g_main: np.ndarray, g_wm_clipped: np.ndarray) -> np.ndarray:
    gm = as_matrix(g_main, "task gradient")
    gw = as_matrix(g_wm_clipped, "clipped watermark gradient")
    if gm.shape != gw.shape:
        raise ValueError(f"gradient shapes differ: {gm.shape} vs {gw.shape}")
    return gm + gw


def predict_bits(bottom: Segment, key: WatermarkKey, probes: np.ndarray) -> np.ndarray:
    """Recover one bit row per probe: sigmoid(A' @ M) rounded, ties to 1."""
    a, _ = forward_segment(bottom, probes)
    p = a @ key.m
    # sigmoid(p) >= 0.5 exactly when p >= 0, so rounding needs no sigmoid.
    return (p >= 0.0).astype(np.float64)


def verify(
    bottom: Segment,
    key: WatermarkKey,
    rng: RngStream,
    n_samples: int = 256,
    tau: float = 0.7,
) -> VerificationReport:
    """Data-free watermark check against standard-normal probe inputs.

    WSR is the fraction of matching (sample, bit) cells over n_samples
    probes; ownership is asserted when WSR strictly exceeds tau.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if key.d != bottom.out_dim:
        raise ValueError(
            f"key dimension {key.d} does not match bottom output {bottom.out_dim}"
        )
    probes = rng.normal(n_samples * bottom.in_dim).reshape(n_samples, bottom.in_dim)
    pred = predict_bits(bottom, key, probes)
    matches = pred == key.bits
    wsr = float(matches.mean())
    return VerificationReport(
        wsr=wsr,
        per_bit=matches.mean(axis=0),
        n_samples=n_samples,
        threshold=tau,
        passed=wsr > tau,
    )


def summarize_null(
    null_wsrs, sigma_multiplier: float = 5.0, std_floor: float = 1e-6
) -> NullCalibration:
    """Fit mean/std to null WSRs and place the threshold 5 sigma above."""
    wsrs = np.asarray(null_wsrs, dtype=np.float64).ravel()
    if wsrs.size < 2:
        raise ValueError("need at least 2 null WSR values")
    mean = float(wsrs.mean())
    std = float(wsrs.std(ddof=1))
    degenerate = std < std_floor
    if degenerate:
        std = std_floor
    tau = min(1.0, max(0.0, mean + sigma_multiplier * std))
    return NullCalibration(wsrs, mean, std, tau, degenerate)


def calibrate_threshold(
    clean_bottoms: list[Segment],
    k: int,
    key_rng: RngStream,
    probe_rng: RngStream,
    n_keys: int = 20,
    n_samples: int = 256,
) -> NullCalibration:
    """Null distribution of WSR over fresh keys crossed with clean models.

    Every (model, key) pair contributes one WSR measured exactly like
    verify(), with per-pair probe sub-streams. Requires at least 2 clean
    models and 10 keys so the std estimate is not vacuous.
    """
    if len(clean_bottoms) < 2:
        raise ValueError("need at least 2 clean models to calibrate")
    if n_keys < 10:
        raise ValueError("need at least 10 keys to calibrate")
    d = clean_bottoms[0].out_dim
    for seg in clean_bottoms:
        if seg.out_dim != d or seg.in_dim != clean_bottoms[0].in_dim:
            raise ValueError("clean models must share input and split dimensions")
    keys = [keygen(key_rng.child(j), d, k) for j in range(n_keys)]
    wsrs = np.empty((len(clean_bottoms), n_keys))
    for i, seg in enumerate(clean_bottoms):
        for j, key in enumerate(keys):
            report = verify(seg, key, probe_rng.child(i, j), n_samples=n_samples, tau=1.0)
            wsrs[i, j] = report.wsr
    return summarize_null(wsrs.ravel())


# Key file format: ascii text, one field per line. The checksum line holds
# the sha256 of everything above it, so corruption is detected on load.

_KEY_MAGIC = "wmkey v1"


def save_key(key: WatermarkKey, path: str) -> None:
    lines = [_KEY_MAGIC, f"d {key.d}", f"k {key.k}", f"seed {key.seed}"]
    for row in key.m:
        lines.append("m " + " ".join(float(v).hex() for v in row))
    lines.append("bits " + "".join(str(int(b)) for b in key.bits))
    body = "\n".join(lines)
    digest = hashlib.sha256(body.encode("ascii")).hexdigest()
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(body + f"\nchecksum {digest}\n")


def load_key(path: str) -> WatermarkKey:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != _KEY_MAGIC:
        raise ValueError(f"{path} is not a {_KEY_MAGIC} file")
    if not lines[-1].startswith("checksum "):
        raise ValueError("key file is missing its checksum line")
    body = "\n".join(lines[:-1])
    expected = lines[-1].split(" ", 1)[1]
    actual = hashlib.sha256(body.encode("ascii")).hexdigest()
    if actual != expected:
        raise ValueError("key file checksum mismatch; file is corrupt")
    fields = dict(ln.split(" ", 1) for ln in lines[1:4])
    d, k, seed = int(fields["d"]), int(fields["k"]), int(fields["seed"])
    rows = []
    for ln in lines[4 : 4 + d]:
        tag, _, payload = ln.partition(" ")
        if tag != "m":
            raise ValueError("malformed key matrix row")
        rows.append([float.fromhex(tok) for tok in payload.split()])
    bits_line = lines[4 + d]
    if not bits_line.startswith("bits "):
        raise ValueError("malformed bits line")
    bits = np.array([float(ch) for ch in bits_line.split(" ", 1)[1]])
    m = np.array(rows, dtype=np.float64)
    if m.shape != (d, k):
        raise ValueError(f"key matrix shape {m.shape} does not match header ({d}, {k})")
    return WatermarkKey(m, bits, seed=seed)
