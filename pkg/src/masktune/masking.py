"""Binary masks over frozen weight matrices.

A :class:`MaskedLinear` keeps its pretrained weight ``theta`` and bias fixed
and learns a real-valued mask ``M``. The forward pass uses
``theta * (M > alpha)``; gradients reach ``M`` through the straight-through
rule in :func:`ste_gradient`.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .numerics import DimensionError, Tensor, linear

PARAMETER = "parameter"
INPUT_CHANNEL = "input-channel"
OUTPUT_CHANNEL = "output-channel"
GRANULARITIES = (PARAMETER, INPUT_CHANNEL, OUTPUT_CHANNEL)

DEFAULT_MASK_INIT = 1e-2
DEFAULT_ALPHA = 5e-3

MASK_MAGIC = b"RMTM"
MASK_VERSION = 1


class MaskStateError(RuntimeError):
    pass


class MaskFormatError(ValueError):
    pass


class IncompatibleArtifactError(ValueError):
    pass


class EmptyDomainError(ValueError):
    pass


def _check_granularity(granularity):
    if granularity not in GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}; expected one of {GRANULARITIES}")


def binarize(M, alpha, granularity=PARAMETER):
    """``1`` where the (group-reduced) mask value is strictly above ``alpha``.

    Channel granularities threshold the column mean (input channel) or the
    row mean (output channel) and broadcast the result over the group.
    """
    _check_granularity(granularity)
    if not np.isfinite(alpha):
        raise ValueError("threshold must be finite")
    M = np.asarray(M, dtype=np.float64)
    if granularity == INPUT_CHANNEL:
        score = np.broadcast_to(M.mean(axis=0, keepdims=True), M.shape)
    elif granularity == OUTPUT_CHANNEL:
        score = np.broadcast_to(M.mean(axis=-1, keepdims=True), M.shape)
    else:
        score = M
    return (score > alpha).astype(np.float64)


class MaskedLinear:
    """Frozen ``y = (theta * M_bin) x + b`` with a learnable mask ``M``."""

    def __init__(self, theta, bias, *, mask_init=DEFAULT_MASK_INIT, alpha=DEFAULT_ALPHA,
                 granularity=PARAMETER, enabled=False, name=""):
        _check_granularity(granularity)
        theta = np.array(theta, dtype=np.float64)
        bias = np.array(bias, dtype=np.float64)
        if theta.ndim != 2 or bias.shape != (theta.shape[0],):
            raise DimensionError(f"bad layer shapes: theta{theta.shape}, bias{bias.shape}")
        theta.setflags(write=False)
        bias.setflags(write=False)
        self.theta = theta
        self.bias = bias
        self.alpha = float(alpha)
        self.granularity = granularity
        self.enabled = enabled
        self.name = name
        self.mask = np.full(theta.shape, float(mask_init))
        self.mask_bin = binarize(self.mask, self.alpha, granularity)

    @property
    def shape(self):
        return self.theta.shape

    def reset_mask(self, value=DEFAULT_MASK_INIT):
        self.mask = np.full(self.theta.shape, float(value))
        self.rebinarize()

    def set_mask(self, M):
        M = np.array(M, dtype=np.float64)
        if M.shape != self.theta.shape:
            raise DimensionError(f"mask shape {M.shape} != weight shape {self.theta.shape}")
        self.mask = M
        self.rebinarize()

    def set_binary(self, bits):
        """Install a fixed binary mask (e.g. from an artifact); ``M`` is left alone."""
        bits = np.asarray(bits, dtype=np.float64)
        if bits.shape != self.theta.shape:
            raise DimensionError(f"mask shape {bits.shape} != weight shape {self.theta.shape}")
        self.mask_bin = bits.copy()

    def rebinarize(self):
        self.mask_bin = binarize(self.mask, self.alpha, self.granularity)

    def effective_weight(self):
        if not self.enabled:
            return self.theta
        return self.theta * self.mask_bin

    def weight_tensor(self, track=True):
        """Leaf tensor holding ``theta * M_bin``; tracked only when enabled."""
        return Tensor(self.effective_weight(), requires_grad=bool(track and self.enabled))

    def __call__(self, x, weight=None):
        return linear(x, self.weight_tensor(track=False) if weight is None else weight, self.bias)


def apply_mask(layer, x):
    return layer(x)


def ste_gradient(layer, grad_masked_weight):
    """Straight-through gradient wrt ``M`` from the gradient wrt ``theta * M_bin``.

    Returns ``None`` for a disabled layer (no mask gradient exists).
    """
    if grad_masked_weight is None:
        raise MaskStateError(f"no backward gradient available for layer {layer.name!r}")
    if not layer.enabled:
        return None
    g = np.asarray(grad_masked_weight, dtype=np.float64)
    if g.shape != layer.theta.shape:
        raise DimensionError(f"gradient shape {g.shape} != weight shape {layer.theta.shape}")
    g = layer.theta * g
    if layer.granularity == INPUT_CHANNEL:
        g = np.broadcast_to(g.sum(axis=0, keepdims=True), g.shape).copy()
    elif layer.granularity == OUTPUT_CHANNEL:
        g = np.broadcast_to(g.sum(axis=1, keepdims=True), g.shape).copy()
    return g


# -- artifacts ----------------------------------------------------------------------

@dataclass
class LayerMask:
    name: str
    shape: tuple
    alpha: float
    granularity: str
    bits: np.ndarray  # uint8 {0, 1}, shape ``shape``

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def zero_count(self):
        return self.size - int(self.bits.sum())


@dataclass
class MaskArtifact:
    layers: list
    policy: str = ""
    seed: int = 0
    config_hash: str = "0" * 32
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_layers(cls, layers, policy="", seed=0, config_hash="0" * 32):
        records = [
            LayerMask(l.name, tuple(l.shape), l.alpha, l.granularity, l.mask_bin.astype(np.uint8))
            for l in layers if l.enabled
        ]
        return cls(records, policy, seed, config_hash)

    def layer(self, name):
        for rec in self.layers:
            if rec.name == name:
                return rec
        raise KeyError(name)

    @property
    def zero_count(self):
        return sum(rec.zero_count for rec in self.layers)

    @property
    def size(self):
        return sum(rec.size for rec in self.layers)

    def __eq__(self, other):
        if not isinstance(other, MaskArtifact):
            return NotImplemented
        return pack_masks(self) == pack_masks(other)


def sparsity(masks):
    """Percent of zero entries across enabled layers (or artifact records)."""
    if isinstance(masks, MaskArtifact):
        records = [(r.size, r.zero_count) for r in masks.layers]
    else:
        records = [(l.mask_bin.size, int(l.mask_bin.size - l.mask_bin.sum()))
                   for l in masks if l.enabled]
    total = sum(n for n, _ in records)
    if total == 0:
        raise EmptyDomainError("no enabled masked layers")
    return 100.0 * sum(z for _, z in records) / total


def _zero_positions(artifact):
    return np.concatenate([rec.bits.reshape(-1) == 0 for rec in artifact.layers]) \
        if artifact.layers else np.zeros(0, dtype=bool)


def mask_iou(a, b):
    """IoU of the zeroed positions of two artifacts (1.0 if both are empty)."""
    names_a = [(r.name, tuple(r.shape)) for r in a.layers]
    names_b = [(r.name, tuple(r.shape)) for r in b.layers]
    if names_a != names_b:
        raise IncompatibleArtifactError("artifacts have different layer names or shapes")
    za, zb = _zero_positions(a), _zero_positions(b)
    union = np.count_nonzero(za | zb)
    if union == 0:
        return 1.0
    return np.count_nonzero(za & zb) / union


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def pack_masks(artifact):
    out = [MASK_MAGIC, struct.pack("<II", MASK_VERSION, len(artifact.layers))]
    for rec in artifact.layers:
        bits = np.asarray(rec.bits, dtype=np.uint8)
        if bits.shape != tuple(rec.shape) or np.any(bits > 1):
            raise MaskFormatError(f"layer {rec.name!r}: bits must be a {{0,1}} array of shape {rec.shape}")
        out.append(_pack_str(rec.name))
        out.append(struct.pack("<Bd", GRANULARITIES.index(rec.granularity), rec.alpha))
        out.append(struct.pack("<B", len(rec.shape)))
        out.append(struct.pack(f"<{len(rec.shape)}Q", *rec.shape))
        out.append(struct.pack("<Q", bits.size))
        out.append(kernels.pack_bits(bits.reshape(-1)).tobytes())
    chash = artifact.config_hash.encode("ascii")
    if len(chash) != 32:
        raise MaskFormatError("config hash must be 32 hex characters")
    out.append(_pack_str(artifact.policy))
    out.append(struct.pack("<Q", artifact.seed))
    out.append(chash)
    return b"".join(out)


class _Reader:
    def __init__(self, buf, error=MaskFormatError):
        self.buf = memoryview(buf)
        self.pos = 0
        self.error = error
        self.context = "header"

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise self.error(f"truncated data in {self.context} at byte offset {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return bytes(chunk)

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise self.error(f"invalid UTF-8 in {self.context} at byte offset {self.pos}") from exc


def unpack_masks(data):
    r = _Reader(data)
    if r.take(4) != MASK_MAGIC:
        raise MaskFormatError("bad magic: not a mask artifact")
    version, count = r.unpack("<II")
    if version != MASK_VERSION:
        raise MaskFormatError(f"unsupported mask artifact version {version}")
    layers = []
    for i in range(count):
        r.context = f"layer #{i}"
        name = r.string()
        r.context = f"layer {name!r}"
        code, alpha = r.unpack("<Bd")
        if code >= len(GRANULARITIES):
            raise MaskFormatError(f"layer {name!r}: unknown granularity code {code}")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        (nbits,) = r.unpack("<Q")
        if nbits != int(np.prod(shape)):
            raise MaskFormatError(f"layer {name!r}: bit count {nbits} does not match shape {shape}")
        payload = np.frombuffer(r.take((nbits + 7) // 8), dtype=np.uint8)
        pad = (-nbits) % 8
        if pad and payload[-1] & ((1 << pad) - 1):
            raise MaskFormatError(f"layer {name!r}: nonzero padding bits")
        bits = kernels.unpack_bits(payload, nbits).reshape(shape)
        layers.append(LayerMask(name, tuple(shape), alpha, GRANULARITIES[code], bits))
    r.context = "metadata"
    policy = r.string()
    (seed,) = r.unpack("<Q")
    chash = r.take(32).decode("ascii", errors="replace")
    if r.pos != len(r.buf):
        raise MaskFormatError(f"{len(r.buf) - r.pos} trailing bytes after metadata")
    return MaskArtifact(layers, policy, seed, chash)


def save_masks(artifact, path):
    with open(path, "wb") as fh:
        fh.write(pack_masks(artifact))


def load_masks(path):
    with open(path, "rb") as fh:
        return unpack_masks(fh.read())
