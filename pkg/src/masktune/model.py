"""Toy dual encoder: frozen class prototypes plus a small maskable transformer.

Images are token sequences ``[T, d_in]``. The encoder applies pre-norm
transformer blocks, mean-pools over tokens, projects to the prototype width
and L2-normalizes. Class probabilities are a softmax over
``cos(prototype, feature) / tau``.
"""

import hashlib
import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .masking import MaskedLinear
from .numerics import DimensionError, Tensor
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RMTW"
CHECKPOINT_VERSION = 1
TAU_FLOOR = 0.01

ATTN_KEYS = ("q", "k", "v", "o")
MLP_KEYS = ("fc1", "fc2")


class TrainingError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_in: int = 32
    width: int = 32
    out_dim: int = 32
    blocks: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    tau_init: float = 0.07
    init_seed: int = 0
    pretrain_epochs: int = 10
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 64


def layer_type(name):
    """``mhsa``, ``mlp`` or ``head`` for a masked-layer name."""
    if ".attn." in name:
        return "mhsa"
    if ".mlp." in name:
        return "mlp"
    return "head"


class TransformerBlock:
    def __init__(self, prefix, params, heads):
        d = params[f"{prefix}.ln1.gamma"].shape[0]
        if d % heads:
            raise DimensionError(f"head count {heads} must divide width {d}")
        self.prefix = prefix
        self.heads = heads
        self.ln1 = (params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
        self.ln2 = (params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])
        self.attn = {k: MaskedLinear(params[f"{prefix}.attn.{k}.weight"], params[f"{prefix}.attn.{k}.bias"],
                                     name=f"{prefix}.attn.{k}") for k in ATTN_KEYS}
        self.mlp = {k: MaskedLinear(params[f"{prefix}.mlp.{k}.weight"], params[f"{prefix}.mlp.{k}.bias"],
                                    name=f"{prefix}.mlp.{k}") for k in MLP_KEYS}

    def masked_layers(self):
        return [self.attn[k] for k in ATTN_KEYS] + [self.mlp[k] for k in MLP_KEYS]


def _block_forward(x, P, prefix, heads):
    h = nx.layer_norm(x, P[f"{prefix}.ln1.gamma"], P[f"{prefix}.ln1.beta"])
    q = nx.linear(h, P[f"{prefix}.attn.q.weight"], P[f"{prefix}.attn.q.bias"])
    k = nx.linear(h, P[f"{prefix}.attn.k.weight"], P[f"{prefix}.attn.k.bias"])
    v = nx.linear(h, P[f"{prefix}.attn.v.weight"], P[f"{prefix}.attn.v.bias"])
    a = nx.scaled_dot_product_attention(q, k, v, heads)
    x = nx.add(x, nx.linear(a, P[f"{prefix}.attn.o.weight"], P[f"{prefix}.attn.o.bias"]))
    h = nx.layer_norm(x, P[f"{prefix}.ln2.gamma"], P[f"{prefix}.ln2.beta"])
    h = nx.gelu(nx.linear(h, P[f"{prefix}.mlp.fc1.weight"], P[f"{prefix}.mlp.fc1.bias"]))
    return nx.add(x, nx.linear(h, P[f"{prefix}.mlp.fc2.weight"], P[f"{prefix}.mlp.fc2.bias"]))


def encode_tensors(P, tokens, n_blocks, heads):
    """Unit-norm features [B, out_dim] from a name -> Tensor parameter map."""
    x = Tensor(tokens) if not isinstance(tokens, Tensor) else tokens
    if x.data.ndim == 2:
        x = nx.reshape(x, (1,) + x.shape)
    if x.shape[1] < 1:
        raise DimensionError("need at least one token")
    for i in range(n_blocks):
        x = _block_forward(x, P, f"blocks.{i}", heads)
    pooled = nx.mean_tokens(x)
    return nx.l2_normalize(nx.linear(pooled, P["proj.weight"], P["proj.bias"]))


class DualEncoder:
    """Frozen prototypes ``G``, maskable encoder, fixed temperature ``tau``."""

    def __init__(self, params, heads, tau, prototypes):
        prototypes = np.array(prototypes, dtype=np.float64)
        norms = np.linalg.norm(prototypes, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("prototype rows must have unit norm")
        if not tau > 0:
            raise ValueError("temperature must be positive")
        prototypes.setflags(write=False)
        self.prototypes = prototypes
        self.tau = float(tau)
        self.heads = int(heads)
        n_blocks = 0
        while f"blocks.{n_blocks}.ln1.gamma" in params:
            n_blocks += 1
        self.params = {}
        for name, value in params.items():
            arr = np.array(value, dtype=np.float64)
            arr.setflags(write=False)
            self.params[name] = arr
        self.blocks = [TransformerBlock(f"blocks.{i}", self.params, heads) for i in range(n_blocks)]
        self.proj = MaskedLinear(self.params["proj.weight"], self.params["proj.bias"], name="proj")
        if self.proj.shape[0] != prototypes.shape[1]:
            raise DimensionError(f"projection width {self.proj.shape[0]} != prototype width {prototypes.shape[1]}")

    @property
    def d_in(self):
        """Token width accepted by the encoder."""
        if self.blocks:
            return self.params["blocks.0.ln1.gamma"].shape[0]
        return self.proj.shape[1]

    @property
    def num_classes(self):
        return self.prototypes.shape[0]

    def masked_layers(self):
        layers = []
        for block in self.blocks:
            layers.extend(block.masked_layers())
        layers.append(self.proj)
        return layers

    def layer(self, name):
        for l in self.masked_layers():
            if l.name == name:
                return l
        raise KeyError(name)

    def enabled_layers(self):
        return [l for l in self.masked_layers() if l.enabled]

    def tensors(self, track_masks=True, frozen=False):
        """Parameter map for one forward pass.

        Masked weights become ``theta * M_bin`` leaves (tracked when enabled
        and ``track_masks``); ``frozen=True`` ignores masks entirely.
        """
        P = {name: Tensor(v) for name, v in self.params.items()}
        leaves = {}
        for l in self.masked_layers():
            if frozen:
                continue
            t = l.weight_tensor(track=track_masks)
            P[f"{l.name}.weight"] = t
            if t.requires_grad:
                leaves[l.name] = t
        return P, leaves

    def logits(self, tokens, classes=None, frozen=False):
        P, _ = self.tensors(track_masks=False, frozen=frozen)
        f = encode_tensors(P, tokens, len(self.blocks), self.heads)
        return nx.cosine_logits(f, self._protos(classes), self.tau)

    def _protos(self, classes):
        return self.prototypes if classes is None else self.prototypes[np.asarray(classes)]

    def checksum(self):
        """Digest of every frozen quantity (weights, biases, norms, prototypes, tau)."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].tobytes())
        h.update(self.prototypes.tobytes())
        h.update(struct.pack("<d", self.tau))
        return h.hexdigest()


def encode_image(model, tokens):
    """Unit-norm feature for one ``[T, d_in]`` token sequence (or a batch)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    single = tokens.ndim == 2
    if tokens.shape[-1] != model.d_in:
        raise DimensionError(f"token width {tokens.shape[-1]} does not match the encoder")
    P, _ = model.tensors(track_masks=False)
    f = encode_tensors(P, tokens, len(model.blocks), model.heads).data
    return f[0] if single else f


def class_probabilities(model, f, classes=None):
    f = np.asarray(f, dtype=np.float64)
    G = model._protos(classes)
    cos = (f @ G.T) / (np.linalg.norm(f, axis=-1, keepdims=True) if f.ndim > 1 else np.linalg.norm(f))
    return nx.softmax(cos / model.tau)


def zero_shot_reference(model, tokens, classes=None):
    """Detached class probabilities of the unmasked (frozen) model."""
    return nx.softmax(model.logits(tokens, classes, frozen=True).data)


# -- construction and pretraining ------------------------------------------------------

def init_params(cfg, rng):
    d, din = cfg.width, cfg.d_in
    if din != d and cfg.blocks > 0:
        raise DimensionError("token width must equal model width when blocks are present")
    hidden = cfg.mlp_ratio * d
    P = {}

    def dense(name, fan_out, fan_in):
        P[f"{name}.weight"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))
        P[f"{name}.bias"] = np.zeros(fan_out)

    for i in range(cfg.blocks):
        pre = f"blocks.{i}"
        P[f"{pre}.ln1.gamma"] = np.ones(d)
        P[f"{pre}.ln1.beta"] = np.zeros(d)
        for k in ATTN_KEYS:
            dense(f"{pre}.attn.{k}", d, d)
        P[f"{pre}.ln2.gamma"] = np.ones(d)
        P[f"{pre}.ln2.beta"] = np.zeros(d)
        dense(f"{pre}.mlp.fc1", hidden, d)
        dense(f"{pre}.mlp.fc2", d, hidden)
    dense("proj", cfg.out_dim, d if cfg.blocks else din)
    return P


def random_prototypes(rng, n, dim):
    G = rng.normal(size=(n, dim))
    return G / np.linalg.norm(G, axis=1, keepdims=True)


def build_model(cfg, prototypes, rng=None):
    rng = rng if rng is not None else np.random.default_rng(cfg.init_seed)
    return DualEncoder(init_params(cfg, rng), cfg.heads, cfg.tau_init, prototypes)


def pretrain_surrogate(cfg, prototypes, tokens, labels, rng=None):
    """Train every encoder parameter and ``tau`` with CE over all classes.

    Masks stay out of the picture (all ones). Returns a frozen
    :class:`DualEncoder`.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.init_seed)
    params = init_params(cfg, rng)
    tau = np.array(cfg.tau_init)
    G = np.asarray(prototypes, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.float64)
    labels = np.asarray(labels)
    names = sorted(params)
    states = {n: AdamState.zeros_like(params[n]) for n in names}
    tau_state = AdamState.zeros_like(tau)
    n = len(labels)
    for epoch in range(cfg.pretrain_epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.pretrain_batch):
            idx = order[start:start + cfg.pretrain_batch]
            P = {k: Tensor(params[k], requires_grad=True) for k in names}
            t_leaf = Tensor(tau, requires_grad=True)
            with nx.GradTape() as tape:
                f = encode_tensors(P, tokens[idx], cfg.blocks, cfg.heads)
                loss = nx.softmax_cross_entropy(nx.cosine_logits(f, G, t_leaf), labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingError(f"pretraining loss diverged at epoch {epoch}")
            grads = tape.gradient(loss, [P[k] for k in names] + [t_leaf])
            for k, g in zip(names, grads):
                adam_step(params[k], g, states[k], cfg.pretrain_lr)
            adam_step(tau, grads[-1], tau_state, cfg.pretrain_lr)
            np.maximum(tau, TAU_FLOOR, out=tau)
            losses.append(float(loss.data))
        log.debug("pretrain epoch %d loss %.4f tau %.4f", epoch, np.mean(losses), float(tau))
    return DualEncoder(params, cfg.heads, float(tau), G)


# -- checkpoint file -------------------------------------------------------------------

def _named_tensors(model):
    items = dict(model.params)
    items["prototypes"] = model.prototypes
    items["tau"] = np.array([model.tau])
    items["meta.heads"] = np.array([float(model.heads)])
    return items


def save_checkpoint(model, path):
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, arr in _named_tensors(model).items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    if len(buf) < 8 or struct.unpack_from("<I", buf, 4)[0] != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version")
    pos = 8
    tensors = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (ndim,) = struct.unpack_from("<B", buf, pos)
            dims = struct.unpack_from(f"<{ndim}Q", buf, pos + 1)
            pos += 1 + 8 * ndim
            count = int(np.prod(dims))
            if pos + 8 * count > len(buf):
                raise CheckpointFormatError(f"{path}: truncated tensor {name!r} at byte offset {pos}")
            tensors[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
            pos += 8 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt checkpoint near byte offset {pos}") from exc
    try:
        protos = tensors.pop("prototypes")
        tau = float(tensors.pop("tau")[0])
        heads = int(tensors.pop("meta.heads")[0])
    except KeyError as exc:
        raise CheckpointFormatError(f"{path}: missing tensor {exc}") from exc
    return DualEncoder(tensors, heads, tau, protos)
