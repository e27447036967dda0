"""Few-shot tasks, layer selection, the mask tuning loop and evaluation."""

import hashlib
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .masking import (
    DEFAULT_ALPHA,
    DEFAULT_MASK_INIT,
    PARAMETER,
    MaskArtifact,
    sparsity,
    ste_gradient,
)
from .model import encode_tensors, layer_type, zero_shot_reference
from .numerics import GradTape, cosine_logits, kl_divergence, softmax_cross_entropy
from .optim import AdamState, adam_step, cosine_lr
from .regularizer import ConfigError, PurityField, gate_key, validate_leak

log = logging.getLogger(__name__)

POLICIES = ("amt", "mmt", "pmt", "dmt")
FEATURE_MAGIC = b"RMTF"
FEATURE_VERSION = 1


class FeatureFormatError(ValueError):
    pass


class DegenerateSelectionError(RuntimeError):
    pass


class TuningError(RuntimeError):
    pass


# -- tasks -------------------------------------------------------------------------

@dataclass
class FewShotTask:
    """Few-shot split. Labels are local (0..C-1); ``class_ids`` maps them to prototypes."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    class_ids: np.ndarray
    shots: int
    base_classes: np.ndarray = None
    new_classes: np.ndarray = None

    @property
    def num_classes(self):
        return len(self.class_ids)

    def subset(self, local_classes):
        """Restrict to some local classes and relabel them 0..k-1."""
        local_classes = np.asarray(local_classes)
        remap = {int(c): i for i, c in enumerate(local_classes)}
        tr = np.isin(self.train_y, local_classes)
        te = np.isin(self.test_y, local_classes)
        relabel = np.vectorize(lambda c: remap[int(c)], otypes=[np.int64])
        return FewShotTask(self.train_x[tr], relabel(self.train_y[tr]) if tr.any() else self.train_y[tr],
                           self.test_x[te], relabel(self.test_y[te]) if te.any() else self.test_y[te],
                           self.class_ids[local_classes], self.shots)


@dataclass
class TaskConfig:
    seed: int = 0
    classes: int = 10
    shots: int = 16
    base_classes: int = 40
    width: int = 32
    tokens: int = 8
    base_per_class: int = 200
    test_per_class: int = 50
    noise: float = 0.9          # per-token noise, base and downstream
    signal_tokens: int = 3      # tokens per sample that carry the class direction
    rotate_dims: int = 12       # size of the rotated token subspace downstream
    rotate_angle: float = 0.9   # radians, principal angle of the rotation
    shift: float = 1.0          # extra nuisance noise downstream
    nuisance_dims: int = 8


@dataclass
class BaseTask:
    tokens: np.ndarray
    labels: np.ndarray
    prototypes: np.ndarray


def _round32(a):
    # data goes through float32 files; generate it already representable
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _rotation(rng, dim, k, angle):
    """Orthogonal map rotating a random ``k``-dim subspace by ``angle``."""
    Q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    basis = Q[:, :k]
    R = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, k - 1, 2):
        u, v = basis[:, i], basis[:, i + 1]
        R += (c - 1) * (np.outer(u, u) + np.outer(v, v)) + s * (np.outer(v, u) - np.outer(u, v))
    return R


def _sample_tokens(rng, protos, labels, cfg, noise, R=None, nuisance=None, shift=0.0):
    n = len(labels)
    T, d = cfg.tokens, protos.shape[1]
    x = noise * rng.normal(size=(n, T, d))
    sig = np.zeros((n, T), dtype=bool)
    for i in range(n):
        sig[i, rng.choice(T, size=cfg.signal_tokens, replace=False)] = True
    x[sig] += np.repeat(protos[labels], cfg.signal_tokens, axis=0)
    if R is not None:
        x = x @ R.T
    if nuisance is not None and shift > 0:
        x[..., nuisance] += shift * rng.normal(size=(n, T, len(nuisance)))
    return _round32(x)


def generate_synthetic_task(cfg=None, **overrides):
    """Deterministic ``(BaseTask, FewShotTask)`` pair for ``cfg.seed``.

    The base task covers ``base_classes`` prototype directions; the downstream
    task draws ``classes`` of them, rotates a token subspace and adds noise on
    nuisance dimensions.
    """
    cfg = TaskConfig(**{**asdict(cfg or TaskConfig()), **overrides})
    if cfg.classes < 2 or cfg.shots < 1:
        raise ConfigError("need at least 2 classes and 1 shot")
    if cfg.classes > cfg.base_classes:
        raise ConfigError("downstream classes must be drawn from the base classes")
    if cfg.signal_tokens > cfg.tokens:
        raise ConfigError("signal_tokens exceeds tokens")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A5C]))
    d = cfg.width
    G = rng.normal(size=(cfg.base_classes, d))
    G /= np.linalg.norm(G, axis=1, keepdims=True)
    input_protos = rng.normal(size=(cfg.base_classes, d))
    input_protos[:, d - cfg.nuisance_dims:] = 0.0
    input_protos /= np.linalg.norm(input_protos, axis=1, keepdims=True)
    input_protos *= np.sqrt(d) * 0.5

    base_labels = np.repeat(np.arange(cfg.base_classes), cfg.base_per_class)
    base = BaseTask(_sample_tokens(rng, input_protos, base_labels, cfg, cfg.noise), base_labels, G)

    class_ids = np.sort(rng.choice(cfg.base_classes, size=cfg.classes, replace=False))
    R = _rotation(rng, d - cfg.nuisance_dims, cfg.rotate_dims, cfg.rotate_angle)
    R_full = np.eye(d)
    R_full[:d - cfg.nuisance_dims, :d - cfg.nuisance_dims] = R
    nuisance = np.arange(d - cfg.nuisance_dims, d)
    local = input_protos[class_ids]
    train_y = np.repeat(np.arange(cfg.classes), cfg.shots)
    test_y = np.repeat(np.arange(cfg.classes), cfg.test_per_class)
    train_x = _sample_tokens(rng, local, train_y, cfg, cfg.noise, R_full, nuisance, cfg.shift)
    test_x = _sample_tokens(rng, local, test_y, cfg, cfg.noise, R_full, nuisance, cfg.shift)
    half = cfg.classes // 2
    task = FewShotTask(train_x, train_y, test_x, test_y, class_ids, cfg.shots,
                       base_classes=np.arange(half), new_classes=np.arange(half, cfg.classes))
    return base, task


# -- feature files -------------------------------------------------------------------

def write_feature_file(path, features, labels, num_classes=None):
    features = np.asarray(features)
    labels = np.asarray(labels)
    n = len(labels)
    flat = features.reshape(n, -1).astype("<f4")
    C = int(num_classes if num_classes is not None else (labels.max() + 1 if n else 0))
    rows = np.empty(n, dtype=[("label", "<u4"), ("x", "<f4", (flat.shape[1],))])
    rows["label"] = labels
    rows["x"] = flat
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<IIII", FEATURE_VERSION, n, flat.shape[1], C))
        fh.write(rows.tobytes())


def read_feature_file(path):
    """``(features [N, dim] float64, labels [N], num_classes)`` exactly as stored."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 20:
        raise FeatureFormatError(f"{path}: truncated header at byte offset {len(buf)}")
    if buf[:4] != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic at byte offset 0")
    version, n, dim, C = struct.unpack_from("<IIII", buf, 4)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version} at byte offset 4")
    if dim == 0:
        raise FeatureFormatError(f"{path}: zero feature dimension at byte offset 12")
    rec = 4 + 4 * dim
    need = 20 + n * rec
    if len(buf) != need:
        raise FeatureFormatError(f"{path}: expected {need} bytes, found {len(buf)} "
                                 f"(truncated or padded at byte offset {min(len(buf), need)})")
    rows = np.frombuffer(buf, dtype=[("label", "<u4"), ("x", "<f4", (dim,))], count=n, offset=20)
    labels = rows["label"].astype(np.int64)
    bad = np.nonzero(labels >= C)[0]
    if bad.size:
        raise FeatureFormatError(f"{path}: label {labels[bad[0]]} >= class count {C} "
                                 f"at byte offset {20 + bad[0] * rec}")
    return rows["x"].astype(np.float64), labels, C


def load_feature_task(train_path, test_path, shots=None):
    """Precomputed embeddings as a one-token task, L2-normalized on load."""
    xtr, ytr, C = read_feature_file(train_path)
    xte, yte, C2 = read_feature_file(test_path)
    if xtr.shape[1] != xte.shape[1] or C != C2:
        raise FeatureFormatError(f"{test_path}: dimension/class count differ from {train_path}")

    def norm(x):
        nrm = np.linalg.norm(x, axis=1, keepdims=True)
        if np.any(nrm == 0):
            raise FeatureFormatError("zero feature vector cannot be normalized")
        return (x / nrm)[:, None, :]

    counts = np.bincount(ytr, minlength=C)
    return FewShotTask(norm(xtr), ytr, norm(xte), yte, np.arange(C),
                       int(shots if shots is not None else counts.min()))


def feature_prototypes(task):
    """Normalized class means of the training features (used when no text side exists)."""
    x = task.train_x[:, 0, :]
    G = np.stack([x[task.train_y == c].mean(axis=0) for c in range(task.num_classes)])
    return G / np.linalg.norm(G, axis=1, keepdims=True)


# -- configuration ------------------------------------------------------------------------

@dataclass
class RunConfig:
    policy: str = "amt"
    regularized: bool = False
    leak: float = 1.0
    alpha: float = DEFAULT_ALPHA
    mask_init: float = DEFAULT_MASK_INIT
    lr: float = 8e-5
    lr_multiplier: float = 30.0
    epochs: int = 30
    batch_size: int = 32
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "cosine"
    init_seed: int = 0
    data_seed: int = 0
    gate_seed: int = 0
    granularity: str = PARAMETER
    eval_every_epoch: bool = True
    debug: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        validate_leak(self.leak)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0 or self.lr_multiplier < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    @property
    def base_lr(self):
        return self.lr * self.lr_multiplier

    @property
    def effective_regularized(self):
        """``leak=0`` reduces the regularized update to the plain one."""
        return self.regularized and self.leak > 0.0

    def digest(self):
        """Hash of the effective configuration; equivalent runs hash alike."""
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values["regularized"] = self.effective_regularized
        values["leak"] = self.leak if self.effective_regularized else 0.0
        text = ";".join(f"{k}={v!r}" for k, v in values.items())
        return hashlib.sha256(text.encode()).hexdigest()[:32]


@dataclass
class EpochRecord:
    epoch: int
    ce_loss: float
    kl_loss: float
    accuracy: float
    sparsity: float


@dataclass
class TrainReport:
    epochs: list
    artifact: MaskArtifact
    zero_shot_accuracy: float
    accuracy: float
    per_class_accuracy: np.ndarray
    sparsity: float
    layer_delta: dict
    wall_clock: float
    config: RunConfig
    diagnostics: list = field(default_factory=list)

    def metric_lines(self):
        lines = [f"epoch={r.epoch} ce_loss={r.ce_loss:.10g} kl_loss={r.kl_loss:.10g} "
                 f"accuracy={r.accuracy:.6f} sparsity={r.sparsity:.6f}" for r in self.epochs]
        lines.append(f"summary zero_shot={self.zero_shot_accuracy:.6f} accuracy={self.accuracy:.6f} "
                     f"sparsity={self.sparsity:.6f}")
        return lines


# -- gradients -------------------------------------------------------------------------

def mask_gradients(model, tokens, labels, classes, reference=None):
    """CE (and optionally KL) mask gradients for the enabled layers.

    Returns ``(ce_loss, kl_loss, g_ce, g_kl)`` with gradients keyed by layer name;
    ``g_kl`` is ``None`` without a reference.
    """
    P, leaves = model.tensors(track_masks=True)
    G = model._protos(classes)
    with GradTape() as tape:
        f = encode_tensors(P, tokens, len(model.blocks), model.heads)
        logits = cosine_logits(f, G, model.tau)
        ce = softmax_cross_entropy(logits, labels)
        kl = kl_divergence(reference, logits) if reference is not None else None
    names = list(leaves)
    srcs = [leaves[n] for n in names]
    g_ce = {n: ste_gradient(model.layer(n), g) for n, g in zip(names, tape.gradient(ce, srcs))}
    g_kl = None
    if kl is not None:
        g_kl = {n: ste_gradient(model.layer(n), g) for n, g in zip(names, tape.gradient(kl, srcs))}
    return float(ce.data), (float(kl.data) if kl is not None else float("nan")), g_ce, g_kl


def _minibatches(rng, n, batch_size):
    order = rng.permutation(n)
    bs = min(batch_size, n)
    return [order[i:i + bs] for i in range(0, n, bs)]


def _enable(model, names, cfg):
    for l in model.masked_layers():
        l.enabled = l.name in names
        l.alpha = cfg.alpha
        l.granularity = cfg.granularity
        l.reset_mask(cfg.mask_init)


def _warmup_gradients(model, task, cfg, classes=None):
    """Per-layer per-step CE mask gradients at init masks, over one epoch."""
    saved = [(l.enabled, l.mask.copy(), l.mask_bin.copy()) for l in model.masked_layers()]
    _enable(model, {l.name for l in model.masked_layers()}, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.data_seed, 0xD317]))
    steps = []
    try:
        for idx in _minibatches(rng, len(task.train_y), cfg.batch_size):
            _, _, g_ce, _ = mask_gradients(model, task.train_x[idx], task.train_y[idx],
                                           task.class_ids if classes is None else classes)
            steps.append(g_ce)
    finally:
        for l, (en, M, Mb) in zip(model.masked_layers(), saved):
            l.enabled, l.mask, l.mask_bin = en, M, Mb
    return steps


def delta_report(model, task, cfg=None):
    """Per-layer ``sum_steps lr * mean|dL_ce/dM|`` over a one-epoch warmup.

    Returns ``(per_layer, group_means)``; groups are ``mhsa``, ``mlp``, ``head``.
    """
    cfg = cfg or RunConfig()
    steps = _warmup_gradients(model, task, cfg)
    return summarize_delta(steps, cfg.base_lr)


def summarize_delta(steps, lr, reduce=lambda g: np.abs(g).mean()):
    per_layer = {}
    for g in steps:
        for name, grad in g.items():
            per_layer[name] = per_layer.get(name, 0.0) + lr * float(reduce(grad))
    groups = {}
    for name, v in per_layer.items():
        groups.setdefault(layer_type(name), []).append(v)
    return per_layer, {k: float(np.mean(v)) for k, v in groups.items()}


def select_layers(model, policy, task=None, cfg=None):
    """Names of the layers a policy masks."""
    names = [l.name for l in model.masked_layers()]
    if policy == "amt":
        return [n for n in names if layer_type(n) == "mhsa"]
    if policy == "mmt":
        return [n for n in names if layer_type(n) == "mlp"]
    if policy == "pmt":
        return names
    if policy == "dmt":
        if task is None:
            raise ConfigError("dmt needs warmup data")
        cfg = cfg or RunConfig(policy="dmt")
        steps = _warmup_gradients(model, task, cfg)
        per_layer, _ = summarize_delta(steps, cfg.base_lr, reduce=np.mean)
        chosen = [n for n in names if per_layer.get(n, 0.0) > 0.0]
        if not chosen:
            raise DegenerateSelectionError("dmt warmup produced no layer with positive mean gradient")
        return chosen
    raise ConfigError(f"unknown policy {policy!r}")


# -- evaluation -----------------------------------------------------------------------------

def predict(model, tokens, classes, batch=512):
    out = []
    for i in range(0, len(tokens), batch):
        out.append(np.argmax(model.logits(tokens[i:i + batch], classes).data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def harmonic_mean(a, b):
    return 0.0 if a <= 0 or b <= 0 else 2.0 * a * b / (a + b)


def evaluate(model, tokens, labels, classes):
    """``(accuracy %, per-class accuracy %)`` of argmax predictions."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ConfigError("empty test set")
    pred = predict(model, tokens, classes)
    correct = pred == labels
    per_class = np.array([100.0 * correct[labels == c].mean() if np.any(labels == c) else np.nan
                          for c in range(len(classes))])
    return 100.0 * correct.mean(), per_class


def evaluate_base_new(model, task):
    """Base/new accuracies (each over its own class set) and their harmonic mean."""
    base = task.subset(task.base_classes)
    new = task.subset(task.new_classes)
    a, _ = evaluate(model, base.test_x, base.test_y, base.class_ids)
    b, _ = evaluate(model, new.test_x, new.test_y, new.class_ids)
    return a, b, harmonic_mean(a, b)


def apply_artifact(model, artifact):
    """Install an artifact's binary masks; layers not in it are disabled."""
    names = {r.name for r in artifact.layers}
    for l in model.masked_layers():
        l.enabled = l.name in names
        if l.enabled:
            rec = artifact.layer(l.name)
            l.alpha, l.granularity = rec.alpha, rec.granularity
            l.set_binary(rec.bits)


# -- tuning -----------------------------------------------------------------------------------

def run_mask_tuning(model, task, cfg, on_step=None, layers=None):
    """Tune binary masks on ``task``; returns a :class:`TrainReport`.

    ``on_step(step, model)`` is called after every optimizer step.
    """
    cfg.validate()
    t0 = time.perf_counter()
    checksum = model.checksum()
    classes = task.class_ids
    chosen = layers if layers is not None else select_layers(model, cfg.policy, task, cfg)
    if not chosen:
        raise ConfigError("no layers enabled for tuning")
    _enable(model, set(chosen), cfg)
    enabled = model.enabled_layers()

    n = len(task.train_y)
    reference = zero_shot_reference(model, task.train_x, classes)
    zs_acc, _ = evaluate(model, task.test_x, task.test_y, classes)

    data_rng = np.random.default_rng(np.random.SeedSequence([cfg.data_seed, 0xDA7A]))
    key = gate_key(cfg.gate_seed)
    offsets, total = {}, 0
    for l in enabled:
        offsets[l.name] = total
        total += l.mask.size
    states = {l.name: AdamState.zeros_like(l.mask) for l in enabled}
    steps_per_epoch = -(-n // min(cfg.batch_size, n))
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    records, diagnostics = [], []
    layer_delta = {l.name: 0.0 for l in enabled}

    for epoch in range(cfg.epochs):
        ce_sum = kl_sum = 0.0
        batches = _minibatches(data_rng, n, cfg.batch_size)
        for idx in batches:
            ce, kl, g_ce, g_kl = mask_gradients(model, task.train_x[idx], task.train_y[idx], classes,
                                                reference[idx])
            if not (np.isfinite(ce) and np.isfinite(kl)):
                raise TuningError(f"non-finite loss at step {step}")
            ce_sum += ce
            kl_sum += kl
            lr = cosine_lr(cfg.base_lr, step, total_steps) if cfg.schedule == "cosine" else cfg.base_lr
            for l in enabled:
                g = g_ce[l.name]
                if cfg.regularized:
                    pf = PurityField.compute(g, g_kl[l.name], cfg.leak, key,
                                             step * total + offsets[l.name])
                    g = pf.scale * g
                    if cfg.debug:
                        diagnostics.append({"step": step, "layer": l.name, **pf.summary()})
                layer_delta[l.name] += lr * float(np.abs(g).mean())
                if cfg.optimizer == "adam":
                    adam_step(l.mask, g, states[l.name], lr, cfg.beta1, cfg.beta2, cfg.eps)
                else:
                    l.mask -= lr * g
                l.rebinarize()
            if on_step is not None:
                on_step(step, model)
            step += 1
        acc = evaluate(model, task.test_x, task.test_y, classes)[0] \
            if cfg.eval_every_epoch or epoch == cfg.epochs - 1 else float("nan")
        records.append(EpochRecord(epoch, ce_sum / len(batches), kl_sum / len(batches), acc, sparsity(enabled)))
        log.info("epoch %d ce %.4f kl %.4f acc %.2f sparsity %.3f", epoch, records[-1].ce_loss,
                 records[-1].kl_loss, acc, records[-1].sparsity)

    if model.checksum() != checksum:
        raise TuningError("frozen parameters changed during mask tuning")
    acc, per_class = evaluate(model, task.test_x, task.test_y, classes)
    artifact = MaskArtifact.from_layers(enabled, policy=("r-" if cfg.effective_regularized else "") + cfg.policy,
                                        seed=cfg.init_seed, config_hash=cfg.digest())
    return TrainReport(records, artifact, zs_acc, acc, per_class, sparsity(artifact), layer_delta,
                       time.perf_counter() - t0, cfg, diagnostics)


def write_metrics(report, path):
    with open(path, "w") as fh:
        fh.write("\n".join(report.metric_lines()) + "\n")


def write_diagnostics(report, path):
    with open(path, "w") as fh:
        for d in report.diagnostics:
            fh.write(f"step={d['step']} layer={d['layer']} mean_P={d['mean_P']:.6f} "
                     f"gate_rate={d['gate_rate']:.6f} mean_abs_g_ce={d['mean_abs_g_ce']:.6e} "
                     f"mean_abs_g_kl={d['mean_abs_g_kl']:.6e}\n")


