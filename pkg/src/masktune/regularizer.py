"""Gradient dropout regularity.

Per mask element, the purity ``P`` scores how much the task (CE) gradient
agrees with the KL gradient towards the frozen model's predictions. A
Bernoulli gate with probability ``P`` keeps the CE gradient; a dropped one is
scaled by ``1 - leak``.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .masking import ste_gradient
from .numerics import GradTape, cosine_logits, kl_divergence

__all__ = [
    "ConfigError",
    "PurityField",
    "gate_key",
    "kl_gradient_field",
    "purity",
    "regularized_step",
    "sample_gate",
    "scale_factor",
    "validate_leak",
]


class ConfigError(ValueError):
    pass


class ReferenceMissingError(RuntimeError):
    pass


def validate_leak(leak):
    if not 0.0 <= leak <= 1.0:
        raise ConfigError(f"leak must lie in [0, 1], got {leak}")
    return float(leak)


def purity(g_ce, g_kl):
    """Piecewise purity; scalars in give a float back."""
    out = kernels.purity_field(g_ce, g_kl)
    return float(out) if np.ndim(out) == 0 else out


def gate_key(seed):
    """Scramble a small integer seed into a 64-bit stream key."""
    ss = np.random.SeedSequence([int(seed), 0x6A7E])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def sample_gate(P, key, counter0=0):
    """``1`` where ``P > U`` with ``U ~ U[0, 1)`` drawn from counter ``counter0 + i``."""
    return kernels.gate_field(P, key, counter0)


def scale_factor(gate, leak):
    """``1 - leak + leak * gate``; ``leak=0`` yields exactly 1.0."""
    return 1.0 - leak + leak * np.asarray(gate, dtype=np.float64)


def final_gradient(g_ce, gate, leak):
    """Algorithm form ``(1 - leak * (1 - gate)) * g_ce``."""
    return (1.0 - leak * (1.0 - np.asarray(gate, dtype=np.float64))) * g_ce


@dataclass
class PurityField:
    g_ce: np.ndarray
    g_kl: np.ndarray
    P: np.ndarray
    gate: np.ndarray
    scale: np.ndarray

    @classmethod
    def compute(cls, g_ce, g_kl, leak, key, counter0):
        P = kernels.purity_field(g_ce, g_kl)
        gate = sample_gate(P, key, counter0)
        return cls(g_ce, g_kl, P, gate, scale_factor(gate, leak))

    def summary(self):
        return {
            "mean_P": float(self.P.mean()),
            "gate_rate": float(self.gate.mean()),
            "mean_abs_g_ce": float(np.abs(self.g_ce).mean()),
            "mean_abs_g_kl": float(np.abs(self.g_kl).mean()),
        }


def regularized_step(M, g_ce, g_kl, leak, lr, key, counter0=0):
    """Plain gradient-descent update of one mask with the gated CE gradient.

    Returns ``(new_M, PurityField)``.
    """
    leak = validate_leak(leak)
    field = PurityField.compute(np.asarray(g_ce, dtype=np.float64),
                                np.asarray(g_kl, dtype=np.float64), leak, key, counter0)
    return M - lr * field.scale * field.g_ce, field


def kl_gradient_field(model, tokens, reference, classes=None):
    """Mask gradients of ``KL(reference || masked model)`` for every enabled layer."""
    if reference is None:
        raise ReferenceMissingError("zero-shot reference probabilities have not been computed")
    from .model import encode_tensors

    P, leaves = model.tensors(track_masks=True)
    with GradTape() as tape:
        f = encode_tensors(P, tokens, len(model.blocks), model.heads)
        loss = kl_divergence(reference, cosine_logits(f, model._protos(classes), model.tau))
    names = list(leaves)
    grads = tape.gradient(loss, [leaves[n] for n in names])
    return {n: ste_gradient(model.layer(n), g) for n, g in zip(names, grads)}
