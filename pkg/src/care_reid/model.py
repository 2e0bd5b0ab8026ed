"""Small embedding network with class prototypes and hand-written backprop.

``embedding = relu(c x @ W + b)`` and ``logits = embedding @ P.T``; the rows
of ``P`` are the class prototypes used for angular distances.  The constant
``c = input_scale`` (default ``sqrt(d_in)``) maps unit-norm inputs to unit
per-coordinate RMS so that the initial logits are O(1).  The model also
owns the raw smoothing parameters ``theta`` consumed by the calibration loss,
so a single optimiser step updates everything.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .numkernel import inverse_softplus
from .pec import DEFAULT_SMOOTHING, CalibrationParams

CHECKPOINT_MAGIC = 0x43415245  # b"CARE" read as a big-endian integer
PARAM_NAMES = ("W", "b", "P", "theta")


class NonFiniteError(FloatingPointError):
    """Raised when a gradient or parameter stops being finite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class Schedule:
    stage1_epochs: int = 20
    stage2_epochs: int = 40
    lr_stage1: float = 0.01
    decay_factor: float = 0.1

    @property
    def total_epochs(self):
        return self.stage1_epochs + self.stage2_epochs


def lr_at(epoch, schedule=Schedule()):
    """Step schedule: ``lr_stage1`` for stage 1, decayed once for stage 2."""
    if not 1 <= epoch <= schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside 1..{schedule.total_epochs}")
    if epoch <= schedule.stage1_epochs:
        return schedule.lr_stage1
    return schedule.lr_stage1 * schedule.decay_factor


class PeerModel:
    def __init__(self, d_in, d_emb, num_classes, seed=0, relu=True, kappa=1.0,
                 smoothing=DEFAULT_SMOOTHING, input_scale=None):
        self.d_in, self.d_emb, self.num_classes = d_in, d_emb, num_classes
        self.input_scale = float(np.sqrt(d_in)) if input_scale is None else float(input_scale)
        self.relu = relu
        self.kappa = kappa
        self.seed = seed
        rng = np.random.default_rng(seed)
        a = 1.0 / np.sqrt(d_in)
        self.W = rng.uniform(-a, a, size=(d_in, d_emb))
        self.b = np.zeros(d_emb)
        a = 1.0 / np.sqrt(d_emb)
        self.P = rng.uniform(-a, a, size=(num_classes, d_emb))
        self.theta = np.full(num_classes, inverse_softplus(smoothing))
        self.velocity = {name: np.zeros_like(getattr(self, name)) for name in PARAM_NAMES}

    # -- parameters -------------------------------------------------------

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @property
    def param_count(self):
        return sum(getattr(self, n).size for n in PARAM_NAMES)

    def flat_params(self):
        return np.concatenate([getattr(self, n).ravel() for n in PARAM_NAMES])

    def set_flat_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.param_count:
            raise ValueError("parameter vector has the wrong length")
        i = 0
        for n in PARAM_NAMES:
            arr = getattr(self, n)
            setattr(self, n, flat[i:i + arr.size].reshape(arr.shape).copy())
            i += arr.size

    def calibration(self):
        return CalibrationParams(theta=self.theta, kappa=self.kappa)

    def copy(self):
        other = PeerModel.__new__(PeerModel)
        other.__dict__.update(self.__dict__)
        for n in PARAM_NAMES:
            setattr(other, n, getattr(self, n).copy())
        other.velocity = {k: v.copy() for k, v in self.velocity.items()}
        return other

    # -- forward / backward ----------------------------------------------

    def forward(self, x):
        """Return ``(embedding, logits)`` for a sample or a batch."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d_in:
            raise ValueError(f"expected {self.d_in} input features, got {x.shape[-1]}")
        pre = (self.input_scale * x) @ self.W + self.b
        emb = np.maximum(pre, 0.0) if self.relu else pre
        return emb, emb @ self.P.T

    def backward(self, x, grad_logits, grad_theta=None):
        """Parameter gradients given ``d loss / d logits`` for the batch ``x``."""
        x = self.input_scale * np.atleast_2d(np.asarray(x, dtype=np.float64))
        g = np.atleast_2d(np.asarray(grad_logits, dtype=np.float64))
        pre = x @ self.W + self.b
        emb = np.maximum(pre, 0.0) if self.relu else pre
        d_emb = g @ self.P
        if self.relu:
            d_emb = d_emb * (pre > 0)
        grads = {
            "W": x.T @ d_emb,
            "b": d_emb.sum(axis=0),
            "P": g.T @ emb,
            "theta": np.zeros_like(self.theta) if grad_theta is None else np.asarray(grad_theta, dtype=np.float64),
        }
        return grads

    def apply_gradients(self, grads, lr, momentum=0.9):
        """SGD with (heavy-ball) momentum: ``v = m v + g``; ``p -= lr v``."""
        for n, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {n}",
                                     {"param": n, "max_abs": float(np.nanmax(np.abs(g)))})
        if lr == 0:
            return
        for n in PARAM_NAMES:
            v = self.velocity[n]
            v *= momentum
            v += grads[n]
            setattr(self, n, getattr(self, n) - lr * v)

    def backward_update(self, x, grad_logits, lr, momentum=0.9, grad_theta=None):
        grads = self.backward(x, grad_logits, grad_theta)
        self.apply_gradients(grads, lr, momentum)
        return grads

    # -- checkpoint -------------------------------------------------------

    def save(self, path):
        header = struct.pack("<5q", CHECKPOINT_MAGIC, self.d_in, self.d_emb,
                             self.num_classes, self.param_count)
        with open(path, "wb") as f:
            f.write(header)
            f.write(self.flat_params().astype("<f8").tobytes())

    @classmethod
    def load(cls, path, relu=True, kappa=1.0):
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < 40:
            raise ValueError(f"{path}: truncated checkpoint header")
        magic, d_in, d_emb, C, count = struct.unpack("<5q", raw[:40])
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic:#x}")
        body = np.frombuffer(raw[40:], dtype="<f8")
        if body.size != count:
            raise ValueError(f"{path}: expected {count} parameters, found {body.size}")
        model = cls(d_in, d_emb, C, relu=relu, kappa=kappa)
        if model.param_count != count:
            raise ValueError(f"{path}: header parameter count {count} is inconsistent")
        model.set_flat_params(body.astype(np.float64))
        return model
