"""Gradient concealment layer: g(x) = x + eps * sin(w * x).

The forward perturbation is bounded by eps elementwise, so predictions are
essentially unchanged, while the local derivative 1 + eps*w*cos(w*x) flips
sign pseudo-randomly whenever eps*w >> 1, concealing the gradient direction
that white-box attacks rely on.

Precision: the phase w*x is formed in 64-bit floats and reduced modulo 2*pi
before the trig call. At w ~ 1e20 the low-order bits of the product are
rounding artifacts, which makes the output a deterministic but
pseudo-random-looking function of x; that is the concealment effect, not a
defect, so it is kept rather than "fixed".
"""

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Node, Tensor
from .errors import ConfigError

_TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class GcmConfig:
    """Frequency w and magnitude eps of the concealment layer.

    eps = 0 is allowed as the exact-identity boundary case; concealment
    requires eps * w > 1 (see ``is_concealing``).
    """

    w: float = 1e20
    eps: float = 1e-8

    def __post_init__(self):
        if not (self.w > 0):
            raise ConfigError(f"gcm frequency w must be positive, got {self.w}")
        if not (self.eps >= 0):
            raise ConfigError(f"gcm magnitude eps must be non-negative, got {self.eps}")

    @property
    def is_concealing(self) -> bool:
        return self.eps * self.w > 1.0


@dataclass(frozen=True)
class GcmPlacement:
    """Where the concealment layer sits in a model: at the input ("front"),
    after one named block ("after_block"), or at the input plus after every
    block ("all")."""

    kind: str
    block: str | None = None

    _KINDS = ("front", "after_block", "all")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ConfigError(f"unknown placement kind {self.kind!r}; expected one of {self._KINDS}")
        if (self.kind == "after_block") != (self.block is not None):
            raise ConfigError("placement 'after_block' requires a block name; others take none")

    @staticmethod
    def front() -> "GcmPlacement":
        return GcmPlacement("front")

    @staticmethod
    def after_block(name: str) -> "GcmPlacement":
        return GcmPlacement("after_block", name)

    @staticmethod
    def all_layers() -> "GcmPlacement":
        return GcmPlacement("all")

    @staticmethod
    def parse(text: str) -> "GcmPlacement":
        """Parse the CLI form: 'front' | 'block:<name>' | 'all'."""
        if text == "front":
            return GcmPlacement.front()
        if text == "all":
            return GcmPlacement.all_layers()
        if text.startswith("block:") and len(text) > 6:
            return GcmPlacement.after_block(text[6:])
        raise ConfigError(f"cannot parse placement {text!r}; expected front | block:<name> | all")

    def describe(self) -> str:
        return f"block:{self.block}" if self.kind == "after_block" else self.kind


def _phase64(x32: np.ndarray, w: float) -> np.ndarray:
    return np.mod(w * x32.astype(np.float64), _TWO_PI)


def _multiplier64(x32: np.ndarray, cfg: GcmConfig) -> np.ndarray:
    return 1.0 + (cfg.eps * cfg.w) * np.cos(_phase64(x32, cfg.w))


def _apply32(x32: np.ndarray, cfg: GcmConfig) -> np.ndarray:
    if cfg.eps == 0.0:
        return x32
    x64 = x32.astype(np.float64)
    out = (x64 + cfg.eps * np.sin(_phase64(x32, cfg.w))).astype(np.float32)
    # float32 rounding can push the result just past the eps band; nudge the
    # offending values back one ulp at a time so the bound holds exactly
    while True:
        over = np.abs(out.astype(np.float64) - x64) > cfg.eps
        if not over.any():
            return out
        out = np.where(over, np.nextafter(out, x32), out)


def scalar_map(x: float, cfg: GcmConfig) -> float:
    """The 64-bit reference map x + eps*sin(w*x mod 2*pi), without the
    float32 rounding of the tensor path. Used as an oracle target."""
    return float(x) + cfg.eps * math.sin(math.fmod(cfg.w * float(x), _TWO_PI))


def gcm_apply(x: Tensor, cfg: GcmConfig) -> Tensor:
    """Forward concealment map; output differs from x by at most cfg.eps
    elementwise, exactly, including float32 rounding."""
    return Tensor(_apply32(x.data, cfg))


def gcm_grad_multiplier(x: Tensor, cfg: GcmConfig) -> Tensor:
    """Exact local derivative 1 + eps*w*cos(w*x), evaluated on the same
    64-bit path the tape uses, then rounded to float32."""
    return Tensor(_multiplier64(x.data, cfg).astype(np.float32))


def gcm_node(tape: Tape, x: Node, cfg: GcmConfig) -> Node:
    """Tape primitive for the concealment layer. The backward rule is the
    analytic multiplier, never finite differences, so attacking through the
    layer sees exactly 1 + eps*w*cos(w*x)."""
    value = _apply32(x.value, cfg)
    m64 = _multiplier64(x.value, cfg)

    def vjp(g):
        # stacked concealment layers can overflow float32 here; saturation
        # to inf is expected and handled by the consumers
        with np.errstate(over="ignore"):
            return ((g.astype(np.float64) * m64).astype(np.float32),)

    return tape.record(value, (x,), vjp, "gcm")


def cascade(model, cfg: GcmConfig, placement: GcmPlacement):
    """Wrap a trained model with concealment layers at the given placement.

    "front" inserts one layer before the first block; "after_block" inserts
    one after the named block; "all" inserts one before the first block and
    one after every block. Inner blocks (and their parameter tensors) are
    shared with the original model, not copied.
    """
    from .models import Model, Block, GcmLayer

    names = [b.name for b in model.blocks]
    if placement.kind == "after_block" and placement.block not in names:
        raise ConfigError(f"placement names unknown block {placement.block!r}; model has {names}")

    blocks = []
    if placement.kind in ("front", "all"):
        blocks.append(Block("gcm@input", [GcmLayer(cfg)]))
    for b in model.blocks:
        blocks.append(b)
        if placement.kind == "all" or (placement.kind == "after_block" and b.name == placement.block):
            blocks.append(Block(f"gcm@{b.name}", [GcmLayer(cfg)]))
    return Model(arch=dict(model.arch), blocks=blocks, input_shape=model.input_shape,
                 num_classes=model.num_classes)


def gcm_layer_count(model) -> int:
    """Number of concealment layers inside a (possibly cascaded) model."""
    from .models import GcmLayer

    return sum(1 for b in model.blocks for layer in b.layers if isinstance(layer, GcmLayer))
