"""White-box gradient attacks: FGSM, PGD with exact Lp-ball projection,
and C&W with tanh box reparametrization and binary search over the
trade-off constant.

Attacks accept either a Model or any object exposing the small target
protocol (``logits``, ``loss_input_grad``, ``class_pair_grad``), which is
how analytic test objectives are plugged in. Everything here is a pure
function of (target parameters, x, y, cfg): there is no random start, so
repeated calls are bit-identical.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward
from .errors import ConfigError
from . import ops

INF = float("inf")

# Relative slack under which a perturbation already counts as inside the
# ball. Needed for bit-exact idempotence: a projected point re-enters with
# a norm within float32 rounding of the radius and must be returned as-is.
_BALL_SLACK = 1e-6


@dataclass(frozen=True)
class NormConstraint:
    """Lp ball: order p in {1, 2, inf} and radius eps in input-domain units
    (pixels live in [0,1]). eps = 0 is the identity-attack boundary case."""

    p: float
    eps: float

    def __post_init__(self):
        if self.p not in (1, 2, INF):
            raise ConfigError(f"norm order must be 1, 2 or inf, got {self.p}")
        if not (self.eps >= 0):
            raise ConfigError(f"norm budget eps must be non-negative, got {self.eps}")

    def describe(self) -> str:
        p = "inf" if self.p == INF else str(int(self.p))
        return f"l{p}:{self.eps:g}"


@dataclass(frozen=True)
class CwParams:
    binary_search_steps: int = 10
    learning_rate: float = 1e-2
    iterations: int = 10
    confidence: float = 0.0
    c_init: float = 1e-2
    c_max: float = 1e4


@dataclass(frozen=True)
class AttackConfig:
    """family: fgsm | pgd | cw; target=None means untargeted.

    steps/step_size drive PGD (step_size defaults to 2.5*eps/steps);
    the cw block carries the C&W hyperparameters.
    """

    family: str
    norm: NormConstraint
    target: int | None = None
    steps: int = 10
    step_size: float | None = None
    cw: CwParams = field(default_factory=CwParams)

    def __post_init__(self):
        if self.family not in ("fgsm", "pgd", "cw"):
            raise ConfigError(f"unknown attack family {self.family!r}")
        if self.family == "fgsm" and self.norm.p != INF:
            raise ConfigError("fgsm is defined only under the L-inf norm")
        if self.family == "cw" and self.norm.p != 2:
            raise ConfigError("cw is defined only under the L2 norm")
        if self.family == "pgd" and self.steps < 1:
            raise ConfigError(f"pgd needs steps >= 1, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise ConfigError(f"step_size must be positive, got {self.step_size}")

    def describe(self) -> str:
        tag = f"{self.family}-{self.norm.describe()}"
        if self.target is not None:
            tag += f"-t{self.target}"
        return tag

    def to_json(self) -> dict:
        out = {
            "family": self.family,
            "norm": {"p": "inf" if self.norm.p == INF else self.norm.p, "eps": self.norm.eps},
            "target": self.target,
        }
        if self.family == "pgd":
            out["steps"] = self.steps
            out["step_size"] = self.step_size
        if self.family == "cw":
            out["cw"] = {
                "binary_search_steps": self.cw.binary_search_steps,
                "learning_rate": self.cw.learning_rate,
                "iterations": self.cw.iterations,
                "confidence": self.cw.confidence,
                "c_init": self.cw.c_init,
            }
        return out


@dataclass
class AdvExample:
    """A batch of adversarial examples: per-sample achieved norms and
    success flags (prediction changed, or target hit when targeted)."""

    x_adv: Tensor
    norms: np.ndarray
    success: np.ndarray


# ---------------------------------------------------------------------------
# target protocol


class ModelTarget:
    """Adapts a Model to the attack-facing protocol."""

    def __init__(self, model):
        from .models import forward_eval  # local import to avoid a cycle

        self._model = model
        self._forward_eval = forward_eval

    def logits(self, x: np.ndarray) -> np.ndarray:
        out, _ = self._forward_eval(self._model, Tensor(x))
        return out.data

    def loss_input_grad(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        from .models import grad_wrt_input

        return grad_wrt_input(self._model, Tensor(x), y).data

    def class_pair_grad(self, x: np.ndarray, a: int, b: int) -> np.ndarray:
        """Gradient of logits[:, a] - logits[:, b] w.r.t. the input."""
        _, tape = self._forward_eval(self._model, Tensor(x))
        k = tape.logits.shape[1]
        sel = np.zeros((x.shape[0], k), dtype=np.float32)
        sel[:, a] = 1.0
        sel[:, b] = -1.0
        weighted = ops.mul(tape, tape.logits, tape.leaf(sel, name="class_sel"))
        margin = ops.sum_all(tape, weighted)
        return backward(tape, margin).input_gradient.data


def as_target(model_or_target):
    if hasattr(model_or_target, "loss_input_grad") and hasattr(model_or_target, "logits"):
        return model_or_target
    return ModelTarget(model_or_target)


# ---------------------------------------------------------------------------
# norms and projection


_F32_MAX = float(np.finfo(np.float32).max)


def _sanitize_gradient(g: np.ndarray) -> np.ndarray:
    """Gradients through stacked concealment layers can saturate float32;
    treat +/-inf as a huge finite slope and NaN as no information."""
    if np.isfinite(g).all():
        return g
    return np.nan_to_num(g, nan=0.0, posinf=_F32_MAX, neginf=-_F32_MAX)


def lp_norms(delta: np.ndarray, p: float) -> np.ndarray:
    """Per-sample Lp norm over all non-batch axes, in float64."""
    d = np.abs(delta.reshape(delta.shape[0], -1).astype(np.float64))
    if p == INF:
        return d.max(axis=1)
    if p == 2:
        return np.sqrt((d * d).sum(axis=1))
    return d.sum(axis=1)


def _project_batch(r64: np.ndarray, norm: NormConstraint) -> np.ndarray:
    """Euclidean projection of each sample onto the Lp ball, in float64."""
    eps = float(norm.eps)
    if norm.p == INF:
        return np.clip(r64, -eps, eps)

    flat = r64.reshape(r64.shape[0], -1)
    out = flat.copy()
    if norm.p == 2:
        norms = np.sqrt((flat * flat).sum(axis=1))
        over = norms > eps * (1.0 + _BALL_SLACK)
        if over.any():
            out[over] = flat[over] * (eps / norms[over])[:, None]
        return out.reshape(r64.shape)

    # L1: sorted-threshold (simplex) projection of |r|, signs restored
    mags = np.abs(flat)
    l1 = mags.sum(axis=1)
    for i in np.nonzero(l1 > eps * (1.0 + _BALL_SLACK))[0]:
        u = np.sort(mags[i])[::-1]
        css = np.cumsum(u)
        j = np.arange(1, u.size + 1)
        rho = np.nonzero(u - (css - eps) / j > 0)[0][-1]
        tau = (css[rho] - eps) / (rho + 1)
        out[i] = np.sign(flat[i]) * np.maximum(mags[i] - tau, 0.0)
    return out.reshape(r64.shape)


def project(r: Tensor, norm: NormConstraint) -> Tensor:
    """Euclidean projection of a single perturbation onto the Lp ball.

    Points whose norm is within a 1e-6 relative band of the radius are
    returned unchanged, which makes the projection bit-exactly idempotent
    under float32 rounding.
    """
    shaped = r.data.reshape((1,) + r.shape)
    norms = lp_norms(shaped, norm.p)
    if norms[0] <= norm.eps * (1.0 + _BALL_SLACK):
        return r
    out = _project_batch(shaped.astype(np.float64), norm)
    return Tensor(out.reshape(r.shape).astype(np.float32))


# ---------------------------------------------------------------------------
# attacks


def _finish(x0: np.ndarray, x_adv64: np.ndarray, target, cfg: AttackConfig, y) -> AdvExample:
    x_adv = np.clip(x_adv64, 0.0, 1.0).astype(np.float32)
    norms = lp_norms(x_adv.astype(np.float64) - x0.astype(np.float64), cfg.norm.p)
    pred = np.argmax(target.logits(x_adv), axis=1)
    if cfg.target is None:
        success = pred != np.asarray(y)
    else:
        success = pred == cfg.target
    return AdvExample(x_adv=Tensor(x_adv), norms=norms, success=success)


def fgsm(model, x: Tensor, y, cfg: AttackConfig) -> AdvExample:
    """Single-step sign attack under L-inf.

    untargeted: x' = clip(x + eps * sign(grad_x L(x, y)))
    targeted:   x' = clip(x - eps * sign(grad_x L(x, target)))

    Exactly one gradient evaluation; sign(0) = 0 leaves a coordinate alone.
    """
    if cfg.family != "fgsm":
        raise ConfigError(f"fgsm called with family {cfg.family!r}")
    target = as_target(model)
    y = np.asarray(y)
    labels = np.full_like(y, cfg.target) if cfg.target is not None else y
    g = _sanitize_gradient(target.loss_input_grad(x.data, labels))
    step = np.sign(g).astype(np.float64) * float(cfg.norm.eps)
    x64 = x.data.astype(np.float64)
    x_adv64 = x64 - step if cfg.target is not None else x64 + step
    return _finish(x.data, x_adv64, target, cfg, y)


def _ascent_direction(g: np.ndarray, p: float) -> np.ndarray:
    """Steepest-ascent direction under the norm geometry.

    L-inf: sign(g). L2: g normalized per sample. L1: the single coordinate
    of largest |g| per sample (ties toward the lowest flat index).
    """
    g = g.astype(np.float64)
    if p == INF:
        return np.sign(g)
    flat = g.reshape(g.shape[0], -1)
    if p == 2:
        norms = np.sqrt((flat * flat).sum(axis=1, keepdims=True))
        norms[norms == 0] = 1.0
        return (flat / norms).reshape(g.shape)
    d = np.zeros_like(flat)
    idx = np.abs(flat).argmax(axis=1)
    rows = np.arange(flat.shape[0])
    d[rows, idx] = np.sign(flat[rows, idx])
    return d.reshape(g.shape)


def pgd(model, x: Tensor, y, cfg: AttackConfig) -> AdvExample:
    """Projected gradient ascent on the loss over the Lp ball.

    r <- project(r + step_size * d) from r = 0 (no random start), then
    x' = clip(x + r). With steps=1, L-inf and step_size >= eps this reduces
    exactly to untargeted FGSM.
    """
    if cfg.family != "pgd":
        raise ConfigError(f"pgd called with family {cfg.family!r}")
    target = as_target(model)
    y = np.asarray(y)
    eps = float(cfg.norm.eps)
    alpha = float(cfg.step_size) if cfg.step_size is not None else 2.5 * eps / cfg.steps
    labels = np.full_like(y, cfg.target) if cfg.target is not None else y
    ascent = -1.0 if cfg.target is not None else 1.0

    x64 = x.data.astype(np.float64)
    r = np.zeros_like(x64)
    for _ in range(cfg.steps):
        g = _sanitize_gradient(target.loss_input_grad((x64 + r).astype(np.float32), labels))
        r = _project_batch(r + alpha * ascent * _ascent_direction(g, cfg.norm.p), cfg.norm)
        worst = lp_norms(r, cfg.norm.p).max(initial=0.0)
        if worst > eps * (1.0 + _BALL_SLACK):
            raise RuntimeError(f"pgd internal error: iterate left the ball ({worst} > {eps})")
    return _finish(x.data, x64 + r, target, cfg, y)


def cw(model, x: Tensor, y, cfg: AttackConfig) -> AdvExample:
    """C&W L2: minimize ||r||_2 + c * max(margin, -k) over the tanh
    reparametrization x' = (tanh(u) + 1) / 2, with binary search over c.

    The margin uses raw logits, ties in max_{j != y} break toward the
    lowest index. Per sample the search doubles c on failure and halves
    back between the last failure and the first success; the candidate is
    the misclassifying iterate of minimal L2 norm. cfg.norm.eps is the
    budget the attack is evaluated at: a candidate above it does not count,
    and the clean input is returned with success=False.
    """
    if cfg.family != "cw":
        raise ConfigError(f"cw called with family {cfg.family!r}")
    target = as_target(model)
    y = np.asarray(y)
    n = x.shape[0]
    out = np.empty_like(x.data)
    norms = np.empty(n, dtype=np.float64)
    success = np.zeros(n, dtype=bool)
    for i in range(n):
        adv, nrm, ok = _cw_single(target, x.data[i:i + 1], int(y[i]), cfg)
        if ok and nrm > cfg.norm.eps * (1.0 + _BALL_SLACK):
            adv, nrm, ok = x.data[i:i + 1], 0.0, False
        out[i] = adv[0]
        norms[i] = nrm
        success[i] = ok
    return AdvExample(x_adv=Tensor(out), norms=norms, success=success)


def _cw_margin(logits: np.ndarray, y: int, target: int | None):
    """(margin, a, b) with margin = Z[a] - Z[b]: the quantity pushed below
    -k. Untargeted: a=y, b=best other; targeted: a=best other, b=target."""
    z = logits[0]
    if target is None:
        masked = z.copy()
        masked[y] = -np.inf
        j = int(np.argmax(masked))
        return float(z[y] - z[j]), y, j
    masked = z.copy()
    masked[target] = -np.inf
    j = int(np.argmax(masked))
    return float(z[j] - z[target]), j, target


def _cw_single(target, x0: np.ndarray, y: int, cfg: AttackConfig):
    p = cfg.cw
    k = float(p.confidence)
    x064 = x0.astype(np.float64)
    u0 = np.arctanh(np.clip(2.0 * x064 - 1.0, -1.0 + 1e-6, 1.0 - 1e-6))

    best_adv = x0.copy()
    best_norm = np.inf
    found = False

    c_low = 0.0
    c_high = None
    c = float(p.c_init)
    for _ in range(p.binary_search_steps):
        u = u0.copy()
        round_ok = False
        for _ in range(p.iterations):
            xhat64 = 0.5 * (np.tanh(u) + 1.0)
            xhat32 = xhat64.astype(np.float32)
            logits = target.logits(xhat32)
            margin, a, b = _cw_margin(logits, y, cfg.target)
            pred = int(np.argmax(logits[0]))
            hit = (pred == cfg.target) if cfg.target is not None else (pred != y)
            r = xhat64 - x064
            l2 = float(np.sqrt((r * r).sum()))
            if hit:
                round_ok = True
                if l2 < best_norm:
                    best_norm = l2
                    best_adv = xhat32.copy()
                    found = True
            # d||r||/dx' = r/||r|| (0 at r=0); hinge gradient active while
            # margin > -k
            g = r / max(l2, 1e-12)
            if margin > -k:
                g = g + c * _sanitize_gradient(
                    target.class_pair_grad(xhat32, a, b)).astype(np.float64)
            u = u - p.learning_rate * g * 0.5 * (1.0 - np.tanh(u) ** 2)
        if round_ok:
            c_high = c
            c = 0.5 * (c_low + c_high)
        else:
            c_low = c
            c = min(c * 2.0, p.c_max) if c_high is None else 0.5 * (c_low + c_high)
            if c_high is None and c_low >= p.c_max:
                break
    return best_adv, (best_norm if found else 0.0), found


def run_attack(model, x: Tensor, y, cfg: AttackConfig) -> AdvExample:
    """Dispatch on the attack family."""
    if cfg.family == "fgsm":
        return fgsm(model, x, y, cfg)
    if cfg.family == "pgd":
        return pgd(model, x, y, cfg)
    return cw(model, x, y, cfg)
