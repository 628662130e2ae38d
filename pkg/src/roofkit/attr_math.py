"""Attribute regression targets and losses.

Height targets are regressed in an encoded space selected by
:class:`HeightScheme`; azimuth is regressed as a 2D vector and compared to
the target through a cosine loss; the azimuth term is switched off for
segments whose ground-truth roof angle does not exceed ``alpha_th``.
All angles at the function boundaries are degrees.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

HEIGHT_VARIANTS = ("raw", "linear", "log", "log100", "log_normalized")
_VARIANT_ALIASES = {"lognorm": "log_normalized", "log-normalized": "log_normalized"}


class HeightDomainError(ValueError):
    pass


class UndefinedAzimuthError(ValueError):
    pass


@dataclass(frozen=True)
class HeightScheme:
    variant: str = "log_normalized"
    divisor: float = 110.0
    mu: float = 2.06
    sigma: float = 0.45

    def __post_init__(self) -> None:
        variant = _VARIANT_ALIASES.get(self.variant, self.variant)
        if variant not in HEIGHT_VARIANTS:
            raise ValueError(f"unknown height scheme {self.variant!r}; choose from {HEIGHT_VARIANTS}")
        object.__setattr__(self, "variant", variant)
        if not self.divisor > 0:
            raise ValueError("divisor must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


def height_encode(h: float, scheme: HeightScheme) -> float:
    if not h > 0:
        raise HeightDomainError(f"height must be positive, got {h}")
    v = scheme.variant
    if v == "raw":
        return float(h)
    if v == "linear":
        return h / scheme.divisor
    if v == "log":
        return math.log(h)
    if v == "log100":
        return math.log(h) / math.log(100.0)
    return (math.log(h) - scheme.mu) / scheme.sigma


def height_decode(value: float, scheme: HeightScheme) -> float:
    v = scheme.variant
    if v == "raw":
        return float(value)
    if v == "linear":
        if value < 0:
            logger.warning("linear height code %g decodes to a negative height", value)
        return value * scheme.divisor
    if v == "log":
        return math.exp(value)
    if v == "log100":
        return 100.0**value
    return math.exp(value * scheme.sigma + scheme.mu)


@dataclass(frozen=True)
class AzimuthVector:
    """Azimuth as ``(cos phi, sin phi)``; raw network outputs need not be unit length."""

    c: float
    s: float

    @property
    def norm(self) -> float:
        return math.hypot(self.c, self.s)

    def normalized(self) -> "AzimuthVector":
        n = self.norm
        if n == 0.0:
            raise UndefinedAzimuthError("zero vector has no direction")
        return AzimuthVector(self.c / n, self.s / n)


def azimuth_encode(phi_deg: float) -> AzimuthVector:
    rad = math.radians(phi_deg % 360.0)
    return AzimuthVector(math.cos(rad), math.sin(rad))


def azimuth_decode(vec: AzimuthVector) -> float:
    if vec.c == 0.0 and vec.s == 0.0:
        raise UndefinedAzimuthError("zero vector has no direction")
    deg = math.degrees(math.atan2(vec.s, vec.c)) % 360.0
    # -tiny % 360 rounds to 360.0
    return 0.0 if deg >= 360.0 else deg


def azimuth_loss(pred: AzimuthVector, target_deg: float) -> tuple[float, np.ndarray]:
    """``1 - <pred/|pred|, (cos t, sin t)>`` and its gradient w.r.t. raw ``(c, s)``."""
    n = pred.norm
    if n == 0.0:
        raise UndefinedAzimuthError("zero prediction vector")
    u = np.array([pred.c, pred.s]) / n
    rad = math.radians(target_deg)
    t = np.array([math.cos(rad), math.sin(rad)])
    dot = float(u @ t)
    # d(u.t)/dp = (t - (u.t) u) / |p|
    grad = -(t - dot * u) / n
    return 1.0 - dot, grad


@dataclass(frozen=True)
class AttrTarget:
    height: float
    angle: float
    azimuth: float

    def __post_init__(self) -> None:
        if not self.height > 0:
            raise ValueError(f"target height must be positive, got {self.height}")
        if not 0.0 <= self.angle <= 90.0:
            raise ValueError(f"target angle out of [0, 90]: {self.angle}")
        if not 0.0 <= self.azimuth < 360.0:
            raise ValueError(f"target azimuth out of [0, 360): {self.azimuth}")


@dataclass(frozen=True)
class AttrPrediction:
    """Raw head outputs: encoded height, angle in degrees, azimuth vector."""

    height: float
    angle: float
    azimuth: AzimuthVector


@dataclass(frozen=True)
class LossWeights:
    lambda_h: float = 0.5
    lambda_a: float = 0.001
    lambda_phi: float = 1.0
    alpha_th: float = 15.0

    def __post_init__(self) -> None:
        for name in ("lambda_h", "lambda_a", "lambda_phi", "alpha_th"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class AttrLossResult:
    total: float
    # unweighted term values (azimuth before gating)
    height: float
    angle: float
    azimuth: float
    gated: bool
    weighted: dict[str, float]
    # gradient w.r.t. (height code, angle, azimuth c, azimuth s); (N, 4) for batches
    grad: np.ndarray
    n: int = 1
    empty: bool = False


def attr_loss(
    pred: AttrPrediction,
    target: AttrTarget,
    weights: LossWeights = LossWeights(),
    scheme: HeightScheme = HeightScheme(),
) -> AttrLossResult:
    """Single-instance attribute loss.

    The azimuth term is active only when the ground-truth angle is strictly
    above ``weights.alpha_th``. Height error is measured on encoded values.
    """
    dh = pred.height - height_encode(target.height, scheme)
    da = pred.angle - target.angle
    l_h = dh * dh
    l_a = da * da
    active = target.angle > weights.alpha_th
    grad = np.zeros(4)
    grad[0] = weights.lambda_h * 2.0 * dh
    grad[1] = weights.lambda_a * 2.0 * da
    if active:
        l_phi, g_phi = azimuth_loss(pred.azimuth, target.azimuth)
        grad[2:] = weights.lambda_phi * g_phi
    else:
        # gated: the prediction is never read, so zero vectors are harmless
        l_phi = 0.0
    weighted = {
        "height": weights.lambda_h * l_h,
        "angle": weights.lambda_a * l_a,
        "azimuth": weights.lambda_phi * l_phi if active else 0.0,
    }
    total = math.fsum(weighted.values())
    return AttrLossResult(total, l_h, l_a, l_phi, not active, weighted, grad)


def attr_loss_batch(
    preds: Sequence[AttrPrediction],
    targets: Sequence[AttrTarget],
    weights: LossWeights = LossWeights(),
    scheme: HeightScheme = HeightScheme(),
) -> AttrLossResult:
    """Mean of per-instance losses over the N matched instances.

    Gated instances still count in N. Sums use ``math.fsum`` so the result
    does not depend on instance order.
    """
    if len(preds) != len(targets):
        raise ValueError("predictions and targets differ in length")
    n = len(preds)
    if n == 0:
        zero = {"height": 0.0, "angle": 0.0, "azimuth": 0.0}
        return AttrLossResult(0.0, 0.0, 0.0, 0.0, True, zero, np.zeros((0, 4)), n=0, empty=True)
    parts = [attr_loss(p, t, weights, scheme) for p, t in zip(preds, targets)]
    mean = lambda xs: math.fsum(xs) / n  # noqa: E731
    weighted = {k: mean(r.weighted[k] for r in parts) for k in ("height", "angle", "azimuth")}
    return AttrLossResult(
        total=mean(r.total for r in parts),
        height=mean(r.height for r in parts),
        angle=mean(r.angle for r in parts),
        azimuth=mean(r.azimuth for r in parts),
        gated=all(r.gated for r in parts),
        weighted=weighted,
        grad=np.stack([r.grad for r in parts]) / n,
        n=n,
    )


def finite_diff_check(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    inputs: np.ndarray,
    eps: float = 1e-5,
    floor: float = 1e-8,
) -> float:
    """Worst component-wise relative error between analytic and central-difference gradients.

    ``loss_fn(x)`` returns ``(loss, grad)`` with ``grad`` shaped like ``x``.
    The relative error of a component is ``|g - g_fd| / max(|g|, |g_fd|, floor)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    x = np.array(inputs, dtype=float)
    loss, grad = loss_fn(x)
    grad = np.asarray(grad, dtype=float).reshape(x.shape)
    if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise FloatingPointError("loss or gradient is not finite at the check point")
    worst = 0.0
    flat = x.reshape(-1)
    for k in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[k] += eps
        xm[k] -= eps
        fp = loss_fn(xp.reshape(x.shape))[0]
        fm = loss_fn(xm.reshape(x.shape))[0]
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError("loss is not finite near the check point")
        g_fd = (fp - fm) / (2.0 * eps)
        g = grad.reshape(-1)[k]
        worst = max(worst, abs(g - g_fd) / max(abs(g), abs(g_fd), floor))
    return worst


def flat_attr_loss(
    target: AttrTarget,
    weights: LossWeights = LossWeights(),
    scheme: HeightScheme = HeightScheme(),
) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """Adapter exposing :func:`attr_loss` on a flat ``[h, angle, c, s]`` vector."""

    def fn(x: np.ndarray) -> tuple[float, np.ndarray]:
        res = attr_loss(AttrPrediction(x[0], x[1], AzimuthVector(x[2], x[3])), target, weights, scheme)
        return res.total, res.grad

    return fn


def flat_azimuth_loss(target_deg: float) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    return lambda x: azimuth_loss(AzimuthVector(x[0], x[1]), target_deg)


@dataclass
class GradientCheckReport:
    max_rel_error: float
    n_points: int
    per_loss: dict[str, float] = field(default_factory=dict)


def random_gradient_check(
    seed: int,
    n_points: int = 100,
    eps: float = 1e-5,
    weights: LossWeights = LossWeights(),
    scheme: HeightScheme = HeightScheme(),
    gate_margin: float = 1.0,
) -> GradientCheckReport:
    """Central-difference check of both losses at seeded random points.

    Target angles within ``gate_margin`` degrees of the gate are resampled.
    """
    rng = np.random.default_rng(seed)
    worst_phi = worst_attr = 0.0
    for _ in range(n_points):
        r = rng.uniform(0.3, 3.0)
        theta = rng.uniform(0, 2 * math.pi)
        vec = np.array([r * math.cos(theta), r * math.sin(theta)])
        target_phi = float(rng.uniform(0, 360))
        worst_phi = max(worst_phi, finite_diff_check(flat_azimuth_loss(target_phi), vec, eps))

        angle = float(rng.uniform(0, 90))
        while abs(angle - weights.alpha_th) < gate_margin:
            angle = float(rng.uniform(0, 90))
        target = AttrTarget(float(rng.lognormal(2.06, 0.45)), angle, target_phi)
        x = np.array([rng.normal(0, 1.5), angle + rng.normal(0, 10), vec[0], vec[1]])
        worst_attr = max(worst_attr, finite_diff_check(flat_attr_loss(target, weights, scheme), x, eps))
    return GradientCheckReport(
        max(worst_phi, worst_attr), n_points, {"azimuth_loss": worst_phi, "attr_loss": worst_attr}
    )
