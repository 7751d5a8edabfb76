"""Masked cosine alignment loss between a query feature map and a rendering,
plus finite-difference gradients of that loss in the three view angles."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Camera, Pose
from .renderer import FeatureMap, SplatConfig, render_loss, unit_query

WORST_SCORE = 2.0


class NoForeground(ValueError):
    """The rendering covers no pixel, so the loss is undefined."""

    def __init__(self, msg: str = "no foreground"):
        super().__init__(msg)


@dataclass(frozen=True)
class AlignmentScore:
    loss: float
    valid_pixels: int


@dataclass(frozen=True)
class PoseGradient:
    d_elev: float
    d_azim: float
    d_theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.d_elev, self.d_azim, self.d_theta])


def _unit(x: np.ndarray, axis: int = 0) -> np.ndarray:
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


def align_loss(f_q: np.ndarray, f_p: FeatureMap) -> AlignmentScore:
    """Mean of 1 - cos(query, rendering) over the rendering's foreground.

    Only the rendered mask is used; the query carries none. Pixels where
    either vector is zero count as cosine 0.
    """
    q = np.asarray(f_q.data if isinstance(f_q, FeatureMap) else f_q, dtype=np.float64)
    if q.shape != f_p.data.shape:
        raise ValueError(f"shape mismatch {q.shape} vs {f_p.data.shape}")
    mask = f_p.mask
    n = int(mask.sum())
    if n == 0:
        raise NoForeground()
    cos = (_unit(q) * _unit(f_p.data)).sum(axis=0)
    loss = float((1.0 - cos)[mask].sum() / n)
    return AlignmentScore(loss, n)


def quantize(loss: float, decimals: int | None) -> float:
    return loss if decimals is None else round(loss, decimals)


def pose_loss(
    bank, qhat: np.ndarray, pose: Pose, cam: Camera, cfg: SplatConfig, decimals: int | None = None
) -> float:
    """Alignment loss of ``bank`` rendered at ``pose``; ``qhat`` comes from
    :func:`prepare_query`. Raises :class:`NoForeground` on an empty render."""
    loss, n = render_loss(bank.fused, bank.cloud, qhat, pose, cam, cfg)
    if n == 0:
        raise NoForeground()
    return quantize(loss, decimals)


def prepare_query(f_q) -> np.ndarray:
    return unit_query(f_q.data if isinstance(f_q, FeatureMap) else f_q)


def _probe(pose: Pose, axis: int, delta: float) -> Pose:
    angles = [pose.elev, pose.azim, pose.theta]
    angles[axis] += delta
    return Pose(*angles, pose.dist)


def pose_gradient_fd(
    bank,
    f_q,
    pose: Pose,
    cam: Camera,
    cfg: SplatConfig,
    h: float = math.radians(0.5),
    decimals: int | None = None,
) -> PoseGradient:
    """Central differences in (elev, azim, theta), six renders in total.

    A probe with an empty rendering falls back to a one-sided difference
    against the loss at ``pose``; with both probes empty the component is 0.
    """
    return fd_gradient(bank, prepare_query(f_q), pose, cam, cfg, h, decimals)


def fd_gradient(
    bank,
    qhat: np.ndarray,
    pose: Pose,
    cam: Camera,
    cfg: SplatConfig,
    h: float = math.radians(0.5),
    decimals: int | None = None,
    seen: list | None = None,
) -> PoseGradient:
    """:func:`pose_gradient_fd` on a prepared query. ``seen``, when given,
    collects ``(loss, pose)`` for every probe that rendered something."""
    if not h > 0:
        raise ValueError("step must be positive")
    center = None
    grad = []
    for axis in range(3):
        vals = []
        for sign in (1.0, -1.0):
            probe = _probe(pose, axis, sign * h)
            try:
                loss = pose_loss(bank, qhat, probe, cam, cfg, decimals)
            except NoForeground:
                vals.append(None)
                continue
            vals.append((loss, probe.as_array()[axis]))
            if seen is not None:
                seen.append((loss, probe))
        plus, minus = vals
        here = pose.as_array()[axis]
        if plus is None and minus is None:
            grad.append(0.0)
            continue
        if plus is None or minus is None:
            if center is None:
                try:
                    center = pose_loss(bank, qhat, pose, cam, cfg, decimals)
                except NoForeground:
                    grad.append(0.0)
                    continue
            plus = plus or (center, here)
            minus = minus or (center, here)
        span = _angle_delta(plus[1], minus[1], axis)
        grad.append((plus[0] - minus[0]) / span if span != 0 else 0.0)
    return PoseGradient(*grad)


def _angle_delta(a: float, b: float, axis: int) -> float:
    """a - b, unwrapped for the periodic axes."""
    d = a - b
    if axis > 0:
        d = (d + math.pi) % (2 * math.pi) - math.pi
    return d

