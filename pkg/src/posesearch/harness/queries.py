"""Query construction: self-rendered feature maps with feature noise and
rectangular occluders filled with random unit vectors."""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..geometry import Camera, Pose
from ..renderer import SplatConfig, render_features


class OcclusionLevel(str, Enum):
    L0 = "L0"
    L1 = "L1"
    L2 = "L2"
    L3 = "L3"


OCCLUSION_RANGES = {
    OcclusionLevel.L0: (0.0, 0.0),
    OcclusionLevel.L1: (0.02, 0.10),
    OcclusionLevel.L2: (0.10, 0.20),
    OcclusionLevel.L3: (0.20, 0.40),
}


@dataclass(frozen=True)
class OcclusionSpec:
    level: OcclusionLevel = OcclusionLevel.L0

    @property
    def fraction_range(self) -> tuple[float, float]:
        return OCCLUSION_RANGES[OcclusionLevel(self.level)]

    def count_range(self, n_object: int) -> tuple[int, int]:
        """Admissible number of covered object pixels. When no integer count
        falls inside the range, the nearest count above the lower bound is
        allowed (one-pixel quantization)."""
        lo, hi = self.fraction_range
        c_lo, c_hi = math.ceil(lo * n_object - 1e-9), math.floor(hi * n_object + 1e-9)
        return (c_lo, c_hi) if c_lo <= c_hi else (c_lo, c_lo)


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    gt_shape_id: str
    gt_category: str
    gt_pose: Pose
    level: str
    data: np.ndarray  # D x H x W, the only retriever-facing field
    gt_mask: np.ndarray  # bookkeeping only
    occluded_fraction: float


def apply_occlusion(
    data: np.ndarray, object_mask: np.ndarray, occ: OcclusionSpec, seed: int
) -> tuple[np.ndarray, float, np.ndarray]:
    """Cover part of the object with random-texture rectangles.

    Rectangles are drawn until the covered share of object pixels enters the
    level's range; a rectangle that would overshoot the upper bound is shrunk
    one row or column at a time. Returns the occluded map, the achieved
    fraction and the covered-pixel mask.
    """
    object_mask = np.asarray(object_mask, bool)
    covered = np.zeros_like(object_mask)
    if OcclusionLevel(occ.level) is OcclusionLevel.L0:
        return data.copy(), 0.0, covered
    n_obj = int(object_mask.sum())
    if n_obj == 0:
        raise ValueError("occlusion target unreachable: empty object mask")
    c_lo, c_hi = occ.count_range(n_obj)
    if c_lo > n_obj:
        raise ValueError("occlusion target unreachable: object too small")
    rng = np.random.default_rng(seed)
    height, width = object_mask.shape
    rows, cols = np.nonzero(object_mask)
    target = rng.uniform(c_lo, c_hi + 1)
    n_cov = 0
    while n_cov < c_lo:
        side = max(1.0, math.sqrt(max(target - n_cov, 1.0)) * rng.uniform(0.6, 1.4))
        aspect = rng.uniform(0.5, 2.0)
        h = max(1, min(height, round(side * math.sqrt(aspect))))
        w = max(1, min(width, round(side / math.sqrt(aspect))))
        k = rng.integers(len(rows))
        r0 = int(np.clip(rows[k] - h // 2, 0, height - h))
        c0 = int(np.clip(cols[k] - w // 2, 0, width - w))
        while True:
            gain = int((object_mask[r0 : r0 + h, c0 : c0 + w] & ~covered[r0 : r0 + h, c0 : c0 + w]).sum())
            if n_cov + gain <= c_hi or (h == 1 and w == 1):
                break
            if h >= w:
                h -= 1
            else:
                w -= 1
        covered[r0 : r0 + h, c0 : c0 + w] = True
        n_cov += gain
    out = data.copy()
    n_fill = int(covered.sum())
    fill = rng.normal(size=(data.shape[0], n_fill))
    fill /= np.linalg.norm(fill, axis=0, keepdims=True)
    out[:, covered] = fill
    return out, n_cov / n_obj, covered


def add_feature_noise(data: np.ndarray, mask: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Gaussian noise on foreground pixels, then per-pixel unit normalization."""
    out = data.copy()
    if sigma > 0:
        out[:, mask] += sigma * rng.normal(size=(data.shape[0], int(mask.sum())))
    norm = np.linalg.norm(out, axis=0)
    fg = mask & (norm > 0)
    out[:, fg] /= norm[fg]
    return out


def make_query(
    bank,
    pose: Pose,
    occ: OcclusionSpec,
    noise_sigma: float,
    seed: int,
    cam: Camera | None = None,
    cfg: SplatConfig | None = None,
    query_id: str = "",
) -> QueryRecord:
    cam = cam or Camera.default()
    cfg = cfg or SplatConfig(height=cam.height, width=cam.width)
    fmap = render_features(bank, pose, cam, cfg)
    rng = np.random.default_rng(seed)
    data = add_feature_noise(fmap.data, fmap.mask, noise_sigma, rng)
    data, frac, _ = apply_occlusion(data, fmap.mask, occ, int(rng.integers(2**31)))
    return QueryRecord(
        query_id or f"{bank.shape_id}@{seed}",
        bank.shape_id,
        bank.category,
        pose,
        OcclusionLevel(occ.level).value,
        data,
        fmap.mask.copy(),
        frac,
    )


def random_pose(rng, elev_range, theta_range, dist: float) -> Pose:
    return Pose(rng.uniform(*elev_range), rng.uniform(0.0, 2 * math.pi), rng.uniform(*theta_range), dist)


def save_queries(path, records: list[QueryRecord]) -> None:
    """Compressed npz: float32 maps, ground-truth masks and one metadata row per query."""
    meta = [
        repr((r.query_id, r.gt_shape_id, r.gt_category, r.level, r.gt_pose.elev, r.gt_pose.azim, r.gt_pose.theta, r.gt_pose.dist, r.occluded_fraction))
        for r in records
    ]
    np.savez_compressed(
        path,
        data=np.stack([r.data for r in records]).astype(np.float32),
        gt_mask=np.stack([r.gt_mask for r in records]),
        meta=np.array(meta),
    )


def load_queries(path) -> list[QueryRecord]:
    with np.load(path, allow_pickle=False) as z:
        data, masks, meta = z["data"].astype(np.float64), z["gt_mask"], z["meta"]
    out = []
    for d, m, row in zip(data, masks, meta):
        qid, sid, cat, level, e, a, t, dist, frac = ast.literal_eval(str(row))
        out.append(QueryRecord(qid, sid, cat, Pose(e, a, t, dist), level, d, m, frac))
    return out
