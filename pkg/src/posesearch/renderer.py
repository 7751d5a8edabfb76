"""Point-feature splatting.

Points are projected with the pinhole camera, splatted as disks of fixed
radius in normalized screen units (half the image extent is 1) and their
features blended per pixel with normalized weights::

    alpha_i = 1 - d_i**2 / r**2
    f(pixel) = sum_i alpha_i * feat_i / (sum_i alpha_i + eps)

Only the ``points_per_pixel`` nearest-in-depth points contribute to a pixel.
For a fixed rasterization the composite is linear in the features, which is
what makes :func:`feature_gradient` an exact adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .geometry import Camera, PointCloud, Pose, project_points


@dataclass(frozen=True)
class SplatConfig:
    radius: float = 0.04
    points_per_pixel: int = 16
    height: int = 37
    width: int = 37
    eps: float = 1e-10

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.points_per_pixel < 1:
            raise ValueError("points_per_pixel must be >= 1")


@dataclass(frozen=True)
class FeatureMap:
    """``data`` is D x H x W; ``mask`` is H x W (True where any splat weight landed)."""

    data: np.ndarray
    mask: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Fragments:
    """Per-pixel depth-sorted splat lists, padded with -1 up to ``points_per_pixel``.

    ``dist2`` holds squared pixel-center distances in normalized screen units.
    """

    idx: np.ndarray  # (H, W, K) int64
    dist2: np.ndarray  # (H, W, K)
    depth: np.ndarray  # (H, W, K)
    count: np.ndarray  # (H, W)
    radius: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.count.shape

    def pixel(self, row: int, col: int) -> list[tuple[int, float, float]]:
        n = self.count[row, col]
        return [
            (int(self.idx[row, col, k]), float(np.sqrt(self.dist2[row, col, k])), float(self.depth[row, col, k]))
            for k in range(n)
        ]


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _rasterize_kernel(u, v, depth, valid, height, width, radius, k_max):
    idx = np.full((height, width, k_max), -1, dtype=np.int64)
    dist2 = np.zeros((height, width, k_max))
    zbuf = np.full((height, width, k_max), np.inf)
    count = np.zeros((height, width), dtype=np.int64)
    hx = width / 2.0
    hy = height / 2.0
    r2 = radius * radius
    rx = radius * hx
    ry = radius * hy
    for i in range(u.shape[0]):
        if not valid[i]:
            continue
        ui = u[i]
        vi = v[i]
        if ui + rx < -1.0 or ui - rx > width + 1.0 or vi + ry < -1.0 or vi - ry > height + 1.0:
            continue
        c0 = max(0, int(np.floor(ui - rx - 0.5)))
        c1 = min(width - 1, int(np.ceil(ui + rx - 0.5)))
        r0 = max(0, int(np.floor(vi - ry - 0.5)))
        r1 = min(height - 1, int(np.ceil(vi + ry - 0.5)))
        z = depth[i]
        for r in range(r0, r1 + 1):
            dy = (r + 0.5 - vi) / hy
            for c in range(c0, c1 + 1):
                dx = (c + 0.5 - ui) / hx
                dd = dx * dx + dy * dy
                if dd > r2:
                    continue
                n = count[r, c]
                pos = n
                while pos > 0 and zbuf[r, c, pos - 1] > z:
                    pos -= 1
                if pos >= k_max:
                    continue
                last = min(n, k_max - 1)
                for t in range(last, pos, -1):
                    idx[r, c, t] = idx[r, c, t - 1]
                    dist2[r, c, t] = dist2[r, c, t - 1]
                    zbuf[r, c, t] = zbuf[r, c, t - 1]
                idx[r, c, pos] = i
                dist2[r, c, pos] = dd
                zbuf[r, c, pos] = z
                count[r, c] = min(n + 1, k_max)
    return idx, dist2, zbuf, count


@numba.njit(cache=True)
def _pixel_weights(dist2, count, r, c, r2, out):
    total = 0.0
    for k in range(count[r, c]):
        a = 1.0 - dist2[r, c, k] / r2
        if a < 0.0:
            a = 0.0
        elif a > 1.0:
            a = 1.0
        out[k] = a
        total += a
    return total


@numba.njit(cache=True)
def _composite_kernel(idx, dist2, count, feats, r2, eps):
    height, width, k_max = idx.shape
    dim = feats.shape[1]
    out = np.zeros((height, width, dim))
    mask = np.zeros((height, width), dtype=np.bool_)
    alpha = np.empty(k_max)
    for r in range(height):
        for c in range(width):
            total = _pixel_weights(dist2, count, r, c, r2, alpha)
            if total <= 0.0:
                continue
            mask[r, c] = True
            denom = total + eps
            for k in range(count[r, c]):
                w = alpha[k] / denom
                j = idx[r, c, k]
                for d in range(dim):
                    out[r, c, d] += w * feats[j, d]
    return out, mask


@numba.njit(cache=True)
def _adjoint_kernel(idx, dist2, count, residual, mask, n_points, r2, eps):
    height, width, k_max = idx.shape
    dim = residual.shape[2]
    grad = np.zeros((n_points, dim))
    alpha = np.empty(k_max)
    for r in range(height):
        for c in range(width):
            if not mask[r, c]:
                continue
            total = _pixel_weights(dist2, count, r, c, r2, alpha)
            if total <= 0.0:
                continue
            denom = total + eps
            for k in range(count[r, c]):
                w = alpha[k] / denom
                j = idx[r, c, k]
                for d in range(dim):
                    grad[j, d] += w * residual[r, c, d]
    return grad


@numba.njit(cache=True)
def _cosine_loss_kernel(idx, dist2, count, feats, qhat, r2, eps):
    """Sum over covered pixels of (1 - cos(q, f)) and the covered-pixel count.

    ``qhat`` is the unit-normalized query (H, W, D), zero where the query is.
    """
    height, width, k_max = idx.shape
    dim = feats.shape[1]
    alpha = np.empty(k_max)
    pix = np.empty(dim)
    loss = 0.0
    n_mask = 0
    for r in range(height):
        for c in range(width):
            total = _pixel_weights(dist2, count, r, c, r2, alpha)
            if total <= 0.0:
                continue
            n_mask += 1
            denom = total + eps
            pix[:] = 0.0
            for k in range(count[r, c]):
                w = alpha[k] / denom
                j = idx[r, c, k]
                for d in range(dim):
                    pix[d] += w * feats[j, d]
            dot = 0.0
            nrm = 0.0
            for d in range(dim):
                dot += qhat[r, c, d] * pix[d]
                nrm += pix[d] * pix[d]
            if nrm > 0.0:
                loss += 1.0 - dot / np.sqrt(nrm)
            else:
                loss += 1.0
    return loss, n_mask


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def _points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float).reshape(-1, 3)


def rasterize(cloud: PointCloud | np.ndarray, pose: Pose, cam: Camera, cfg: SplatConfig) -> Fragments:
    pts = _points(cloud)
    if len(pts) == 0:
        shape = (cam.height, cam.width, cfg.points_per_pixel)
        return Fragments(
            np.full(shape, -1, dtype=np.int64),
            np.zeros(shape),
            np.full(shape, np.inf),
            np.zeros(shape[:2], dtype=np.int64),
            cfg.radius,
        )
    proj = project_points(pts, pose, cam)
    u = np.where(proj.valid, proj.u, 0.0)
    v = np.where(proj.valid, proj.v, 0.0)
    idx, dist2, zbuf, count = _rasterize_kernel(
        u, v, proj.depth, proj.valid, cam.height, cam.width, cfg.radius, cfg.points_per_pixel
    )
    return Fragments(idx, dist2, zbuf, count, cfg.radius)


def composite(frags: Fragments, feats: np.ndarray, eps: float = 1e-10) -> FeatureMap:
    feats = np.ascontiguousarray(feats, dtype=np.float64)
    if frags.count.any() and feats.shape[0] <= frags.idx.max():
        raise ValueError("feature rows do not cover fragment indices")
    out, mask = _composite_kernel(frags.idx, frags.dist2, frags.count, feats, frags.radius**2, eps)
    return FeatureMap(np.ascontiguousarray(out.transpose(2, 0, 1)), mask)


def render_features(bank, pose: Pose, cam: Camera, cfg: SplatConfig) -> FeatureMap:
    """Render a feature bank's fused per-point features under ``pose``."""
    frags = rasterize(bank.cloud, pose, cam, cfg)
    return composite(frags, bank.fused, cfg.eps)


def feature_gradient(
    frags: Fragments, residual: np.ndarray, mask: np.ndarray, n_points: int | None = None, eps: float = 1e-10
) -> np.ndarray:
    """Transpose of :func:`composite` applied to a D x H x W residual.

    Returns an (n_points, D) array; ``n_points`` defaults to one past the
    largest fragment index.
    """
    if n_points is None:
        n_points = int(frags.idx.max()) + 1 if frags.count.any() else 0
    res = np.ascontiguousarray(np.asarray(residual, dtype=np.float64).transpose(1, 2, 0))
    return _adjoint_kernel(
        frags.idx, frags.dist2, frags.count, res, np.asarray(mask, bool), n_points, frags.radius**2, eps
    )


def unit_query(query: np.ndarray) -> np.ndarray:
    """(D, H, W) query -> (H, W, D) per-pixel unit vectors, zero where the query is zero."""
    q = np.asarray(query, dtype=np.float64).transpose(1, 2, 0)
    norm = np.sqrt((q * q).sum(axis=2, keepdims=True))
    return np.ascontiguousarray(np.divide(q, norm, out=np.zeros_like(q), where=norm > 0))


def render_loss(feats: np.ndarray, cloud, qhat: np.ndarray, pose: Pose, cam: Camera, cfg: SplatConfig):
    """Masked cosine loss of a rendering against a prepared query without
    materializing the feature map. Returns ``(loss, covered_pixels)``; loss is
    NaN when nothing is covered."""
    frags = rasterize(cloud, pose, cam, cfg)
    total, n = _cosine_loss_kernel(frags.idx, frags.dist2, frags.count, feats, qhat, frags.radius**2, cfg.eps)
    return (total / n if n else float("nan")), n


# ---------------------------------------------------------------------------
# debug export
# ---------------------------------------------------------------------------


def _pca_rgb(fmap: FeatureMap) -> np.ndarray:
    d, h, w = fmap.data.shape
    rgb = np.zeros((h, w, 3))
    if fmap.mask.any():
        x = fmap.data.reshape(d, -1).T[fmap.mask.ravel()]
        x = x - x.mean(axis=0)
        _, _, vt = np.linalg.svd(x, full_matrices=False)
        comps = x @ vt[: min(3, len(vt))].T
        lo, hi = comps.min(axis=0), comps.max(axis=0)
        scaled = (comps - lo) / np.where(hi > lo, hi - lo, 1.0)
        flat = rgb.reshape(-1, 3)
        flat[np.flatnonzero(fmap.mask.ravel()), : scaled.shape[1]] = scaled
    return np.round(rgb * 255).astype(np.uint8)


def write_mask_pgm(path, fmap: FeatureMap) -> None:
    h, w = fmap.mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write((fmap.mask.astype(np.uint8) * 255).tobytes())


def write_feature_ppm(path, fmap: FeatureMap) -> None:
    """Top-3 principal components of the covered pixels, min-max scaled to 0-255."""
    rgb = _pca_rgb(fmap)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())
