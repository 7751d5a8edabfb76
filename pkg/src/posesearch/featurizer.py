"""Multi-scale point feature banks.

A bank holds, for one normalized point cloud, a few FPS-downsampled scale
levels carrying per-point descriptors, and the fused full-resolution
features obtained by interpolating every scale back onto the cloud with
temperature-softmax KNN weights, concatenating, and passing the result
through a projection head (linear map + standardization + L2 norm).

The descriptor is a deterministic geometric stand-in for a learned point
encoder.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import PointCloud, Pose, farthest_point_sample
from .renderer import Camera, FeatureMap, SplatConfig, composite, feature_gradient, rasterize

log = logging.getLogger(__name__)

DEFAULT_SCALES = ((1024, 32), (256, 32), (64, 32))
DEFAULT_DIM = 64
DEFAULT_K = 3
DEFAULT_TAU = 5e-2
NEIGHBORHOOD_RADIUS = 0.15
_FREQ_RANGE = (1.0, 6.0)


@dataclass(frozen=True)
class ScaleLevel:
    points: np.ndarray  # (N_s, 3)
    feats: np.ndarray  # (N_s, D_s)
    indices: np.ndarray | None = None  # rows of the parent cloud


@dataclass(frozen=True)
class FeatureBank:
    cloud: PointCloud
    scales: tuple[ScaleLevel, ...]
    fused: np.ndarray  # (C, D), unit rows
    shape_id: str = ""
    category: str = ""

    @property
    def dim(self) -> int:
        return self.fused.shape[1]

    def with_fused(self, fused: np.ndarray) -> FeatureBank:
        return replace(self, fused=np.ascontiguousarray(fused, dtype=np.float64))


@dataclass(frozen=True)
class ProjectionHead:
    weight: np.ndarray  # (D, sum D_s)

    @classmethod
    def random(cls, in_dim: int, out_dim: int = DEFAULT_DIM, seed: int = 0) -> ProjectionHead:
        rng = np.random.default_rng(seed)
        return cls(rng.normal(size=(out_dim, in_dim)) / np.sqrt(in_dim))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = x @ self.weight.T
        y = y - y.mean(axis=1, keepdims=True)
        y = y / np.sqrt(y.var(axis=1, keepdims=True) + 1e-12)
        return unit_rows(y)


def unit_rows(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


# ---------------------------------------------------------------------------
# KNN interpolation
# ---------------------------------------------------------------------------


_CHUNK = 256


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)


def knn(query: np.ndarray, points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k nearest rows of ``points`` by squared Euclidean distance.

    ``query`` may be a single point (3,) or a batch (Q, 3). Ties go to the
    lowest index. Returns (indices, squared distances) sorted ascending.
    """
    points = np.asarray(points, dtype=np.float64)
    if k > len(points):
        raise ValueError(f"k={k} exceeds number of points {len(points)}")
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    q = q.reshape(-1, 3)
    order = np.empty((len(q), k), dtype=np.int64)
    dists = np.empty((len(q), k))
    for lo in range(0, len(q), _CHUNK):
        d2 = _sq_dists(q[lo : lo + _CHUNK], points)
        sel = np.argsort(d2, axis=1, kind="stable")[:, :k]
        order[lo : lo + _CHUNK] = sel
        dists[lo : lo + _CHUNK] = np.take_along_axis(d2, sel, axis=1)
    if single:
        return order[0], dists[0]
    return order, dists


def interp_weights(sq_dists: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Softmax of -d/tau along the last axis (max-subtracted)."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    logits = -np.asarray(sq_dists, dtype=np.float64) / tau
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def interpolate_scale(cloud: PointCloud, scale: ScaleLevel, k: int = DEFAULT_K, tau: float = DEFAULT_TAU) -> np.ndarray:
    idx, d2 = knn(cloud.points, scale.points, k)
    w = interp_weights(d2, tau)
    return np.einsum("ck,ckd->cd", w, scale.feats[idx])


# ---------------------------------------------------------------------------
# descriptors
# ---------------------------------------------------------------------------


def local_eigenvalues(centers: np.ndarray, parent: np.ndarray, radius: float = NEIGHBORHOOD_RADIUS) -> np.ndarray:
    """Descending covariance eigenvalues of the parent points within ``radius``
    of each center, divided by radius**2. Fewer than 3 neighbors gives zeros."""
    out = np.zeros((len(centers), 3))
    for lo in range(0, len(centers), _CHUNK):
        within = _sq_dists(centers[lo : lo + _CHUNK], parent) <= radius * radius
        for i, row in enumerate(within, lo):
            nb = parent[row]
            if len(nb) < 3:
                continue
            cov = np.cov(nb.T, bias=True)
            out[i] = np.linalg.eigvalsh(cov)[::-1]
    return np.clip(out, 0.0, None) / radius**2


def synth_descriptor(scale_points: np.ndarray, parent: PointCloud, dim: int, seed: int) -> np.ndarray:
    """Per-point geometric descriptor of width ``dim`` (>= 8).

    Columns: xyz, radial distance, 3 local covariance eigenvalues, then
    sinusoidal encodings of the position along seeded random directions and
    frequencies (alternating sine/cosine phase).
    """
    if dim < 8:
        raise ValueError("descriptor dim must be >= 8")
    pts = np.asarray(scale_points, dtype=np.float64).reshape(-1, 3)
    radial = np.linalg.norm(pts, axis=1, keepdims=True)
    eig = local_eigenvalues(pts, parent.points)
    n_enc = dim - 7
    rng = np.random.default_rng(seed)
    dirs = unit_rows(rng.normal(size=(n_enc, 3)))
    freqs = rng.uniform(*_FREQ_RANGE, size=n_enc) * np.pi / 2
    phase = (np.arange(n_enc) % 2) * (np.pi / 2)
    enc = np.sin((pts @ dirs.T) * freqs + phase)
    return np.concatenate([pts, radial, eig, enc], axis=1)


def build_bank(
    cloud: PointCloud,
    scale_spec=DEFAULT_SCALES,
    head: ProjectionHead | None = None,
    k: int = DEFAULT_K,
    tau: float = DEFAULT_TAU,
    seed: int = 0,
    shape_id: str = "",
    category: str = "",
    fps_seed: int | None = None,
) -> FeatureBank:
    """Run the full pipeline: FPS scales, descriptors, interpolation, fusion.

    Scale levels are prefixes of one FPS ordering, so coarser levels are
    nested in finer ones. ``seed`` fixes the descriptor encodings (and the
    head when none is given) and must be shared by every bank of a database;
    ``fps_seed`` (default: ``seed``) fixes the FPS start point.
    """
    sizes = [n for n, _ in scale_spec]
    if any(b >= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("scale sizes must be strictly decreasing")
    in_dim = sum(d for _, d in scale_spec)
    if head is None:
        head = ProjectionHead.random(in_dim, DEFAULT_DIM, seed)
    if head.in_dim != in_dim:
        raise ValueError(f"head expects {head.in_dim} inputs, scales give {in_dim}")
    order = farthest_point_sample(cloud, sizes[0], seed if fps_seed is None else fps_seed)
    scales = []
    for level, (n_s, d_s) in enumerate(scale_spec):
        sel = order[:n_s]
        pts = cloud.points[sel]
        feats = synth_descriptor(pts, cloud, d_s, seed * 1000 + level)
        scales.append(ScaleLevel(pts, feats, sel))
    stacked = np.concatenate([interpolate_scale(cloud, s, k, tau) for s in scales], axis=1)
    fused = head(stacked)
    return FeatureBank(cloud, tuple(scales), np.ascontiguousarray(fused), shape_id, category)


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------


def _loss_and_residual(fmap: FeatureMap, qhat: np.ndarray) -> tuple[float, np.ndarray]:
    """Masked cosine loss and its gradient with respect to the rendered map.

    ``qhat`` is the unit query as D x H x W.
    """
    p = fmap.data
    mask = fmap.mask
    n = int(mask.sum())
    pnorm = np.sqrt((p * p).sum(axis=0))
    ok = mask & (pnorm > 0)
    safe = np.where(ok, pnorm, 1.0)
    cos = np.where(ok, (qhat * p).sum(axis=0) / safe, 0.0)
    loss = float(((1.0 - cos) * mask).sum() / n)
    # d(1 - cos)/dp = -(qhat - cos * phat) / |p|
    grad = -(qhat - cos * p / safe) / safe
    grad = np.where(ok, grad, 0.0) / n
    return loss, grad


def _unit_channels(data: np.ndarray) -> np.ndarray:
    norm = np.sqrt((data * data).sum(axis=0, keepdims=True))
    return np.divide(data, norm, out=np.zeros_like(data), where=norm > 0)


def alignment_objective(
    fused: np.ndarray, frags_list, qhats, eps: float = 1e-10
) -> tuple[float, np.ndarray]:
    """Mean masked cosine loss over views and its exact gradient in ``fused``."""
    total = 0.0
    grad = np.zeros_like(fused)
    for frags, qhat in zip(frags_list, qhats):
        fmap = composite(frags, fused, eps)
        if not fmap.mask.any():
            continue
        loss, res = _loss_and_residual(fmap, qhat)
        total += loss
        grad += feature_gradient(frags, res, fmap.mask, len(fused), eps)
    m = len(frags_list)
    return total / m, grad / m


@dataclass
class DistillTrace:
    losses: list[float]
    lrs: list[float]


def distill_bank(
    bank: FeatureBank,
    targets: list[tuple[FeatureMap | np.ndarray, Pose]],
    iters: int,
    lr: float,
    cam: Camera | None = None,
    cfg: SplatConfig | None = None,
    trace: DistillTrace | None = None,
) -> FeatureBank:
    """Fit the fused features to target feature maps by gradient descent.

    Each iteration takes a full-batch step on the mean alignment loss over
    all targets and re-normalizes the rows. A step that would raise the loss
    is rejected and the learning rate halved, so the recorded objective never
    increases. The input bank is left untouched.
    """
    if not targets:
        raise ValueError("no distillation targets")
    cam = cam or Camera.default()
    cfg = cfg or SplatConfig(height=cam.height, width=cam.width)
    frags_list = [rasterize(bank.cloud, pose, cam, cfg) for _, pose in targets]
    qhats = [_unit_channels(t.data if isinstance(t, FeatureMap) else np.asarray(t, float)) for t, _ in targets]
    feats = bank.fused.copy()
    loss, grad = alignment_objective(feats, frags_list, qhats, cfg.eps)
    if trace is not None:
        trace.losses.append(loss)
        trace.lrs.append(lr)
    for it in range(iters):
        step_lr = lr
        while True:
            cand = unit_rows(feats - step_lr * grad)
            new_loss, new_grad = alignment_objective(cand, frags_list, qhats, cfg.eps)
            if new_loss <= loss or step_lr < 1e-12:
                break
            step_lr *= 0.5
        if new_loss > loss:
            log.debug("distill: no decrease at iteration %d, stopping", it)
            break
        feats, loss, grad, lr = cand, new_loss, new_grad, step_lr
        if trace is not None:
            trace.losses.append(loss)
            trace.lrs.append(lr)
    return bank.with_fused(feats)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_FBNK_MAGIC = b"FBNK"
_FBNK_VERSION = 1


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def write_bank(path: str | Path, bank: FeatureBank) -> None:
    """Little-endian blob: header, then per scale (N_s, D_s, points, feats),
    then the C x 3 cloud and the fused C x D features, all float32."""
    c, d = bank.fused.shape
    parts = [
        _FBNK_MAGIC,
        struct.pack("<I", _FBNK_VERSION),
        _pack_str(bank.shape_id),
        _pack_str(bank.category),
        struct.pack("<III", c, d, len(bank.scales)),
    ]
    for s in bank.scales:
        parts.append(struct.pack("<II", *s.feats.shape))
        parts.append(s.points.astype("<f4").tobytes())
        parts.append(s.feats.astype("<f4").tobytes())
    parts.append(bank.cloud.points.astype("<f4").tobytes())
    parts.append(bank.fused.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_bank(path: str | Path) -> FeatureBank:
    data = Path(path).read_bytes()
    if data[:4] != _FBNK_MAGIC:
        raise ValueError(f"{path}: not an FBNK file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _FBNK_VERSION:
        raise ValueError(f"{path}: unsupported FBNK version {version}")
    off = 8
    strings = []
    for _ in range(2):
        (n,) = struct.unpack_from("<I", data, off)
        strings.append(data[off + 4 : off + 4 + n].decode("utf-8"))
        off += 4 + n
    c, d, n_scales = struct.unpack_from("<III", data, off)
    off += 12

    def take(count, shape):
        nonlocal off
        arr = np.frombuffer(data, "<f4", count, off).reshape(shape).astype(np.float64)
        off += count * 4
        return arr

    scales = []
    for _ in range(n_scales):
        n_s, d_s = struct.unpack_from("<II", data, off)
        off += 8
        pts = take(n_s * 3, (n_s, 3))
        feats = take(n_s * d_s, (n_s, d_s))
        scales.append(ScaleLevel(pts, feats))
    cloud = PointCloud(take(c * 3, (c, 3)))
    fused = take(c * d, (c, d))
    return FeatureBank(cloud, tuple(scales), fused, strings[0], strings[1])
