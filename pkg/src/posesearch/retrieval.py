"""Two-stage shape retrieval: grid search over predefined views, then AdamW
refinement of (elev, azim, theta) for the best candidates and re-ranking."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .alignment import WORST_SCORE, NoForeground, fd_gradient, pose_loss, prepare_query
from .featurizer import FeatureBank
from .geometry import DEFAULT_DIST, Camera, Pose, pose_to_rotation
from .renderer import SplatConfig, composite, rasterize

# Scores are rounded before any comparison or differencing. A positive
# rescaling of the features perturbs losses only at the 1e-16 level, so
# rounding makes rankings and refined poses reproducible bit for bit.
SCORE_DECIMALS = 8

ELEV_RANGE = (math.radians(-30.0), math.radians(60.0))
THETA_RANGE = (math.radians(-45.0), math.radians(45.0))


@dataclass(frozen=True)
class PoseGrid:
    elevs: tuple[float, ...]
    azims: tuple[float, ...]
    thetas: tuple[float, ...]
    poses: tuple[Pose, ...]

    def __len__(self) -> int:
        return len(self.poses)


def _bin_centers(lo: float, hi: float, n: int) -> list[float]:
    width = (hi - lo) / n
    return [lo + (i + 0.5) * width for i in range(n)]


def build_pose_grid(
    n_e: int = 4,
    n_a: int = 12,
    n_t: int = 4,
    elev_range: tuple[float, float] = ELEV_RANGE,
    theta_range: tuple[float, float] = THETA_RANGE,
    dist: float = DEFAULT_DIST,
) -> PoseGrid:
    """Cartesian product of bin centers: elevation and roll over their
    ranges, azimuth over the full circle."""
    if min(n_e, n_a, n_t) < 1:
        raise ValueError("grid counts must be >= 1")
    elevs = _bin_centers(*elev_range, n_e)
    azims = _bin_centers(0.0, 2 * math.pi, n_a)
    thetas = _bin_centers(*theta_range, n_t)
    poses = tuple(Pose(e, a, t, dist) for e, a, t in itertools.product(elevs, azims, thetas))
    return PoseGrid(tuple(elevs), tuple(azims), tuple(thetas), poses)


def covering_radius(
    grid: PoseGrid,
    n_samples: int = 10_000,
    seed: int = 0,
    elev_range: tuple[float, float] = ELEV_RANGE,
    theta_range: tuple[float, float] = THETA_RANGE,
) -> float:
    """Largest geodesic distance from a uniformly sampled pose in the grid's
    ranges to its nearest grid pose (a sampling estimate, radians)."""
    rng = np.random.default_rng(seed)
    grid_rots = np.stack([pose_to_rotation(p) for p in grid.poses])
    samples = np.stack(
        [
            pose_to_rotation(Pose(rng.uniform(*elev_range), rng.uniform(0, 2 * math.pi), rng.uniform(*theta_range)))
            for _ in range(n_samples)
        ]
    )
    trace = np.einsum("nij,gij->ng", samples, grid_rots)
    return float(np.arccos(np.clip((trace - 1) / 2, -1, 1)).min(axis=1).max())


@dataclass(frozen=True)
class Candidate:
    shape_id: str
    pose: Pose
    score: float
    category: str = ""


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 0.01
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 50
    fd_step: float = math.radians(0.5)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass(frozen=True)
class AdamWState:
    m: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: int = 0


def adamw_step(state: AdamWState, params, grad, cfg: AdamWConfig) -> tuple[AdamWState, np.ndarray]:
    """One decoupled-weight-decay Adam update; returns new state and params."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    t = state.t + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * grad * grad
    m_hat = m / (1 - cfg.beta1**t)
    v_hat = v / (1 - cfg.beta2**t)
    new = params - cfg.lr * (m_hat / (np.sqrt(v_hat) + cfg.eps)) - cfg.lr * cfg.weight_decay * params
    return AdamWState(m, v, t), new


@dataclass(frozen=True)
class RetrievalResult:
    ranked: tuple[Candidate, ...]
    initial: tuple[Candidate, ...]

    @property
    def top1(self) -> Candidate:
        return self.ranked[0]

    @property
    def top1_pose(self) -> Pose:
        return self.ranked[0].pose

    @property
    def predicted_category(self) -> str:
        return self.ranked[0].category

    @property
    def stage_scores(self) -> tuple[list[float], list[float]]:
        return [c.score for c in self.initial], [c.score for c in self.ranked]

    def shape_ids(self) -> list[str]:
        return [c.shape_id for c in self.ranked]


def _rank(cands) -> list[Candidate]:
    return sorted(cands, key=lambda c: (c.score, c.shape_id))


# ---------------------------------------------------------------------------
# initial search
# ---------------------------------------------------------------------------


def _pose_chunk_size(n_pix: int, dim: int, budget_bytes: int = 64 << 20) -> int:
    return max(1, budget_bytes // (n_pix * dim * 8))


def grid_scores(queries: np.ndarray, bank: FeatureBank, grid: PoseGrid, cam: Camera, cfg: SplatConfig) -> np.ndarray:
    """Loss of every (query, grid pose) pair for one bank, shape (Q, N).

    ``queries`` are prepared (Q, H, W, D) unit maps. Each grid view is
    rendered once and scored against all queries in a single matrix product.
    """
    n_q = len(queries)
    qflat = queries.reshape(n_q, -1)
    n_pix = cam.height * cam.width
    out = np.empty((n_q, len(grid)))
    chunk = _pose_chunk_size(n_pix, bank.dim)
    for lo in range(0, len(grid), chunk):
        poses = grid.poses[lo : lo + chunk]
        stack = np.zeros((len(poses), n_pix * bank.dim))
        counts = np.zeros(len(poses))
        for i, pose in enumerate(poses):
            fmap = composite(rasterize(bank.cloud, pose, cam, cfg), bank.fused, cfg.eps)
            p = fmap.data.transpose(1, 2, 0)
            norm = np.sqrt((p * p).sum(axis=2, keepdims=True))
            stack[i] = np.divide(p, norm, out=np.zeros_like(p), where=norm > 0).ravel()
            counts[i] = fmap.mask.sum()
        cos_sum = qflat @ stack.T
        with np.errstate(divide="ignore", invalid="ignore"):
            losses = (counts - cos_sum) / counts
        losses[:, counts == 0] = WORST_SCORE
        out[:, lo : lo + len(poses)] = losses
    return np.round(out, SCORE_DECIMALS)


def initial_search_many(queries, banks, grid: PoseGrid, cam: Camera, cfg: SplatConfig) -> list[list[Candidate]]:
    """Best grid pose and its score for every bank, per query, ranked."""
    if not banks:
        raise ValueError("empty database")
    qhats = np.stack([prepare_query(q) for q in queries])
    per_query: list[list[Candidate]] = [[] for _ in queries]
    for bank in banks:
        scores = grid_scores(qhats, bank, grid, cam, cfg)
        best = np.argmin(scores, axis=1)
        for qi, n in enumerate(best):
            per_query[qi].append(Candidate(bank.shape_id, grid.poses[n], float(scores[qi, n]), bank.category))
    return [_rank(c) for c in per_query]


def initial_search(f_q, banks, grid: PoseGrid, cam: Camera, cfg: SplatConfig) -> list[Candidate]:
    return initial_search_many([f_q], banks, grid, cam, cfg)[0]


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------


def _score(bank, qhat, pose, cam, cfg) -> float:
    try:
        return pose_loss(bank, qhat, pose, cam, cfg, SCORE_DECIMALS)
    except NoForeground:
        return WORST_SCORE


def refine_pose(
    bank: FeatureBank,
    f_q,
    pose0: Pose,
    cam: Camera,
    cfg: SplatConfig,
    opt: AdamWConfig = AdamWConfig(),
    score0: float | None = None,
) -> tuple[Pose, float]:
    """AdamW on the raw angles with finite-difference gradients.

    Returns the best (pose, score) seen, which includes ``pose0`` and every
    probe pose, so the result never scores worse than the start. ``score0``
    lets the caller supply the already known score of ``pose0``.
    """
    qhat = prepare_query(f_q)
    best_score = _score(bank, qhat, pose0, cam, cfg) if score0 is None else score0
    best_pose = pose0
    params = pose0.as_array()
    state = AdamWState()
    elev_lo, elev_hi = -math.pi / 2, math.pi / 2
    for step in range(opt.steps):
        pose = Pose(*params, pose0.dist)
        seen: list[tuple[float, Pose]] = []
        if step > 0:
            seen.append((_score(bank, qhat, pose, cam, cfg), pose))
        grad = fd_gradient(bank, qhat, pose, cam, cfg, opt.fd_step, SCORE_DECIMALS, seen)
        for score, cand in seen:
            if score < best_score:
                best_score, best_pose = score, cand
        state, params = adamw_step(state, params, grad.as_array(), opt)
        params[0] = min(max(params[0], elev_lo), elev_hi)
    if opt.steps > 0:
        final = Pose(*params, pose0.dist)
        score = _score(bank, qhat, final, cam, cfg)
        if score < best_score:
            best_score, best_pose = score, final
    return best_pose, best_score


def retrieve_many(
    queries, banks, grid: PoseGrid, cam: Camera, cfg: SplatConfig, opt: AdamWConfig = AdamWConfig(), top_k: int = 5
) -> list[RetrievalResult]:
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    by_id = {b.shape_id: b for b in banks}
    results = []
    for f_q, initial in zip(queries, initial_search_many(queries, banks, grid, cam, cfg)):
        head = []
        for cand in initial[:top_k]:
            pose, score = refine_pose(by_id[cand.shape_id], f_q, cand.pose, cam, cfg, opt, cand.score)
            head.append(Candidate(cand.shape_id, pose, score, cand.category))
        ranked = _rank(head) + list(initial[top_k:])
        results.append(RetrievalResult(tuple(ranked), tuple(initial)))
    return results


def retrieve(
    f_q, banks, grid: PoseGrid, cam: Camera, cfg: SplatConfig, opt: AdamWConfig = AdamWConfig(), top_k: int = 5
) -> RetrievalResult:
    """Initial search, refine the ``top_k`` best candidates, re-rank them by
    refined score; the rest keep their initial order and scores."""
    return retrieve_many([f_q], banks, grid, cam, cfg, opt, top_k)[0]
