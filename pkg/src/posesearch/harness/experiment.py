"""Dataset manifests, bank building, query sets and the end-to-end experiment."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..featurizer import FeatureBank, ProjectionHead, build_bank, read_bank, write_bank
from ..geometry import normalize_cloud, pose_error, read_obj, sample_mesh_surface, write_obj, write_pointcloud
from ..renderer import write_feature_ppm, write_mask_pgm
from ..retrieval import RetrievalResult, initial_search_many, retrieve_many
from .config import Config
from .metrics import evaluate
from .queries import OcclusionLevel, OcclusionSpec, QueryRecord, make_query, random_pose
from .shapes import Recipe, generate_shapes, make_mesh

log = logging.getLogger(__name__)


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# manifests and banks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    shape_id: str
    category: str
    mesh: str | None = None  # path relative to the manifest
    recipe_seed: int | None = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    seed: int
    config: dict

    def __post_init__(self):
        ids = [e.shape_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("shape ids must be unique")

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "config": self.config, "entries": [e.__dict__ for e in self.entries]}, indent=2
        )

    @classmethod
    def load(cls, path: str | Path) -> DatasetManifest:
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"manifest not found: {path}") from None
        return cls(tuple(ManifestEntry(**e) for e in d["entries"]), d["seed"], d.get("config", {}))


def generate_dataset(cfg: Config, out_dir: str | Path | None = None) -> tuple[DatasetManifest, list]:
    """Procedural meshes for every category; written as .obj files when
    ``out_dir`` is given."""
    shapes = generate_shapes(cfg.seed, cfg.categories, cfg.per_category)
    entries = []
    for sid, recipe, mesh in shapes:
        rel = None
        if out_dir is not None:
            mesh_dir = Path(out_dir) / "meshes"
            mesh_dir.mkdir(parents=True, exist_ok=True)
            rel = f"meshes/{sid}.obj"
            write_obj(Path(out_dir) / rel, mesh)
        entries.append(ManifestEntry(sid, recipe.category, rel, recipe.seed))
    manifest = DatasetManifest(tuple(entries), cfg.seed, cfg.to_dict())
    if out_dir is not None:
        (Path(out_dir) / "manifest.json").write_text(manifest.to_json())
    return manifest, [m for _, _, m in shapes]


def _entry_mesh(entry: ManifestEntry, root: Path):
    if entry.mesh is not None:
        path = root / entry.mesh
        if not path.exists():
            raise DataError(f"missing mesh file: {path}")
        try:
            return read_obj(path)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    if entry.recipe_seed is None:
        raise DataError(f"{entry.shape_id}: neither mesh path nor recipe")
    return make_mesh(Recipe(entry.category, entry.recipe_seed))


def build_banks(manifest: DatasetManifest, cfg: Config, root: str | Path = ".") -> list[FeatureBank]:
    """Sample, normalize and featurize every manifest entry. The projection
    head and descriptor encodings are shared across the database."""
    head = ProjectionHead.random(sum(d for _, d in cfg.scale_spec), cfg.dim, cfg.encoder_seed)
    banks = []
    for i, entry in enumerate(manifest.entries):
        mesh = _entry_mesh(entry, Path(root))
        cloud = normalize_cloud(sample_mesh_surface(mesh, cfg.n_points, seed=cfg.seed * 7919 + i))
        banks.append(
            build_bank(
                cloud, cfg.scale_spec, head, cfg.k, cfg.tau, cfg.encoder_seed, entry.shape_id, entry.category, fps_seed=i
            )
        )
    return banks


def save_banks(banks: list[FeatureBank], out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for b in banks:
        write_bank(out / f"{b.shape_id}.fbnk", b)
        write_pointcloud(out / f"{b.shape_id}.pcld", b.cloud)


def load_banks(bank_dir: str | Path) -> list[FeatureBank]:
    paths = sorted(Path(bank_dir).glob("*.fbnk"))
    if not paths:
        raise DataError(f"no .fbnk files in {bank_dir}")
    return [read_bank(p) for p in paths]


def build_suite(cfg: Config) -> list[FeatureBank]:
    manifest, _ = generate_dataset(cfg)
    return build_banks(manifest, cfg)


# ---------------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------------


def build_queries(banks: list[FeatureBank], cfg: Config, levels=None) -> dict[str, list[QueryRecord]]:
    """``queries_per_category`` queries per category and level.

    Ground-truth shapes, poses and feature noise are shared across levels so
    that levels differ only in occlusion.
    """
    levels = levels or cfg.levels
    cam, splat = cfg.camera(), cfg.splat()
    by_cat: dict[str, list[FeatureBank]] = {}
    for b in banks:
        by_cat.setdefault(b.category, []).append(b)
    rng = np.random.default_rng([cfg.seed, 1])
    plan = []
    for cat in sorted(by_cat):
        members = by_cat[cat]
        for j in range(cfg.queries_per_category):
            pose = random_pose(rng, cfg.elev_range, cfg.theta_range, cfg.dist)
            plan.append((members[j % len(members)], pose, int(rng.integers(2**31)), f"{cat}-q{j:03d}"))
    out = {}
    for level in levels:
        occ = OcclusionSpec(OcclusionLevel(level))
        out[level] = [
            make_query(bank, pose, occ, cfg.noise_sigma, seed, cam, splat, f"{qid}-{level}")
            for bank, pose, seed, qid in plan
        ]
    return out


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


def run_retrieval(records: list[QueryRecord], banks, cfg: Config, steps: int | None = None) -> list[RetrievalResult]:
    opt = cfg.adamw() if steps is None else cfg.replace(steps=steps).adamw()
    return retrieve_many([r.data for r in records], banks, cfg.grid(), cfg.camera(), cfg.splat(), opt, cfg.top_k)


def query_rows(pairs) -> list[dict]:
    rows = []
    for rec, res in pairs:
        init_top = res.initial[0]
        rows.append(
            {
                "query_id": rec.query_id,
                "level": rec.level,
                "gt_shape_id": rec.gt_shape_id,
                "gt_pose": rec.gt_pose.to_dict(),
                "occluded_fraction": rec.occluded_fraction,
                "ranked": [c.shape_id for c in res.ranked[:5]],
                "scores": [c.score for c in res.ranked[:5]],
                "top1_pose": res.top1_pose.to_dict(),
                "pose_err_deg": math.degrees(pose_error(res.top1_pose, rec.gt_pose)),
                "predicted_category": res.predicted_category,
                "initial_ranked": [c.shape_id for c in res.initial[:5]],
                "initial_scores": [c.score for c in res.initial[:5]],
                "initial_pose_err_deg": math.degrees(pose_error(init_top.pose, rec.gt_pose)),
            }
        )
    return rows


def result_to_dict(res: RetrievalResult) -> dict:
    def cand(c):
        return {"shape_id": c.shape_id, "category": c.category, "score": c.score, "pose": c.pose.to_dict()}

    return {"ranked": [cand(c) for c in res.ranked], "initial": [cand(c) for c in res.initial]}


def result_from_dict(d: dict) -> RetrievalResult:
    from ..geometry import Pose
    from ..retrieval import Candidate

    def cand(c):
        return Candidate(c["shape_id"], Pose.from_dict(c["pose"]), c["score"], c["category"])

    return RetrievalResult(tuple(cand(c) for c in d["ranked"]), tuple(cand(c) for c in d["initial"]))


def run_experiment(cfg: Config, out_dir: str | Path | None = None) -> dict:
    """Build the database, query every level, retrieve, and assemble a JSON
    report. Everything except the ``timing`` block is deterministic."""
    timing = {}
    t0 = time.perf_counter()
    banks = build_suite(cfg)
    timing["build_banks_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    queries = build_queries(banks, cfg)
    timing["build_queries_s"] = time.perf_counter() - t0
    levels = {}
    rows = []
    for level, records in queries.items():
        t0 = time.perf_counter()
        results = run_retrieval(records, banks, cfg)
        timing[f"retrieve_{level}_s"] = time.perf_counter() - t0
        pairs = list(zip(records, results))
        levels[level] = {
            "refined": evaluate(pairs, "refined").to_dict(),
            "initial": evaluate(pairs, "initial").to_dict(),
            "occluded_fraction_range": [min(r.occluded_fraction for r in records), max(r.occluded_fraction for r in records)],
        }
        rows.extend(query_rows(pairs))
    report = {"config": cfg.to_dict(), "levels": levels, "queries": rows, "timing": timing}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        if cfg.heatmaps:
            export_heatmaps(banks, queries, cfg, out / "heatmaps")
    return report


def export_heatmaps(banks, queries, cfg: Config, out_dir: Path) -> None:
    from ..renderer import FeatureMap

    out_dir.mkdir(parents=True, exist_ok=True)
    for level, records in queries.items():
        for rec in records[: len(banks)]:
            fmap = FeatureMap(rec.data, np.linalg.norm(rec.data, axis=0) > 0)
            write_feature_ppm(out_dir / f"{rec.query_id}.ppm", fmap)
            write_mask_pgm(out_dir / f"{rec.query_id}.pgm", fmap)


def initial_only(records, banks, cfg: Config, grid=None):
    return initial_search_many([r.data for r in records], banks, grid or cfg.grid(), cfg.camera(), cfg.splat())
