import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import count_metrics
from posesearch.alignment import align_loss, prepare_query, pose_loss
from posesearch.geometry import Pose, pose_error
from posesearch.harness.cli import main
from posesearch.harness.config import Config, ConfigError
from posesearch.harness.experiment import (
    DataError,
    DatasetManifest,
    ManifestEntry,
    build_banks,
    generate_dataset,
    result_from_dict,
    result_to_dict,
    run_experiment,
)
from posesearch.harness.metrics import evaluate
from posesearch.harness.queries import (
    OcclusionLevel,
    OcclusionSpec,
    QueryRecord,
    apply_occlusion,
    load_queries,
    make_query,
    save_queries,
)
from posesearch.harness.shapes import CATEGORIES, generate_shapes
from posesearch.renderer import render_features
from posesearch.retrieval import Candidate, RetrievalResult

TINY = {
    "per_category": 1,
    "n_points": 600,
    "scales": [[256, 16], [64, 16], [16, 16]],
    "dim": 16,
    "n_elev": 2,
    "n_azim": 6,
    "n_theta": 2,
    "steps": 2,
    "queries_per_category": 1,
    "levels": ["L0", "L2"],
}


# -- shapes -----------------------------------------------------------------------


def test_shapes_deterministic_and_varied():
    a = generate_shapes(3)
    b = generate_shapes(3)
    assert len(a) == 20 and len({sid for sid, _, _ in a}) == 20
    for (_, _, ma), (_, _, mb) in zip(a, b):
        assert np.array_equal(ma.vertices, mb.vertices)
    by_cat = {}
    for sid, recipe, mesh in a:
        by_cat.setdefault(recipe.category, []).append(mesh)
    assert sorted(by_cat) == sorted(CATEGORIES)
    for meshes in by_cat.values():
        assert not np.array_equal(meshes[0].vertices, meshes[1].vertices)
        assert all(m.face_areas().sum() > 0 for m in meshes)


def test_manifest_ids_unique():
    e = ManifestEntry("x", "tables", None, 1)
    with pytest.raises(ValueError):
        DatasetManifest((e, e), 0, {})


# -- occlusion and queries -----------------------------------------------------------


def blob_mask(n_pixels, rng):
    """A compact random object mask of exactly n_pixels on a 37x37 map."""
    yy, xx = np.mgrid[:37, :37]
    d = (yy - 18 + rng.normal()) ** 2 + (xx - 18 + rng.normal()) ** 2 + rng.random((37, 37))
    mask = np.zeros(37 * 37, bool)
    mask[np.argsort(d.ravel())[:n_pixels]] = True
    return mask.reshape(37, 37)


def test_l0_unchanged():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(4, 37, 37))
    out, frac, covered = apply_occlusion(data, blob_mask(200, rng), OcclusionSpec(OcclusionLevel.L0), 1)
    assert np.array_equal(out, data) and frac == 0.0 and not covered.any()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["L1", "L2", "L3"]), st.integers(20, 900))
def test_occlusion_fraction_in_range(seed, level, n_obj):
    rng = np.random.default_rng(seed)
    mask = blob_mask(n_obj, rng)
    data = rng.normal(size=(4, 37, 37))
    occ = OcclusionSpec(OcclusionLevel(level))
    out, frac, covered = apply_occlusion(data, mask, occ, seed)
    lo, hi = occ.fraction_range
    c_lo, c_hi = occ.count_range(n_obj)
    assert c_lo <= round(frac * n_obj) <= c_hi
    assert lo - 1 / n_obj < frac <= hi + 1 / n_obj
    assert np.allclose(np.linalg.norm(out[:, covered], axis=0), 1)
    assert np.array_equal(out[:, ~covered], data[:, ~covered])


def test_l2_on_200_pixels():
    rng = np.random.default_rng(5)
    for seed in range(20):
        _, frac, _ = apply_occlusion(rng.normal(size=(3, 37, 37)), blob_mask(200, rng), OcclusionSpec("L2"), seed)
        assert 0.10 <= frac <= 0.20


def test_occluded_pixels_differ():
    rng = np.random.default_rng(6)
    data = rng.normal(size=(8, 37, 37))
    out, _, covered = apply_occlusion(data, blob_mask(300, rng), OcclusionSpec("L3"), 2)
    assert covered.any() and np.all(np.any(out[:, covered] != data[:, covered], axis=0))


def test_occlusion_unreachable():
    with pytest.raises(ValueError, match="unreachable"):
        apply_occlusion(np.zeros((2, 5, 5)), np.zeros((5, 5), bool), OcclusionSpec("L1"), 0)


def test_make_query_self_consistency(bank, cam, splat):
    pose = Pose.from_degrees(15, 70, -5)
    rec = make_query(bank, pose, OcclusionSpec("L0"), 0.0, seed=1, cam=cam, cfg=splat)
    assert align_loss(rec.data, render_features(bank, pose, cam, splat)).loss <= 1e-6
    rec3 = make_query(bank, pose, OcclusionSpec("L3"), 0.05, seed=1, cam=cam, cfg=splat)
    assert 0.2 <= rec3.occluded_fraction <= 0.4
    # every pixel is either empty background or a unit vector (object or occluder)
    norms = np.linalg.norm(rec3.data, axis=0)
    assert np.allclose(norms[rec3.gt_mask], 1)
    assert np.all(np.isclose(norms, 0) | np.isclose(norms, 1))
    assert (norms[~rec3.gt_mask] == 0).mean() > 0.5


def test_noise_keeps_true_pose_preferred(banks, cam, splat):
    rng = np.random.default_rng(11)
    wins, n = 0, 40
    for i in range(n):
        bank = banks[i % len(banks)]
        pose = Pose(rng.uniform(-0.4, 0.9), rng.uniform(0, 2 * math.pi), rng.uniform(-0.6, 0.6))
        rec = make_query(bank, pose, OcclusionSpec("L0"), 0.1, seed=i, cam=cam, cfg=splat)
        q = prepare_query(rec.data)
        at = pose_loss(bank, q, pose, cam, splat)
        off = pose_loss(bank, q, Pose(pose.elev, pose.azim + math.radians(30), pose.theta), cam, splat)
        wins += 0 < at < off
    assert wins >= 0.95 * n


def test_query_file_roundtrip(tmp_path, bank, cam, splat):
    recs = [
        make_query(bank, Pose.from_degrees(10, a, 3), OcclusionSpec(lvl), 0.05, seed=a, cam=cam, cfg=splat, query_id=f"q{a}")
        for a, lvl in ((10, "L0"), (200, "L3"))
    ]
    save_queries(tmp_path / "q.npz", recs)
    back = load_queries(tmp_path / "q.npz")
    for a, b in zip(recs, back):
        assert (a.query_id, a.gt_shape_id, a.gt_category, a.gt_pose, a.level) == (
            b.query_id, b.gt_shape_id, b.gt_category, b.gt_pose, b.level)
        assert a.occluded_fraction == b.occluded_fraction
        assert np.array_equal(b.data, a.data.astype(np.float32)) and np.array_equal(a.gt_mask, b.gt_mask)


# -- metrics -----------------------------------------------------------------------


def fake_pair(rng, ids, cats, gt_i, err_deg=None):
    gt_pose = Pose(rng.uniform(-0.5, 0.5), rng.uniform(0, 6.28), rng.uniform(-0.5, 0.5))
    order = list(rng.permutation(len(ids)))
    pose = gt_pose if err_deg is None else Pose(gt_pose.elev, gt_pose.azim, gt_pose.theta + math.radians(err_deg))
    ranked = tuple(Candidate(ids[j], pose if k == 0 else gt_pose, 0.1 * k, cats[j]) for k, j in enumerate(order))
    rec = QueryRecord("q", ids[gt_i], cats[gt_i], gt_pose, "L0", np.zeros((1, 1, 1)), np.zeros((1, 1), bool), 0.0)
    return rec, RetrievalResult(ranked, ranked)


def test_metrics_perfect():
    rng = np.random.default_rng(0)
    ids, cats = ["a", "b"], ["x", "y"]
    pairs = []
    for _ in range(6):
        rec, res = fake_pair(rng, ids, cats, 0)
        ranked = tuple(sorted(res.ranked, key=lambda c: c.shape_id != rec.gt_shape_id))
        ranked = (Candidate(ranked[0].shape_id, rec.gt_pose, 0.0, ranked[0].category),) + ranked[1:]
        pairs.append((rec, RetrievalResult(ranked, ranked)))
    m = evaluate(pairs).overall
    assert (m.top1, m.top5, m.cls_top1, m.acc_pi_6, m.acc_pi_18) == (1, 1, 1, 1, 1)
    assert m.med_err == pytest.approx(0, abs=1e-5)


def test_metrics_twelve_degrees():
    rng = np.random.default_rng(1)
    rec, res = fake_pair(rng, ["a"], ["x"], 0, err_deg=12.0)
    m = evaluate([(rec, res)]).overall
    assert m.acc_pi_6 == 1 and m.acc_pi_18 == 0
    assert m.med_err == pytest.approx(12.0, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_counting_oracle(seed):
    rng = np.random.default_rng(seed)
    ids = [f"s{i}" for i in range(8)]
    cats = [f"c{i % 3}" for i in range(8)]
    pairs = [fake_pair(rng, ids, cats, int(rng.integers(8)), float(rng.uniform(0, 60))) for _ in range(25)]
    rows = [
        (rec.gt_shape_id, rec.gt_category, [c.shape_id for c in res.ranked], res.ranked[0].category,
         pose_error(res.ranked[0].pose, rec.gt_pose))
        for rec, res in pairs
    ]
    want = count_metrics(rows)
    got = evaluate(pairs).overall
    for k, v in want.items():
        assert getattr(got, k) == pytest.approx(v, abs=1e-9), k
    assert 0 <= got.top1 <= got.top5 <= 1


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate([])


def test_result_dict_roundtrip():
    rng = np.random.default_rng(2)
    _, res = fake_pair(rng, ["a", "b", "c"], ["x", "y", "z"], 1, 5.0)
    assert result_from_dict(json.loads(json.dumps(result_to_dict(res)))) == res


# -- config ---------------------------------------------------------------------------


def test_config_roundtrip_and_overrides(tmp_path):
    cfg = Config(**TINY)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert Config.load(path) == cfg
    assert cfg.replace(steps=7).steps == 7
    assert len(cfg.grid()) == 24
    assert cfg.adamw().fd_step == pytest.approx(math.radians(0.5))


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        Config.from_dict({"nope": 1})
    with pytest.raises(ConfigError):
        Config(levels=["L9"])
    with pytest.raises(ConfigError):
        Config(scales=[[64, 8], [128, 8]])
    (tmp_path / "nested.json").write_text('{"seed": {"a": 1}}')
    with pytest.raises(ConfigError, match="flat"):
        Config.load(tmp_path / "nested.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        Config.load(tmp_path / "bad.json")
    with pytest.raises(ConfigError, match="not found"):
        Config.load(tmp_path / "missing.json")


# -- datasets and experiments -------------------------------------------------------------


def test_missing_mesh_is_data_error(tmp_path):
    cfg = Config(**TINY)
    manifest, _ = generate_dataset(cfg, tmp_path)
    (tmp_path / manifest.entries[1].mesh).unlink()
    with pytest.raises(DataError, match=str(manifest.entries[1].mesh)):
        build_banks(DatasetManifest.load(tmp_path / "manifest.json"), cfg, tmp_path)


def test_experiment_report_deterministic(tmp_path):
    cfg = Config(**TINY)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    a = json.loads((tmp_path / "a" / "report.json").read_text())
    b = json.loads((tmp_path / "b" / "report.json").read_text())
    a.pop("timing"), b.pop("timing")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    assert set(a["levels"]) == {"L0", "L2"}
    assert {"refined", "initial"} <= set(a["levels"]["L0"])
    assert len(a["queries"]) == 8


def test_gt_loss_grows_with_occlusion(default_suite):
    cfg, banks, queries = default_suite
    by_id = {b.shape_id: b for b in banks}
    cam, splat = cfg.camera(), cfg.splat()
    means = []
    for level in ("L0", "L1", "L2", "L3"):
        recs = queries[level]
        assert len(recs) >= 100
        means.append(np.mean([pose_loss(by_id[r.gt_shape_id], prepare_query(r.data), r.gt_pose, cam, splat) for r in recs]))
    assert all(a <= b for a, b in zip(means, means[1:]))


# -- CLI ----------------------------------------------------------------------------------


def tiny_flags():
    out = []
    for k, v in TINY.items():
        out += [f"--{k}", json.dumps(v)]
    return out


def test_cli_pipeline(tmp_path, capsys):
    flags = tiny_flags()
    assert main(["gen", "--out", str(tmp_path / "data"), "--seed", "3", *flags]) == 0
    assert main(["featurize", "--manifest", str(tmp_path / "data" / "manifest.json"), "--out", str(tmp_path / "banks"), *flags]) == 0
    assert len(list((tmp_path / "banks").glob("*.fbnk"))) == 4
    assert main(["query", "--banks", str(tmp_path / "banks"), "--out", str(tmp_path / "q.npz"), "--seed", "3", *flags]) == 0
    assert len(load_queries(tmp_path / "q.npz")) == 8
    res = tmp_path / "res.json"
    assert main(["retrieve", "--banks", str(tmp_path / "banks"), "--queries", str(tmp_path / "q.npz"), "--out", str(res), *flags]) == 0
    assert len(json.loads(res.read_text())) == 8
    rep = tmp_path / "rep.json"
    assert main(["eval", "--queries", str(tmp_path / "q.npz"), "--results", str(res), "--out", str(rep)]) == 0
    assert set(json.loads(rep.read_text())["levels"]) == {"L0", "L2"}
    bank = next((tmp_path / "banks").glob("*.fbnk"))
    assert main(["render", "--bank", str(bank), "--out", str(tmp_path / "h"), *flags]) == 0
    assert (tmp_path / "h.ppm").exists() and (tmp_path / "h.pgm").exists()
    capsys.readouterr()
    assert main(["bench", "--banks", str(tmp_path / "banks"), *flags]) == 0
    assert json.loads(capsys.readouterr().out)["grid_poses"] == 24


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path / "d")]) == 2  # --seed is mandatory
    assert main(["gen", "--out", str(tmp_path / "d"), "--seed", "1", "--levels", '["L7"]']) == 2
    assert main(["run", "--config", str(tmp_path / "none.json")]) == 2
    assert main(["featurize", "--manifest", str(tmp_path / "none.json"), "--out", str(tmp_path / "b")]) == 3
    assert main(["gen", "--out", str(tmp_path / "d"), "--seed", "1", *tiny_flags()]) == 0
    manifest = DatasetManifest.load(tmp_path / "d" / "manifest.json")
    missing = tmp_path / "d" / manifest.entries[0].mesh
    missing.unlink()
    capsys.readouterr()
    assert main(["featurize", "--manifest", str(tmp_path / "d" / "manifest.json"), "--out", str(tmp_path / "b"), *tiny_flags()]) == 3
    assert str(missing) in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--out", "x", "--seed", "1", "--no-such-flag", "1"])
    assert exc.value.code == 2


def test_cli_flags_cover_every_config_key():
    from posesearch.harness.cli import build_parser

    parser = build_parser()
    for cmd in ("gen", "featurize", "query", "retrieve", "eval", "render", "bench", "run"):
        sub = parser._subparsers._group_actions[0].choices[cmd]
        flags = {opt for a in sub._actions for opt in a.option_strings}
        assert {f"--{k}" for k in Config.keys()} <= flags
