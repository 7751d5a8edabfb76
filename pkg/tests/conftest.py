import functools

import numpy as np
import pytest

from posesearch.featurizer import ProjectionHead, build_bank
from posesearch.geometry import Camera, PointCloud, normalize_cloud, sample_mesh_surface
from posesearch.harness.shapes import CATEGORIES, Recipe, make_mesh
from posesearch.renderer import SplatConfig

SMALL_SCALES = ((256, 16), (64, 16), (16, 16))


@pytest.fixture(scope="session")
def cam():
    return Camera.default()


@pytest.fixture(scope="session")
def splat():
    return SplatConfig()


@functools.lru_cache(maxsize=None)
def small_bank(category, seed, n_points=1024, encoder_seed=7, shape_id=None):
    mesh = make_mesh(Recipe(category, seed))
    cloud = normalize_cloud(sample_mesh_surface(mesh, n_points, seed=seed))
    head = ProjectionHead.random(sum(d for _, d in SMALL_SCALES), 32, encoder_seed)
    return build_bank(
        cloud, SMALL_SCALES, head, seed=encoder_seed, shape_id=shape_id or f"{category}-{seed}", category=category
    )


@pytest.fixture(scope="session")
def banks():
    return [small_bank(cat, s) for cat in CATEGORIES for s in (1, 2)]


@pytest.fixture(scope="session")
def bank(banks):
    return banks[0]


def random_cloud(rng, n):
    return PointCloud(rng.uniform(-1, 1, size=(n, 3)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_instance(seed, n_points=20000):
    """Dense sphere with low-frequency features seen through a zoomed camera
    with wide, untruncated splats. The rendered mask covers the whole image
    and every splat weight varies continuously, so the loss is smooth in pose.
    Returns (bank, query, pose, cam, cfg) with ``pose`` 5 degrees off the
    query's ground truth."""
    import math

    from posesearch.featurizer import FeatureBank, unit_rows
    from posesearch.geometry import Pose
    from posesearch.renderer import render_features

    rng = np.random.default_rng(seed)
    p = rng.normal(size=(n_points, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    w, b = rng.normal(size=(3, 16)) * 1.5, rng.normal(size=(16, 8))
    bank = FeatureBank(PointCloud(p), (), unit_rows(np.sin(p @ w) @ b))
    base = Camera.default()
    cam = Camera(3 * base.focal, base.cx, base.cy)
    cfg = SplatConfig(radius=0.2, points_per_pixel=512)
    gt = Pose(rng.uniform(-0.5, 0.5), rng.uniform(0, 2 * math.pi), rng.uniform(-0.5, 0.5))
    query = render_features(bank, gt, cam, cfg).data
    off = rng.normal(size=3)
    off *= math.radians(5) / np.linalg.norm(off)
    return bank, query, Pose(*(gt.as_array() + off)), cam, cfg


@pytest.fixture(scope="session")
def default_suite():
    """The default seeded database (4 categories x 5 shapes) and its query sets
    for every occlusion level."""
    from posesearch.harness.config import Config
    from posesearch.harness.experiment import build_queries, build_suite

    cfg = Config()
    banks = build_suite(cfg)
    return cfg, banks, build_queries(banks, cfg)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
