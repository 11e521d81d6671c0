import math
import time

import numpy as np
import pytest

from swflow.geometry import make_synthetic
from swflow.metrics import (
    SurfaceErrorReport,
    discrepancy_timing_body,
    nearest_rank_percentile,
    repeat_timing,
    surface_errors,
    timing_probe,
    write_report_csv,
)

SPHERE = make_synthetic("sphere", 3)


def test_identical_meshes_zero():
    r = surface_errors(SPHERE, SPHERE, 50_000, rng=3)
    assert r.assd == 0.0 and r.hd90 == 0.0 and r.n_samples == 50_000


def test_translated_sphere_bounded_by_shift():
    moved = SPHERE.with_vertices(SPHERE.vertices + [0.1, 0, 0])
    r = surface_errors(SPHERE, moved, 50_000, rng=0)
    assert 0 < r.assd <= 0.1


def test_swap_symmetric():
    other = make_synthetic("ellipsoid(1.2,0.9,1.0)", 3)
    a = surface_errors(SPHERE, other, 20_000, rng=7)
    b = surface_errors(other, SPHERE, 20_000, rng=7)
    assert (a.assd, a.hd90) == (b.assd, b.hd90)


def test_seed_stability():
    other = make_synthetic("ellipsoid(1.2,0.9,1.0)", 3)
    a = surface_errors(SPHERE, other, 50_000, rng=1).assd
    b = surface_errors(SPHERE, other, 50_000, rng=2).assd
    assert abs(a - b) / a < 0.05


@pytest.mark.parametrize("shape", ["ellipsoid(2,1,1)", "perturbed-sphere"])
def test_nonnegative_finite(shape):
    r = surface_errors(SPHERE, make_synthetic(shape, 2, rng=4), 5_000, rng=0)
    assert r.assd >= 0 and r.hd90 >= 0 and math.isfinite(r.assd) and math.isfinite(r.hd90)


def test_nearest_rank():
    assert nearest_rank_percentile(np.arange(1, 11), 90) == 9
    assert nearest_rank_percentile([5.0], 90) == 5.0
    assert nearest_rank_percentile(np.arange(1, 101)[::-1], 90) == 90
    with pytest.raises(ValueError):
        nearest_rank_percentile([], 90)


def test_rejects_zero_samples():
    with pytest.raises(ValueError):
        surface_errors(SPHERE, SPHERE, 0)


def test_timing_probe_empty_body():
    assert 0 <= timing_probe("empty", lambda: None) < 1.0


def test_timing_probe_measures_sleep():
    assert timing_probe("sleep", lambda: time.sleep(0.02)) >= 19.0


def test_repeat_timing():
    mean, std = repeat_timing(lambda: None, 1)
    assert std == 0.0 and mean >= 0
    mean, std = repeat_timing(lambda: None, 1000)
    assert mean < 1.0 and std >= 0
    with pytest.raises(ValueError):
        repeat_timing(lambda: None, 0)


def test_report_csv(tmp_path):
    write_report_csv([("a.obj", "b, c.obj", SurfaceErrorReport(0.5, 1.25, 10, 3))], tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "mesh_a,mesh_b,assd_mm,hd90_mm,n,seed"
    assert lines[1] == 'a.obj,"b, c.obj",0.5,1.25,10,3'


@pytest.mark.parametrize("metric", ["swd", "chamfer", "icp"])
@pytest.mark.parametrize("mode", ["value", "step"])
def test_timing_body_runs(metric, mode):
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((50, 3)), rng.standard_normal((50, 3))
    body = discrepancy_timing_body(metric, x, y, 4, rng=1, mode=mode, workers=1)
    assert body() is None
    assert repeat_timing(body, 3)[0] >= 0


def test_timing_body_rejects_unknowns():
    x = np.zeros((4, 3))
    with pytest.raises(ValueError):
        discrepancy_timing_body("emd", x, x)
    with pytest.raises(ValueError):
        discrepancy_timing_body("swd", x, x, mode="both")
