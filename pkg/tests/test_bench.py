import copy

import jsonschema
import pytest

from progseg import kernels
from progseg.bench import bench_matching, bench_sampling, run_bench, validate_report


@pytest.fixture(scope="module")
def report():
    return run_bench(quick=True)


def test_report_matches_schema(report):
    validate_report(report)
    assert report["backend"] == kernels.BACKEND
    assert report["peak_rss_bytes"] > 0


@pytest.mark.parametrize("field", ["magic", "matching", "sampling"])
def test_schema_rejects_broken_reports(report, field):
    bad = copy.deepcopy(report)
    if field == "magic":
        bad["magic"] = "something-else"
    else:
        del bad[field]
    with pytest.raises(jsonschema.ValidationError):
        validate_report(bad)


def test_hungarian_agrees_and_beats_brute_force():
    m = bench_matching(trials=200)
    assert m["mismatches"] == 0
    assert m["speedup"] > 1.0


def test_fps_time_is_linear_in_voxel_count(report):
    # k fixed, so each of the k sweeps touches all M voxels once
    for backend, s in report["sampling"]["fps_scaling"].items():
        assert 0.6 < s["slope"] < 1.4, backend


@pytest.mark.skipif(not kernels.compiled_available(), reason="compiled kernels not built")
def test_compiled_sampling_faster_than_python():
    rows = bench_sampling(sizes=(4000,), repeats=2)["runs"]
    t = {(r["kind"], r["backend"]): r["seconds"] for r in rows}
    for kind in ("fps", "weighted_fps"):
        assert t[(kind, "cython")] < t[(kind, "python")]
