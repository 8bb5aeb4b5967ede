import numpy as np
import pytest

from sir import bench, config


@pytest.fixture(scope="module")
def tiny_fig3_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfgs") / "f3.toml"
    p.write_text(
        "[fig3]\n"
        "grid_db = [-4]\n"
        "windows = 60\n"
        "samples_per_window = 50\n"
        "mean_dwell = 20\n"
        "sweeps = 30\n"
        "burnin = 10\n"
    )
    return config.load_config(p)


def _row_tuples(res):
    return [(r.sweep, r.method, r.value, r.ci95, r.n_seeds) for r in res.rows]


def test_fig3_rerun_is_bit_exact(tiny_fig3_cfg):
    seeds = [0, 1, 2, 3, 4]
    a = bench.run_fig3(tiny_fig3_cfg, seeds)
    b = bench.run_fig3(tiny_fig3_cfg, seeds)
    assert _row_tuples(a) == _row_tuples(b)
    assert a.seeds == (0, 1, 2, 3, 4)
    for row in a.rows:
        assert row.n_seeds == 5
        assert np.isfinite(row.ci95) and row.ci95 >= 0.0


def test_fig3_seed_minimum_enforced(tiny_fig3_cfg):
    with pytest.raises(ValueError):
        bench.run_fig3(tiny_fig3_cfg, [0, 1])


def test_fig3_csv_layout(tiny_fig3_cfg, tmp_path):
    res = bench.run_fig3(tiny_fig3_cfg, [0, 1, 2, 3, 4])
    out = tmp_path / "fig3.csv"
    bench.save_result_csv(res, out)
    lines = out.read_text().strip().split("\n")
    assert lines[0] == "gamma_st_db,method,pc,ci95"
    assert len(lines) == 1 + len(res.rows)
    assert lines[1].startswith("-4,dpgmm,")


def test_errored_point_becomes_missing_row(tiny_fig3_cfg, tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("synthetic failure")

    monkeypatch.setattr(bench, "_fig3_point_methods", boom)
    res = bench.run_fig3(tiny_fig3_cfg, [0, 1, 2, 3, 4], jobs=1)
    assert len(res.errors) == 5
    for row in res.rows:
        assert row.missing
        assert row.n_seeds == 0
    out = tmp_path / "fig3.csv"
    bench.save_result_csv(res, out)
    body = out.read_text().strip().split("\n")[1:]
    assert all(",nan,nan" in line for line in body)


def test_benchresult_rejects_duplicates_and_bad_ci():
    row = bench.BenchRow(0.0, "m", 1.0, 0.1, 3)
    with pytest.raises(ValueError):
        bench.BenchResult("fig3", (row, row), (0,), 0.0)
    with pytest.raises(ValueError):
        bench.BenchResult("fig3", (bench.BenchRow(0.0, "m", 1.0, -0.5, 3),),
                          (0,), 0.0)


def test_benchresult_row_lookup():
    rows = (bench.BenchRow(1.0, "a", 0.5, 0.0, 2),
            bench.BenchRow(2.0, "a", 0.6, 0.0, 2))
    res = bench.BenchResult("fig6", rows, (0, 1), 0.0)
    assert res.row(2.0, "a").value == 0.6
    with pytest.raises(KeyError):
        res.row(3.0, "a")


def test_fig6_csv_header(tmp_path):
    rows = tuple(bench.BenchRow(float(u), m, 0.5, 0.01, 20)
                 for u in (1, 2) for m in bench.FIG6_METHODS)
    res = bench.BenchResult("fig6", rows, tuple(range(20)), 1.0)
    out = tmp_path / "fig6.csv"
    bench.save_result_csv(res, out)
    lines = out.read_text().strip().split("\n")
    assert lines[0] == "u,method,accuracy,ci95"
    assert lines[1].split(",")[:2] == ["1", "gprl"]


def test_fig5_csv_header(tmp_path):
    rows = tuple(bench.BenchRow(0.0, m, 1.0, 0.0, 5) for m in bench.FIG5_METRICS)
    res = bench.BenchResult("fig5", rows, tuple(range(5)), 1.0)
    out = tmp_path / "fig5.csv"
    bench.save_result_csv(res, out)
    lines = out.read_text().strip().split("\n")
    assert lines[0] == "metric,value,ci95,n_seeds"
    assert lines[1] == "state_count,1.0,0.0,5"


def test_fig5_empty_environment(tmp_path):
    p = tmp_path / "f5.toml"
    p.write_text(
        "[scenario]\n"
        "area_km = [4.0, 4.0]\n"
        "n_channels = 1\n"
        "[[scenario.sus]]\n"
        "start = [0.0, 0.0]\n"
        "end = [4.0, 4.0]\n"
        "n_samples = 80\n"
        "[fig5]\n"
        "sweeps = 40\n"
        "burnin = 20\n"
        "query_points = 50\n"
    )
    cfg = config.load_config(p)
    res, payload = bench.run_fig5(cfg, [0, 1, 2])
    assert res.row(0.0, "circle_count").value == 0.0
    assert res.row(0.0, "state_count").value == 1.0
    assert res.row(0.0, "query_accuracy").value == 1.0
    assert payload["map"] is not None


def test_fig6_seed_minimum_enforced(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[fig6]\nspans = 2\nspan_len = 5\n")
    cfg = config.load_config(p)
    with pytest.raises(ValueError):
        bench.run_fig6(cfg, list(range(5)))
