import csv
import json

from bertjam.harness import (
    build_plan,
    compare_baseline,
    count_inversions,
    run_ablation,
    run_experiment,
    run_sweep,
)


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_plans_per_variant(tiny_cfg):
    cfg = tiny_cfg.replace(phase_epochs="4,2,3")
    shape = {v: [(p.phase, p.max_epochs, p.label) for p in build_plan(cfg.replace(variant=v)).phases]
             for v in ("M0", "M1", "M2", "M3")}
    assert shape["M0"] == shape["M1"] == [(1, 4, "1"), (2, 2, "2"), (3, 3, "3")]
    assert shape["M2"] == [(1, 6, "1+2"), (3, 3, "3")]
    assert shape["M3"] == [(2, 6, "1+2"), (3, 3, "3")]
    base = build_plan(cfg.replace(use_bert=False)).phases
    assert [(p.phase, p.max_epochs, p.rule) for p in base] == [(3, 9, "early_stop")]


def test_experiment_report_schema(tiny_cfg, tmp_path):
    exp = run_experiment(tiny_cfg, run_dir=tmp_path)
    rep = exp.report
    assert {"variant", "seed", "task", "final", "phases", "runtime_s", "total_epochs"} <= set(rep)
    assert set(rep["final"]) == {"valid_bleu", "test_bleu", "valid_loss"}
    assert [p["phase"] for p in rep["phases"]] == ["1", "2", "3"]
    assert (tmp_path / "metrics.csv").exists()


def test_ablation_table_shape(tiny_cfg, tmp_path):
    summary = run_ablation(tiny_cfg, [1], tmp_path)
    assert summary["failures"] == []
    table = _rows(tmp_path / "ablation_table.csv")
    assert table[0] == ["variant", "phase_1", "phase_2", "phase_3", "epochs"]
    assert [r[0] for r in table[1:]] == ["M0", "M1", "M2", "M3"]
    by_variant = {r[0]: r for r in table[1:]}
    assert by_variant["M2"][2] == by_variant["M3"][2] == "merged"
    assert by_variant["M0"][2] != "merged"
    long = _rows(tmp_path / "ablation.csv")
    assert long[0] == ["variant", "seed", "phase", "epochs", "valid_bleu", "test_bleu"]
    assert len(long) - 1 == 3 + 3 + 2 + 2
    assert len(list((tmp_path / "curves").glob("*.csv"))) == 4


def test_ablation_is_deterministic_and_cached(tiny_cfg, tmp_path):
    run_ablation(tiny_cfg, [2], tmp_path / "a", variants=("M1",))
    run_ablation(tiny_cfg, [2], tmp_path / "b", variants=("M1",))
    a = (tmp_path / "a" / "ablation.csv").read_bytes()
    assert a == (tmp_path / "b" / "ablation.csv").read_bytes()
    # a second call reuses the finished run
    stamp = (tmp_path / "a" / "runs" / "M1_seed2" / "report.json").stat().st_mtime_ns
    run_ablation(tiny_cfg, [2], tmp_path / "a", variants=("M1",))
    assert (tmp_path / "a" / "runs" / "M1_seed2" / "report.json").stat().st_mtime_ns == stamp


def test_single_cell_sweep_is_one_run(tiny_cfg, tmp_path):
    summary = run_sweep(tiny_cfg, [1], tmp_path, layers=(1,), dims=(8,))
    rows = _rows(tmp_path / "sweep.csv")
    assert rows[0] == ["L_B", "H_B", "seed", "test_bleu", "runtime_s"]
    assert len(rows) == 2 and rows[1][:3] == ["1", "8", "1"]
    assert float(rows[1][4]) > 0 and summary["total_runtime_s"] > 0
    assert summary["trend"] == {"row_inversions": 0, "row_pairs": 0, "col_inversions": 0, "col_pairs": 0}
    assert _rows(tmp_path / "sweep_grid.csv")[0] == ["L_B\\H_B", "8"]
    assert len(list((tmp_path / "runs").iterdir())) == 1


def test_self_comparison_reports_zero(tiny_cfg, tmp_path):
    rep = compare_baseline(tiny_cfg, [1, 2], tmp_path, baseline=tiny_cfg.replace(variant="M0"))
    assert rep["differences"] == [0.0, 0.0] and rep["median_difference"] == 0.0
    saved = json.loads((tmp_path / "compare.json").read_text())
    assert saved["median_difference"] == 0.0 and len(saved["m0_phases"]) == 2


def test_baseline_comparison_reports_signed_median(tiny_cfg, tmp_path):
    rep = compare_baseline(tiny_cfg, [1], tmp_path)
    assert rep["median_difference"] == rep["m0_test_bleu"][0] - rep["baseline_test_bleu"][0]
    assert rep["m0_phases"][0][0]["phase"] == "1"
    assert (tmp_path / "runs" / "baseline_seed1" / "report.json").exists()


def test_failed_cell_is_recorded(tiny_cfg, tmp_path):
    # too few sentences for the cipher audit: every run fails, the harness continues
    bad = tiny_cfg.replace(task="cipher", n_polysemous=4, content_vocab=8, n_train=3)
    summary = run_sweep(bad, [1], tmp_path, layers=(1, 2), dims=(8,))
    assert len(summary["failures"]) == 2
    assert all(r[3] == "" for r in _rows(tmp_path / "sweep.csv")[1:])


def test_count_inversions():
    grid = {(1, 16): 0.5, (1, 32): 0.4, (2, 16): 0.6, (2, 32): 0.7}
    t = count_inversions(grid, (1, 2), (16, 32))
    assert t == {"row_inversions": 1, "row_pairs": 2, "col_inversions": 0, "col_pairs": 2}
    t = count_inversions({(1, 16): None, (1, 32): 0.1}, (1,), (16, 32))
    assert t["row_pairs"] == 0
