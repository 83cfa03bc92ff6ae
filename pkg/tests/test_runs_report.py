"""Run-directory plumbing and report aggregation over handcrafted runs."""

import json
import math

import numpy as np
import pytest

from disco.checkpoint import DigestMismatch
from disco.evaluation import ProbeResult, write_probe_result
from disco.mi import write_info_plane_csv
from disco.report import (ReportError, ablation_table, fraction_table,
                          method_table, missing_combinations, scan_runs,
                          write_report)
from disco.runs import (MetricsWriter, lr_at_epoch, make_run_dir,
                        read_metrics, read_run_tags, write_run_tags)


def probe_result(kind="linear", fraction=1.0, top1=0.5) -> ProbeResult:
    return ProbeResult(kind=kind, label_fraction=fraction, num_train=100,
                       num_test=40, top1=top1, top5=min(1.0, top1 + 0.3),
                       per_class=(top1, top1), train_losses=(1.4, 0.9),
                       encoder_checksum="feedbeef")


def fake_run(root, name, method, width, seed, top1, *, kind="distill",
             teacher_digest="t" * 16, use_co=True, use_dis=True,
             semi=(), info_rows=None):
    run_dir = make_run_dir(root / name)
    tags = {"kind": kind, "run_id": name, "method": method,
            "head_hidden": width, "seed": seed,
            "config_digest": "c" * 16, "teacher_digest": teacher_digest}
    if kind == "distill":
        tags.update(use_co=use_co, use_dis=use_dis)
    write_run_tags(run_dir, **tags)
    write_probe_result(probe_result(top1=top1),
                       run_dir / "probes" / "linear_1.json")
    for fraction, acc in semi:
        write_probe_result(probe_result("semi", fraction, acc),
                           run_dir / "probes" / f"semi_{fraction:g}.json")
    if info_rows is not None:
        write_info_plane_csv(info_rows, run_dir / "info_plane.csv")
    return run_dir


def info_rows(i_xt, i_ty):
    return [{"checkpoint": f"e{i}", "i_xt_bits": x, "i_ty_bits": y,
             "top1": 0.4 + 0.01 * i}
            for i, (x, y) in enumerate(zip(i_xt, i_ty))]


class TestMetricsWriter:
    def test_appends_and_enforces_epoch_order(self, tmp_path):
        path = tmp_path / "m.jsonl"
        w = MetricsWriter(path, "run-a")
        w.append("distill", 0, {"loss": 1.0})
        w.append("distill", 1, {"loss": 0.5})
        w.append("probe", 0, {"top1": 0.4})  # phases are independent
        with pytest.raises(ValueError, match="not after"):
            w.append("distill", 1, {"loss": 0.4})
        rows = read_metrics(path)
        assert [(r["phase"], r["epoch"]) for r in rows] == \
            [("distill", 0), ("distill", 1), ("probe", 0)]

    def test_reopen_continues_the_guard(self, tmp_path):
        path = tmp_path / "m.jsonl"
        MetricsWriter(path, "run-a").append("distill", 3, {"loss": 1.0})
        w2 = MetricsWriter(path, "run-a")
        with pytest.raises(ValueError):
            w2.append("distill", 3, {"loss": 0.9})
        w2.append("distill", 4, {"loss": 0.9})

    def test_rejects_bad_values(self, tmp_path):
        w = MetricsWriter(tmp_path / "m.jsonl", "run-a")
        with pytest.raises(ValueError, match="finite"):
            w.append("distill", 0, {"loss": float("nan")})
        with pytest.raises(TypeError):
            w.append("distill", 0, {"loss": "small"})
        with pytest.raises(TypeError):
            w.append("distill", 0, {"flag": True})

    def test_read_metrics_validates(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps({"run_id": "r", "phase": "p", "epoch": 0,
                                    "metrics": {}}) + "\n")
        with pytest.raises(ValueError, match="missing field"):
            read_metrics(path)


class TestRunDirHelpers:
    def test_lr_schedules(self):
        assert lr_at_epoch("const", 0.1, 7, 10) == 0.1
        for e in (0, 3, 9):
            expect = 0.5 * 0.2 * (1 + math.cos(math.pi * e / 10))
            assert lr_at_epoch("cosine", 0.2, e, 10) == pytest.approx(expect)
        assert lr_at_epoch("cosine", 0.2, 0, 10) == pytest.approx(0.2)
        with pytest.raises(ValueError):
            lr_at_epoch("step", 0.1, 0, 10)

    def test_make_run_dir_idempotent(self, tmp_path):
        d = make_run_dir(tmp_path / "r")
        assert (d / "checkpoints").is_dir() and (d / "probes").is_dir()
        assert make_run_dir(tmp_path / "r") == d

    def test_tags_roundtrip(self, tmp_path):
        make_run_dir(tmp_path / "r")
        write_run_tags(tmp_path / "r", kind="distill", head_hidden=None,
                       seed=3)
        tags = read_run_tags(tmp_path / "r")
        assert tags == {"kind": "distill", "head_hidden": None, "seed": 3}


class TestAggregation:
    def test_scan_finds_nested_runs(self, tmp_path):
        fake_run(tmp_path / "sweep", "a", "disco", 32, 1, 0.6)
        fake_run(tmp_path, "b", "contrastive", 32, 1, 0.5,
                 info_rows=info_rows([4.0, 3.5], [1.0, 1.2]))
        recs = scan_runs(tmp_path)
        assert len(recs) == 2
        by_method = {r.method: r for r in recs}
        assert by_method["disco"].probe("linear", 1.0).top1 == 0.6
        assert len(by_method["contrastive"].info_rows) == 2

    def test_method_table_deltas_and_order(self, tmp_path):
        fake_run(tmp_path, "t", "teacher", 512, 1, 0.8,
                 kind="pretrain-teacher")
        fake_run(tmp_path, "c1", "contrastive", 32, 1, 0.48)
        fake_run(tmp_path, "c2", "contrastive", 32, 2, 0.52)
        fake_run(tmp_path, "d1", "disco", 32, 1, 0.60)
        fake_run(tmp_path, "d2", "disco", 32, 2, 0.64)
        rows = method_table(scan_runs(tmp_path))
        assert [r["method"] for r in rows] == ["teacher", "contrastive",
                                               "disco"]
        teacher, contrastive, disco = rows
        assert teacher["delta_vs_contrastive"] is None
        assert contrastive["delta_vs_contrastive"] is None
        assert contrastive["top1_mean"] == pytest.approx(0.5)
        assert disco["top1_mean"] == pytest.approx(0.62)
        assert disco["delta_vs_contrastive"] == pytest.approx(0.12)
        assert disco["top1_min"] == 0.60 and disco["top1_max"] == 0.64
        assert disco["seeds"] == "1,2"

    def test_method_table_width_fallback(self, tmp_path):
        # no contrastive run at width 64: gap falls back to the overall
        # contrastive mean rather than disappearing
        fake_run(tmp_path, "c", "contrastive", 32, 1, 0.5)
        fake_run(tmp_path, "d", "disco", 64, 1, 0.6)
        rows = method_table(scan_runs(tmp_path))
        disco = [r for r in rows if r["method"] == "disco"][0]
        assert disco["delta_vs_contrastive"] == pytest.approx(0.1)

    def test_ablation_groups(self, tmp_path):
        fake_run(tmp_path, "a", "disco", 32, 1, 0.6)
        fake_run(tmp_path, "b", "disco", 32, 2, 0.7)
        fake_run(tmp_path, "c", "disco", 32, 3, 0.55, use_co=False)
        rows = ablation_table(scan_runs(tmp_path))
        assert len(rows) == 2
        assert rows[0]["use_co"] and rows[0]["use_dis"]
        assert rows[0]["runs"] == 2
        assert rows[0]["top1_mean"] == pytest.approx(0.65)
        assert not rows[1]["use_co"]

    def test_fraction_table(self, tmp_path):
        fake_run(tmp_path, "a", "disco", 32, 1, 0.6,
                 semi=[(0.01, 0.3), (0.1, 0.45), (1.0, 0.6)])
        fake_run(tmp_path, "b", "disco", 32, 2, 0.6,
                 semi=[(0.01, 0.4), (0.1, 0.55), (1.0, 0.7)])
        rows = fraction_table(scan_runs(tmp_path))
        assert [r["fraction"] for r in rows] == [0.01, 0.1, 1.0]
        assert rows[0]["top1_mean"] == pytest.approx(0.35)
        assert all(r["runs"] == 2 for r in rows)

    def test_missing_combinations(self, tmp_path):
        fake_run(tmp_path, "a", "disco", 32, 1, 0.6)
        fake_run(tmp_path, "b", "disco", 32, 2, 0.6)
        fake_run(tmp_path, "c", "contrastive", 32, 1, 0.5)
        missing = missing_combinations(scan_runs(tmp_path))
        assert missing == [("contrastive", "32", 2)]


class TestWriteReport:
    def test_full_report_artifacts(self, tmp_path):
        runs = tmp_path / "runs"
        fake_run(runs, "c", "contrastive", 32, 1, 0.5,
                 semi=[(0.1, 0.4), (1.0, 0.5)])
        fake_run(runs, "d", "disco", 32, 1, 0.62,
                 semi=[(0.1, 0.5), (1.0, 0.62)],
                 info_rows=info_rows([4.0, 3.6, 3.2], [1.0, 1.1, 1.3]))
        out = tmp_path / "report"
        summary = write_report(runs, out)
        assert summary["runs"] == 2
        assert summary["flags"] == []
        text = (out / "report.md").read_text()
        assert "Linear probe accuracy by method" in text
        assert "compression with rising label information" in text
        for name in ("methods.tsv", "ablation.tsv", "fractions.tsv",
                     "fractions.svg", "info_plane.csv", "info_plane.svg"):
            assert (out / name).exists()

    def test_wrong_direction_is_flagged_not_fatal(self, tmp_path):
        runs = tmp_path / "runs"
        fake_run(runs, "d", "disco", 32, 1, 0.6,
                 info_rows=info_rows([3.0, 3.8], [1.2, 1.0]))
        summary = write_report(runs, tmp_path / "report")
        assert "info-plane direction" in summary["flags"]
        assert "FLAGGED" in (tmp_path / "report" / "report.md").read_text()

    def test_equal_endpoints_count_as_compression(self, tmp_path):
        # saturated estimators plateau; equality must not raise a flag
        runs = tmp_path / "runs"
        fake_run(runs, "d", "disco", 32, 1, 0.6,
                 info_rows=info_rows([4.0, 4.0], [1.0, 1.0]))
        summary = write_report(runs, tmp_path / "report")
        assert "info-plane direction" not in summary["flags"]

    def test_width_direction_ok_when_wide_holds_less(self, tmp_path):
        runs = tmp_path / "runs"
        fake_run(runs, "n", "disco", 32, 1, 0.55,
                 info_rows=info_rows([5.0, 4.5], [1.0, 1.2]))
        fake_run(runs, "w", "disco", 512, 1, 0.62,
                 info_rows=info_rows([4.8, 4.2], [1.0, 1.2]))
        summary = write_report(runs, tmp_path / "report")
        text = (tmp_path / "report" / "report.md").read_text()
        assert "width 512 vs 32" in text
        assert "wide head carries no more I(X;T)" in text
        assert "info-plane direction" not in summary["flags"]

    def test_width_direction_violation_flagged(self, tmp_path):
        runs = tmp_path / "runs"
        fake_run(runs, "n", "disco", 32, 1, 0.55,
                 info_rows=info_rows([4.0, 3.6], [1.0, 1.2]))
        fake_run(runs, "w", "disco", 512, 1, 0.62,
                 info_rows=info_rows([4.5, 4.2], [1.0, 1.2]))
        summary = write_report(runs, tmp_path / "report")
        assert "info-plane direction" in summary["flags"]
        assert "wide head exceeds narrow" in \
            (tmp_path / "report" / "report.md").read_text()

    def test_width_direction_skips_disjoint_bands(self, tmp_path):
        runs = tmp_path / "runs"
        fake_run(runs, "n", "disco", 32, 1, 0.55,
                 info_rows=info_rows([4.0], [0.5]))
        fake_run(runs, "w", "disco", 512, 1, 0.62,
                 info_rows=info_rows([4.5], [2.0]))
        summary = write_report(runs, tmp_path / "report")
        assert "not comparable" in \
            (tmp_path / "report" / "report.md").read_text()
        assert "info-plane direction" not in summary["flags"]

    def test_mixed_teacher_digests_refused_unless_forced(self, tmp_path):
        runs = tmp_path / "runs"
        fake_run(runs, "a", "disco", 32, 1, 0.6, teacher_digest="a" * 16)
        fake_run(runs, "b", "disco", 32, 2, 0.6, teacher_digest="b" * 16)
        with pytest.raises(DigestMismatch):
            write_report(runs, tmp_path / "report")
        summary = write_report(runs, tmp_path / "report", force=True)
        assert summary["teacher_digest"] == "mixed (forced)"
        assert "mixed (forced)" in \
            (tmp_path / "report" / "report.md").read_text()

    def test_partial_grid_reported_with_gaps(self, tmp_path):
        runs = tmp_path / "runs"
        fake_run(runs, "a", "disco", 32, 1, 0.6)
        fake_run(runs, "b", "disco", 32, 2, 0.6)
        fake_run(runs, "c", "contrastive", 32, 1, 0.5)
        summary = write_report(runs, tmp_path / "report")
        assert "missing runs" in summary["flags"]
        text = (tmp_path / "report" / "report.md").read_text()
        assert "method=contrastive head_hidden=32 seed=2" in text
        assert "Report is partial" in text

    def test_report_bytes_are_reproducible(self, tmp_path):
        runs = tmp_path / "runs"
        fake_run(runs, "c", "contrastive", 32, 1, 0.5, semi=[(1.0, 0.5)],
                 info_rows=info_rows([4.0, 3.5], [1.0, 1.2]))
        fake_run(runs, "d", "disco", 32, 1, 0.62, semi=[(1.0, 0.62)])
        write_report(runs, tmp_path / "r1")
        write_report(runs, tmp_path / "r2")
        for name in ("report.md", "methods.tsv", "fractions.tsv",
                     "fractions.svg", "info_plane.csv", "info_plane.svg"):
            a = (tmp_path / "r1" / name).read_bytes()
            assert a == (tmp_path / "r2" / name).read_bytes()
            assert len(a) > 0

    def test_empty_root_rejected(self, tmp_path):
        with pytest.raises(ReportError):
            write_report(tmp_path, tmp_path / "report")
