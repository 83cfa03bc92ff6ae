"""Aggregate run directories into tables, curves, and a markdown report.

Runs are discovered by their ``run.json`` tag files and referenced in
every artifact by tags alone (method, head width, seed), never by path,
run id, or timestamp, so regenerating a report from bit-identical runs
yields bit-identical bytes.

Aggregation refuses to mix runs whose teacher digests differ (they were
distilled from different teachers, so their accuracies are not
comparable) unless explicitly forced. A report is still written when
expected combinations are missing; the gaps are listed at the end.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import DigestMismatch
from .evaluation import ProbeResult, read_probe_result
from .mi import read_info_plane_csv
from .runs import read_run_tags
from .svg import line_chart, write_chart

__all__ = ["RunRecord", "scan_runs", "write_report", "ReportError"]

_METHOD_ORDER = ["teacher", "contrastive", "disco", "at", "at+disco",
                 "rkd", "rkd+disco", "seed"]


class ReportError(RuntimeError):
    pass


@dataclass
class RunRecord:
    path: Path
    tags: dict
    probes: list = field(default_factory=list)
    info_rows: list = field(default_factory=list)

    @property
    def method(self) -> str:
        if self.tags.get("kind") == "pretrain-teacher":
            return "teacher"
        return self.tags.get("method", "unknown")

    @property
    def width(self):
        return self.tags.get("head_hidden")

    @property
    def seed(self):
        return self.tags.get("seed")

    def probe(self, kind: str, fraction: float) -> ProbeResult | None:
        for p in self.probes:
            if p.kind == kind and p.label_fraction == fraction:
                return p
        return None


def scan_runs(root) -> list[RunRecord]:
    records = []
    for tag_file in sorted(Path(root).rglob("run.json")):
        run_dir = tag_file.parent
        rec = RunRecord(path=run_dir, tags=read_run_tags(run_dir))
        for pf in sorted((run_dir / "probes").glob("*.json")):
            rec.probes.append(read_probe_result(pf))
        ip = run_dir / "info_plane.csv"
        if ip.exists():
            rec.info_rows = read_info_plane_csv(ip)
        records.append(rec)
    return records


def _check_teacher_digests(records: list[RunRecord], force: bool) -> str:
    digests = sorted({r.tags["teacher_digest"] for r in records
                      if "teacher_digest" in r.tags})
    if len(digests) > 1 and not force:
        raise DigestMismatch(f"runs span {len(digests)} different teacher "
                             f"digests {digests}; pass force to aggregate "
                             f"anyway")
    if not digests:
        return "none"
    return digests[0] if len(digests) == 1 else "mixed (forced)"


def _width_label(width) -> str:
    return "absent" if width is None else str(width)


def _method_key(method: str):
    try:
        return (_METHOD_ORDER.index(method), method)
    except ValueError:
        return (len(_METHOD_ORDER), method)


def _width_key(width):
    return (0, 0) if width is None else (1, width)


def _mean(vals):
    return sum(vals) / len(vals)


def _student_runs(records):
    return [r for r in records if r.tags.get("kind") == "distill"]


def method_table(records: list[RunRecord]) -> list[dict]:
    """Mean linear-probe top-1 per (method, width) across seeds, with the
    gap to the contrastive-only baseline at the same width. The teacher
    row, when probed, is the reference ceiling and carries no gap."""
    groups: dict[tuple, list] = {}
    for r in records:
        if r.tags.get("kind") not in ("distill", "pretrain-teacher"):
            continue
        p = r.probe("linear", 1.0)
        if p is not None:
            groups.setdefault((r.method, r.width), []).append((r.seed, p.top1))
    base = {w: _mean([t for _, t in v]) for (m, w), v in groups.items()
            if m == "contrastive"}
    rows = []
    for (method, width) in sorted(groups,
                                  key=lambda k: (_method_key(k[0]),
                                                 _width_key(k[1]))):
        vals = sorted(groups[(method, width)])
        tops = [t for _, t in vals]
        ref = base.get(width, _mean(list(base.values())) if base else None)
        rows.append({"method": method, "head_hidden": _width_label(width),
                     "seeds": ",".join(str(s) for s, _ in vals),
                     "top1_mean": _mean(tops), "top1_min": min(tops),
                     "top1_max": max(tops),
                     "delta_vs_contrastive":
                         None if ref is None
                         or method in ("contrastive", "teacher")
                         else _mean(tops) - ref})
    return rows


def ablation_table(records: list[RunRecord]) -> list[dict]:
    groups: dict[tuple, list] = {}
    for r in _student_runs(records):
        if "use_co" not in r.tags:
            continue
        p = r.probe("linear", 1.0)
        if p is not None:
            key = (bool(r.tags["use_co"]), bool(r.tags["use_dis"]), r.width)
            groups.setdefault(key, []).append(p.top1)
    rows = []
    for key in sorted(groups, key=lambda k: (not k[0], not k[1],
                                             _width_key(k[2]))):
        use_co, use_dis, width = key
        rows.append({"use_co": use_co, "use_dis": use_dis,
                     "head_hidden": _width_label(width),
                     "runs": len(groups[key]),
                     "top1_mean": _mean(groups[key])})
    return rows


def fraction_table(records: list[RunRecord]) -> list[dict]:
    groups: dict[tuple, list] = {}
    for r in _student_runs(records):
        for p in r.probes:
            if p.kind == "semi":
                groups.setdefault((r.method, p.label_fraction),
                                  []).append(p.top1)
    rows = []
    for (method, fraction) in sorted(groups, key=lambda k: (_method_key(k[0]),
                                                            k[1])):
        rows.append({"method": method, "fraction": fraction,
                     "runs": len(groups[(method, fraction)]),
                     "top1_mean": _mean(groups[(method, fraction)])})
    return rows


def missing_combinations(records: list[RunRecord]) -> list[tuple]:
    """Grid gaps relative to the observed methods, widths, and seeds."""
    runs = _student_runs(records)
    methods = sorted({r.method for r in runs}, key=_method_key)
    widths = sorted({r.width for r in runs}, key=_width_key)
    seeds = sorted({r.seed for r in runs})
    have = {(r.method, r.width, r.seed) for r in runs}
    missing = []
    for m in methods:
        for w in widths:
            for s in seeds:
                if (m, w, s) not in have:
                    missing.append((m, _width_label(w), s))
    return missing


def _write_tsv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _width_direction_lines(traced) -> list[str]:
    """Compare the widest against the narrowest traced head per
    (method, seed): at matched I(T;Y) (within 5%), the wide head should
    hold no more input information than the narrow one."""
    groups: dict[tuple, dict] = {}
    for r in traced:
        if r.tags.get("kind") != "distill" or not isinstance(r.width, int):
            continue
        groups.setdefault((r.method, r.seed), {})[r.width] = r.info_rows
    lines = []
    for (method, seed) in sorted(groups, key=lambda k: (_method_key(k[0]),
                                                        k[1])):
        by_width = groups[(method, seed)]
        if len(by_width) < 2:
            continue
        narrow_w, wide_w = min(by_width), max(by_width)
        narrow, wide = by_width[narrow_w], by_width[wide_w]
        matched = 0
        violations = 0
        for w_row in wide:
            band = 0.05 * max(abs(w_row["i_ty_bits"]), 1e-9)
            in_band = [n for n in narrow
                       if abs(n["i_ty_bits"] - w_row["i_ty_bits"]) <= band]
            if not in_band:
                continue
            matched += 1
            ceiling = max(n["i_xt_bits"] for n in in_band)
            if w_row["i_xt_bits"] > ceiling + 1e-9:
                violations += 1
        label = f"{method}/s={seed}: width {wide_w} vs {narrow_w}"
        if matched == 0:
            lines.append(f"- {label}: no overlapping I(T;Y) band, "
                         f"not comparable")
        elif violations == 0:
            lines.append(f"- {label}: wide head carries no more I(X;T) at "
                         f"matched I(T;Y) ({matched} matched points)")
        else:
            lines.append(f"- {label}: FLAGGED: wide head exceeds narrow "
                         f"I(X;T) at {violations} of {matched} matched "
                         f"points; trace kept for review")
    return lines


def _info_plane_sections(records, out_dir):
    """Combined CSV, one chart, per-run and cross-width verdicts."""
    traced = [r for r in records if r.info_rows]
    if not traced:
        return [], None
    traced.sort(key=lambda r: (_method_key(r.method), _width_key(r.width),
                               r.seed if r.seed is not None else -1))
    lines = []
    series = []
    combined = []
    for r in traced:
        label = f"{r.method}/w={_width_label(r.width)}/s={r.seed}"
        first, last = r.info_rows[0], r.info_rows[-1]
        compressed = last["i_xt_bits"] <= first["i_xt_bits"] + 1e-9
        informative = last["i_ty_bits"] >= first["i_ty_bits"] - 1e-9
        verdict = ("compression with rising label information"
                   if compressed and informative else "FLAGGED: expected "
                   "falling I(X;T) with rising I(T;Y); trace kept for review")
        lines.append(f"- {label}: I(X;T) {first['i_xt_bits']:.3f} -> "
                     f"{last['i_xt_bits']:.3f} bits, I(T;Y) "
                     f"{first['i_ty_bits']:.3f} -> {last['i_ty_bits']:.3f} "
                     f"bits; {verdict}")
        series.append({"name": label,
                       "points": [(row["i_xt_bits"], row["i_ty_bits"])
                                  for row in r.info_rows]})
        for row in r.info_rows:
            combined.append([label, row["checkpoint"],
                             f"{row['i_xt_bits']:.6f}",
                             f"{row['i_ty_bits']:.6f}", f"{row['top1']:.6f}"])
    lines.extend(_width_direction_lines(traced))
    _write_tsv(out_dir / "info_plane.csv",
               ["run", "checkpoint", "i_xt_bits", "i_ty_bits", "top1"],
               combined)
    write_chart(line_chart(series, "Information plane", "I(X;T) bits",
                           "I(T;Y) bits"), out_dir / "info_plane.svg")
    return lines, "info_plane"


def write_report(root, out_dir, force: bool = False) -> dict:
    """Build all report artifacts under ``out_dir``; returns a summary of
    what was produced and any flags raised."""
    records = scan_runs(root)
    if not records:
        raise ReportError(f"no run.json files under {root}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = _check_teacher_digests(records, force)

    md = ["# Distillation experiment report", "",
          f"Teacher digest: {digest}", ""]
    flags = []

    rows = method_table(records)
    if rows:
        header = ["method", "head_hidden", "seeds", "top1_mean", "top1_min",
                  "top1_max", "delta_vs_contrastive"]
        _write_tsv(out_dir / "methods.tsv", header,
                   [[_fmt(r[h]) for h in header] for r in rows])
        md += ["## Linear probe accuracy by method", "",
               "| " + " | ".join(header) + " |",
               "|" + "---|" * len(header)]
        md += ["| " + " | ".join(_fmt(r[h]) for h in header) + " |"
               for r in rows]
        md.append("")

    ab = ablation_table(records)
    if ab:
        header = ["use_co", "use_dis", "head_hidden", "runs", "top1_mean"]
        _write_tsv(out_dir / "ablation.tsv", header,
                   [[_fmt(r[h]) for h in header] for r in ab])
        md += ["## Loss-term and head-width ablation", "",
               "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        md += ["| " + " | ".join(_fmt(r[h]) for h in header) + " |"
               for r in ab]
        md.append("")

    fr = fraction_table(records)
    if fr:
        header = ["method", "fraction", "runs", "top1_mean"]
        _write_tsv(out_dir / "fractions.tsv", header,
                   [[_fmt(r[h]) for h in header] for r in fr])
        by_method: dict[str, list] = {}
        for r in fr:
            by_method.setdefault(r["method"], []).append((r["fraction"],
                                                          r["top1_mean"]))
        series = [{"name": m, "points": sorted(pts)}
                  for m, pts in sorted(by_method.items(),
                                       key=lambda kv: _method_key(kv[0]))]
        write_chart(line_chart(series, "Accuracy vs label fraction",
                               "label fraction", "top-1"),
                    out_dir / "fractions.svg")
        md += ["## Label-fraction curves", "",
               "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        md += ["| " + " | ".join(_fmt(r[h]) for h in header) + " |"
               for r in fr]
        md += ["", "Chart: fractions.svg", ""]

    ip_lines, ip_name = _info_plane_sections(records, out_dir)
    if ip_lines:
        md += ["## Information plane", ""]
        md += ip_lines
        md += ["", "Chart: info_plane.svg", ""]
        if any("FLAGGED" in line for line in ip_lines):
            flags.append("info-plane direction")

    missing = missing_combinations(records)
    if missing:
        flags.append("missing runs")
        md += ["## Missing combinations", ""]
        md += [f"- method={m} head_hidden={w} seed={s}" for m, w, s in missing]
        md += ["", "Report is partial; the tables above cover only the runs "
               "found.", ""]

    (out_dir / "report.md").write_text("\n".join(md).rstrip() + "\n")
    return {"runs": len(records), "teacher_digest": digest, "flags": flags,
            "out_dir": str(out_dir)}
