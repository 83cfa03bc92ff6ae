"""Run-directory plumbing shared by the training drivers.

A run directory holds ``config.json`` (the fully merged config),
``run.json`` (identity and tags for report aggregation),
``metrics.jsonl`` (one record per epoch), ``checkpoints/`` and
``probes/``. Metric records carry wall-clock time for operators; nothing
downstream depends on it.
"""

from __future__ import annotations

import json
import math
import time
from pathlib import Path

__all__ = ["MetricsWriter", "read_metrics", "lr_at_epoch", "make_run_dir",
           "write_run_tags", "read_run_tags"]


class MetricsWriter:
    """Append-only JSONL metrics with strictly increasing epochs per phase."""

    def __init__(self, path, run_id: str):
        self.path = Path(path)
        self.run_id = run_id
        self._last_epoch: dict[str, int] = {}
        self._t0 = time.monotonic()
        if self.path.exists():
            for rec in read_metrics(self.path):
                self._last_epoch[rec["phase"]] = max(
                    self._last_epoch.get(rec["phase"], -1), rec["epoch"])

    def append(self, phase: str, epoch: int, metrics: dict) -> None:
        last = self._last_epoch.get(phase, -1)
        if epoch <= last:
            raise ValueError(f"metrics for phase {phase!r}: epoch {epoch} "
                             f"not after {last}")
        for key, val in metrics.items():
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise TypeError(f"metric {key!r} must be a number")
            if isinstance(val, float) and not math.isfinite(val):
                raise ValueError(f"metric {key!r} is not finite")
        rec = {"run_id": self.run_id, "phase": phase, "epoch": epoch,
               "metrics": metrics,
               "wall_time_s": round(time.monotonic() - self._t0, 3)}
        with open(self.path, "a") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
        self._last_epoch[phase] = epoch


def read_metrics(path) -> list[dict]:
    out = []
    seen: dict[str, int] = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        for field in ("run_id", "phase", "epoch", "metrics", "wall_time_s"):
            if field not in rec:
                raise ValueError(f"{path}:{line_no}: missing field {field!r}")
        last = seen.get(rec["phase"], -1)
        if rec["epoch"] <= last:
            raise ValueError(f"{path}:{line_no}: epoch {rec['epoch']} repeats or "
                             f"regresses in phase {rec['phase']!r}")
        seen[rec["phase"]] = rec["epoch"]
        out.append(rec)
    return out


def lr_at_epoch(kind: str, base_lr: float, epoch: int, total_epochs: int) -> float:
    """Per-epoch learning rate: 'const' or half-cosine decay to zero."""
    if kind == "const":
        return base_lr
    if kind == "cosine":
        return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / total_epochs))
    raise ValueError(f"unknown schedule {kind!r}")


def make_run_dir(out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "probes").mkdir(exist_ok=True)
    return out


def write_run_tags(run_dir, **tags) -> None:
    path = Path(run_dir) / "run.json"
    path.write_text(json.dumps(tags, sort_keys=True, indent=2) + "\n")


def read_run_tags(run_dir) -> dict:
    return json.loads((Path(run_dir) / "run.json").read_text())
