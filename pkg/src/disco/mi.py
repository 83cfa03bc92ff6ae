"""Binning-based mutual information and the information-plane trace.

Representations are discretized with equal-width bins (per unit by
default, or one global range), each sample's bin-index row is hashed to a
single 64-bit code, and entropies come from plug-in frequency estimates
in bits. Because the traced map from input to representation is
deterministic, I(X;T) with X the sample identity reduces to H(T); I(T;Y)
is the plug-in mutual information between codes and labels.

These are coarse estimators by construction; the trace is meant for
reading direction and ordering across training checkpoints, not absolute
information values.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .contrastive import bundle_from_records
from .data import Dataset
from .evaluation import ProbeConfig, extract_features, linear_probe

__all__ = ["BinningConfig", "bin_indices", "row_codes", "discretize",
           "entropy_bits", "mutual_information_bits", "info_plane_trace",
           "write_info_plane_csv", "read_info_plane_csv"]


@dataclass(frozen=True)
class BinningConfig:
    bins: int = 30
    range_policy: str = "per_unit"
    layer: str = "repr"

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.range_policy not in ("per_unit", "global"):
            raise ValueError("range_policy must be per_unit or global")
        if self.layer != "repr":
            raise ValueError("only the pre-head representation is traced")

    @classmethod
    def from_config(cls, cfg: dict) -> "BinningConfig":
        m = cfg["mi"]
        return cls(bins=m["bins"], range_policy=m["range_policy"],
                   layer=m["layer"])


def bin_indices(features: np.ndarray, bins: int,
                range_policy: str = "per_unit") -> np.ndarray:
    """Equal-width bin index per entry; constant units map to bin 0 and
    the range maximum lands in the top bin."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {x.shape}")
    if range_policy == "per_unit":
        lo = x.min(axis=0, keepdims=True)
        hi = x.max(axis=0, keepdims=True)
    elif range_policy == "global":
        lo = np.full((1, x.shape[1]), x.min())
        hi = np.full((1, x.shape[1]), x.max())
    else:
        raise ValueError(f"unknown range_policy {range_policy!r}")
    span = hi - lo
    flat = span == 0
    span = np.where(flat, 1.0, span)
    idx = np.floor((x - lo) / span * bins).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    idx[np.broadcast_to(flat, idx.shape)] = 0
    return idx


def row_codes(indices: np.ndarray) -> np.ndarray:
    """Collapse each bin-index row to one stable 64-bit code."""
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    out = np.empty(len(indices), dtype=np.int64)
    for i, row in enumerate(indices):
        h = hashlib.blake2b(row.tobytes(), digest_size=8)
        out[i] = int.from_bytes(h.digest(), "little", signed=True)
    return out


def discretize(features: np.ndarray, cfg: BinningConfig) -> np.ndarray:
    return row_codes(bin_indices(features, cfg.bins, cfg.range_policy))


def entropy_bits(codes: np.ndarray) -> float:
    codes = np.asarray(codes)
    if codes.ndim != 1 or codes.size == 0:
        raise ValueError("codes must be a non-empty 1-D array")
    _, counts = np.unique(codes, return_counts=True)
    p = counts / codes.size
    return float(-(p * np.log2(p)).sum())


def mutual_information_bits(x_codes: np.ndarray, y_codes: np.ndarray) -> float:
    """Plug-in I(X;Y) = H(X) + H(Y) - H(X,Y) over paired samples."""
    x_codes = np.asarray(x_codes)
    y_codes = np.asarray(y_codes)
    if x_codes.shape != y_codes.shape or x_codes.ndim != 1:
        raise ValueError("codes must be 1-D arrays of equal length")
    _, xi = np.unique(x_codes, return_inverse=True)
    _, yi = np.unique(y_codes, return_inverse=True)
    joint = xi.astype(np.int64) * (yi.max() + 1) + yi
    return entropy_bits(xi) + entropy_bits(yi) - entropy_bits(joint)


def info_plane_trace(checkpoint_paths, dataset: Dataset, cfg: BinningConfig,
                     pcfg: ProbeConfig | None = None,
                     expect_digest: int | None = None) -> list[dict]:
    """One row per checkpoint: H(T) as I(X;T), I(T;Y), and probe top-1.

    All checkpoints must hold the same encoder architecture; mixing
    encoders would make the trace incomparable point to point. MI is
    measured on the training split (the distribution the encoder was
    fitted to); top-1 follows the usual train-fit/test-score protocol.
    """
    pcfg = pcfg or ProbeConfig()
    rows = []
    first_cfg = None
    for path in checkpoint_paths:
        records, _ = load_checkpoint(path, expect_digest=expect_digest)
        bundle = bundle_from_records(records, "query")
        if first_cfg is None:
            first_cfg = bundle.encoder_config
        elif bundle.encoder_config != first_cfg:
            raise ValueError(f"{path}: encoder {bundle.encoder_config} does "
                             f"not match trace start {first_cfg}")
        feats = extract_features(bundle, dataset.train.images)
        codes = discretize(feats, cfg)
        i_xt = entropy_bits(codes)
        i_ty = mutual_information_bits(codes, dataset.train.labels)
        top1 = linear_probe(bundle, dataset, pcfg).top1
        rows.append({"checkpoint": Path(path).stem, "i_xt_bits": i_xt,
                     "i_ty_bits": i_ty, "top1": top1})
    return rows


def write_info_plane_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["checkpoint", "i_xt_bits", "i_ty_bits", "top1"])
        for r in rows:
            writer.writerow([r["checkpoint"], f"{r['i_xt_bits']:.6f}",
                             f"{r['i_ty_bits']:.6f}", f"{r['top1']:.6f}"])


def read_info_plane_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [{"checkpoint": r["checkpoint"],
                 "i_xt_bits": float(r["i_xt_bits"]),
                 "i_ty_bits": float(r["i_ty_bits"]),
                 "top1": float(r["top1"])} for r in reader]
