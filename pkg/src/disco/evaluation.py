"""Frozen-encoder evaluation probes.

All probes share one protocol: extract pre-head representations under a
no-grad scope, standardize them with statistics from the full training
split (then scale by 1/sqrt(d) so full-batch gradient descent at the
default learning rate is provably descending), and fit a zero-initialized
linear classifier with plain full-batch GD. No randomness enters the fit,
so probe results are bit-reproducible given an encoder and a dataset;
label-fraction sampling is the only seeded choice and is nested across
fractions.

The optional teacher path trains a probe on the teacher's own features
first and adds a temperature-softened KL term against its logits to the
student probe objective.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .baselines import kd_loss
from .data import Dataset, sample_label_fraction
from .models import ModelBundle, checksum, forward_embed
from .optim import SGD
from .tensor import Tensor

__all__ = ["ProbeConfig", "ProbeResult", "extract_features",
           "standardize_features", "cross_entropy", "top_k_accuracy",
           "fit_linear_probe", "evaluate_classifier", "linear_probe",
           "semi_supervised_probe", "transfer_probe", "dataset_content_hash",
           "write_probe_result", "read_probe_result"]


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 50
    lr: float = 0.3
    momentum: float = 0.0
    weight_decay: float = 0.0
    milestones: tuple = (0.6, 0.8)
    decay_factor: float = 0.1
    kd_weight: float = 1.0
    kd_temperature: float = 4.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("probe epochs must be >= 1")
        ms = list(self.milestones)
        if ms != sorted(ms) or any(not 0.0 < m < 1.0 for m in ms):
            raise ValueError("milestones must be ascending fractions in (0, 1)")

    @classmethod
    def from_config(cls, cfg: dict) -> "ProbeConfig":
        p = cfg["probe"]
        return cls(epochs=p["epochs"], lr=p["lr"], momentum=p["momentum"],
                   weight_decay=p["weight_decay"],
                   milestones=tuple(p["milestones"]),
                   decay_factor=p["decay_factor"], kd_weight=p["kd_weight"],
                   kd_temperature=p["kd_temperature"])

    def lr_at(self, epoch: int) -> float:
        passed = sum(epoch >= int(m * self.epochs) for m in self.milestones)
        return self.lr * self.decay_factor ** passed


@dataclass(frozen=True)
class ProbeResult:
    kind: str
    label_fraction: float
    num_train: int
    num_test: int
    top1: float
    top5: float
    per_class: tuple
    train_losses: tuple
    encoder_checksum: str
    config_digest: str = ""

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class"] = list(d["per_class"])
        d["train_losses"] = list(d["train_losses"])
        return json.dumps(d, sort_keys=True, separators=(",", ":"))


def write_probe_result(result: ProbeResult, path) -> None:
    Path(path).write_text(result.to_json() + "\n")


def read_probe_result(path) -> ProbeResult:
    d = json.loads(Path(path).read_text())
    d["per_class"] = tuple(d["per_class"])
    d["train_losses"] = tuple(d["train_losses"])
    return ProbeResult(**d)


def extract_features(bundle: ModelBundle, images: np.ndarray,
                     batch_size: int = 256) -> np.ndarray:
    """Pre-head representations.

    Values agree across batch sizes only to float tolerance (BLAS picks
    its blocking by row count), so callers that need byte-stable output
    must keep ``batch_size`` fixed; every driver here does.
    """
    out = []
    with T.no_grad():
        for lo in range(0, len(images), batch_size):
            rep, _ = forward_embed(bundle, Tensor(images[lo:lo + batch_size]))
            out.append(rep.data)
    return np.concatenate(out, axis=0)


def standardize_features(train: np.ndarray, *others: np.ndarray):
    """Zero-mean unit-variance per dimension using training statistics,
    then scaled by 1/sqrt(d) so row norms are O(1); constant dimensions
    map to zero."""
    mu = train.mean(axis=0)
    sigma = train.std(axis=0)
    sigma = np.where(sigma == 0, 1.0, sigma)
    scale = 1.0 / np.sqrt(train.shape[1])
    mapped = [((x - mu) / sigma * scale).astype(train.dtype)
              for x in (train,) + others]
    return mapped[0] if not others else mapped


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross entropy against integer labels."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise T.ShapeError(f"cross_entropy: logits {logits.shape} vs labels "
                           f"{labels.shape}")
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("cross_entropy: label out of range")
    onehot = np.zeros((n, k), dtype=logits.data.dtype)
    onehot[np.arange(n), labels] = 1.0
    lsm = T.log_softmax(logits, axis=1)
    return T.scale(T.tsum(T.mul(lsm, T.constant(onehot))), -1.0 / n)


def top_k_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of rows whose label is among the k best logits; ties go
    to the lower class index (stable sort on negated scores)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    k = min(k, logits.shape[1])
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float((top == labels[:, None]).any(axis=1).mean())


def fit_linear_probe(train_x: np.ndarray, train_y: np.ndarray,
                     num_classes: int, pcfg: ProbeConfig,
                     teacher_logits: np.ndarray | None = None):
    """Full-batch GD on a zero-initialized linear classifier; returns
    (weight, bias, per-epoch losses). The loss at each epoch is recorded
    before the step, so the list traces the descent trajectory."""
    dtype = T.default_dtype()
    x = T.constant(np.ascontiguousarray(train_x, dtype=dtype))
    w = Tensor(np.zeros((train_x.shape[1], num_classes), dtype=dtype),
               requires_grad=True)
    b = Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True)
    opt = SGD([w, b], lr=pcfg.lr, momentum=pcfg.momentum,
              weight_decay=pcfg.weight_decay)
    t_logits = None
    if teacher_logits is not None:
        t_logits = np.ascontiguousarray(teacher_logits, dtype=dtype)
        if t_logits.shape != (train_x.shape[0], num_classes):
            raise T.ShapeError("teacher logits shape mismatch")
    losses = []
    for epoch in range(pcfg.epochs):
        opt.lr = pcfg.lr_at(epoch)
        logits = T.add(T.matmul(x, w), b)
        loss = cross_entropy(logits, train_y)
        if t_logits is not None:
            loss = T.add(loss, T.scale(
                kd_loss(logits, t_logits, pcfg.kd_temperature),
                pcfg.kd_weight))
        losses.append(loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
    return w.data.copy(), b.data.copy(), losses


def evaluate_classifier(weight: np.ndarray, bias: np.ndarray, x: np.ndarray,
                        y: np.ndarray, num_classes: int) -> dict:
    logits = x @ weight + bias
    pred = np.argsort(-logits, axis=1, kind="stable")[:, 0]
    per_class = []
    for c in range(num_classes):
        mask = y == c
        per_class.append(float((pred[mask] == c).mean()) if mask.any() else 0.0)
    return {"top1": top_k_accuracy(logits, y, 1),
            "top5": top_k_accuracy(logits, y, 5),
            "per_class": tuple(per_class)}


def _teacher_probe_logits(teacher: ModelBundle, train_images, idx, train_y,
                          num_classes, pcfg) -> np.ndarray:
    feats = extract_features(teacher, train_images)
    feats = standardize_features(feats)
    wt, bt, _ = fit_linear_probe(feats[idx], train_y, num_classes, pcfg)
    return feats[idx] @ wt + bt


def linear_probe(bundle: ModelBundle, dataset: Dataset, pcfg: ProbeConfig,
                 fraction: float = 1.0, fraction_seed: int = 0,
                 teacher_bundle: ModelBundle | None = None,
                 kind: str = "linear") -> ProbeResult:
    """Fit and score one probe; ``fraction`` restricts the labeled set
    (stratified, nested across fractions for a fixed seed)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    tr, te = dataset.train, dataset.test
    feats_tr = extract_features(bundle, tr.images)
    feats_te = extract_features(bundle, te.images)
    feats_tr, feats_te = standardize_features(feats_tr, feats_te)
    if fraction < 1.0:
        idx = sample_label_fraction(tr, fraction, fraction_seed)
    else:
        idx = np.arange(len(tr.labels))
    y = tr.labels[idx]
    t_logits = None
    if teacher_bundle is not None:
        t_logits = _teacher_probe_logits(teacher_bundle, tr.images, idx, y,
                                         dataset.num_classes, pcfg)
    w, b, losses = fit_linear_probe(feats_tr[idx], y, dataset.num_classes,
                                    pcfg, teacher_logits=t_logits)
    scores = evaluate_classifier(w, b, feats_te, te.labels,
                                 dataset.num_classes)
    return ProbeResult(kind=kind, label_fraction=float(fraction),
                       num_train=int(len(idx)), num_test=int(len(te.labels)),
                       top1=scores["top1"], top5=scores["top5"],
                       per_class=scores["per_class"],
                       train_losses=tuple(round(v, 8) for v in losses),
                       encoder_checksum=checksum(bundle))


def semi_supervised_probe(bundle: ModelBundle, dataset: Dataset,
                          pcfg: ProbeConfig, fractions, fraction_seed: int = 0,
                          teacher_bundle: ModelBundle | None = None
                          ) -> list[ProbeResult]:
    """One probe per label fraction; smaller labeled sets are subsets of
    larger ones, so curves reflect label budget alone."""
    return [linear_probe(bundle, dataset, pcfg, fraction=f,
                         fraction_seed=fraction_seed,
                         teacher_bundle=teacher_bundle, kind="semi")
            for f in fractions]


def dataset_content_hash(dataset: Dataset) -> str:
    h = hashlib.blake2b(digest_size=8)
    for split in (dataset.train, dataset.test):
        h.update(np.ascontiguousarray(split.images).tobytes())
        h.update(np.ascontiguousarray(split.labels).tobytes())
    return h.hexdigest()


def transfer_probe(bundle: ModelBundle, pretrain_dataset: Dataset,
                   transfer_dataset: Dataset, pcfg: ProbeConfig
                   ) -> ProbeResult:
    """Probe on a dataset the encoder never saw; warns when the transfer
    data is byte-identical to the pretraining data (that would measure
    nothing new)."""
    if dataset_content_hash(pretrain_dataset) == \
            dataset_content_hash(transfer_dataset):
        warnings.warn("transfer dataset is identical to the pretraining "
                      "dataset; transfer scores duplicate linear-probe scores",
                      RuntimeWarning, stacklevel=2)
    result = linear_probe(bundle, transfer_dataset, pcfg, kind="transfer")
    return result
