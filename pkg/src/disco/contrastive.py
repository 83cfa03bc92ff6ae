"""Momentum-contrast pretraining: queue, EMA key encoder, InfoNCE.

The query bundle trains by gradient; the key bundle shadows it through an
exponential moving average over every parameter (head included) and never
sees a gradient. Keys and queue entries enter the loss as constants, so
stop-gradient is structural rather than a runtime flag.

Fixed step order: embed query view, embed key view (no graph), loss,
optimizer update on the query bundle, EMA update, enqueue. The queue
starts empty and grows; the driver seeds it with one untrained key batch
so the very first loss already has negatives.
"""

from __future__ import annotations

import json

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import config_digest, save_config, teacher_digest
from .data import AugmentationPolicy, DatasetSplit, batch_indices, two_views
from .models import (EncoderConfig, ModelBundle, build_bundle, checksum,
                     clone_bundle, forward_embed, freeze)
from .optim import SGD
from .runs import MetricsWriter, lr_at_epoch, make_run_dir, write_run_tags
from .tensor import ShapeError, Tensor, derive_seed

__all__ = ["MemoryQueue", "MomentumEncoderPair", "info_nce_loss",
           "contrastive_step", "run_contrastive_pretraining",
           "encoder_config_from", "bundle_records", "bundle_from_records"]

_UNIT_TOL = 1e-4


def _check_unit_rows(arr: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(arr, axis=-1)
    worst = float(np.abs(norms - 1.0).max()) if norms.size else 0.0
    if worst > _UNIT_TOL:
        raise ValueError(f"{what}: rows must be unit-norm "
                         f"(worst deviation {worst:.2e})")


class MemoryQueue:
    """FIFO ring of L2-normalized key vectors.

    ``negatives()`` exposes only the filled slots, so a cold queue never
    leaks its zero padding into a loss; once full, every enqueue evicts
    the oldest entries.
    """

    def __init__(self, capacity: int, dim: int, dtype=np.float32):
        if capacity < 1 or dim < 1:
            raise ValueError("queue capacity and dim must be >= 1")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.buffer = np.zeros((capacity, dim), dtype=dtype)
        self.write_ptr = 0
        self.filled = 0

    def __len__(self) -> int:
        return self.filled

    def enqueue(self, keys: np.ndarray) -> None:
        keys = np.asarray(keys)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ShapeError(f"enqueue: keys {keys.shape} do not fit "
                             f"(*, {self.dim})")
        b = keys.shape[0]
        if b > self.capacity:
            raise ValueError(f"enqueue: batch {b} exceeds capacity "
                             f"{self.capacity}")
        if b == 0:
            return
        _check_unit_rows(keys, "enqueue keys")
        slots = (self.write_ptr + np.arange(b)) % self.capacity
        self.buffer[slots] = keys.astype(self.buffer.dtype)
        self.write_ptr = int((self.write_ptr + b) % self.capacity)
        self.filled = min(self.capacity, self.filled + b)

    def negatives(self) -> np.ndarray:
        return self.buffer[:self.filled]

    def state(self) -> dict[str, np.ndarray]:
        return {"queue/buffer": self.buffer,
                "queue/write_ptr": np.array(self.write_ptr, dtype=np.int64),
                "queue/filled": np.array(self.filled, dtype=np.int64)}

    def load_state(self, records: dict[str, np.ndarray]) -> None:
        buf = records["queue/buffer"]
        if buf.shape != self.buffer.shape:
            raise ShapeError(f"queue buffer {buf.shape} != "
                             f"{self.buffer.shape}")
        self.buffer = buf.astype(self.buffer.dtype)
        self.write_ptr = int(records["queue/write_ptr"].item())
        self.filled = int(records["queue/filled"].item())


class MomentumEncoderPair:
    """Query bundle + EMA key shadow with update
    key <- m * key + (1 - m) * query, applied to every parameter."""

    def __init__(self, query: ModelBundle, ema_momentum: float):
        if not 0.0 <= ema_momentum < 1.0:
            raise ValueError("ema_momentum must be in [0, 1)")
        self.query = query
        self.key = clone_bundle(query)
        for p in self.key.parameters():
            p.requires_grad = False
        self.m = float(ema_momentum)

    def momentum_update(self) -> None:
        m = self.m
        for (_, src), (_, dst) in zip(self.query.named_parameters(),
                                      self.key.named_parameters()):
            dst.data = m * dst.data + (1.0 - m) * src.data

    def embed_query(self, batch: np.ndarray) -> tuple[Tensor, Tensor]:
        rep, emb = forward_embed(self.query, Tensor(batch))
        return rep, T.l2_normalize(emb)

    def embed_key(self, batch: np.ndarray) -> np.ndarray:
        _, emb = forward_embed(self.key, Tensor(batch))
        return T.l2_normalize(emb).data


def info_nce_loss(q: Tensor, k_pos, negatives, temperature: float) -> Tensor:
    """Temperature-scaled cross entropy against the positive key.

    Per sample, logits are [q.k_pos, q.n_1, ..., q.n_K] / temperature and
    the label is always index 0. Keys and negatives are constants; only
    ``q`` carries gradient. Computed through log-softmax, so large queues
    cannot overflow.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    kp = k_pos.data if isinstance(k_pos, Tensor) else np.asarray(k_pos)
    neg = negatives.negatives() if isinstance(negatives, MemoryQueue) \
        else np.asarray(negatives)
    if neg.ndim != 2 or neg.shape[0] < 1:
        raise ValueError("info_nce_loss: needs at least one negative")
    if q.ndim != 2 or kp.shape != q.shape or neg.shape[1] != q.shape[1]:
        raise ShapeError(f"info_nce_loss: q {q.shape}, k {kp.shape}, "
                         f"negatives {neg.shape} are inconsistent")
    _check_unit_rows(q.data, "query embeddings")
    _check_unit_rows(kp, "key embeddings")
    _check_unit_rows(neg, "queue negatives")
    kc = T.constant(kp, dtype=q.dtype)
    l_pos = T.tsum(T.mul(q, kc), axis=1, keepdims=True)
    l_neg = T.matmul(q, T.constant(neg.T, dtype=q.dtype))
    logits = T.scale(T.concatenate([l_pos, l_neg], axis=1), 1.0 / temperature)
    lsm = T.log_softmax(logits, axis=1)
    onehot = np.zeros(logits.shape, dtype=q.dtype)
    onehot[:, 0] = 1.0
    picked = T.tsum(T.mul(lsm, T.constant(onehot)), axis=1)
    return T.scale(T.mean(picked), -1.0)


def contrastive_step(pair: MomentumEncoderPair, queue: MemoryQueue,
                     views, optimizer: SGD, temperature: float) -> dict:
    """One training step in the fixed order documented at module top."""
    _, q = pair.embed_query(views.view_q)
    k = pair.embed_key(views.view_k)
    loss = info_nce_loss(q, k, queue, temperature)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    pair.momentum_update()
    queue.enqueue(k)
    return {"loss_co": loss.item(), "batch": int(views.view_q.shape[0]),
            "queue_filled": queue.filled}


# -- bundle <-> checkpoint records ----------------------------------------


def encoder_config_from(section: dict, data: dict) -> EncoderConfig:
    """Encoder settings for a teacher/student section; input geometry
    comes from the data section."""
    in_dim = None
    if section["arch"].startswith("mlp"):
        in_dim = data["channels"] * data["height"] * data["width"]
    return EncoderConfig(arch=section["arch"],
                         widths=tuple(section.get("widths") or ()),
                         in_channels=data["channels"],
                         in_dim=in_dim)


def bundle_records(bundle: ModelBundle, prefix: str) -> dict[str, np.ndarray]:
    recs = {f"{prefix}/{name}": p.data for name, p in bundle.named_parameters()}
    cfg = bundle.encoder_config
    meta = {"arch": cfg.arch, "widths": list(cfg.resolved_widths()),
            "in_channels": cfg.in_channels, "in_dim": cfg.in_dim,
            "head_hidden": bundle.head.hidden_dim,
            "embed_dim": bundle.head.out_dim, "frozen": bundle.frozen}
    recs[f"{prefix}/__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8).copy()
    return recs


def bundle_from_records(records: dict[str, np.ndarray],
                        prefix: str) -> ModelBundle:
    key = f"{prefix}/__meta__"
    if key not in records:
        raise KeyError(f"checkpoint has no bundle {prefix!r}")
    meta = json.loads(bytes(records[key]))
    cfg = EncoderConfig(arch=meta["arch"], widths=tuple(meta["widths"]),
                        in_channels=meta["in_channels"], in_dim=meta["in_dim"])
    bundle = build_bundle(cfg, meta["head_hidden"], meta["embed_dim"], seed=0)
    state = {}
    for name, _ in bundle.named_parameters():
        full = f"{prefix}/{name}"
        if full not in records:
            raise KeyError(f"checkpoint missing parameter {full!r}")
        state[name] = records[full]
    bundle.load_state(state)
    if meta["frozen"]:
        freeze(bundle)
    return bundle


# -- pretraining driver ---------------------------------------------------


def _train_state_records(pair: MomentumEncoderPair, queue: MemoryQueue,
                         optimizer: SGD, epoch: int) -> dict[str, np.ndarray]:
    recs = bundle_records(pair.query, "query")
    recs.update(bundle_records(pair.key, "key"))
    recs.update(queue.state())
    for i, v in enumerate(optimizer.state_arrays()):
        recs[f"velocity/{i:04d}"] = v
    recs["epoch"] = np.array(epoch, dtype=np.int64)
    return recs


def _restore_train_state(records, pair, queue, optimizer) -> int:
    pair.query.load_state({n[len("query/"):]: a for n, a in records.items()
                           if n.startswith("query/") and not n.endswith("__meta__")})
    pair.key.load_state({n[len("key/"):]: a for n, a in records.items()
                         if n.startswith("key/") and not n.endswith("__meta__")})
    queue.load_state(records)
    vel = [records[k] for k in sorted(records) if k.startswith("velocity/")]
    optimizer.load_state_arrays(vel)
    return int(records["epoch"].item())


def run_contrastive_pretraining(cfg: dict, split: DatasetSplit, out_dir,
                                resume: bool = False) -> dict:
    """Train the teacher bundle with InfoNCE; returns paths and summary.

    Writes per-epoch metrics, periodic checkpoints
    (``teacher_epoch{E}.ckpt``) and ``teacher_final.ckpt``. The
    checkpoint digest is the teacher digest, so distillation can verify
    it against any config that shares the teacher sections.
    """
    t = cfg["teacher"]
    run_dir = make_run_dir(out_dir)
    digest = teacher_digest(cfg)
    run_id = f"{digest:016x}-teacher"
    seed = t["seed"]
    policy = AugmentationPolicy.from_config(cfg["data"])

    bundle = build_bundle(encoder_config_from(t, cfg["data"]), t["head_hidden"],
                          t["embed_dim"], seed=seed)
    pair = MomentumEncoderPair(bundle, cfg["contrastive"]["ema_momentum"])
    queue = MemoryQueue(cfg["contrastive"]["queue_size"], t["embed_dim"],
                        dtype=bundle.parameters()[0].dtype)
    optimizer = SGD(pair.query.parameters(), lr=t["lr"], momentum=t["momentum"],
                    weight_decay=t["weight_decay"])

    save_config(cfg, run_dir / "config.json")
    write_run_tags(run_dir, kind="pretrain-teacher", run_id=run_id,
                   method="teacher", head_hidden=t["head_hidden"],
                   config_digest=f"{config_digest(cfg):016x}",
                   teacher_digest=f"{digest:016x}", seed=seed)
    metrics = MetricsWriter(run_dir / "metrics.jsonl", run_id)

    start_epoch = 0
    ckpt_dir = run_dir / "checkpoints"
    if resume:
        have = sorted(ckpt_dir.glob("teacher_epoch*.ckpt"))
        if have:
            records, _ = load_checkpoint(have[-1], expect_digest=digest)
            start_epoch = _restore_train_state(records, pair, queue, optimizer)

    if start_epoch == 0:
        # Cold queue: one untrained key batch so step one has negatives.
        boot = batch_indices(len(split), t["batch_size"],
                             derive_seed(seed, "bootstrap"), shuffle=True)[0]
        vp = two_views(split, boot, policy, derive_seed(seed, "views", -1))
        queue.enqueue(pair.embed_key(vp.view_k))

    for epoch in range(start_epoch, t["epochs"]):
        optimizer.lr = lr_at_epoch(t["schedule"], t["lr"], epoch, t["epochs"])
        losses = []
        for batch in batch_indices(len(split), t["batch_size"],
                                   derive_seed(seed, "order", epoch)):
            vp = two_views(split, batch, policy,
                           derive_seed(seed, "views", epoch))
            losses.append(contrastive_step(pair, queue, vp, optimizer,
                                           cfg["contrastive"]["temperature"])
                          ["loss_co"])
        metrics.append("pretrain-teacher", epoch,
                       {"loss_co": float(np.mean(losses)), "lr": optimizer.lr,
                        "queue_filled": queue.filled})
        done = epoch + 1
        if done % t["checkpoint_every"] == 0 or done == t["epochs"]:
            save_checkpoint(ckpt_dir / f"teacher_epoch{done:04d}.ckpt",
                            _train_state_records(pair, queue, optimizer, done),
                            digest)

    final = ckpt_dir / "teacher_final.ckpt"
    recs = bundle_records(pair.query, "query")
    recs["epoch"] = np.array(t["epochs"], dtype=np.int64)
    save_checkpoint(final, recs, digest)
    return {"run_dir": str(run_dir), "final_checkpoint": str(final),
            "checksum": checksum(pair.query)}
