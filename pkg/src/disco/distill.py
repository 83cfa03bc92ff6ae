"""Student training against a frozen teacher: embedding-MSE consistency
plus the contrastive term, with the projection-head width study.

The student is a full momentum-contrast learner (query/key pair and
queue); distillation adds an MSE penalty tying the student's raw head
output to the frozen teacher's on the same augmented view. The head's
hidden width is the studied bottleneck: a narrow hidden layer caps how
well the student can meet the teacher in embedding space, and widening
it back toward the teacher's width recovers the headroom.

Method dispatch covers the comparison objectives under one protocol:
``contrastive`` (no teacher), ``disco``, ``at``, ``rkd``, their
``*+disco`` combinations (auxiliary losses added to the contrastive
term), and ``seed`` (queue-distribution matching, which replaces the
contrastive term and keeps a parallel queue of teacher keys).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .baselines import at_loss, match_attention_pairs, rkd_loss, seed_style_loss
from .checkpoint import load_checkpoint, save_checkpoint
from .config import config_digest, save_config, teacher_digest
from .contrastive import (MemoryQueue, MomentumEncoderPair, bundle_from_records,
                          bundle_records, contrastive_step, encoder_config_from,
                          info_nce_loss)
from .data import AugmentationPolicy, DatasetSplit, batch_indices, two_views
from .models import (ModelBundle, build_bundle, checksum, forward_embed, freeze)
from .optim import SGD
from .runs import MetricsWriter, lr_at_epoch, make_run_dir, write_run_tags
from .tensor import Tensor, derive_seed

__all__ = ["DiscoConfig", "FrozenTeacher", "embedding_distill_loss",
           "disco_total_loss", "disco_train_step", "distill_step",
           "load_teacher", "run_distillation", "run_hidden_sweep"]


@dataclass(frozen=True)
class DiscoConfig:
    lambda_dis: float = 1.0
    use_co: bool = True
    use_dis: bool = True
    student_hidden_dim: int | None = 512
    normalize_before_mse: bool = True
    distill_views: str = "query_only"
    epochs: int = 30
    batch_size: int = 128
    seed: int = 1

    def __post_init__(self):
        if self.lambda_dis < 0:
            raise ValueError("lambda_dis must be >= 0")
        if not (self.use_co or self.use_dis):
            raise ValueError("at least one of use_co/use_dis must be true")
        if self.distill_views not in ("query_only", "both_views"):
            raise ValueError("distill_views must be query_only or both_views")

    @classmethod
    def from_experiment(cls, cfg: dict) -> "DiscoConfig":
        d = cfg["disco"]
        return cls(lambda_dis=d["lambda_dis"], use_co=d["use_co"],
                   use_dis=d["use_dis"],
                   student_hidden_dim=cfg["student"]["head_hidden"],
                   normalize_before_mse=d["normalize_before_mse"],
                   distill_views=d["distill_views"], epochs=d["epochs"],
                   batch_size=d["batch_size"], seed=cfg["seed"])


@dataclass
class FrozenTeacher:
    bundle: ModelBundle
    checksum: str

    @classmethod
    def wrap(cls, bundle: ModelBundle) -> "FrozenTeacher":
        freeze(bundle)
        return cls(bundle=bundle, checksum=checksum(bundle))

    def embed(self, batch: np.ndarray) -> np.ndarray:
        """Raw head output; no gradient by construction (frozen params,
        constant input, and an explicit no-grad scope)."""
        with T.no_grad():
            _, emb = forward_embed(self.bundle, Tensor(batch))
        return emb.data

    def embed_with_acts(self, batch: np.ndarray):
        with T.no_grad():
            rep, emb, acts = forward_embed(self.bundle, Tensor(batch),
                                           want_acts=True)
        return emb.data, [a.data for a in acts]


def load_teacher(ckpt_path, expect_digest: int | None = None) -> FrozenTeacher:
    records, _ = load_checkpoint(ckpt_path, expect_digest=expect_digest)
    return FrozenTeacher.wrap(bundle_from_records(records, "query"))


def embedding_distill_loss(student_embed: Tensor, teacher_embed,
                           normalize: bool = True) -> Tensor:
    """Mean over batch and dimensions of the squared embedding gap.

    With ``normalize`` both embeddings are projected to the unit sphere
    first, where the contrastive loss operates; the loss is then exactly
    invariant to positive rescaling of either side.
    """
    te = teacher_embed.data if isinstance(teacher_embed, Tensor) \
        else np.asarray(teacher_embed)
    if tuple(student_embed.shape) != te.shape:
        raise ValueError(f"embedding_distill_loss: student {student_embed.shape}"
                         f" vs teacher {te.shape} (shared space required)")
    s = student_embed
    tc = T.constant(te, dtype=student_embed.dtype)
    if normalize:
        s = T.l2_normalize(s, axis=1)
        tc = T.l2_normalize(tc, axis=1)
    return T.mean(T.squared_difference(s, tc))


def disco_total_loss(l_co: Tensor | None, l_dis: Tensor | None,
                     config: DiscoConfig) -> Tensor:
    if not (config.use_co or config.use_dis):
        raise ValueError("both loss terms disabled")
    total = None
    if config.use_co:
        if l_co is None:
            raise ValueError("use_co set but l_co missing")
        total = l_co
    if config.use_dis:
        if l_dis is None:
            raise ValueError("use_dis set but l_dis missing")
        term = T.scale(l_dis, config.lambda_dis)
        total = term if total is None else T.add(total, term)
    return total


def disco_train_step(pair: MomentumEncoderPair, teacher: FrozenTeacher | None,
                     queue: MemoryQueue, views, config: DiscoConfig,
                     optimizer: SGD, temperature: float) -> dict:
    """One distillation step; order mirrors ``contrastive_step`` exactly
    (query embed, key embed, loss, update, EMA, enqueue), with the teacher
    forward inserted before the loss.

    With ``use_dis`` off the step is bit-identical to the contrastive
    baseline; with ``use_co`` off the contrastive term is still computed
    for the metrics but carries no gradient into the total.
    """
    if config.use_dis:
        if teacher is None:
            raise ValueError("use_dis requires a teacher")
        if not teacher.bundle.frozen:
            raise ValueError("teacher must be frozen for distillation")
        if teacher.bundle.embed_dim != pair.query.embed_dim:
            raise ValueError(f"student embed dim {pair.query.embed_dim} != "
                             f"teacher {teacher.bundle.embed_dim}")

    rep, emb_raw = forward_embed(pair.query, Tensor(views.view_q))
    q = T.l2_normalize(emb_raw)
    k = pair.embed_key(views.view_k)

    l_co = info_nce_loss(q, k, queue, temperature)
    l_dis = None
    if config.use_dis:
        t_emb = teacher.embed(views.view_q)
        l_dis = embedding_distill_loss(emb_raw, t_emb,
                                       config.normalize_before_mse)
        if config.distill_views == "both_views":
            _, emb_raw_k = forward_embed(pair.query, Tensor(views.view_k))
            l_dis_k = embedding_distill_loss(emb_raw_k,
                                             teacher.embed(views.view_k),
                                             config.normalize_before_mse)
            l_dis = T.scale(T.add(l_dis, l_dis_k), 0.5)

    total = disco_total_loss(l_co if config.use_co else None, l_dis, config) \
        if config.use_dis else l_co
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    pair.momentum_update()
    queue.enqueue(k)
    return {"l_co": l_co.item(),
            "l_dis": 0.0 if l_dis is None else l_dis.item(),
            "total": total.item()}


def distill_step(method: str, pair: MomentumEncoderPair,
                 teacher: FrozenTeacher | None, queue: MemoryQueue,
                 teacher_queue: MemoryQueue | None, views,
                 config: DiscoConfig, optimizer: SGD, temperature: float,
                 weights: dict) -> dict:
    """Method dispatch under one step protocol.

    ``contrastive`` and ``disco`` variants delegate to
    ``disco_train_step``; ``at``/``rkd`` add their auxiliary term to the
    contrastive loss; ``seed`` trains on the teacher-queue distribution
    alone and maintains the teacher-key queue.
    """
    known = ("contrastive", "disco", "seed", "at", "at+disco", "rkd",
             "rkd+disco")
    if method not in known:
        raise ValueError(f"unknown method {method!r}")
    if method == "contrastive":
        cfg = DiscoConfig(use_co=True, use_dis=False,
                          student_hidden_dim=config.student_hidden_dim,
                          epochs=config.epochs, batch_size=config.batch_size,
                          seed=config.seed)
        return disco_train_step(pair, None, queue, views, cfg, optimizer,
                                temperature)
    if method == "disco":
        return disco_train_step(pair, teacher, queue, views, config,
                                optimizer, temperature)
    if teacher is None or not teacher.bundle.frozen:
        raise ValueError(f"method {method!r} requires a frozen teacher")

    if method == "seed":
        rep, emb_raw = forward_embed(pair.query, Tensor(views.view_q))
        s = T.l2_normalize(emb_raw)
        t_emb = teacher.embed(views.view_q)
        t_key = t_emb / np.linalg.norm(t_emb, axis=1, keepdims=True)
        loss = seed_style_loss(s, t_key, teacher_queue.negatives(),
                               tau_s=weights["seed_tau_s"],
                               tau_t=weights["seed_tau_t"])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        teacher_queue.enqueue(t_key)
        return {"l_co": 0.0, "l_seed": loss.item(), "total": loss.item()}

    # at / rkd, optionally combined with the embedding-MSE term
    want_disco = method.endswith("+disco")
    base = method.split("+")[0]
    rep, emb_raw, s_acts = forward_embed(pair.query, Tensor(views.view_q),
                                         want_acts=True)
    q = T.l2_normalize(emb_raw)
    k = pair.embed_key(views.view_k)
    l_co = info_nce_loss(q, k, queue, temperature)
    t_emb, t_acts = teacher.embed_with_acts(views.view_q)

    metrics = {"l_co": l_co.item()}
    total = l_co
    if base == "at":
        pairs_map = match_attention_pairs(s_acts, [T.constant(a) for a in t_acts])
        aux = at_loss(s_acts, [T.constant(a) for a in t_acts], pairs_map)
        total = T.add(total, T.scale(aux, weights["at_weight"]))
        metrics["l_at"] = aux.item()
    elif base == "rkd":
        aux = rkd_loss(emb_raw, t_emb, delta=weights["huber_delta"],
                       w_dist=weights["rkd_dist_weight"],
                       w_angle=weights["rkd_angle_weight"])
        total = T.add(total, aux)
        metrics["l_rkd"] = aux.item()
    if want_disco:
        l_dis = embedding_distill_loss(emb_raw, t_emb,
                                       config.normalize_before_mse)
        total = T.add(total, T.scale(l_dis, config.lambda_dis))
        metrics["l_dis"] = l_dis.item()

    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    pair.momentum_update()
    queue.enqueue(k)
    metrics["total"] = total.item()
    return metrics


# -- run driver -------------------------------------------------------------


def _student_bundle(cfg: dict, seed: int) -> ModelBundle:
    st = cfg["student"]
    enc_cfg = encoder_config_from(st, cfg["data"])
    return build_bundle(enc_cfg, st["head_hidden"], st["embed_dim"], seed=seed)


def run_distillation(cfg: dict, split: DatasetSplit, teacher_ckpt,
                     out_dir, resume: bool = False) -> dict:
    """Train one student (one method, one head width, one seed).

    Verifies the teacher checkpoint against the config's teacher digest,
    then runs ``disco.epochs`` over the data with per-epoch metrics
    {l_co, l_dis, total, lr} and periodic full-state checkpoints
    (including an epoch-0 snapshot for trajectory analysis).
    """
    d = cfg["disco"]
    method = d["method"]
    seed = cfg["seed"]
    run_dir = make_run_dir(out_dir)
    digest = config_digest(cfg)
    t_digest = teacher_digest(cfg)

    teacher = None
    if method != "contrastive":
        teacher = load_teacher(teacher_ckpt, expect_digest=t_digest)

    dcfg = DiscoConfig.from_experiment(cfg)
    policy = AugmentationPolicy.from_config(cfg["data"])
    bundle = _student_bundle(cfg, seed)
    pair = MomentumEncoderPair(bundle, cfg["contrastive"]["ema_momentum"])
    queue = MemoryQueue(cfg["contrastive"]["queue_size"],
                        cfg["student"]["embed_dim"],
                        dtype=bundle.parameters()[0].dtype)
    teacher_queue = None
    if method == "seed":
        teacher_queue = MemoryQueue(cfg["contrastive"]["queue_size"],
                                    teacher.bundle.embed_dim,
                                    dtype=bundle.parameters()[0].dtype)
    optimizer = SGD(pair.query.parameters(), lr=d["lr"], momentum=d["momentum"],
                    weight_decay=d["weight_decay"])
    weights = dict(cfg["baselines"])

    width = cfg["student"]["head_hidden"]
    run_id = f"{digest:016x}-distill"
    save_config(cfg, run_dir / "config.json")
    write_run_tags(run_dir, kind="distill", run_id=run_id, method=method,
                   head_hidden=width, seed=seed,
                   config_digest=f"{digest:016x}",
                   teacher_digest=f"{t_digest:016x}",
                   use_co=d["use_co"], use_dis=d["use_dis"])
    metrics = MetricsWriter(run_dir / "metrics.jsonl", run_id)

    ckpt_dir = run_dir / "checkpoints"
    start_epoch = 0
    restored = False
    if resume:
        have = sorted(ckpt_dir.glob("student_epoch*.ckpt"))
        if have:
            records, _ = load_checkpoint(have[-1], expect_digest=digest)
            start_epoch = _restore_student(records, pair, queue, teacher_queue,
                                           optimizer)
            restored = True

    def save_state(epoch: int) -> None:
        recs = bundle_records(pair.query, "query")
        recs.update(bundle_records(pair.key, "key"))
        recs.update(queue.state())
        if teacher_queue is not None:
            recs.update({f"teacher_{k}": v
                         for k, v in teacher_queue.state().items()})
        for i, v in enumerate(optimizer.state_arrays()):
            recs[f"velocity/{i:04d}"] = v
        recs["epoch"] = np.array(epoch, dtype=np.int64)
        save_checkpoint(ckpt_dir / f"student_epoch{epoch:04d}.ckpt", recs,
                        digest)

    if not restored:
        boot = batch_indices(len(split), d["batch_size"],
                             derive_seed(seed, "bootstrap"), shuffle=True)[0]
        vp = two_views(split, boot, policy, derive_seed(seed, "views", -1))
        queue.enqueue(pair.embed_key(vp.view_k))
        if teacher_queue is not None:
            t_emb = teacher.embed(vp.view_k)
            teacher_queue.enqueue(
                t_emb / np.linalg.norm(t_emb, axis=1, keepdims=True))
        save_state(0)

    for epoch in range(start_epoch, dcfg.epochs):
        optimizer.lr = lr_at_epoch(d["schedule"], d["lr"], epoch, dcfg.epochs)
        sums: dict[str, float] = {}
        nb = 0
        for batch in batch_indices(len(split), dcfg.batch_size,
                                   derive_seed(seed, "order", epoch)):
            vp = two_views(split, batch, policy,
                           derive_seed(seed, "views", epoch))
            step = distill_step(method, pair, teacher, queue, teacher_queue,
                                vp, dcfg, optimizer,
                                cfg["contrastive"]["temperature"], weights)
            nb += 1
            for key, val in step.items():
                sums[key] = sums.get(key, 0.0) + val
        row = {key: val / nb for key, val in sums.items()}
        row.setdefault("l_dis", 0.0)
        row["lr"] = optimizer.lr
        metrics.append("distill", epoch, row)
        done = epoch + 1
        if done % d["checkpoint_every"] == 0 or done == dcfg.epochs:
            save_state(done)

    final = ckpt_dir / "student_final.ckpt"
    recs = bundle_records(pair.query, "query")
    recs["epoch"] = np.array(dcfg.epochs, dtype=np.int64)
    save_checkpoint(final, recs, digest)
    if teacher is not None and checksum(teacher.bundle) != teacher.checksum:
        raise RuntimeError("teacher parameters changed during distillation")
    return {"run_dir": str(run_dir), "final_checkpoint": str(final),
            "checksum": checksum(pair.query), "method": method,
            "head_hidden": width, "seed": seed}


def _restore_student(records, pair, queue, teacher_queue, optimizer) -> int:
    pair.query.load_state({n[len("query/"):]: a for n, a in records.items()
                           if n.startswith("query/") and not n.endswith("__meta__")})
    pair.key.load_state({n[len("key/"):]: a for n, a in records.items()
                         if n.startswith("key/") and not n.endswith("__meta__")})
    queue.load_state({k: v for k, v in records.items()
                      if k.startswith("queue/")})
    if teacher_queue is not None:
        teacher_queue.load_state({k[len("teacher_"):]: v
                                  for k, v in records.items()
                                  if k.startswith("teacher_queue/")})
    vel = [records[k] for k in sorted(records) if k.startswith("velocity/")]
    optimizer.load_state_arrays(vel)
    return int(records["epoch"].item())


def run_hidden_sweep(cfg: dict, split: DatasetSplit, teacher_ckpt, out_root,
                     widths, resume: bool = False) -> list[dict]:
    """One distillation run per head width; width lands in each run's
    config (and so its digest) and run directory name."""
    import copy
    from pathlib import Path

    results = []
    for width in widths:
        sub = copy.deepcopy(cfg)
        sub["student"]["head_hidden"] = width
        tag = "absent" if width is None else str(width)
        results.append(run_distillation(sub, split, teacher_ckpt,
                                        Path(out_root) / f"width_{tag}",
                                        resume=resume))
    return results
