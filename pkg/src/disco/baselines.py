"""Reference distillation losses the embedding-MSE approach is compared to.

All teacher quantities enter as constants; only student tensors carry
gradient. Teacher-side structures (attention maps, distance matrices,
softened distributions) are computed through the same ops as the student
side, so each loss is exactly zero at its identity configuration rather
than zero up to cross-implementation rounding.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = ["match_attention_pairs", "attention_map", "at_loss", "huber",
           "rkd_distance_loss", "rkd_angle_loss", "rkd_loss", "kd_loss",
           "seed_style_loss"]


def _as_constant(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return T.constant(x.data, dtype=dtype)
    return T.constant(np.asarray(x), dtype=dtype)


# -- attention transfer ----------------------------------------------------


def match_attention_pairs(student_acts: list, teacher_acts: list,
                          count: int = 2) -> list[tuple[int, int]]:
    """Index pairs into the two activation lists, matched by spatial size.

    Attention maps are channel reductions, so only the spatial grids must
    agree; with one encoder deeper than the other, "last two stages"
    means the ``count`` smallest grids both encoders produce.
    """
    def by_size(acts):
        table = {}
        for i, a in enumerate(acts):
            if a.ndim == 4:
                table[(a.shape[2], a.shape[3])] = i  # deepest stage wins
        return table

    s_table, t_table = by_size(student_acts), by_size(teacher_acts)
    shared = sorted(set(s_table) & set(t_table))  # ascending spatial size
    if len(shared) < count:
        raise ShapeError(f"attention transfer: only {len(shared)} matching "
                         f"spatial sizes, need {count}")
    return [(s_table[size], t_table[size]) for size in shared[:count]]


def attention_map(act: Tensor) -> Tensor:
    """Channel-wise energy, flattened and unit-normalized per sample."""
    if act.ndim != 4:
        raise ShapeError(f"attention_map expects NCHW, got {act.shape}")
    energy = T.tsum(T.mul(act, act), axis=1)  # (B, H, W)
    flat = T.reshape(energy, (act.shape[0], -1))
    return T.l2_normalize(flat, axis=1, zero_warns=False)


def _masked_sqrt(sq: Tensor) -> Tensor:
    """sqrt that sends exact zeros to exact zero with zero gradient.

    Entries at zero get an epsilon under the root and a zero multiplier
    outside it, which keeps both the value and the gradient clean at the
    identity configuration; positive entries are untouched.
    """
    zero = (sq.data == 0).astype(sq.dtype)
    eps = T.constant(zero * np.asarray(1e-12, dtype=sq.dtype))
    keep = T.constant(1.0 - zero)
    return T.mul(T.sqrt(T.add(sq, eps)), keep)


def at_loss(student_acts: list, teacher_acts: list,
            pairs: list[tuple[int, int]]) -> Tensor:
    """Sum over stage pairs of the batch-mean L2 distance between
    normalized student and teacher attention maps."""
    if not pairs:
        raise ValueError("at_loss: empty pair list")
    total = None
    for si, ti in pairs:
        s_act = student_acts[si]
        t_act = teacher_acts[ti]
        if tuple(s_act.shape[2:]) != tuple(t_act.shape[2:]):
            raise ShapeError(f"at_loss: spatial mismatch {s_act.shape} vs "
                             f"{t_act.shape}")
        s_map = attention_map(s_act)
        t_map = attention_map(_as_constant(t_act, s_act.dtype))
        sq = T.tsum(T.squared_difference(s_map, t_map), axis=1)
        term = T.mean(_masked_sqrt(sq))
        total = term if total is None else T.add(total, term)
    return total


# -- relational distillation ----------------------------------------------


def huber(x: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber: quadratic inside |x| <= delta, linear outside."""
    a = T.absolute(x)
    inside = (a.data <= delta).astype(x.dtype)
    quad = T.scale(T.mul(x, x), 0.5)
    lin = T.scale(a, delta) + (-0.5 * delta * delta)
    return T.add(T.mul(quad, T.constant(inside)),
                 T.mul(lin, T.constant(1.0 - inside)))


def _pairwise_distances(x: Tensor) -> Tensor:
    b, d = x.shape
    xi = T.reshape(x, (b, 1, d))
    xj = T.reshape(x, (1, b, d))
    sq = T.tsum(T.squared_difference(xi, xj), axis=2)  # (B, B), zero diagonal
    return _masked_sqrt(sq)


def _mean_normalized_distances(x: Tensor, mask: np.ndarray,
                               count: float) -> Tensor:
    d = _pairwise_distances(x)
    mean = T.scale(T.tsum(T.mul(d, T.constant(mask))), 1.0 / count)
    return T.div(d, T.reshape(mean, (1, 1)))


def rkd_distance_loss(student: Tensor, teacher, delta: float = 1.0) -> Tensor:
    """Huber gap between mean-normalized pairwise distance structures,
    averaged over the strict upper triangle."""
    b = student.shape[0]
    if b < 2:
        raise ValueError("rkd_distance_loss needs a batch of >= 2")
    mask = np.triu(np.ones((b, b)), k=1).astype(student.dtype)
    count = float(mask.sum())
    ds = _mean_normalized_distances(student, mask, count)
    dt = _mean_normalized_distances(_as_constant(teacher, student.dtype),
                                    mask, count)
    gap = huber(T.sub(ds, dt.detach()), delta)
    return T.scale(T.tsum(T.mul(gap, T.constant(mask))), 1.0 / count)


def _unit_differences(x: Tensor) -> Tensor:
    b, d = x.shape
    xi = T.reshape(x, (b, 1, d))
    xj = T.reshape(x, (1, b, d))
    diff = T.sub(xi, xj)  # diff[i, j] = x_i - x_j; diagonal rows are zero
    return T.l2_normalize(diff, axis=2, zero_warns=False)


def _angle_tensor(x: Tensor) -> Tensor:
    # angles[j, i, k] = <e_ij, e_kj>: batch matmul over the shared middle point
    e = _unit_differences(x)
    ej = T.transpose(e, (1, 0, 2))
    return T.matmul(ej, T.transpose(ej, (0, 2, 1)))


def rkd_angle_loss(student: Tensor, teacher, delta: float = 1.0) -> Tensor:
    """Huber gap between triplet angle structures (cosines at the middle
    point), averaged over triplets of distinct indices."""
    b = student.shape[0]
    if b < 3:
        raise ValueError("rkd_angle_loss needs a batch of >= 3")
    angles_s = _angle_tensor(student)
    angles_t = _angle_tensor(_as_constant(teacher, student.dtype))

    idx = np.arange(b)
    distinct = ((idx[:, None, None] != idx[None, :, None]) &
                (idx[:, None, None] != idx[None, None, :]) &
                (idx[None, :, None] != idx[None, None, :]))
    mask = distinct.astype(student.dtype)
    count = float(mask.sum())
    gap = huber(T.sub(angles_s, angles_t.detach()), delta)
    return T.scale(T.tsum(T.mul(gap, T.constant(mask))), 1.0 / count)


def rkd_loss(student: Tensor, teacher, delta: float = 1.0,
             w_dist: float = 1.0, w_angle: float = 2.0) -> Tensor:
    """Relational distillation; relations are computed inside each
    embedding space, so student and teacher widths may differ."""
    return T.add(T.scale(rkd_distance_loss(student, teacher, delta), w_dist),
                 T.scale(rkd_angle_loss(student, teacher, delta), w_angle))


# -- logit and queue distillation ------------------------------------------


def kd_loss(student_logits: Tensor, teacher_logits, temperature: float = 4.0
            ) -> Tensor:
    """Temperature-softened KL(teacher || student), scaled by T^2.

    Lives in the supervised probe phase: without labels there are no
    class logits to soften, so this is the one distiller that cannot act
    during pretraining.
    """
    if temperature <= 0:
        raise ValueError("kd temperature must be > 0")
    t_const = _as_constant(teacher_logits, student_logits.dtype)
    if t_const.shape != tuple(student_logits.shape):
        raise ShapeError(f"kd_loss: logits {student_logits.shape} vs "
                         f"{t_const.shape}")
    lsm_t = T.log_softmax(T.scale(t_const, 1.0 / temperature), axis=1)
    p_t = T.constant(np.exp(lsm_t.data))
    lsm_s = T.log_softmax(T.scale(student_logits, 1.0 / temperature), axis=1)
    kl_rows = T.tsum(T.mul(p_t, T.sub(lsm_t.detach(), lsm_s)), axis=1)
    return T.scale(T.mean(kl_rows), temperature * temperature)


def seed_style_loss(student_embed: Tensor, teacher_embed, teacher_queue,
                    tau_s: float = 0.2, tau_t: float = 0.2) -> Tensor:
    """Cross entropy between teacher and student similarity distributions
    over [own teacher key; teacher queue].

    The teacher's own key sits at index 0, so the target distribution
    peaks there (self-similarity is 1) while spreading mass over the
    queue by teacher-space similarity. Equal embeddings at equal
    temperatures give exactly the teacher distribution's entropy, the
    Gibbs lower bound.
    """
    if tau_s <= 0 or tau_t <= 0:
        raise ValueError("temperatures must be > 0")
    te = _as_constant(teacher_embed, student_embed.dtype)
    tq = np.asarray(teacher_queue)
    if tq.ndim != 2 or tq.shape[0] < 1:
        raise ValueError("seed_style_loss: empty teacher queue")
    if te.shape != tuple(student_embed.shape) or tq.shape[1] != te.shape[1]:
        raise ShapeError(f"seed_style_loss: student {student_embed.shape}, "
                         f"teacher {te.shape}, queue {tq.shape}")
    tq_t = T.constant(tq.T, dtype=student_embed.dtype)

    def logits(embed: Tensor, tau: float) -> Tensor:
        pos = T.tsum(T.mul(embed, te), axis=1, keepdims=True)
        neg = T.matmul(embed, tq_t)
        return T.scale(T.concatenate([pos, neg], axis=1), 1.0 / tau)

    lsm_t = T.log_softmax(logits(te, tau_t), axis=1)
    p_t = T.constant(np.exp(lsm_t.data))
    lsm_s = T.log_softmax(logits(student_embed, tau_s), axis=1)
    picked = T.tsum(T.mul(p_t, lsm_s), axis=1)
    return T.scale(T.mean(picked), -1.0)
