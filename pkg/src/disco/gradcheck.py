"""Finite-difference verification of analytic gradients.

Central differences around every parameter element, compared against one
``backward()`` pass with the relative error

    |g_a - g_n| / (|g_a| + |g_n| + 1e-12)

Checks must run in 64-bit mode; float32 round-off drowns the signal at
useful step sizes. ReLU networks additionally need their pre-activations
pushed away from zero first (``nudge_relu_biases``), because a kink
inside the central-difference interval makes the numeric slope wrong by
design, not by bug.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericError, get_precision

__all__ = ["GradCheckReport", "finite_difference_check", "nudge_relu_biases"]


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def __str__(self) -> str:
        verdict = "OK" if self.passed else "FAIL"
        worst = max(self.per_param, key=self.per_param.get) if self.per_param else "-"
        return (f"gradcheck {verdict}: max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tolerance:.1e}, worst at {worst})")


def finite_difference_check(named_params, loss_fn, step: float = 1e-5,
                            tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic and numeric gradients for every parameter element.

    ``named_params`` is an iterable of (name, Tensor); ``loss_fn`` is a
    zero-argument callable that rebuilds the scalar loss from the current
    parameter values. Parameters are restored exactly after probing.
    """
    if get_precision() != "f64":
        raise RuntimeError("finite_difference_check requires f64 precision mode")
    named = list(named_params)
    if not named:
        raise ValueError("finite_difference_check: no parameters")

    for _, p in named:
        p.grad = None
    loss = loss_fn()
    if loss.dtype != np.float64:
        raise ValueError("finite_difference_check: loss is not float64; build the "
                         "network inside f64 mode")
    loss.backward()

    per_param: dict[str, float] = {}
    for name, p in named:
        if p.grad is None:
            analytic = np.zeros_like(p.data)
        else:
            analytic = p.grad
        if not np.all(np.isfinite(analytic)):
            raise NumericError(f"non-finite analytic gradient for {name}")
        numeric = np.empty_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn().item()
            flat[i] = orig - step
            lo = loss_fn().item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * step)
        if not np.all(np.isfinite(numeric)):
            raise NumericError(f"non-finite numeric gradient for {name}")
        rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
        per_param[name] = float(rel.max()) if rel.size else 0.0

    worst = max(per_param.values())
    return GradCheckReport(max_rel_err=worst, per_param=per_param,
                           tolerance=tolerance)


def nudge_relu_biases(preact_probe, margin: float = 1e-3,
                      max_rounds: int = 25) -> int:
    """Shift biases until no ReLU pre-activation sits within ``margin`` of zero.

    ``preact_probe`` is a zero-argument callable returning a list of
    (bias_tensor, preactivation_ndarray) pairs for the current
    parameters. Each round bumps the offending biases upward by
    3 * margin, which strictly escapes the dead zone in finitely many
    rounds. Returns the number of rounds used.
    """
    for round_idx in range(max_rounds):
        moved = False
        for bias, pre in preact_probe():
            # Channel axis is 1 for NCHW pre-activations, last for NC.
            ch_axis = 1 if pre.ndim == 4 else pre.ndim - 1
            if pre.shape[ch_axis] != bias.shape[0]:
                raise ValueError("nudge_relu_biases: bias does not align with the "
                                 f"channel axis of shape {pre.shape}")
            near = np.abs(pre) < margin
            if not np.any(near):
                continue
            axes = tuple(i for i in range(pre.ndim) if i != ch_axis)
            hit = near.any(axis=axes)
            bias.data = bias.data + np.where(hit, 3.0 * margin, 0.0).astype(bias.dtype)
            moved = True
        if not moved:
            return round_idx
    raise RuntimeError(f"nudge_relu_biases: pre-activations still near zero after "
                       f"{max_rounds} rounds")
