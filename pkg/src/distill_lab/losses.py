"""Distillation losses with closed-form logit gradients.

Every function takes either a single logit vector (with an integer label) or
an ``N x K`` batch (with an ``N`` label array) and returns per-sample values.
Gradients are per-sample: row ``n`` is the derivative of sample ``n``'s loss
with respect to its own logits. Averaging over a batch is the caller's job.

Conventions:
  * ``L_ce  = -log p_s(label)`` at temperature 1.
  * ``L_kd  = -tau^2 * sum_k p_t(k; tau) log p_s(k; tau)`` (cross-entropy form),
    gradient ``tau * (p_s(tau) - p_t(tau))``.
  * ``L_wsl = w * L_kd`` with ``w = 1 - exp(-L_ce^s / L_ce^t)``; ``w`` is held
    constant when differentiating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from distill_lab.numkit import InvalidShapeError, log_softmax_t, softmax_t

CE_CLAMP = 1e-8
# Largest float64 below 1; weights are kept in [0, 1) even when exp underflows.
_BELOW_ONE = np.nextafter(1.0, 0.0)

LOSS_MODES = ("ce", "kd", "wsl", "masked-kd", "sigmoid-wsl")


class InvalidLabelError(ValueError):
    pass


def _as_batch(logits):
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 1:
        return z[None, :], True
    if z.ndim != 2 or z.shape[1] == 0:
        raise InvalidShapeError(f"logits must be a vector or N x K batch, got {z.shape}")
    return z, False


def _labels(label, n: int, k: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(label))
    if y.shape != (n,) or not np.issubdtype(y.dtype, np.integer):
        raise InvalidLabelError(f"expected {n} integer labels, got {np.asarray(label)!r}")
    if y.min() < 0 or y.max() >= k:
        raise InvalidLabelError(f"labels must lie in [0, {k})")
    return y.astype(np.int64)


def _pair(student_logits, teacher_logits):
    zs, single = _as_batch(student_logits)
    zt, single_t = _as_batch(teacher_logits)
    if zs.shape != zt.shape or single != single_t:
        raise InvalidShapeError(f"student {zs.shape} and teacher {zt.shape} logits differ in shape")
    return zs, zt, single


def _out(single: bool, *arrays):
    if single:
        return tuple(a[0] for a in arrays)
    return arrays


def _label_rows(n: int) -> np.ndarray:
    return np.arange(n)


def ce_loss(student_logits, label):
    """Cross-entropy against the one-hot label; returns ``(loss, grad)``."""
    z, single = _as_batch(student_logits)
    y = _labels(label, z.shape[0], z.shape[1])
    logp = log_softmax_t(z, 1.0)
    rows = _label_rows(z.shape[0])
    loss = -logp[rows, y]
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return _out(single, loss, grad)


def soft_ce_loss(student_logits, targets):
    """Cross-entropy against arbitrary soft targets (e.g. smoothed labels)."""
    z, single = _as_batch(student_logits)
    q = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if q.shape != z.shape:
        raise InvalidShapeError(f"targets {q.shape} do not match logits {z.shape}")
    logp = log_softmax_t(z, 1.0)
    loss = -(q * logp).sum(axis=1)
    grad = np.exp(logp) - q
    return _out(single, loss, grad)


def kd_loss(student_logits, teacher_logits, tau: float):
    zs, zt, single = _pair(student_logits, teacher_logits)
    log_ps = log_softmax_t(zs, tau)
    pt = softmax_t(zt, tau)
    loss = -(tau * tau) * (pt * log_ps).sum(axis=1)
    grad = tau * (np.exp(log_ps) - pt)
    return _out(single, loss, grad)


def kd_kl(student_logits, teacher_logits, tau: float):
    """Report-only ``tau^2 * KL(p_t || p_s)``; differs from kd_loss by the teacher entropy."""
    zs, zt, single = _pair(student_logits, teacher_logits)
    log_ps = log_softmax_t(zs, tau)
    log_pt = log_softmax_t(zt, tau)
    kl = (tau * tau) * (np.exp(log_pt) * (log_pt - log_ps)).sum(axis=1)
    return kl[0] if single else kl


def variance_grad_b(student_logits, teacher_logits, label, tau: float):
    """``d(L_kd - L_ce)/dz_i`` at the ground-truth logit ``i`` (signed)."""
    zs, zt, single = _pair(student_logits, teacher_logits)
    y = _labels(label, zs.shape[0], zs.shape[1])
    rows = _label_rows(zs.shape[0])
    ps_tau = softmax_t(zs, tau)[rows, y]
    pt_tau = softmax_t(zt, tau)[rows, y]
    ps_1 = softmax_t(zs, 1.0)[rows, y]
    b = tau * (ps_tau - pt_tau) - (ps_1 - 1.0)
    return b[0] if single else b


def masked_kd(student_logits, teacher_logits, label, tau: float, loss_form: bool = False):
    """KD with no gradient on the label logit.

    Default: ``kd_loss`` value, gradient with the label component zeroed.
    ``loss_form=True`` instead drops the ``k = label`` term from the KD sum
    (the negated ``-tau^2 sum_{k != i} p_t log p_s``) and returns its exact
    gradient, whose label component is generally nonzero.
    """
    zs, zt, single = _pair(student_logits, teacher_logits)
    y = _labels(label, zs.shape[0], zs.shape[1])
    rows = _label_rows(zs.shape[0])
    if not loss_form:
        loss, grad = kd_loss(zs, zt, tau)
        grad[rows, y] = 0.0
        return _out(single, loss, grad)
    log_ps = log_softmax_t(zs, tau)
    pt = softmax_t(zt, tau)
    pt_masked = pt.copy()
    pt_masked[rows, y] = 0.0
    loss = -(tau * tau) * (pt_masked * log_ps).sum(axis=1)
    mass = pt_masked.sum(axis=1, keepdims=True)
    grad = tau * (np.exp(log_ps) * mass - pt_masked)
    return _out(single, loss, grad)


def smooth_labels(label, epsilon: float, num_classes: int) -> np.ndarray:
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    y = np.atleast_1d(np.asarray(label))
    y = _labels(y, y.shape[0], num_classes)
    out = np.full((y.shape[0], num_classes), epsilon / num_classes)
    out[_label_rows(y.shape[0]), y] += 1.0 - epsilon
    return out[0] if np.ndim(label) == 0 else out


def _ce_pair(student_probs, teacher_probs, label):
    ps = np.atleast_2d(np.asarray(student_probs, dtype=np.float64))
    pt = np.atleast_2d(np.asarray(teacher_probs, dtype=np.float64))
    if ps.shape != pt.shape:
        raise InvalidShapeError(f"student {ps.shape} and teacher {pt.shape} probabilities differ")
    y = _labels(label, ps.shape[0], ps.shape[1])
    rows = _label_rows(ps.shape[0])
    ls = -np.log(ps[rows, y])
    lt = np.maximum(-np.log(pt[rows, y]), CE_CLAMP)
    return ls, lt, np.ndim(student_probs) == 1


def weight_from_ce(ce_student, ce_teacher, kind: str = "exp"):
    """Map per-sample CE losses to a weight in [0, 1).

    ``kind="exp"``: ``1 - exp(-Ls/Lt)``; ``kind="sigmoid"``: ``2/(1+exp(-Ls/Lt)) - 1``.
    The teacher loss is floored at ``CE_CLAMP``.
    """
    ratio = np.asarray(ce_student, dtype=np.float64) / np.maximum(ce_teacher, CE_CLAMP)
    if kind == "exp":
        w = -np.expm1(-ratio)
    elif kind == "sigmoid":
        w = np.tanh(0.5 * ratio)  # == 2 / (1 + exp(-r)) - 1
    else:
        raise ValueError(f"unknown weight kind {kind!r}")
    return np.clip(w, 0.0, _BELOW_ONE)


def wsl_weight(student_probs, teacher_probs, label):
    """Weighted-soft-label factor from temperature-1 probabilities."""
    ls, lt, single = _ce_pair(student_probs, teacher_probs, label)
    w = weight_from_ce(ls, lt, "exp")
    return w[0] if single else w


def sigmoid_weight(student_probs, teacher_probs, label):
    ls, lt, single = _ce_pair(student_probs, teacher_probs, label)
    w = weight_from_ce(ls, lt, "sigmoid")
    return w[0] if single else w


def _logit_weights(zs, zt, y, kind: str) -> np.ndarray:
    # from log-probabilities directly so tiny probabilities keep their precision
    rows = _label_rows(zs.shape[0])
    ls = -log_softmax_t(zs, 1.0)[rows, y]
    lt = -log_softmax_t(zt, 1.0)[rows, y]
    return weight_from_ce(ls, lt, kind)


def wsl_loss(student_logits, teacher_logits, label, tau: float, kind: str = "exp"):
    """Weighted KD; returns ``(loss, grad, weight)``. No gradient flows through the weight."""
    zs, zt, single = _pair(student_logits, teacher_logits)
    y = _labels(label, zs.shape[0], zs.shape[1])
    w = _logit_weights(zs, zt, y, kind)
    kd, grad = kd_loss(zs, zt, tau)
    return _out(single, w * kd, w[:, None] * grad, w)


def total_loss(ce, wsl, alpha: float):
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    return ce + alpha * wsl


@dataclass
class LossBundle:
    """Per-sample loss terms and the combined logit gradient for one batch.

    ``total = ce + coef * kd_mult * weight * kd``; ``distill`` holds
    ``weight * kd`` (equal to ``wsl`` for weighted modes).
    """

    mode: str
    ce: np.ndarray
    kd: np.ndarray
    weight: np.ndarray
    distill: np.ndarray
    total: np.ndarray
    grad: np.ndarray
    coef: float

    @property
    def wsl(self) -> np.ndarray:
        return self.distill


def loss_bundle(
    mode: str,
    student_logits,
    labels,
    teacher_logits=None,
    tau: float = 4.0,
    coef: float = 1.0,
    kd_mult=None,
    soft_targets=None,
    masked_loss_form: bool = False,
) -> LossBundle:
    """Combined training objective ``L_ce + coef * mult * L_distill`` per sample.

    ``kd_mult`` (0/1 per sample) gates the distillation term, e.g. from a
    regularization-sample policy. ``soft_targets`` replaces the one-hot CE
    target (label smoothing; CE mode only).
    """
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}")
    zs, _ = _as_batch(student_logits)
    n, k = zs.shape
    y = _labels(labels, n, k)
    if soft_targets is not None:
        if mode != "ce":
            raise ValueError("soft targets are only supported in ce mode")
        ce, grad = soft_ce_loss(zs, soft_targets)
    else:
        ce, grad = ce_loss(zs, y)
    zero = np.zeros(n)
    if mode == "ce":
        return LossBundle(mode, ce, zero, zero.copy(), zero.copy(), ce.copy(), grad, 0.0)
    if teacher_logits is None:
        raise ValueError(f"mode {mode!r} needs teacher logits")
    zt, _ = _as_batch(teacher_logits)
    if mode == "kd":
        kd, kd_grad = kd_loss(zs, zt, tau)
        w = np.ones(n)
    elif mode == "masked-kd":
        kd, kd_grad = masked_kd(zs, zt, y, tau, loss_form=masked_loss_form)
        w = np.ones(n)
    else:
        kd, kd_grad = kd_loss(zs, zt, tau)
        w = _logit_weights(zs, zt, y, "exp" if mode == "wsl" else "sigmoid")
    scale = coef * w
    if kd_mult is not None:
        scale = scale * np.asarray(kd_mult, dtype=np.float64)
    distill = w * kd
    total = ce + (scale * kd)
    grad = grad + scale[:, None] * kd_grad
    return LossBundle(mode, ce, kd, w, distill, total, grad, coef)
