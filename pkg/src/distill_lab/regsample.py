"""Regularization samples: per-sample bias/variance gradient comparison and policies.

For a sample with label ``i`` the bias-reduction gradient is
``a = dL_ce/dz_i = p_s(i) - 1`` and the variance-reduction gradient is
``b = d(L_kd - L_ce)/dz_i``. Since ``a <= 0``, the two pull the label logit
in opposite directions only while ``b > 0``.

Two classification rules are available:

``"directional"`` (default)
    RS when ``b > |a|``: the variance term is opposed to the bias term and
    larger. Because ``b - |a| = tau * (p_s(i; tau) - p_t(i; tau))`` this is
    the student being more confident than the teacher at temperature tau.
``"magnitude"``
    RS when ``|b| > |a|`` regardless of the sign of ``b``. This also flags
    samples where a very confident teacher makes ``b`` strongly negative,
    i.e. where both gradients push the label logit the same way.

Ties are never RS. At ``tau = 1`` both rules reduce to ``p_s(i) > p_t(i)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from distill_lab import losses
from distill_lab.datasets import LabeledDataset
from distill_lab.network import MlpModel, predict_logits
from distill_lab.numkit import InvalidShapeError


RS_RULES = ("directional", "magnitude")


@dataclass(frozen=True)
class GradPair:
    a: np.ndarray
    b: np.ndarray

    @property
    def abs_a(self) -> np.ndarray:
        return np.abs(self.a)

    @property
    def abs_b(self) -> np.ndarray:
        return np.abs(self.b)

    def is_rs(self, rule: str = "directional") -> np.ndarray:
        if rule == "directional":
            return self.b > self.abs_a
        if rule == "magnitude":
            return self.abs_b > self.abs_a
        raise ValueError(f"unknown RS rule {rule!r}; expected one of {RS_RULES}")


@dataclass(frozen=True)
class TrainingPolicy:
    """Keep-probabilities for the distillation term.

    ``p_rs`` applies to regularization samples, ``p_nrs`` to the rest.
    ``(1, 1)`` is standard distillation, ``(0, 1)`` excludes RS, ``(1, 0)``
    distills only on RS. ``masked`` zeroes the label-logit KD gradient.
    """

    p_rs: float = 1.0
    p_nrs: float = 1.0
    masked: bool = False

    def __post_init__(self):
        for name in ("p_rs", "p_nrs"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")

    @property
    def is_standard(self) -> bool:
        return self.p_rs == 1.0 and self.p_nrs == 1.0

    @property
    def label(self) -> str:
        tag = f"rs{self.p_rs:g}-nrs{self.p_nrs:g}"
        return tag + ("-masked" if self.masked else "")


STANDARD = TrainingPolicy(1.0, 1.0)
EXCLUDE_RS = TrainingPolicy(0.0, 1.0)
ONLY_RS = TrainingPolicy(1.0, 0.0)


@dataclass(frozen=True)
class RsEpochCount:
    epoch: int
    count: int
    dataset_size: int

    def __post_init__(self):
        if not 0 <= self.count <= self.dataset_size:
            raise ValueError("count must lie in [0, dataset_size]")

    @property
    def fraction(self) -> float:
        return self.count / self.dataset_size


def classify(student_logits, teacher_logits, label, tau: float, rule: str = "directional"):
    """Return ``(GradPair, rs_flags)`` for a sample or a batch."""
    _, a = losses.ce_loss(student_logits, label)
    zs = np.asarray(student_logits, dtype=np.float64)
    y = np.atleast_1d(np.asarray(label))
    a_rows = np.atleast_2d(a)[np.arange(y.shape[0]), y]
    b = np.atleast_1d(losses.variance_grad_b(student_logits, teacher_logits, label, tau))
    pair = GradPair(a_rows, b)
    flags = pair.is_rs(rule)
    if zs.ndim == 1:
        pair = GradPair(a_rows[0], b[0])
        return pair, bool(flags[0])
    return pair, flags


def apply_policy(policy: TrainingPolicy, rs_flags, rng: np.random.Generator | None):
    """Per-sample 0/1 multipliers for the distillation term.

    Bernoulli draws are taken only for samples whose keep-probability is
    strictly between 0 and 1, one draw per such sample in batch order, so
    deterministic policies never touch the generator.
    """
    flags = np.atleast_1d(np.asarray(rs_flags, dtype=bool))
    p = np.where(flags, policy.p_rs, policy.p_nrs)
    mult = (p >= 1.0).astype(np.float64)
    random = (p > 0.0) & (p < 1.0)
    if random.any():
        if rng is None:
            raise ValueError("a generator is required for fractional keep-probabilities")
        mult[random] = (rng.random(int(random.sum())) < p[random]).astype(np.float64)
    return mult[0] if np.ndim(rs_flags) == 0 else mult


def count_epoch(
    student: MlpModel,
    teacher: MlpModel,
    ds: LabeledDataset,
    tau: float,
    epoch: int = 0,
    rule: str = "directional",
) -> RsEpochCount:
    """Frozen-parameter sweep counting the regularization samples in ``ds``."""
    k = ds.num_classes
    if student.spec.num_classes != k or teacher.spec.num_classes != k:
        raise InvalidShapeError("student, teacher and dataset disagree on the class count")
    zs = predict_logits(student, ds.features)
    zt = predict_logits(teacher, ds.features)
    _, flags = classify(zs, zt, ds.labels, tau, rule)
    return RsEpochCount(epoch, int(np.count_nonzero(flags)), len(ds))


TRAJECTORY_COLUMNS = ("epoch", "rs_count", "dataset_size", "tau", "policy")


def write_trajectory(path, counts, tau: float, policy: TrainingPolicy) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for c in counts:
            w.writerow([c.epoch, c.count, c.dataset_size, repr(float(tau)), policy.label])


def read_trajectory(path) -> list:
    with open(path, newline="") as f:
        return [
            RsEpochCount(int(r["epoch"]), int(r["rs_count"]), int(r["dataset_size"]))
            for r in csv.DictReader(f)
        ]
