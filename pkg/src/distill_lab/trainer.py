"""Mini-batch SGD with momentum over the distillation objectives."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from distill_lab import losses
from distill_lab.datasets import LabeledDataset
from distill_lab.network import MlpModel, MlpSpec, backward, forward, init, predict_logits
from distill_lab.numkit import STREAM_POLICY, STREAM_SHUFFLE, make_rng
from distill_lab.regsample import RS_RULES, STANDARD, TrainingPolicy, apply_policy, classify

DISTILL_MODES = ("kd", "wsl", "masked-kd", "sigmoid-wsl")


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, message: str = "non-finite loss"):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines one training run.

    ``alpha`` weights the distillation term in the weighted modes (``wsl``,
    ``sigmoid-wsl``); ``kd_weight`` weights it in ``kd`` and ``masked-kd``.
    ``count_tau`` is the temperature used for RS counting (defaults to
    ``tau``); ``rs_counting`` is ``"online"`` (flags from the batch forward
    pass) or ``"frozen"`` (an end-of-epoch sweep).

    ``masked_form`` picks the masked-KD variant: ``"loss"`` trains on the
    proper loss ``-tau^2 sum_{k != label} p_t log p_s``; ``"gradient"`` zeroes
    the label component of the KD gradient. The latter is not the gradient of
    any loss, has a nonzero component sum, and tends to blow up the logits.
    """

    mode: str = "ce"
    tau: float = 4.0
    alpha: float = 2.25
    kd_weight: float = 1.0
    policy: TrainingPolicy = STANDARD
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    lr_decay_epochs: tuple = (60, 80)
    lr_decay_factor: float = 0.1
    weight_decay: float = 0.0
    seed: int = 0
    label_smoothing: float = 0.0
    hidden: tuple = (32,)
    activation: str = "relu"
    count_tau: float | None = None
    rs_counting: str = "online"
    rs_rule: str = "directional"
    masked_form: str = "loss"

    def __post_init__(self):
        if self.mode not in losses.LOSS_MODES:
            raise ConfigError(f"mode must be one of {losses.LOSS_MODES}, got {self.mode!r}")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.alpha < 0 or self.kd_weight < 0:
            raise ConfigError("alpha and kd_weight must be non-negative")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.label_smoothing > 0 and self.mode != "ce":
            raise ConfigError("label_smoothing only applies to ce (teacher) training")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.count_tau is not None and not self.count_tau > 0:
            raise ConfigError("count_tau must be positive")
        if self.rs_counting not in ("online", "frozen"):
            raise ConfigError("rs_counting must be 'online' or 'frozen'")
        if self.masked_form not in ("loss", "gradient"):
            raise ConfigError("masked_form must be 'loss' or 'gradient'")
        if self.rs_rule not in RS_RULES:
            raise ConfigError(f"rs_rule must be one of {RS_RULES}")
        if isinstance(self.policy, dict):
            object.__setattr__(self, "policy", TrainingPolicy(**self.policy))
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def distills(self) -> bool:
        return self.mode in DISTILL_MODES

    @property
    def distill_coef(self) -> float:
        return self.alpha if self.mode in ("wsl", "sigmoid-wsl") else self.kd_weight

    @property
    def effective_mode(self) -> str:
        if self.mode == "kd" and self.policy.masked:
            return "masked-kd"
        return self.mode

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay_factor**drops

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training fields: {', '.join(unknown)}")
        d = dict(d)
        if "policy" in d and isinstance(d["policy"], dict):
            pol_known = {"p_rs", "p_nrs", "masked"}
            bad = sorted(set(d["policy"]) - pol_known)
            if bad:
                raise ConfigError(f"unknown policy fields: {', '.join(bad)}")
            d["policy"] = TrainingPolicy(**d["policy"])
        return cls(**d)

    def replace(self, **changes) -> TrainConfig:
        return replace(self, **changes)


@dataclass
class EpochRow:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float
    rs_count: int | None
    mean_weight: float | None


REPORT_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "test_acc", "rs_count", "mean_weight")


@dataclass
class TrainReport:
    config: TrainConfig
    rows: list = field(default_factory=list)
    train_size: int = 0

    @property
    def final_test_acc(self) -> float:
        return self.rows[-1].test_acc

    @property
    def final_rs_count(self) -> int | None:
        return self.rows[-1].rs_count

    def rs_counts(self):
        from distill_lab.regsample import RsEpochCount

        return [RsEpochCount(r.epoch, r.rs_count, self.train_size) for r in self.rows if r.rs_count is not None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "distill_coef": self.config.distill_coef if self.config.distills else 0.0,
            "kd_combination": "L_ce + coef * L_distill",
            "train_size": self.train_size,
            "final_test_acc": self.final_test_acc,
            "final_train_acc": self.rows[-1].train_acc,
            "final_rs_count": self.final_rs_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_report_csv(text: str) -> list:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append(
            EpochRow(
                epoch=int(r["epoch"]),
                lr=float(r["lr"]),
                train_loss=float(r["train_loss"]),
                train_acc=float(r["train_acc"]),
                test_acc=float(r["test_acc"]),
                rs_count=int(r["rs_count"]) if r["rs_count"] else None,
                mean_weight=float(r["mean_weight"]) if r["mean_weight"] else None,
            )
        )
    return rows


def sgd_step(params: list, grads: list, lr: float, momentum: float, velocity: list | None = None) -> list:
    """Classical momentum, in place: ``v <- mu*v - lr*g``; ``theta <- theta + v``.

    Returns the velocity buffers (allocated on first use).
    """
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch in sgd_step: {p.shape}, {g.shape}, {v.shape}")
        v *= momentum
        v -= lr * g
        p += v
    return velocity


def accuracy(model: MlpModel, ds: LabeledDataset) -> float:
    return float(np.mean(np.argmax(predict_logits(model, ds.features), axis=1) == ds.labels))


def student_spec(config: TrainConfig, ds: LabeledDataset) -> MlpSpec:
    return MlpSpec(
        (ds.dim, *config.hidden, ds.num_classes),
        activation=config.activation,
        seed=config.seed,
    )


def fit(
    config: TrainConfig,
    train: LabeledDataset,
    test: LabeledDataset,
    teacher: MlpModel | None = None,
    model: MlpModel | None = None,
):
    """Train a fresh model (or continue ``model``) and return ``(model, report)``.

    The teacher is only ever read; its logits on the training set are
    computed once up front.
    """
    if config.distills and teacher is None:
        raise ConfigError(f"mode {config.mode!r} requires a teacher")
    if train.num_classes != test.num_classes:
        raise ConfigError("train and test sets disagree on the class count")
    if teacher is not None and teacher.spec.num_classes != train.num_classes:
        raise ConfigError("teacher and dataset disagree on the class count")
    if model is None:
        model = init(student_spec(config, train))

    use_teacher = config.distills
    zt_all = predict_logits(teacher, train.features) if use_teacher else None
    soft = (
        losses.smooth_labels(train.labels, config.label_smoothing, train.num_classes)
        if config.label_smoothing > 0
        else None
    )
    count_tau = config.count_tau if config.count_tau is not None else config.tau
    mode = config.effective_mode
    coef = config.distill_coef
    policy = config.policy

    shuffle_rng = make_rng(config.seed, STREAM_SHUFFLE)
    policy_rng = make_rng(config.seed, STREAM_POLICY)
    params = model.params()
    weight_ids = set(range(0, len(params), 2))
    velocity = None
    n = len(train)
    report = TrainReport(config, train_size=n)

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        rs_count = 0
        weight_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x, y = train.features[idx], train.labels[idx]
            zs, trace = forward(model, x)
            zt = None
            mult = None
            if use_teacher:
                zt = zt_all[idx]
                _, flags = classify(zs, zt, y, config.tau, config.rs_rule)
                if config.rs_counting == "online":
                    count_flags = flags if count_tau == config.tau else classify(zs, zt, y, count_tau, config.rs_rule)[1]
                    rs_count += int(np.count_nonzero(count_flags))
                if not policy.is_standard:
                    mult = apply_policy(policy, flags, policy_rng)
            bundle = losses.loss_bundle(
                mode,
                zs,
                y,
                teacher_logits=zt,
                tau=config.tau,
                coef=coef,
                kd_mult=mult,
                soft_targets=None if soft is None else soft[idx],
                masked_loss_form=config.masked_form == "loss",
            )
            batch_loss = float(bundle.total.sum())
            if not math.isfinite(batch_loss):
                raise DivergenceError(epoch)
            loss_sum += batch_loss
            correct += int(np.count_nonzero(np.argmax(zs, axis=1) == y))
            weight_sum += float(bundle.weight.sum())
            grads = backward(model, trace, bundle.grad / idx.shape[0])
            if config.weight_decay > 0:
                grads = [g + config.weight_decay * p if i in weight_ids else g for i, (g, p) in enumerate(zip(grads, params))]
            velocity = sgd_step(params, grads, lr, config.momentum, velocity)
        if not all(np.all(np.isfinite(p)) for p in params):
            raise DivergenceError(epoch, "non-finite parameters")
        if use_teacher and config.rs_counting == "frozen":
            zs_all = predict_logits(model, train.features)
            rs_count = int(np.count_nonzero(classify(zs_all, zt_all, train.labels, count_tau, config.rs_rule)[1]))
        report.rows.append(
            EpochRow(
                epoch=epoch,
                lr=lr,
                train_loss=loss_sum / n,
                train_acc=correct / n,
                test_acc=accuracy(model, test),
                rs_count=rs_count if use_teacher else None,
                mean_weight=weight_sum / n if use_teacher else None,
            )
        )
    return model, report


def teacher_config(base: TrainConfig, label_smoothing: float = 0.0, hidden=(128, 128)) -> TrainConfig:
    """CE training config for a teacher derived from a student's schedule."""
    return base.replace(
        mode="ce",
        label_smoothing=label_smoothing,
        hidden=tuple(hidden),
        policy=STANDARD,
    )
