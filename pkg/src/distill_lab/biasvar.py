"""Log-loss bias/variance decomposition of student ensembles.

For ground truth ``y`` and run outputs ``p_m`` (m = 1..M) on a sample, the
ensemble "mean" is the normalized geometric mean
``ybar = exp(mean_m log p_m) / Z``. Then

    mean_m [-sum y log p_m] = -sum y log y          (intrinsic noise)
                            + KL(y || ybar)          (bias)
                            + mean_m KL(ybar || p_m) (variance)

holds exactly, with the variance equal to ``-log Z``.

:func:`estimate` realizes the expectations by Monte Carlo: dataset
randomness is a bootstrap resample plus the student's init seed, teacher
randomness a finite pool of teachers trained on their own resamples. The
expectation over inputs is the mean over a fixed evaluation set shared by
all modes.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from distill_lab.datasets import LabeledDataset, bootstrap
from distill_lab.network import MlpModel, predict_logits
from distill_lab.numkit import derive_seed, log_softmax_t
from distill_lab.trainer import DivergenceError, TrainConfig, fit

P_MIN = 1e-12
_LOG_P_MIN = np.log(P_MIN)

DUMP_MAGIC = b"DLABLPD\x00"
DUMP_VERSION = 1


class DegenerateOutputError(ValueError):
    pass


def clamp_log_probs(log_probs) -> np.ndarray:
    """Floor log-probabilities at ``log(P_MIN)`` and renormalize each row."""
    lp = np.maximum(np.asarray(log_probs, dtype=np.float64), _LOG_P_MIN)
    m = lp.max(axis=-1, keepdims=True)
    return lp - (m + np.log(np.exp(lp - m).sum(axis=-1, keepdims=True)))


def geo_mean(log_probs) -> np.ndarray:
    """Normalized geometric mean over runs (axis 0).

    ``log_probs`` has shape ``(M, K)`` for one sample or ``(M, N, K)``.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim not in (2, 3) or lp.shape[0] < 1:
        raise ValueError(f"expected (M, K) or (M, N, K) log-probabilities, got {lp.shape}")
    if np.isneginf(lp).any():
        raise DegenerateOutputError("a run assigned probability 0 to some class")
    if not np.all(np.isfinite(lp)):
        raise ValueError("log-probabilities must be finite")
    mean = lp.mean(axis=0)
    m = mean.max(axis=-1, keepdims=True)
    log_ybar = mean - (m + np.log(np.exp(mean - m).sum(axis=-1, keepdims=True)))
    return np.exp(log_ybar)


def _xlogx_over(p, q) -> np.ndarray:
    """Elementwise ``p * log(p / q)`` with ``0 log 0 = 0``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = p * (np.log(p) - np.log(q))
    return np.where(p > 0, out, 0.0)


@dataclass
class Decomposition:
    noise: np.ndarray
    bias: np.ndarray
    variance: np.ndarray
    error: np.ndarray

    def aggregate(self) -> dict:
        return {
            "intrinsic_noise": float(np.mean(self.noise)),
            "bias": float(np.mean(self.bias)),
            "variance": float(np.mean(self.variance)),
            "error": float(np.mean(self.error)),
        }

    @property
    def residual(self) -> np.ndarray:
        return self.noise + self.bias + self.variance - self.error


def decompose(y, ybar, run_probs) -> Decomposition:
    """Per-sample noise/bias/variance for truth ``y`` (N x K or K).

    ``run_probs`` holds the M run distributions, shape ``(M, N, K)`` or
    ``(M, K)``; ``ybar`` should be their :func:`geo_mean`.
    """
    y = np.asarray(y, dtype=np.float64)
    ybar = np.asarray(ybar, dtype=np.float64)
    runs = np.asarray(run_probs, dtype=np.float64)
    if y.shape != ybar.shape or runs.shape[1:] != y.shape:
        raise ValueError(f"inconsistent shapes: y {y.shape}, ybar {ybar.shape}, runs {runs.shape}")
    if np.any((runs <= 0) & (ybar > 0)):
        raise DegenerateOutputError("a run assigned probability 0 where the ensemble mean is positive")
    if np.any((ybar <= 0) & (y > 0)):
        raise DegenerateOutputError("ensemble mean assigns probability 0 to a true class")
    noise = -_xlogx_over(y, 1.0).sum(axis=-1)
    bias = _xlogx_over(y, ybar).sum(axis=-1)
    log_runs = np.log(runs)
    variance = _xlogx_over(ybar[None], runs).sum(axis=-1).mean(axis=0)
    error = -(np.where(y > 0, y, 0.0)[None] * log_runs).sum(axis=-1).mean(axis=0)
    return Decomposition(noise, bias, variance, error)


def one_hot(labels, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


@dataclass
class RunOutputs:
    """Clamped eval-set log-probabilities of one mode's runs, ``(M, N, K)``."""

    mode: str
    log_probs: np.ndarray
    seeds: list = field(default_factory=list)
    teacher_ids: list = field(default_factory=list)

    def __post_init__(self):
        lp = np.asarray(self.log_probs, dtype=np.float64)
        if lp.ndim != 3:
            raise ValueError(f"expected (M, N, K) log-probabilities, got {lp.shape}")
        sums = np.exp(lp).sum(axis=-1)
        if not np.allclose(sums, 1.0, rtol=0, atol=1e-8):
            raise ValueError("run outputs must exponentiate to distributions")
        self.log_probs = lp

    @property
    def num_runs(self) -> int:
        return self.log_probs.shape[0]

    def geo_mean(self) -> np.ndarray:
        return geo_mean(self.log_probs)

    def decompose(self, labels, num_classes: int) -> Decomposition:
        return decompose(one_hot(labels, num_classes), self.geo_mean(), np.exp(self.log_probs))


def bias_gap(labels, ybar_ce, ybar_other) -> float:
    """``E_x[y log(ybar_ce / ybar_other)]`` for one-hot ``y``."""
    rows = np.arange(len(labels))
    return float(np.mean(np.log(ybar_ce[rows, labels]) - np.log(ybar_other[rows, labels])))


@dataclass
class EnsembleConfig:
    """Settings for :func:`estimate`.

    ``student`` is the base training config; its ``mode`` is overridden by
    each entry of ``modes``. ``teacher`` trains the teacher pool.
    """

    student: TrainConfig
    teacher: TrainConfig
    runs: int = 8
    teachers: int = 4
    modes: tuple = ("ce", "kd")
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.runs < 1 or self.teachers < 1:
            raise ValueError("runs and teachers must be >= 1")
        if "ce" not in self.modes:
            raise ValueError("modes must include 'ce' (the reference for the bias gap)")


def _teacher_job(args):
    cfg, train, eval_set, seed = args
    model, report = fit(cfg.replace(seed=seed), bootstrap(train, seed), eval_set)
    return model, report.final_test_acc


def _student_job(args):
    cfg, train, eval_set, teacher, seed = args
    try:
        model, report = fit(cfg.replace(seed=seed), bootstrap(train, seed), eval_set, teacher=teacher)
    except DivergenceError:
        return None, None
    lp = clamp_log_probs(log_softmax_t(predict_logits(model, eval_set.features), 1.0))
    return lp, report.final_test_acc


def _map(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


@dataclass
class EnsembleResult:
    outputs: dict
    accuracies: dict
    teacher_accuracies: list
    failed: dict
    labels: np.ndarray
    num_classes: int

    def decompositions(self) -> dict:
        return {m: o.decompose(self.labels, self.num_classes) for m, o in self.outputs.items()}

    def report(self) -> dict:
        decs = self.decompositions()
        ybar = {m: o.geo_mean() for m, o in self.outputs.items()}
        modes = {}
        for m, d in decs.items():
            modes[m] = {
                **d.aggregate(),
                "runs": self.outputs[m].num_runs,
                "failed_runs": self.failed[m],
                "mean_test_acc": float(np.mean(self.accuracies[m])),
                "max_identity_residual": float(np.max(np.abs(d.residual))),
            }
        gaps = {m: bias_gap(self.labels, ybar["ce"], ybar[m]) for m in self.outputs if m != "ce"}
        return {
            "modes": modes,
            "bias_gap_vs_ce": gaps,
            "variance_below_ce": {
                m: modes[m]["variance"] <= modes["ce"]["variance"] for m in self.outputs if m != "ce"
            },
            "teacher_test_acc": [float(a) for a in self.teacher_accuracies],
            "eval_size": int(len(self.labels)),
        }


def estimate(config: EnsembleConfig, train: LabeledDataset, eval_set: LabeledDataset) -> EnsembleResult:
    """Train the teacher pool and M students per mode; collect eval outputs.

    Run ``m`` uses the same bootstrap resample and init seed in every mode
    and, when distilling, teacher ``m mod T``.
    """
    teacher_seeds = [derive_seed(config.seed, 1, t) for t in range(config.teachers)]
    teacher_cfg = config.teacher.replace(mode="ce")
    teachers = _map(
        _teacher_job, [(teacher_cfg, train, eval_set, s) for s in teacher_seeds], config.workers
    )
    run_seeds = [derive_seed(config.seed, 2, m) for m in range(config.runs)]

    outputs, accuracies, failed = {}, {}, {}
    for mode in config.modes:
        cfg = config.student.replace(mode=mode)
        jobs = [
            (cfg, train, eval_set, teachers[m % config.teachers][0] if cfg.distills else None, s)
            for m, s in enumerate(run_seeds)
        ]
        results = _map(_student_job, jobs, config.workers)
        ok = [(m, r) for m, r in enumerate(results) if r[0] is not None]
        failed[mode] = config.runs - len(ok)
        if 2 * len(ok) < config.runs:
            raise DivergenceError(-1, f"mode {mode!r}: only {len(ok)} of {config.runs} runs succeeded")
        outputs[mode] = RunOutputs(
            mode,
            np.stack([r[0] for _, r in ok]),
            seeds=[run_seeds[m] for m, _ in ok],
            teacher_ids=[m % config.teachers if cfg.distills else -1 for m, _ in ok],
        )
        accuracies[mode] = [r[1] for _, r in ok]
    return EnsembleResult(
        outputs,
        accuracies,
        [acc for _, acc in teachers],
        failed,
        eval_set.labels,
        eval_set.num_classes,
    )


def write_dump(path, outputs: dict) -> None:
    """Binary log-prob dump: magic, version, JSON header, per-run float64 blocks."""
    header = {
        "version": DUMP_VERSION,
        "blocks": [
            {
                "mode": o.mode,
                "runs": o.num_runs,
                "shape": list(o.log_probs.shape[1:]),
                "seeds": [int(s) for s in o.seeds],
                "teacher_ids": [int(t) for t in o.teacher_ids],
            }
            for o in outputs.values()
        ],
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(DUMP_MAGIC)
        f.write(struct.pack("<II", DUMP_VERSION, len(raw)))
        f.write(raw)
        for o in outputs.values():
            f.write(o.log_probs.astype("<f8").tobytes())


def read_dump(path) -> dict:
    data = Path(path).read_bytes()
    if data[:8] != DUMP_MAGIC:
        raise ValueError(f"{path}: not a log-prob dump")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != DUMP_VERSION:
        raise ValueError(f"{path}: unsupported dump version {version}")
    header = json.loads(data[16 : 16 + hlen])
    offset = 16 + hlen
    out = {}
    for b in header["blocks"]:
        n, k = b["shape"]
        count = b["runs"] * n * k
        if len(data) < offset + 8 * count:
            raise OSError(f"{path}: truncated dump")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(b["runs"], n, k)
        offset += 8 * count
        out[b["mode"]] = RunOutputs(b["mode"], arr.copy(), b["seeds"], b["teacher_ids"])
    return out
