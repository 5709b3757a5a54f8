"""Config-driven experiment runner and the ``distill-lab`` command line.

An experiment is a JSON document with a ``kind`` discriminator::

    {
      "kind": "subsets",
      "meta_seed": 0,
      "repeats": 5,
      "data": {"source": "blobs", "seed": 0, "train_fraction": 0.8},
      "student": {"epochs": 60, "lr_decay_epochs": [36, 48]},
      "teacher": {"hidden": [128, 128], "weight_decay": 0.005}
    }

Repeat ``r`` trains with seeds derived from ``(meta_seed, r)`` and writes
``<out>/<kind>-<meta_seed>/repeat-<r>.csv``. Once every repeat has finished
the coordinator re-reads those files and writes ``aggregate.json`` from
them, so the aggregate always agrees with the CSVs on disk.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from distill_lab import losses
from distill_lab.biasvar import EnsembleConfig, estimate
from distill_lab.datasets import (
    BlobSpec,
    DatasetConsistencyError,
    DatasetFormatError,
    LabeledDataset,
    gen_blobs,
    load_csv,
    load_idx,
    split,
)
from distill_lab.network import MlpModel, predict_logits
from distill_lab.numkit import derive_seed
from distill_lab.regsample import EXCLUDE_RS, ONLY_RS, STANDARD, TrainingPolicy
from distill_lab.trainer import ConfigError, DivergenceError, TrainConfig, fit, teacher_config

KINDS = ("train", "rs-count", "subsets", "intermediate", "biasvar", "resemblance", "alpha-sweep", "weight-variant")
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

DEFAULT_TEACHER_HIDDEN = (128, 128)
DEFAULT_TEACHER_WEIGHT_DECAY = 5e-3

# Extra top-level fields each kind accepts, with their defaults.
KIND_FIELDS = {
    "train": {},
    "rs-count": {"taus": (2.0, 4.0), "label_smoothing": 0.1},
    "subsets": {},
    "intermediate": {"probs": (0.0, 0.25, 0.5, 0.75, 1.0)},
    "biasvar": {"runs": 8, "teachers": 4, "modes": ("ce", "kd")},
    "resemblance": {"eval_on": "test"},
    "alpha-sweep": {"alphas": (1.0, 2.0, 3.0, 4.0)},
    "weight-variant": {},
}
COMMON_FIELDS = ("kind", "meta_seed", "repeats", "out", "workers", "data", "student", "teacher")

SUBSET_VARIANTS = (
    ("direct", "ce", STANDARD),
    ("only-rs", "kd", ONLY_RS),
    ("exclude-rs", "kd", EXCLUDE_RS),
    ("kd", "kd", STANDARD),
    ("wsl", "wsl", STANDARD),
)
WEIGHT_VARIANTS = ("kd", "wsl", "sigmoid-wsl")


class ExperimentConfigError(ValueError):
    """Invalid experiment config; ``where`` names the offending field."""

    def __init__(self, where: str, message: str, location: str = ""):
        text = f"{where}: {message}" if where else message
        super().__init__(f"{location}: {text}" if location else text)
        self.where = where
        self.message = message


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class DataSource:
    source: str = "blobs"
    blobs: BlobSpec = BlobSpec()
    paths: dict = field(default_factory=dict)
    train_fraction: float = 0.8
    split_seed: int = 0
    validation: float = 0.0

    def load(self):
        """Return ``(train, eval)``.

        A missing test part is split off the data. With ``validation > 0``
        that fraction of the training part becomes the evaluation set and
        the test part is never read.
        """
        train, test = self._load()
        if self.validation > 0:
            return split(train, 1.0 - self.validation, self.split_seed + 1)
        return train, test

    def _load(self):
        if self.source == "blobs":
            full, test = gen_blobs(self.blobs), None
        elif self.source == "idx":
            full = load_idx(self.paths["train_images"], self.paths["train_labels"])
            test = None
            if "test_images" in self.paths:
                test = load_idx(self.paths["test_images"], self.paths["test_labels"], full.num_classes)
        else:
            full = load_csv(self.paths["path"])
            test = load_csv(self.paths["test_path"], full.num_classes) if "test_path" in self.paths else None
        if test is not None:
            return full, test
        return split(full, self.train_fraction, self.split_seed)


_PATH_KEYS = {
    "idx": (("train_images", "train_labels"), ("test_images", "test_labels")),
    "csv": (("path",), ("test_path",)),
}


def _parse_data(d, base_dir: Path) -> DataSource:
    if not isinstance(d, dict):
        raise ExperimentConfigError("data", "must be an object")
    d = dict(d)
    source = d.pop("source", "blobs")
    common = {}
    for key in ("train_fraction", "split_seed", "validation"):
        if key in d:
            common[key] = d.pop(key)
    if "train_fraction" in common and not 0 < common["train_fraction"] < 1:
        raise ExperimentConfigError("data.train_fraction", "must lie in (0, 1)")
    if "validation" in common and not 0 <= common["validation"] < 1:
        raise ExperimentConfigError("data.validation", "must lie in [0, 1)")
    if source == "blobs":
        known = {f.name for f in fields(BlobSpec)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ExperimentConfigError(f"data.{unknown[0]}", "unknown field")
        try:
            spec = BlobSpec(**d)
        except (ValueError, TypeError) as e:
            raise ExperimentConfigError("data", str(e)) from None
        return DataSource("blobs", blobs=spec, **common)
    if source not in _PATH_KEYS:
        raise ExperimentConfigError("data.source", f"must be one of blobs, idx, csv; got {source!r}")
    required, optional = _PATH_KEYS[source]
    allowed = set(required) | set(optional)
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ExperimentConfigError(f"data.{unknown[0]}", "unknown field")
    if source == "idx" and len(set(optional) & set(d)) == 1:
        raise ExperimentConfigError("data", "test_images and test_labels go together")
    paths = {}
    for key in [*required, *optional]:
        if key not in d:
            if key in required:
                raise ExperimentConfigError(f"data.{key}", "missing")
            continue
        p = Path(d[key])
        if not p.is_absolute():
            p = base_dir / p
        if not p.is_file():
            raise ExperimentConfigError(f"data.{key}", f"no such file: {p}")
        paths[key] = str(p)
    return DataSource(source, paths=paths, **common)


def _parse_train(d, where: str, base: TrainConfig | None = None) -> TrainConfig:
    if not isinstance(d, dict):
        raise ExperimentConfigError(where, "must be an object")
    merged = {**base.to_dict(), **d} if base is not None else d
    try:
        return TrainConfig.from_dict(merged)
    except (ConfigError, ValueError, TypeError) as e:
        raise ExperimentConfigError(_train_field(where, str(e), d), str(e)) from None


def _train_field(where: str, message: str, d: dict) -> str:
    # point at the offending field when the message names one
    names = [f.name for f in fields(TrainConfig)] + ["p_rs", "p_nrs"]
    for token in message.replace(",", " ").replace(":", " ").split():
        if token in names or token in d:
            return f"{where}.{token}"
    return where


def _float_list(value, where: str, lo: float = 0.0, hi: float = math.inf) -> tuple:
    if not isinstance(value, (list, tuple)) or not value:
        raise ExperimentConfigError(where, "must be a nonempty list of numbers")
    out = []
    for i, v in enumerate(value):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not lo <= v <= hi:
            raise ExperimentConfigError(f"{where}[{i}]", f"must be a number in [{lo}, {hi}]")
        out.append(float(v))
    return tuple(out)


def _int_field(value, where: str, lo: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < lo:
        raise ExperimentConfigError(where, f"must be an integer >= {lo}")
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    data: DataSource
    student: TrainConfig
    teacher: TrainConfig
    repeats: int = 1
    meta_seed: int = 0
    out: str = "runs"
    workers: int = 1
    options: dict = field(default_factory=dict)

    @property
    def run_dir(self) -> Path:
        return Path(self.out) / f"{self.kind}-{self.meta_seed}"

    def option(self, name: str):
        return self.options.get(name, KIND_FIELDS[self.kind][name])

    def override(self, **changes) -> ExperimentConfig:
        """Apply CLI-style overrides; ``None`` values are ignored."""
        cur = {f.name: getattr(self, f.name) for f in fields(self)}
        opts = dict(self.options)
        for k, v in changes.items():
            if v is None:
                continue
            if k in cur:
                cur[k] = v
            else:
                opts[k] = v
        cur["options"] = opts
        return ExperimentConfig(**cur)


def parse_config(doc: dict, base_dir=".", kind: str | None = None) -> ExperimentConfig:
    """Validate a decoded JSON document.

    ``kind`` forces the experiment kind (used by the dedicated CLI commands);
    the document must then either match it or be a plain ``train`` config.
    """
    if not isinstance(doc, dict):
        raise ExperimentConfigError("", "top level must be an object")
    doc_kind = doc.get("kind")
    if doc_kind not in KINDS:
        raise ExperimentConfigError("kind", f"must be one of {', '.join(KINDS)}; got {doc_kind!r}")
    if kind is not None and doc_kind not in (kind, "train"):
        raise ExperimentConfigError("kind", f"expected {kind!r} or 'train', got {doc_kind!r}")
    kind = kind or doc_kind
    extra = KIND_FIELDS[kind]
    unknown = sorted(set(doc) - set(COMMON_FIELDS) - set(KIND_FIELDS[doc_kind]))
    if unknown:
        raise ExperimentConfigError(unknown[0], f"unknown field for kind {doc_kind!r}")

    data = _parse_data(doc.get("data", {}), Path(base_dir))
    student = _parse_train(doc.get("student", {}), "student")
    teacher_base = teacher_config(student, hidden=DEFAULT_TEACHER_HIDDEN).replace(
        weight_decay=DEFAULT_TEACHER_WEIGHT_DECAY
    )
    teacher = _parse_train(doc.get("teacher", {}), "teacher", base=teacher_base)
    if teacher.mode != "ce":
        raise ExperimentConfigError("teacher.mode", "teachers train with mode 'ce'")

    repeats = _int_field(doc.get("repeats", 1), "repeats", 1)
    meta_seed = _int_field(doc.get("meta_seed", 0), "meta_seed", 0)
    workers = _int_field(doc.get("workers", 1), "workers", 1)
    out = doc.get("out", "runs")
    if not isinstance(out, str) or not out:
        raise ExperimentConfigError("out", "must be a nonempty string")

    options = {k: doc[k] for k in extra if k in doc}
    options = _check_options(kind, options)
    cfg = ExperimentConfig(kind, data, student, teacher, repeats, meta_seed, out, workers, options)
    _check_kind(cfg)
    return cfg


def _check_options(kind: str, options: dict) -> dict:
    out = dict(options)
    if "taus" in out:
        out["taus"] = _float_list(out["taus"], "taus", lo=1e-12)
    if "label_smoothing" in out:
        v = out["label_smoothing"]
        if not isinstance(v, (int, float)) or not 0 < v < 1:
            raise ExperimentConfigError("label_smoothing", "must lie in (0, 1)")
        out["label_smoothing"] = float(v)
    if "probs" in out:
        out["probs"] = _float_list(out["probs"], "probs", 0.0, 1.0)
    if "alphas" in out:
        out["alphas"] = _float_list(out["alphas"], "alphas", 0.0)
    if "runs" in out:
        out["runs"] = _int_field(out["runs"], "runs", 1)
    if "teachers" in out:
        out["teachers"] = _int_field(out["teachers"], "teachers", 1)
    if "modes" in out:
        modes = out["modes"]
        if not isinstance(modes, list) or not modes or any(m not in losses.LOSS_MODES for m in modes):
            raise ExperimentConfigError("modes", f"must be a nonempty list drawn from {losses.LOSS_MODES}")
        if "ce" not in modes:
            raise ExperimentConfigError("modes", "must include 'ce'")
        out["modes"] = tuple(modes)
    if "eval_on" in out and out["eval_on"] not in ("train", "test"):
        raise ExperimentConfigError("eval_on", "must be 'train' or 'test'")
    return out


def _check_kind(cfg: ExperimentConfig) -> None:
    if cfg.kind == "alpha-sweep" and cfg.student.mode not in ("wsl", "sigmoid-wsl"):
        raise ExperimentConfigError("student.mode", "alpha-sweep needs a weighted mode (wsl or sigmoid-wsl)")


def _field_line(text: str, where: str) -> int | None:
    name = where.split(".")[-1].split("[")[0]
    if not name:
        return None
    needle = f'"{name}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def load_config(path, kind: str | None = None) -> ExperimentConfig:
    """Read and validate a config file.

    Errors come back as ``ExperimentConfigError`` whose message starts with
    ``<path>:<line>:`` when a line can be located.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ExperimentConfigError("", e.strerror or str(e), str(path)) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ExperimentConfigError("", e.msg, f"{path}:{e.lineno}:{e.colno}") from None
    try:
        return parse_config(doc, path.parent, kind)
    except ExperimentConfigError as e:
        line = _field_line(text, e.where)
        loc = f"{path}:{line}" if line else str(path)
        raise ExperimentConfigError(e.where, e.message, loc) from None


# ---------------------------------------------------------------- resemblance


@dataclass
class ResemblanceMatrix:
    """``matrix[i, j]``: mean over class-``j`` samples of component ``i`` of
    ``d(L_kd - L_ce)/dz``. Columns of empty classes are NaN."""

    matrix: np.ndarray
    tau: float
    class_counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def empty_classes(self) -> list:
        return [int(j) for j in np.flatnonzero(self.class_counts == 0)]

    def column_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=0)

    def max_abs_column_sum(self) -> float:
        sums = self.column_sums()
        ok = np.isfinite(sums)
        return float(np.max(np.abs(sums[ok]))) if ok.any() else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        k = self.num_classes
        w.writerow(["tau", "component", *(f"class_{j}" for j in range(k)), "count"])
        for i in range(k):
            w.writerow([repr(float(self.tau)), i, *(repr(float(v)) for v in self.matrix[i]), ""])
        w.writerow([repr(float(self.tau)), "count", *(int(c) for c in self.class_counts), ""])
        return buf.getvalue()


def parse_resemblance_csv(text: str) -> ResemblanceMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    k = sum(1 for h in header if h.startswith("class_"))
    mat = np.array([[float(v) for v in r[2 : 2 + k]] for r in body if r[1] != "count"])
    counts = next(np.array([int(v) for v in r[2 : 2 + k]]) for r in body if r[1] == "count")
    return ResemblanceMatrix(mat, float(body[0][0]), counts)


def resemblance_from_logits(student_logits, teacher_logits, labels, num_classes: int, tau: float):
    zs = np.asarray(student_logits, dtype=np.float64)
    zt = np.asarray(teacher_logits, dtype=np.float64)
    labels = np.asarray(labels)
    _, g_kd = losses.kd_loss(zs, zt, tau)
    _, g_ce = losses.ce_loss(zs, labels)
    diff = g_kd - g_ce
    counts = np.bincount(labels, minlength=num_classes)
    mat = np.full((num_classes, num_classes), np.nan)
    for j in range(num_classes):
        if counts[j]:
            mat[:, j] = diff[labels == j].mean(axis=0)
    return ResemblanceMatrix(mat, float(tau), counts)


def resemblance(student: MlpModel, teacher: MlpModel, ds: LabeledDataset, tau: float) -> ResemblanceMatrix:
    if student.spec.num_classes != ds.num_classes or teacher.spec.num_classes != ds.num_classes:
        raise DatasetConsistencyError("student, teacher and dataset disagree on the class count")
    zs = predict_logits(student, ds.features)
    zt = predict_logits(teacher, ds.features)
    return resemblance_from_logits(zs, zt, ds.labels, ds.num_classes, tau)


# ---------------------------------------------------------------- repeats


def repeat_seeds(meta_seed: int, r: int) -> dict:
    return {
        "student": derive_seed(meta_seed, r, 0),
        "teacher": derive_seed(meta_seed, r, 1),
        "ensemble": derive_seed(meta_seed, r, 2),
    }


def _rows_csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


class _Repeat:
    """Trains what one repeat needs, caching teachers and student runs."""

    def __init__(self, cfg: ExperimentConfig, r: int, train, test):
        self.cfg, self.r = cfg, r
        self.train, self.test = train, test
        self.seeds = repeat_seeds(cfg.meta_seed, r)
        self._teachers = {}
        self._students = {}

    def teacher(self, label_smoothing: float = 0.0):
        if label_smoothing not in self._teachers:
            tc = self.cfg.teacher.replace(seed=self.seeds["teacher"], label_smoothing=label_smoothing)
            self._teachers[label_smoothing] = fit(tc, self.train, self.test)
        return self._teachers[label_smoothing]

    def student(self, teacher_ls: float = 0.0, **changes):
        cfg = self.cfg.student.replace(seed=self.seeds["student"], **changes)
        key = (teacher_ls, cfg)
        if key not in self._students:
            t = self.teacher(teacher_ls)[0] if cfg.distills else None
            self._students[key] = fit(cfg, self.train, self.test, teacher=t)
        return self._students[key]


def _run_train(rep: _Repeat) -> str:
    return rep.student()[1].to_csv()


def _run_rs_count(rep: _Repeat) -> str:
    ls = rep.cfg.option("label_smoothing")
    rows = []
    for tau in rep.cfg.option("taus"):
        for name, eps in (("plain", 0.0), ("ls", ls)):
            _, t_rep = rep.teacher(eps)
            _, s_rep = rep.student(eps, mode="kd", tau=tau)
            rows.append((tau, name, eps, t_rep.final_test_acc, s_rep.final_rs_count, len(rep.train), s_rep.final_test_acc))
    cols = ("tau", "teacher", "label_smoothing", "teacher_test_acc", "rs_count", "dataset_size", "test_acc")
    return _rows_csv(cols, rows)


def _run_subsets(rep: _Repeat) -> str:
    rows = []
    for name, mode, policy in SUBSET_VARIANTS:
        _, s_rep = rep.student(mode=mode, policy=policy)
        rows.append((name, mode, policy.p_rs, policy.p_nrs, s_rep.final_test_acc))
    return _rows_csv(("variant", "mode", "p_rs", "p_nrs", "test_acc"), rows)


def _run_weight_variant(rep: _Repeat) -> str:
    rows = []
    for mode in WEIGHT_VARIANTS:
        _, s_rep = rep.student(mode=mode)
        rows.append((mode, s_rep.config.distill_coef, s_rep.rows[-1].mean_weight, s_rep.final_test_acc))
    return _rows_csv(("variant", "coef", "mean_weight", "test_acc"), rows)


def _run_intermediate(rep: _Repeat) -> str:
    rows = []
    for side in ("exclusion", "inclusion"):
        for p in rep.cfg.option("probs"):
            policy = TrainingPolicy(p, 1.0) if side == "exclusion" else TrainingPolicy(1.0, p)
            _, s_rep = rep.student(mode="kd", policy=policy)
            rows.append((side, p, policy.p_rs, policy.p_nrs, s_rep.final_test_acc))
    return _rows_csv(("side", "p", "p_rs", "p_nrs", "test_acc"), rows)


def _run_alpha_sweep(rep: _Repeat) -> str:
    rows = []
    for i, a in enumerate(rep.cfg.option("alphas")):
        _, s_rep = rep.student(alpha=a)
        rows.append((i, a, s_rep.final_test_acc))
    return _rows_csv(("row", "alpha", "test_acc"), rows)


def _run_resemblance(rep: _Repeat) -> str:
    teacher, _ = rep.teacher()
    student, _ = rep.student()
    ds = rep.test if rep.cfg.option("eval_on") == "test" else rep.train
    return resemblance(student, teacher, ds, rep.cfg.student.tau).to_csv()


def _run_biasvar(rep: _Repeat) -> str:
    cfg = rep.cfg
    ens = EnsembleConfig(
        cfg.student,
        cfg.teacher,
        runs=cfg.option("runs"),
        teachers=cfg.option("teachers"),
        modes=cfg.option("modes"),
        seed=rep.seeds["ensemble"],
    )
    report = estimate(ens, rep.train, rep.test).report()
    rows = []
    for mode, m in report["modes"].items():
        gap = report["bias_gap_vs_ce"].get(mode, 0.0)
        rows.append(
            (mode, m["intrinsic_noise"], m["bias"], m["variance"], m["error"], gap, m["mean_test_acc"], m["runs"], m["failed_runs"])
        )
    cols = ("mode", "noise", "bias", "variance", "error", "bias_gap_vs_ce", "mean_test_acc", "runs", "failed_runs")
    return _rows_csv(cols, rows)


_RUNNERS = {
    "train": _run_train,
    "rs-count": _run_rs_count,
    "subsets": _run_subsets,
    "intermediate": _run_intermediate,
    "biasvar": _run_biasvar,
    "resemblance": _run_resemblance,
    "alpha-sweep": _run_alpha_sweep,
    "weight-variant": _run_weight_variant,
}


def repeat_path(cfg: ExperimentConfig, r: int) -> Path:
    return cfg.run_dir / f"repeat-{r}.csv"


def _repeat_job(args):
    cfg, r = args
    path = repeat_path(cfg, r)
    try:
        train, test = cfg.data.load()
        text = _RUNNERS[cfg.kind](_Repeat(cfg, r, train, test))
    except DivergenceError as e:
        path.unlink(missing_ok=True)
        return r, f"diverged: {e}"
    path.write_text(text)
    return r, None


# ---------------------------------------------------------------- aggregation


def _num(v: str):
    if v == "":
        return None
    try:
        return int(v)
    except ValueError:
        return float(v)


def csv_metrics(kind: str, text: str) -> dict:
    """Named scalar metrics of one repeat, read back from its CSV."""
    if kind == "resemblance":
        m = parse_resemblance_csv(text)
        out = {"max_abs_column_sum": m.max_abs_column_sum()}
        for i in range(m.num_classes):
            for j in range(m.num_classes):
                out[f"m[{i}][{j}]"] = float(m.matrix[i, j])
        return out
    rows = list(csv.DictReader(io.StringIO(text)))
    if kind == "train":
        last = rows[-1]
        out = {"final_test_acc": float(last["test_acc"]), "final_train_acc": float(last["train_acc"])}
        if last["rs_count"]:
            out["final_rs_count"] = int(last["rs_count"])
        return out
    keys, values = {
        "rs-count": (("tau", "teacher"), ("rs_count", "test_acc", "teacher_test_acc")),
        "subsets": (("variant",), ("test_acc",)),
        "weight-variant": (("variant",), ("test_acc", "mean_weight")),
        "intermediate": (("side", "p"), ("test_acc",)),
        "alpha-sweep": (("row", "alpha"), ("test_acc",)),
        "biasvar": (("mode",), ("noise", "bias", "variance", "error", "bias_gap_vs_ce", "mean_test_acc")),
    }[kind]
    out = {}
    for row in rows:
        prefix = "/".join(f"{k}={row[k]}" for k in keys)
        for v in values:
            out[f"{prefix}/{v}"] = _num(row[v])
    return out


def _stats(values) -> dict:
    vals = [v for v in values]
    finite = [v for v in vals if v is not None and not (isinstance(v, float) and math.isnan(v))]
    if len(finite) < len(vals):
        return {"mean": None, "std": None, "values": [_json_num(v) for v in vals]}
    arr = np.asarray(finite, dtype=np.float64)
    return {
        "mean": float(arr.mean()) if len(arr) else None,
        "std": float(arr.std(ddof=1)) if len(arr) > 1 else None,
        "values": [_json_num(v) for v in vals],
    }


def _json_num(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return None
    return v


def _compare(claim: str, left: str, right: str, rel: str, metrics: dict) -> dict:
    ops = {"<": lambda a, b: a < b, "<=": lambda a, b: a <= b, ">": lambda a, b: a > b, ">=": lambda a, b: a >= b}
    op = ops[rel]
    lv, rv = metrics[left]["values"], metrics[right]["values"]
    holds = sum(1 for a, b in zip(lv, rv) if a is not None and b is not None and op(a, b))
    lm, rm = metrics[left]["mean"], metrics[right]["mean"]
    return {
        "claim": claim,
        "left": left,
        "relation": rel,
        "right": right,
        "mean_left": lm,
        "mean_right": rm,
        "mean_holds": bool(lm is not None and rm is not None and op(lm, rm)),
        "seeds_holding": holds,
        "seeds_total": len(lv),
    }


def _comparisons(cfg: ExperimentConfig, metrics: dict) -> list:
    out = []
    if cfg.kind == "subsets":
        names = [v[0] for v in SUBSET_VARIANTS]
        rels = ("<", "<", "<", "<=")
        for (a, b), rel in zip(zip(names, names[1:]), rels):
            out.append(_compare(f"{a} {rel} {b}", f"variant={a}/test_acc", f"variant={b}/test_acc", rel, metrics))
    elif cfg.kind == "rs-count":
        for tau in cfg.option("taus"):
            t = f"tau={tau!r}"
            out.append(_compare(f"{t}: ls rs_count > plain", f"{t}/teacher=ls/rs_count", f"{t}/teacher=plain/rs_count", ">", metrics))
            out.append(_compare(f"{t}: ls test_acc <= plain", f"{t}/teacher=ls/test_acc", f"{t}/teacher=plain/test_acc", "<=", metrics))
    elif cfg.kind == "intermediate":
        probs = sorted(set(cfg.option("probs")))
        for lo, hi in zip(probs, probs[1:]):
            # kept fraction of RS grows with p_rs
            out.append(
                _compare(
                    f"exclusion p={lo!r} <= p={hi!r}",
                    f"side=exclusion/p={lo!r}/test_acc",
                    f"side=exclusion/p={hi!r}/test_acc",
                    "<=",
                    metrics,
                )
            )
    elif cfg.kind == "weight-variant":
        out.append(_compare("kd <= wsl", "variant=kd/test_acc", "variant=wsl/test_acc", "<=", metrics))
        out.append(_compare("kd <= sigmoid-wsl", "variant=kd/test_acc", "variant=sigmoid-wsl/test_acc", "<=", metrics))
    elif cfg.kind == "biasvar":
        for m in cfg.option("modes"):
            if m == "ce":
                continue
            out.append(_compare(f"variance {m} <= ce", f"mode={m}/variance", "mode=ce/variance", "<=", metrics))
            gap = f"mode={m}/bias_gap_vs_ce"
            values = metrics[gap]["values"]
            out.append(
                {
                    "claim": f"bias gap {m} >= 0",
                    "left": gap,
                    "relation": ">=",
                    "right": 0.0,
                    "mean_left": metrics[gap]["mean"],
                    "mean_right": 0.0,
                    "mean_holds": bool(metrics[gap]["mean"] is not None and metrics[gap]["mean"] >= 0),
                    "seeds_holding": sum(1 for v in values if v is not None and v >= 0),
                    "seeds_total": len(values),
                }
            )
    return out


def _table(cfg: ExperimentConfig, metrics: dict, per_repeat: list) -> list | None:
    if cfg.kind == "alpha-sweep":
        rows = []
        for i, a in enumerate(cfg.option("alphas")):
            s = metrics[f"row={i}/alpha={a!r}/test_acc"]
            rows.append({"alpha": a, "mean_test_acc": s["mean"], "std": s["std"]})
        return rows
    if cfg.kind == "intermediate":
        rows = []
        for side in ("exclusion", "inclusion"):
            for p in cfg.option("probs"):
                s = metrics[f"side={side}/p={p!r}/test_acc"]
                rows.append({"side": side, "p": p, "mean_test_acc": s["mean"], "std": s["std"]})
        return rows
    if cfg.kind == "resemblance":
        k = int(round(math.sqrt(sum(1 for n in metrics if n.startswith("m[")))))
        mean = [[metrics[f"m[{i}][{j}]"]["mean"] for j in range(k)] for i in range(k)]
        return mean
    return None


def _alpha_interior(cfg: ExperimentConfig, per_repeat: list) -> dict:
    alphas = cfg.option("alphas")
    interior = 0
    best = []
    for m in per_repeat:
        accs = [m[f"row={i}/alpha={a!r}/test_acc"] for i, a in enumerate(alphas)]
        top = max(accs)
        # ties resolve to the smallest alpha
        b = min(a for a, acc in zip(alphas, accs) if acc == top)
        best.append(b)
        interior += int(min(alphas) < b < max(alphas))
    return {"best_alpha_per_seed": best, "seeds_interior": interior, "seeds_total": len(per_repeat)}


def aggregate(cfg: ExperimentConfig, texts: dict, failed: dict) -> dict:
    """Aggregate repeat CSV bodies ``{r: text}`` into the report document."""
    order = sorted(texts)
    per_repeat = [csv_metrics(cfg.kind, texts[r]) for r in order]
    names = list(per_repeat[0]) if per_repeat else []
    metrics = {n: _stats([m[n] for m in per_repeat]) for n in names}
    doc = {
        "kind": cfg.kind,
        "meta_seed": cfg.meta_seed,
        "repeats": cfg.repeats,
        "succeeded": order,
        "failed": {str(r): msg for r, msg in sorted(failed.items())},
        "seeds": {str(r): repeat_seeds(cfg.meta_seed, r) for r in range(cfg.repeats)},
        "student": cfg.student.to_dict(),
        "teacher": cfg.teacher.to_dict(),
        "options": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.options.items()},
        "kd_combination": "L_ce + coef * L_distill",
        "metrics": metrics,
        "comparisons": _comparisons(cfg, metrics) if per_repeat else [],
    }
    table = _table(cfg, metrics, per_repeat) if per_repeat else None
    if table is not None:
        doc["table"] = table
    if cfg.kind == "alpha-sweep" and per_repeat:
        doc["alpha_optimum"] = _alpha_interior(cfg, per_repeat)
    if cfg.kind == "resemblance" and per_repeat:
        empty = sorted({j for r in order for j in parse_resemblance_csv(texts[r]).empty_classes})
        doc["empty_classes"] = empty
    return doc


@dataclass
class ExperimentResult:
    run_dir: Path
    aggregate: dict

    @property
    def aggregate_path(self) -> Path:
        return self.run_dir / "aggregate.json"


def run(cfg: ExperimentConfig) -> ExperimentResult:
    """Execute all repeats, then write the aggregate from the CSVs on disk.

    Raises ``DivergenceError`` if no repeat succeeded; the aggregate is
    written regardless.
    """
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, r) for r in range(cfg.repeats)]
    if cfg.workers > 1 and cfg.repeats > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, cfg.repeats)) as pool:
            results = list(pool.map(_repeat_job, jobs))
    else:
        results = [_repeat_job(j) for j in jobs]
    failed = {r: msg for r, msg in results if msg is not None}
    texts = {r: repeat_path(cfg, r).read_text() for r, msg in results if msg is None}
    doc = aggregate(cfg, texts, failed)
    result = ExperimentResult(cfg.run_dir, doc)
    result.aggregate_path.write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n")
    if not texts:
        raise DivergenceError(-1, "every repeat diverged")
    return result


def sweep_alpha(base: ExperimentConfig, alphas) -> list:
    """Run an alpha sweep and return rows ``(alpha, mean acc, std)``."""
    cfg = base.override(kind="alpha-sweep", alphas=_float_list(list(alphas), "alphas"))
    _check_kind(cfg)
    return [(r["alpha"], r["mean_test_acc"], r["std"]) for r in run(cfg).aggregate["table"]]


def intermediate(base: ExperimentConfig, probs) -> dict:
    """Run both policy sides; returns ``{"exclusion": rows, "inclusion": rows}``
    with rows ``(p, mean acc, std)``."""
    cfg = base.override(kind="intermediate", probs=_float_list(list(probs), "probs", 0.0, 1.0))
    table = run(cfg).aggregate["table"]
    return {
        side: [(r["p"], r["mean_test_acc"], r["std"]) for r in table if r["side"] == side]
        for side in ("exclusion", "inclusion")
    }


# ---------------------------------------------------------------- CLI


def _parse_floats(text: str, what: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ExperimentConfigError(what, f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distill-lab", description="Knowledge-distillation experiment runner.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("config", help="experiment JSON file")
        sp.add_argument("--seed", type=int, help="override the meta-seed")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("--workers", type=int, help="parallel repeats")
        return sp

    add("run", "run any experiment kind")
    add("resemblance", "export per-class gradient resemblance matrices")
    add("sweep-alpha", "sweep the distillation weight alpha").add_argument("--alphas", help="e.g. 1,2,3,4")
    add("intermediate", "partial RS / non-RS inclusion").add_argument("--probs", help="e.g. 0,0.25,0.5,0.75,1")
    add("biasvar", "bias/variance decomposition of student ensembles")
    return p


_COMMAND_KIND = {
    "run": None,
    "resemblance": "resemblance",
    "sweep-alpha": "alpha-sweep",
    "intermediate": "intermediate",
    "biasvar": "biasvar",
}


def _summary_lines(doc: dict) -> list:
    lines = [f"{doc['kind']}: {len(doc['succeeded'])}/{doc['repeats']} repeats succeeded"]
    for c in doc.get("comparisons", []):
        mark = "holds" if c["mean_holds"] else "fails"
        lines.append(f"  {c['claim']}: {mark} in the mean ({c['seeds_holding']}/{c['seeds_total']} seeds)")
    for row in doc.get("table", []) if doc["kind"] != "resemblance" else []:
        lines.append("  " + "  ".join(f"{k}={v}" for k, v in row.items()))
    return lines


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    kind = _COMMAND_KIND[args.command]
    try:
        cfg = load_config(args.config, kind)
        if args.workers is not None and args.workers < 1:
            raise ExperimentConfigError("--workers", "must be >= 1")
        if args.seed is not None and args.seed < 0:
            raise ExperimentConfigError("--seed", "must be >= 0")
        extra = {}
        if getattr(args, "alphas", None):
            extra["alphas"] = _float_list(_parse_floats(args.alphas, "--alphas"), "--alphas")
        if getattr(args, "probs", None):
            extra["probs"] = _float_list(_parse_floats(args.probs, "--probs"), "--probs", 0.0, 1.0)
        cfg = cfg.override(meta_seed=args.seed, out=args.out, workers=args.workers, **extra)
    except ExperimentConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run(cfg)
    except DivergenceError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (DatasetFormatError, DatasetConsistencyError, OSError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    for line in _summary_lines(result.aggregate):
        print(line)
    print(f"wrote {result.aggregate_path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
