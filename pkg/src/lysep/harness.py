"""Experiment orchestration: run configs, CSV logs, multi-seed benches and
report tables.

A run is described by a :class:`RunConfig`. :func:`run` trains one seed
and streams its log rows to CSV; :func:`bench` repeats a config over seeds
and reduces the final rows to mean and sample standard deviation;
:func:`report` prints summaries as a plain-text table grouped by
architecture, one row per model.
"""

import csv
import dataclasses
import hashlib
import json
import math
import os
import typing
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional

import numpy as np

from . import datasets
from .activations import get_activation
from .cnn import gd_train_cnn, init_cnn, make_arch
from .fnn import GdConfig, gd_train_fnn, init_fnn
from .lysep_cnn import LySepCnnConfig, train_lysep_cnn
from .lysep_fnn import LySepConfig, init_aux, train_lysep_fnn
from .metrics import CSV_HEADER, NumericalAbort
from .rng import STREAM_INIT, make_rng

MODELS = ("ce-fnn", "lysep-fnn", "ce-cnn", "lysep-cnn")
DATASETS = ("circle", "allen-cahn", "mnist")
MODEL_NAMES = {"ce-fnn": "CE-FNN", "lysep-fnn": "LySep-FNN", "ce-cnn": "CE-CNN", "lysep-cnn": "LySep-CNN"}

# Gradient-descent step sizes used when a baseline config leaves ``lr`` unset.
DEFAULT_LR = {"ce-fnn": 0.5, "ce-cnn": 0.5}

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class ConfigError(ValueError):
    """Invalid run configuration; ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class RunConfig:
    model: str = "lysep-fnn"
    dataset: str = "circle"
    # fully connected nets: L layers of width M
    depth: int = 3
    width: int = 10
    # CNNs: L1 conv-pool layers with C channels, L2 dense layers
    n_conv: int = 2
    n_fc: int = 2
    channels: int = 4
    fc_width: int = 50
    activation: str = "tanh"
    iters: int = 10000
    log_every: int = 10
    seed: int = 0
    # baselines
    lr: Optional[float] = None
    # layer-separated training
    tau0: float = 1.0
    eta: float = 0.5
    max_shrinks: int = 30
    tau_mode: str = "reset"
    omega_mode: str = "per-update"
    check_monotone: bool = False
    # mini-batching (CNN models)
    batch: Optional[int] = None
    refresh: int = 200
    # data
    data_seed: int = 0
    n_train: int = 3000
    n_test: int = 1000
    ac_time: float = 0.0
    ac_grid: int = 256
    mnist_dir: str = ""
    mnist_subset: Optional[int] = None
    data_cache: str = ""
    eval_test: bool = True

    @property
    def is_cnn(self):
        return self.model.endswith("cnn")

    @property
    def is_lysep(self):
        return self.model.startswith("lysep")

    def effective_lr(self):
        return DEFAULT_LR.get(self.model) if self.lr is None else self.lr

    def errors(self):
        errs = []
        if self.model not in MODELS:
            errs.append(f"model must be one of {', '.join(MODELS)} (got {self.model!r})")
        if self.dataset not in DATASETS:
            errs.append(f"dataset must be one of {', '.join(DATASETS)} (got {self.dataset!r})")
        try:
            get_activation(self.activation)
        except ValueError as exc:
            errs.append(str(exc))
        positive = ["iters", "width", "channels", "fc_width", "refresh", "n_train", "n_test", "ac_grid"]
        for name in positive:
            if getattr(self, name) < 1:
                errs.append(f"{name} must be positive")
        if self.depth < 2:
            errs.append("depth must be at least 2")
        if self.n_conv < 1:
            errs.append("n_conv must be at least 1")
        if self.n_fc < 2:
            errs.append("n_fc must be at least 2")
        if self.log_every < 0:
            errs.append("log_every must be nonnegative")
        if self.batch is not None and self.batch < 1:
            errs.append("batch must be positive")
        if self.mnist_subset is not None and self.mnist_subset < 1:
            errs.append("mnist_subset must be positive")
        if self.model in DEFAULT_LR and not (self.effective_lr() or 0) > 0:
            errs.append("lr must be positive for gradient-descent baselines")
        if self.tau0 <= 0 or not 0 < self.eta < 1 or self.max_shrinks < 0:
            errs.append("need tau0 > 0, 0 < eta < 1 and max_shrinks >= 0")
        if self.tau_mode not in ("reset", "carry"):
            errs.append("tau_mode must be reset or carry")
        if self.omega_mode not in ("per-update", "per-iteration"):
            errs.append("omega_mode must be per-update or per-iteration")
        if self.model in MODELS and self.is_cnn and self.dataset != "mnist" and not self.data_cache:
            errs.append("CNN models need image inputs (dataset mnist)")
        if self.dataset == "allen-cahn" and self.ac_time not in datasets.AC_TIMES:
            errs.append(f"ac_time must be one of {datasets.AC_TIMES}")
        if self.dataset == "mnist" and not self.data_cache and not self.mnist_dir:
            errs.append("mnist_dir is required for the mnist dataset")
        if self.batch is not None and self.model in MODELS and not self.is_cnn:
            errs.append("batch applies to CNN models only")
        return errs

    def validate(self):
        errs = self.errors()
        if errs:
            raise ConfigError(errs)
        return self

    def config_hash(self):
        """Digest of every setting except the seed."""
        d = dataclasses.asdict(self)
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def arch_label(self):
        if self.is_cnn:
            return f"(L1,C)=({self.n_conv},{self.channels})"
        return f"(L,M)=({self.depth},{self.width})"

    def group_label(self):
        label = self.arch_label()
        if self.dataset == "allen-cahn":
            label += f" t={self.ac_time:g}"
        return label


# -- config parsing ---------------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_TYPES = typing.get_type_hints(RunConfig)


def _convert(name, text):
    kind = _TYPES[name]
    optional = typing.get_origin(kind) is typing.Union
    if optional:
        kind = next(t for t in typing.get_args(kind) if t is not type(None))
        if isinstance(text, str) and text.strip().lower() in ("", "none"):
            return None
    if not isinstance(text, str):
        return text
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def config_from_mapping(values):
    """Build a config from ``{key: value}``; keys may use ``-`` or ``_``."""
    kwargs, errs = {}, []
    for key, value in values.items():
        name = key.strip().replace("-", "_")
        if name not in _FIELDS:
            errs.append(f"unknown setting {key!r}")
            continue
        try:
            kwargs[name] = _convert(name, value)
        except ValueError as exc:
            errs.append(f"{name}: {exc}")
    if errs:
        raise ConfigError(errs)
    return RunConfig(**kwargs)


def read_config_file(path):
    """``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    values, errs = {}, []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                errs.append(f"{path}:{lineno}: expected key = value")
                continue
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    if errs:
        raise ConfigError(errs)
    return values


def write_config_file(path, cfg):
    with open(path, "w") as fh:
        for name, value in dataclasses.asdict(cfg).items():
            fh.write(f"{name} = {'' if value is None else value}\n")


# -- data ----------------------------------------------------------------------------


@lru_cache(maxsize=4)
def _ac_field(n_grid):
    return datasets.ac_solve(n_grid=n_grid)


@lru_cache(maxsize=2)
def _mnist(directory, split):
    prefix = "train" if split == "train" else "t10k"
    return datasets.load_mnist(
        os.path.join(directory, f"{prefix}-images-idx3-ubyte"),
        os.path.join(directory, f"{prefix}-labels-idx1-ubyte"),
    )


def load_data(cfg):
    """``(train, test)`` for a config; ``test`` may be None."""
    if cfg.data_cache:
        return datasets.load_dataset(cfg.data_cache), None
    if cfg.dataset == "circle":
        return datasets.gen_circle(cfg.n_train, cfg.n_test, cfg.data_seed)
    if cfg.dataset == "allen-cahn":
        return datasets.ac_label(_ac_field(cfg.ac_grid), cfg.ac_time, cfg.n_train, cfg.n_test, cfg.data_seed)
    train = _mnist(cfg.mnist_dir, "train")
    if cfg.mnist_subset is not None:
        train = datasets.subsample(train, cfg.mnist_subset, cfg.data_seed)
    test = None
    if os.path.exists(os.path.join(cfg.mnist_dir, "t10k-images-idx3-ubyte")):
        test = _mnist(cfg.mnist_dir, "test")
    return train, test


# -- single runs -----------------------------------------------------------------------


@dataclass
class RunResult:
    config: RunConfig
    logs: list
    csv_path: Optional[str] = None
    # iterations at which the logged surrogate rose (lysep runs)
    monotone_violations: List[int] = field(default_factory=list)

    @property
    def final(self):
        return self.logs[-1]


def surrogate_violations(logs, slack=1e-10):
    """Logged iterations whose surrogate exceeds the previous row on the same subset."""
    bad = []
    for prev, cur in zip(logs, logs[1:]):
        if prev.surrogate_loss is None or cur.surrogate_loss is None or prev.batch_index != cur.batch_index:
            continue
        if cur.surrogate_loss > prev.surrogate_loss * (1.0 + slack):
            bad.append(cur.iter)
    return bad


class CsvLog:
    """Writes the header at once and flushes every row."""

    def __init__(self, path):
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(CSV_HEADER)
        self.fh.flush()

    def __call__(self, rec):
        self.writer.writerow(rec.csv_fields())
        self.fh.flush()

    def close(self):
        self.fh.close()


def run(cfg, csv_path=None, data=None, on_record=None):
    """Train one seed. Raises :class:`ConfigError` before any compute and
    :class:`NumericalAbort` on a non-finite value (rows logged so far stay in
    the CSV)."""
    cfg.validate()
    train, test = data if data is not None else load_data(cfg)
    if not cfg.eval_test:
        test = None
    act = get_activation(cfg.activation)
    init_rng = make_rng(cfg.seed, STREAM_INIT)
    sink = CsvLog(csv_path) if csv_path else None

    def record(rec):
        if sink:
            sink(rec)
        if on_record:
            on_record(rec)

    try:
        if cfg.is_cnn:
            side = int(round(math.sqrt(train.dim)))
            if side * side != train.dim:
                raise ConfigError([f"inputs of dimension {train.dim} are not square images"])
            arch = make_arch(side, side, 1, cfg.n_conv, cfg.channels, cfg.fc_width, cfg.n_fc, train.n_classes)
            p0 = init_cnn(arch, init_rng)
            if cfg.model == "ce-cnn":
                gd = GdConfig(cfg.iters, cfg.effective_lr(), cfg.log_every, cfg.batch, cfg.refresh, cfg.seed)
                _, logs = gd_train_cnn(p0, act, train, gd, test, record)
            else:
                ly = LySepCnnConfig(
                    cfg.iters, cfg.tau0, cfg.eta, cfg.max_shrinks, cfg.log_every, cfg.omega_mode, cfg.tau_mode,
                    check_monotone=cfg.check_monotone, batch=cfg.batch, refresh=cfg.refresh, seed=cfg.seed,
                )
                _, logs = train_lysep_cnn(p0, act, train, ly, test, record)
        else:
            p0 = init_fnn(train.dim, cfg.width, train.n_classes, cfg.depth, init_rng)
            if cfg.model == "ce-fnn":
                gd = GdConfig(cfg.iters, cfg.effective_lr(), cfg.log_every, seed=cfg.seed)
                _, logs = gd_train_fnn(p0, act, train, gd, test, record)
            else:
                ly = LySepConfig(
                    cfg.iters, cfg.tau0, cfg.eta, cfg.max_shrinks, cfg.log_every, cfg.omega_mode, cfg.tau_mode,
                    check_monotone=cfg.check_monotone,
                )
                _, logs = train_lysep_fnn(init_aux(p0, act, train.x), act, train, ly, test, record)
    finally:
        if sink:
            sink.close()
    result = RunResult(cfg, logs, csv_path)
    if cfg.is_lysep:
        result.monotone_violations = surrogate_violations(logs)
        if result.monotone_violations:
            warnings.warn(f"surrogate increased at iterations {result.monotone_violations[:5]}")
    return result


# -- benches --------------------------------------------------------------------------

SUMMARY_METRICS = ("ce_loss", "train_acc", "test_acc", "surrogate_loss")


@dataclass
class RunSummary:
    config: RunConfig
    seeds: List[int]
    metrics: Dict[str, List[float]]  # name -> [mean, std]
    std_defined: bool
    config_hash: str
    failed: Dict[int, str] = field(default_factory=dict)

    def mean(self, name):
        return self.metrics[name][0]

    def std(self, name):
        return self.metrics[name][1]

    def to_json(self):
        d = dataclasses.asdict(self)
        d["failed"] = {str(k): v for k, v in self.failed.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["config"] = RunConfig(**d["config"])
        d["failed"] = {int(k): v for k, v in d.get("failed", {}).items()}
        return cls(**d)


def summarize(cfg, finals, failed=None):
    """Mean and sample (N-1) standard deviation of final rows keyed by seed."""
    seeds = sorted(finals)
    metrics = {}
    for name in SUMMARY_METRICS:
        vals = [getattr(finals[s], name) for s in seeds]
        if not vals or any(v is None for v in vals):
            continue
        vals = np.asarray(vals, dtype=np.float64)
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        metrics[name] = [float(vals.mean()), std]
    return RunSummary(cfg, seeds, metrics, len(seeds) > 1, cfg.config_hash(), dict(failed or {}))


def bench(cfg, seeds, out_dir=None, data=None, on_record=None):
    """Run ``cfg`` once per seed and summarize the final logged rows.

    Seeds must be distinct. A seed that aborts is reported in
    ``summary.failed`` with a warning and left out of the statistics.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError(["at least one seed is required"])
    dupes = sorted({s for s in seeds if seeds.count(s) > 1})
    if dupes:
        raise ConfigError([f"duplicate seeds {dupes}: repeated deterministic runs add no information"])
    cfg.validate()
    if data is None:
        data = load_data(cfg)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    finals, failed = {}, {}
    for seed in seeds:
        one = dataclasses.replace(cfg, seed=seed)
        path = os.path.join(out_dir, f"{cfg.model}_seed{seed}.csv") if out_dir else None
        try:
            finals[seed] = run(one, path, data, on_record).final
        except NumericalAbort as exc:
            failed[seed] = str(exc)
            warnings.warn(f"seed {seed} aborted: {exc}")
    if not finals:
        raise NumericalAbort("every seed aborted", {"failed": failed})
    return summarize(cfg, finals, failed)


# -- report tables ------------------------------------------------------------------------


def fmt_sci(x):
    """Three significant digits in scientific notation, e.g. ``6.75e-03``."""
    return f"{x:.2e}"


def fmt_pct(x):
    """A fraction as a percentage with two decimals, e.g. ``99.83%``."""
    return f"{100.0 * x:.2f}%"


def report(summaries):
    """Plain-text table with one block per architecture.

    Columns are the cross-entropy loss and the (training) accuracy, each as
    mean +- sample standard deviation. Rows from single-seed summaries are
    marked with ``*`` (standard deviation undefined, shown as 0).
    """
    if not summaries:
        raise ValueError("nothing to report")
    groups = {}
    for s in summaries:
        groups.setdefault(s.config.group_label(), []).append(s)
    header = ("Architecture", "Models", "Cross-entropy loss", "Accuracy")
    rows = []
    flagged = False
    for label, members in groups.items():
        for i, s in enumerate(members):
            mark = "" if s.std_defined else "*"
            flagged |= not s.std_defined
            loss = f"{fmt_sci(s.mean('ce_loss'))}±{fmt_sci(s.std('ce_loss'))}"
            acc = f"{fmt_pct(s.mean('train_acc'))}±{fmt_pct(s.std('train_acc'))}"
            rows.append((label if i == 0 else "", MODEL_NAMES.get(s.config.model, s.config.model) + mark, loss, acc))
        rows.append(None)
    rows.pop()
    widths = [max(len(header[c]), *(len(r[c]) for r in rows if r)) for c in range(4)]
    rule = "-+-".join("-" * w for w in widths)

    def line(r):
        return " | ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()

    out = [line(header), rule]
    for r in rows:
        out.append(rule if r is None else line(r))
    if flagged:
        out.append("* single seed: standard deviation undefined, shown as 0")
    return "\n".join(out) + "\n"
