"""Experiment configuration files and run records."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .env import EnvDistribution, EnvironmentError_

EXPERIMENTS = ("einstein", "regen", "kalikow", "harnack", "ballistic", "couple", "girsanov")
CSV_COLUMNS = ("experiment", "name", "lambda", "value", "stderr", "n", "censoring", "lo", "hi")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    dist: dict | None = None
    lambdas: list = field(default_factory=list)
    replicas: int = 30
    horizon: int = 100_000
    seed: int = 0
    lateral_period: int | None = None
    betas: list = field(default_factory=lambda: [0.5, 0.4, 0.3, 0.2, 0.1, 0.05])
    W: int = 10
    n_levels: int = 100
    params: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict, experiment: str | None = None) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        known = set(cls.__dataclass_fields__)
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        raw = dict(raw)
        exp = raw.setdefault("experiment", experiment)
        if experiment is not None and exp != experiment:
            raise ConfigError(f"config is for {exp!r}, not {experiment!r}")
        try:
            cfg = cls(**raw)
        except TypeError as err:
            raise ConfigError(str(err)) from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, experiment: str | None = None) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"malformed config: {err}") from None
        return cls.from_dict(raw, experiment)

    def distribution(self) -> EnvDistribution | None:
        if self.dist is None:
            return None
        try:
            return EnvDistribution.from_dict(self.dist)
        except (EnvironmentError_, KeyError, ValueError, TypeError) as err:
            raise ConfigError(f"bad distribution: {err}") from None

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        for name in ("replicas", "horizon", "W", "n_levels"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if not isinstance(self.lambdas, list) or not all(isinstance(x, (int, float)) for x in self.lambdas):
            raise ConfigError("lambdas must be a list of numbers")
        if not isinstance(self.params, dict):
            raise ConfigError("params must be a mapping")
        dist = self.distribution()
        if dist is None and self.experiment not in ("harnack", "girsanov"):
            raise ConfigError(f"{self.experiment} needs a distribution")
        if dist is not None:
            for lam in self.lambdas:
                if not (0 <= lam < dist.kappa / 2) or not math.isfinite(lam):
                    raise ConfigError(f"lambda {lam} outside [0, kappa/2) = [0, {dist.kappa / 2})")
        if self.lateral_period is not None and self.lateral_period < 3:
            raise ConfigError("lateral_period must be >= 3")
        if any(not 0 <= b < 1 for b in self.betas):
            raise ConfigError("beta candidates must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Row:
    experiment: str
    name: str
    lam: float | None
    value: float
    stderr: float
    n: int
    censoring: float = 0.0

    @property
    def lo(self) -> float:
        return self.value - 3 * self.stderr

    @property
    def hi(self) -> float:
        return self.value + 3 * self.stderr

    def cells(self) -> list:
        lam = "" if self.lam is None else repr(float(self.lam))
        return [self.experiment, self.name, lam, repr(float(self.value)), repr(float(self.stderr)),
                str(int(self.n)), repr(float(self.censoring)), repr(float(self.lo)), repr(float(self.hi))]


@dataclass
class ExperimentRun:
    config: ExperimentConfig
    rows: list = field(default_factory=list)
    report: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)

    def add(self, name: str, est, lam: float | None = None) -> None:
        """Append an estimate (anything with ``value``, ``stderr``, ``n``)."""
        self.rows.append(Row(self.config.experiment, name, lam, float(est.value), float(est.stderr),
                             int(est.n), float(getattr(est, "censoring", 0.0))))

    def add_exact(self, name: str, value: float, n: int = 1, lam: float | None = None) -> None:
        self.rows.append(Row(self.config.experiment, name, lam, float(value), 0.0, n))

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def results_csv(self) -> str:
        return _csv(CSV_COLUMNS, [r.cells() for r in self.rows])

    def report_json(self) -> str:
        body = {
            "experiment": self.config.experiment,
            "config_hash": self.config.digest(),
            "seed": self.config.seed,
            "checks": self.checks,
            "report": self.report,
        }
        return json.dumps(_plain(body), sort_keys=True, indent=2) + "\n"

    def write(self, out: Path) -> list:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        files = {"results.csv": self.results_csv(), "report.json": self.report_json()}
        for name, (header, rows) in self.tables.items():
            files[name] = _csv(header, [[_cell(v) for v in r] for r in rows])
        written = []
        for name, text in files.items():
            (out / name).write_text(text)
            written.append(out / name)
        return written


def _cell(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "item"):
        return _cell(v.item())
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _plain(x):
    """Convert numpy scalars/arrays and non-finite floats for JSON."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if hasattr(x, "tolist"):
        return _plain(x.tolist())
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x
