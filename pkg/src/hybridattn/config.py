"""Experiment configuration: an INI file with one section per concern.

Every field has a default, so an empty file (or no file) is valid. Unknown
sections or keys are rejected so that typos do not silently fall back to a
default. ``resolved_text`` renders the full configuration back to INI.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .budget import BudgetConfig
from .distillation import LossConfig, OptimizerConfig
from .states import SyntheticConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Dims:
    d_h: int = 16
    d_phi: int = 16
    d_emb: int = 32
    layers: int = 1
    heads: int = 4


@dataclass(frozen=True)
class PartitionSettings:
    n_sink: int = 4
    n_tail: int = 16


@dataclass(frozen=True)
class TraceSettings:
    n: int = 276
    beta: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)  # cycled across heads
    queries: int = 16  # per prefill
    prefills: int = 1


@dataclass(frozen=True)
class TrainingSettings:
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tau: float = 1.0
    lambda_kl: float = 0.99
    lambda_top: float = 1.0
    lambda_fp: float = 2.0
    lambda_z: float = 4.0
    band: float = 8.0
    knee: float = 1.0


@dataclass(frozen=True)
class EvaluationSettings:
    fractions: tuple[float, ...] = (0.01, 0.03, 0.05)
    l_gen: tuple[float, ...] = (1.0,)
    b_dtype: int = 2
    fixed_k_fraction: float = 0.1  # K for the entropy-vs-error breakdown, as a share of |M|
    curve_queries: int = 10  # queries per head averaged into the mass curve


@dataclass(frozen=True)
class TradeoffSettings:
    xi_min: float = 1.0
    xi_max: float = 64.0
    n_xi: int = 25
    gamma_min: float = 1.0
    gamma_max: float = 4.0
    n_gamma: int = 31
    c: tuple[float, ...] = (1.0, 0.5, 0.25, 0.1)


@dataclass(frozen=True)
class ExperimentConfig:
    dims: Dims = field(default_factory=Dims)
    partition: PartitionSettings = field(default_factory=PartitionSettings)
    traces: TraceSettings = field(default_factory=TraceSettings)
    training: TrainingSettings = field(default_factory=TrainingSettings)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    tradeoff: TradeoffSettings = field(default_factory=TradeoffSettings)

    def validate(self) -> "ExperimentConfig":
        d, p, t, tr, ev, to = self.dims, self.partition, self.traces, self.training, self.evaluation, self.tradeoff
        if min(d.d_h, d.d_phi, d.d_emb, d.layers, d.heads) < 1:
            raise ConfigError("dims must be positive")
        if p.n_sink < 0 or p.n_tail < 0:
            raise ConfigError("n_sink and n_tail must be non-negative")
        if t.n <= p.n_sink + p.n_tail:
            raise ConfigError(f"traces.n={t.n} leaves no mid region after {p.n_sink}+{p.n_tail} anchors")
        if not t.beta or any(not b > 0 for b in t.beta):
            raise ConfigError("traces.beta must be a non-empty list of positive values")
        if min(t.queries, t.prefills) < 1:
            raise ConfigError("traces.queries and traces.prefills must be positive")
        if tr.epochs < 0 or tr.batch_size < 1 or tr.lr < 0:
            raise ConfigError("training: epochs >= 0, batch_size >= 1, lr >= 0")
        if not ev.fractions or any(not 0 < f <= 1 for f in ev.fractions):
            raise ConfigError("evaluation.fractions must lie in (0, 1]")
        if not ev.l_gen or any(not g >= 1 for g in ev.l_gen):
            raise ConfigError("evaluation.l_gen values must be >= 1")
        if ev.b_dtype < 1 or not 0 < ev.fixed_k_fraction <= 1 or ev.curve_queries < 1:
            raise ConfigError("invalid evaluation settings")
        if not (0 < to.xi_min < to.xi_max and 0 < to.gamma_min < to.gamma_max and min(to.n_xi, to.n_gamma) >= 2):
            raise ConfigError("tradeoff grid bounds must be positive and increasing with >= 2 points")
        if not to.c or any(not c > 0 for c in to.c):
            raise ConfigError("tradeoff.c values must be positive")
        try:
            self.loss_config()
            self.optimizer_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig(n=self.traces.n, d_h=self.dims.d_h, layers=self.dims.layers, heads=self.dims.heads,
                               n_queries=self.traces.queries, prefills=self.traces.prefills, beta=self.traces.beta)

    def loss_config(self) -> LossConfig:
        t = self.training
        return LossConfig(t.tau, t.lambda_kl, t.lambda_top, t.lambda_fp, t.lambda_z, t.band, t.knee)

    def optimizer_config(self) -> OptimizerConfig:
        t = self.training
        return OptimizerConfig(t.lr, t.beta1, t.beta2, t.eps, t.batch_size)

    def budget_config(self, n: int, d_h: int, d_phi: int, l_gen: float = 1) -> BudgetConfig:
        return BudgetConfig(d_h=d_h, d_phi=d_phi, n=n, n_sink=self.partition.n_sink, n_tail=self.partition.n_tail,
                            b_dtype=self.evaluation.b_dtype, l_gen=l_gen)


_SECTIONS = {f.name for f in fields(ExperimentConfig)}
RUN_SECTION = "run"  # provenance written by ``resolved_text``; ignored on load


def _parse_value(raw: str, default):
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return tuple(float(s) for s in items)
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section == RUN_SECTION:
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        current = getattr(cfg, section)
        known = {f.name for f in fields(current)}
        updates = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                updates[key] = _parse_value(raw, getattr(current, key))
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc
        cfg = replace(cfg, **{section: replace(current, **updates)})
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def resolved_text(cfg: ExperimentConfig, extra: dict[str, object] | None = None) -> str:
    """The full configuration as INI; ``extra`` goes into a trailing [run] section."""
    lines = []
    for f in fields(cfg):
        lines.append(f"[{f.name}]")
        for sf in fields(getattr(cfg, f.name)):
            lines.append(f"{sf.name} = {_format_value(getattr(getattr(cfg, f.name), sf.name))}")
        lines.append("")
    if extra:
        lines.append(f"[{RUN_SECTION}]")
        for k in sorted(extra):
            lines.append(f"{k} = {extra[k]}")
        lines.append("")
    return "\n".join(lines)
