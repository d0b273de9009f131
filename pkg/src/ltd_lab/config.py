"""TOML config schema with strict validation.

Unknown keys are fatal: a typo in a schedule field would otherwise
silently change every saving number downstream.  See README for the
documented schema; `ltd-lab <cmd> --config file.toml` plus the
--seed/--iters/--method/--out-dir overrides is the whole surface.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .budget import DecayShape, LRAxis, LRConfig
from .corpus import CorpusKind
from .model import BypassConfig, BypassMetric, TransformerConfig
from .schedule import DropSchedule, ScheduleMode
from .trainer import Method, OptimizerConfig, TrainConfig


class ConfigError(ValueError):
    pass


_SECTION_KEYS = {
    "schedule": {"s", "b0", "s_dec", "t_full", "mode", "exempt_layers",
                 "keep_special", "seed"},
    "model": {"l", "d", "heads", "s", "vocab", "causal", "dropout_rate",
              "seed"},
    "lr": {"lr_max", "lr_min", "t_warmup", "decay", "axis"},
    "train": {"method", "batch_size", "total_iters", "eval_every", "seed",
              "corpus", "corpus_size", "val_size", "betas", "eps",
              "weight_decay", "grad_clip"},
    "bypass": {"start_layer", "end_layer", "keep_fraction", "metric",
               "ema_decay", "keep_highest_loss"},
    "experiment": {"seeds", "methods", "keep_fraction", "dropout_rate"},
}


def _check_keys(section: str, table: dict):
    unknown = set(table) - _SECTION_KEYS[section]
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: "
                          f"{', '.join(sorted(unknown))}")


def _require(table: dict, section: str, key: str):
    if key not in table:
        raise ConfigError(f"missing required key {key} in [{section}]")
    return table[key]


def _enum(cls, value, what: str):
    try:
        return cls(value)
    except ValueError:
        options = ", ".join(m.value for m in cls)
        raise ConfigError(f"{what} must be one of: {options} "
                          f"(got {value!r})") from None


@dataclass
class LabConfig:
    """Parsed, validated config file; builders assemble typed configs."""

    raw: dict
    path: str = "<memory>"
    seed_override: int | None = None
    iters_override: int | None = None
    method_override: str | None = None

    def __post_init__(self):
        unknown = set(self.raw) - set(_SECTION_KEYS)
        if unknown:
            raise ConfigError(f"unknown section(s): "
                              f"{', '.join(sorted(unknown))}")
        for name, table in self.raw.items():
            if not isinstance(table, dict):
                raise ConfigError(f"[{name}] must be a table")
            _check_keys(name, table)

    # -- section accessors ---------------------------------------------------

    def _section(self, name: str, required=True) -> dict:
        if name not in self.raw:
            if required:
                raise ConfigError(f"missing [{name}] section in {self.path}")
            return {}
        return self.raw[name]

    @property
    def seed(self) -> int:
        if self.seed_override is not None:
            return self.seed_override
        return int(self._section("train", required=False).get("seed", 1))

    @property
    def total_iters(self) -> int:
        if self.iters_override is not None:
            return self.iters_override
        t = self._section("train", required=False).get("total_iters")
        if t is None:
            raise ConfigError("total iterations unspecified: add "
                              "[train].total_iters or pass --iters")
        return int(t)

    @property
    def num_layers(self) -> int:
        return int(_require(self._section("model"), "model", "l"))

    def schedule(self) -> DropSchedule:
        t = self._section("schedule")
        exempt = t.get("exempt_layers")
        if exempt is None:
            exempt = [0, self.num_layers - 1]
        return DropSchedule(
            s=int(_require(t, "schedule", "s")),
            b0=int(_require(t, "schedule", "b0")),
            s_dec=int(t.get("s_dec", 1)),
            t_full=int(t.get("t_full", 1)),
            mode=_enum(ScheduleMode, t.get("mode", "mslg"), "schedule.mode"),
            exempt_layers=frozenset(int(i) for i in exempt),
            keep_special=bool(t.get("keep_special", False)),
            seed=int(t.get("seed", self.seed)),
        )

    def model(self, vocab: int | None = None) -> TransformerConfig:
        t = self._section("model")
        vocab_cfg = int(t.get("vocab", 0))
        if vocab is None:
            vocab = vocab_cfg if vocab_cfg else 2
        return TransformerConfig(
            l=int(_require(t, "model", "l")),
            d=int(_require(t, "model", "d")),
            heads=int(_require(t, "model", "heads")),
            s=int(_require(t, "model", "s")),
            vocab=vocab,
            causal=bool(t.get("causal", True)),
            dropout_rate=float(t.get("dropout_rate", 0.0)),
            seed=int(t.get("seed", self.seed)),
        )

    def lr(self) -> LRConfig:
        t = self._section("lr")
        return LRConfig(
            lr_max=float(_require(t, "lr", "lr_max")),
            lr_min=float(t.get("lr_min", 0.0)),
            T=self.total_iters,
            T_warmup=int(t.get("t_warmup", 0)),
            decay=_enum(DecayShape, t.get("decay", "cosine"), "lr.decay"),
            axis=_enum(LRAxis, t.get("axis", "iteration"), "lr.axis"),
        )

    def bypass(self) -> BypassConfig | None:
        t = self._section("bypass", required=False)
        if not t:
            return None
        return BypassConfig(
            start_layer=int(_require(t, "bypass", "start_layer")),
            end_layer=int(_require(t, "bypass", "end_layer")),
            keep_fraction=float(_require(t, "bypass", "keep_fraction")),
            metric=_enum(BypassMetric, t.get("metric", "loss_ema"),
                         "bypass.metric"),
            ema_decay=float(t.get("ema_decay", 0.9)),
            keep_highest_loss=bool(t.get("keep_highest_loss", True)),
        )

    def train(self) -> TrainConfig:
        t = self._section("train")
        method = self.method_override or t.get("method")
        if method is None:
            raise ConfigError("missing required key method in [train]")
        total = self.total_iters
        return TrainConfig(
            model=self.model(),
            sched=self.schedule(),
            lr=self.lr(),
            method=_enum(Method, method, "train.method"),
            batch_size=int(t.get("batch_size", 16)),
            total_iters=total,
            eval_every=int(t.get("eval_every", max(1, total // 10))),
            seed=self.seed,
            optim=OptimizerConfig(
                betas=tuple(float(b) for b in t.get("betas", (0.9, 0.95))),
                eps=float(t.get("eps", 1e-8)),
                weight_decay=float(t.get("weight_decay", 0.01)),
                grad_clip=float(t.get("grad_clip", 1.0)),
            ),
            bypass=self.bypass(),
            corpus_kind=_enum(CorpusKind, t.get("corpus", "char"),
                              "train.corpus"),
            corpus_size=int(t.get("corpus_size", 120_000)),
            val_size=int(t.get("val_size", 8_192)),
        )

    def experiment(self) -> dict:
        t = dict(self._section("experiment", required=False))
        t.setdefault("seeds", [1, 2, 3])
        return t


def load_config(path, *, seed=None, iters=None, method=None) -> LabConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}") from None
    return LabConfig(raw=raw, path=str(path), seed_override=seed,
                     iters_override=iters, method_override=method)
