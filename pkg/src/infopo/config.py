"""Run configuration: flat dotted key=value files, validated against a schema.

The format is deliberately diff-friendly: one ``section.key = value`` per
line, ``#`` comments. Every key is declared below with a type and default;
unknown keys are rejected before any work starts. A manifest written by a
previous run can be used as a config (its embedded config snapshot is
replayed verbatim).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .advantage import AblationMode, GateConfig
from .core import Vocab
from .env import HiddenIntentTask, binary_table
from .infogain import MaskSpec
from .rollout import RolloutConfig
from .trainer import TrainerConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class ConfigKey:
    name: str
    kind: str  # int | float | bool | str | opt_int
    default: object
    choices: tuple[str, ...] | None = None


SCHEMA: tuple[ConfigKey, ...] = (
    ConfigKey("seed", "int", 0),
    ConfigKey("output_dir", "str", "out"),
    ConfigKey("env.M", "int", 8),
    ConfigKey("env.K", "int", 3),
    ConfigKey("env.noise", "float", 0.0),
    ConfigKey("env.horizon", "int", 6),
    ConfigKey("env.table", "str", "binary"),
    ConfigKey("rollout.group_size", "int", 5),
    ConfigKey("rollout.horizon", "opt_int", None),
    ConfigKey("rollout.seed", "opt_int", None),
    ConfigKey("group.shared_intent", "bool", False),
    ConfigKey("policy.init_scale", "float", 0.5),
    ConfigKey("policy.query_bias", "float", 0.0),
    ConfigKey("infogain.mask", "str", "fixed", ("default", "alt", "random", "fixed")),
    ConfigKey("infogain.mode", "str", "placeholder", ("placeholder", "marginal")),
    ConfigKey("advantage.beta", "float", 0.5),
    ConfigKey("advantage.gate_temperature", "float", 0.5),
    ConfigKey("advantage.epsilon", "float", 1e-6),
    ConfigKey(
        "advantage.ablation", "str", "none", ("none", "no_gate", "no_std", "no_ext")
    ),
    ConfigKey("trainer.clip_eps", "float", 0.2),
    ConfigKey("trainer.kl_coef", "float", 0.001),
    ConfigKey("trainer.learning_rate", "float", 1.0),
    ConfigKey("trainer.iterations", "int", 300),
    ConfigKey("trainer.inner_epochs", "int", 1),
    ConfigKey("trainer.num_groups", "int", 1),
    ConfigKey("trainer.eval_every", "int", 10),
    ConfigKey("trainer.eval_episodes", "int", 64),
    ConfigKey("trainer.checkpoint_every", "int", 0),
    ConfigKey("diagnostics.heatmap_buckets", "int", 10),
    ConfigKey("diagnostics.initial_phase_fraction", "float", 0.2),
    ConfigKey("diagnostics.mask_turns", "int", 200),
    ConfigKey("theory.n_policies_mi", "int", 20),
    ConfigKey("theory.n_random", "int", 200),
    ConfigKey("theory.tol_mi", "float", 1e-10),
    ConfigKey("theory.slack_fano", "float", 1e-9),
)

_BY_NAME = {k.name: k for k in SCHEMA}


def _coerce(key: ConfigKey, raw: object) -> object:
    if key.kind == "opt_int":
        if raw is None or (isinstance(raw, str) and raw.lower() in ("none", "")):
            return None
        return int(raw)
    if key.kind == "int":
        if isinstance(raw, bool):
            raise ConfigError(f"{key.name}: expected an integer")
        return int(raw)
    if key.kind == "float":
        return float(raw)
    if key.kind == "bool":
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("true", "1", "yes"):
            return True
        if text in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key.name}: expected a boolean, got {raw!r}")
    value = str(raw)
    if key.choices and value not in key.choices:
        raise ConfigError(
            f"{key.name}: {value!r} is not one of {', '.join(key.choices)}"
        )
    return value


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, name: str):
        return self.values[name]

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        unknown = sorted(set(mapping) - set(_BY_NAME))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for key in SCHEMA:
            raw = mapping.get(key.name, key.default)
            try:
                values[key.name] = _coerce(key, raw)
            except (TypeError, ValueError) as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"{key.name}: cannot parse {raw!r}") from exc
        cfg = cls(values=values)
        cfg._validate()
        return cfg

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls.from_mapping({})

    def _validate(self) -> None:
        v = self.values
        if v["env.M"] < 2:
            raise ConfigError("env.M: need at least 2 intents")
        if v["env.K"] < 1:
            raise ConfigError("env.K: need at least 1 attribute")
        if not 0.0 <= v["env.noise"] < 0.5:
            raise ConfigError("env.noise: must lie in [0, 0.5)")
        if v["env.table"] != "binary":
            rows = v["env.table"].split("|")
            if len(rows) != v["env.M"]:
                raise ConfigError(
                    f"env.table: expected {v['env.M']} rows, got {len(rows)}"
                )
            if any(len(r) != v["env.K"] or set(r) - {"0", "1"} for r in rows):
                raise ConfigError("env.table: rows must be env.K chars of 0/1")
        if v["rollout.horizon"] is not None and v["rollout.horizon"] > v["env.horizon"]:
            raise ConfigError("rollout.horizon: cannot exceed env.horizon")
        if v["advantage.beta"] < 0:
            raise ConfigError("advantage.beta: must be nonnegative")
        if v["advantage.gate_temperature"] <= 0:
            raise ConfigError("advantage.gate_temperature: must be positive")
        if v["advantage.epsilon"] <= 0:
            raise ConfigError("advantage.epsilon: must be positive")

    def with_overrides(self, overrides: dict) -> "RunConfig":
        merged = dict(self.values)
        merged.update(overrides)
        return RunConfig.from_mapping(merged)

    # --- typed builders -------------------------------------------------

    def task(self) -> HiddenIntentTask:
        v = self.values
        if v["env.table"] == "binary":
            table = binary_table(v["env.M"], v["env.K"])
        else:
            table = tuple(tuple(int(c) for c in row) for row in v["env.table"].split("|"))
        return HiddenIntentTask(
            n_intents=v["env.M"],
            n_attributes=v["env.K"],
            attribute_table=table,
            noise=v["env.noise"],
            horizon=v["env.horizon"],
        )

    def vocab(self) -> Vocab:
        return Vocab(n_intents=self.values["env.M"], n_attributes=self.values["env.K"])

    def rollout_config(self) -> RolloutConfig:
        v = self.values
        seed = v["rollout.seed"] if v["rollout.seed"] is not None else v["seed"]
        return RolloutConfig(
            group_size=v["rollout.group_size"],
            horizon=v["rollout.horizon"],
            seed=seed,
            shared_intent=v["group.shared_intent"],
        )

    def trainer_config(self) -> TrainerConfig:
        v = self.values
        return TrainerConfig(
            clip_eps=v["trainer.clip_eps"],
            kl_coef=v["trainer.kl_coef"],
            learning_rate=v["trainer.learning_rate"],
            iterations=v["trainer.iterations"],
            inner_epochs=v["trainer.inner_epochs"],
            num_groups=v["trainer.num_groups"],
            eval_every=v["trainer.eval_every"],
            eval_episodes=v["trainer.eval_episodes"],
            seed=v["seed"],
        )

    def gate_config(self) -> GateConfig:
        return GateConfig(
            temperature=self.values["advantage.gate_temperature"],
            beta=self.values["advantage.beta"],
        )

    def ablation(self) -> AblationMode:
        return AblationMode(self.values["advantage.ablation"])

    def mask_spec(self) -> MaskSpec:
        return MaskSpec.from_name(
            self.values["infogain.mask"], self.vocab(), seed=self.values["seed"]
        )


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into a raw mapping (strings untyped)."""
    mapping: dict[str, str] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, _, value = line.partition("=")
        mapping[key.strip()] = value.strip()
    return mapping


def load_config(
    path: str | Path | None, overrides: dict | None = None
) -> RunConfig:
    """Load a config file (key=value text or a manifest.json) plus overrides."""
    mapping: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        if path.suffix == ".json":
            payload = json.loads(path.read_text())
            if "config" not in payload:
                raise ConfigError(f"{path}: manifest has no 'config' snapshot")
            mapping = dict(payload["config"])
        else:
            mapping = parse_config_text(path.read_text())
    if overrides:
        mapping.update(overrides)
    return RunConfig.from_mapping(mapping)
