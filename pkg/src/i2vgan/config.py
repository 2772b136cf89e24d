"""Flat ``section.key = value`` run configuration.

Files are TOML-compatible (dotted keys or ``[section]`` tables). Every key
is validated against :data:`SCHEMA`; unknown keys are rejected.
"""
from __future__ import annotations

import json
import os
from dataclasses import fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from i2vgan.losses import LossWeights
from i2vgan.networks import ModelConfig
from i2vgan.trainer import Ablation, TrainConfig

DATA_ROOT_ENV = "I2VGAN_DATA_ROOT"


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _schema() -> dict[str, tuple[type, object]]:
    schema: dict[str, tuple[type, object]] = {
        "data.root": (str, None),
        "data.subsets": (list, None),
        "output.dir": (str, "runs/i2vgan"),
        "train.learning_rate": (float, 2e-4),
        "train.beta1": (float, 0.5),
        "train.beta2": (float, 0.999),
        "train.iterations": (int, 200_000),
        "train.checkpoint_interval": (int, 10_000),
        "train.seed": (int, 0),
        "ablation.no_pcp": (bool, False),
        "ablation.no_exs": (bool, False),
        "ablation.no_ins": (bool, False),
        "ablation.no_recycle": (bool, False),
    }
    kinds = {"int": int, "float": float, "str": str, "bool": bool}
    for f in fields(ModelConfig):
        if f.name in ("seed", "adversarial_mode"):
            continue
        kind = kinds.get(str(f.type).split(" ")[0], str)
        schema[f"model.{f.name}"] = (kind, f.default)
    for f in fields(LossWeights):
        if f.name == "perceptual_layers":
            schema["loss.perceptual_layers"] = (list, None)
            continue
        kind = kinds.get(str(f.type).split(" ")[0], str)
        schema[f"loss.{f.name}"] = (kind, f.default)
    return schema


SCHEMA = _schema()

# numbered weight names accepted as aliases of the descriptive keys
ALIASES = {
    "loss.lambda1": "loss.lambda_cycle",
    "loss.lambda2": "loss.lambda_recurrent",
    "loss.lambda3": "loss.lambda_recycle",
    "loss.lambda4": "loss.lambda_external",
    "loss.lambda5": "loss.lambda_internal",
}


def _coerce(key: str, value):
    kind, _ = SCHEMA[key]
    if value is None:
        return None
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(key, f"expected a boolean, got {value!r}")
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if kind is list:
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(key, f"expected a list of strings, got {value!r}")
        return value
    if not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_value(text: str):
    """Interpret an override value as a TOML literal, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def resolve(config_path=None, overrides=(), env=None) -> dict:
    """Defaults <- config file <- ``key=value`` overrides, validated."""
    env = os.environ if env is None else env
    values = {k: default for k, (_, default) in SCHEMA.items()}
    if env.get(DATA_ROOT_ENV):
        values["data.root"] = env[DATA_ROOT_ENV]
    raw = {}
    if config_path is not None:
        try:
            raw.update(_flatten(tomllib.loads(Path(config_path).read_text())))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(config_path), f"not a valid config file: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, text = item.split("=", 1)
        raw[key.strip()] = parse_value(text.strip())
    for key, value in raw.items():
        key = ALIASES.get(key, key)
        if key not in SCHEMA:
            raise ConfigError(key, "unknown configuration key")
        values[key] = _coerce(key, value)
    return values


def dump(values: dict) -> str:
    """Render resolved values back into a loadable config file (``None`` keys omitted)."""
    lines = []
    for key in sorted(values):
        v = values[key]
        if v is None:
            continue
        if isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, (int, float)):
            text = repr(v)
        else:
            text = json.dumps(v)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def to_train_config(values: dict) -> TrainConfig:
    model_kw = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("model.")}
    loss_kw = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("loss.")}
    if loss_kw.get("perceptual_layers") is not None:
        loss_kw["perceptual_layers"] = tuple(loss_kw["perceptual_layers"])
    try:
        weights = LossWeights(**loss_kw)
        model = ModelConfig(**model_kw)
        return TrainConfig(
            weights=weights,
            model=model,
            learning_rate=values["train.learning_rate"],
            beta1=values["train.beta1"],
            beta2=values["train.beta2"],
            total_iterations=values["train.iterations"],
            checkpoint_interval=values["train.checkpoint_interval"],
            seed=values["train.seed"],
            ablation=Ablation(values["ablation.no_pcp"], values["ablation.no_exs"],
                              values["ablation.no_ins"], values["ablation.no_recycle"]),
            subsets=tuple(values["data.subsets"]) if values["data.subsets"] else None,
        )
    except ValueError as exc:
        raise ConfigError("config", str(exc)) from exc
