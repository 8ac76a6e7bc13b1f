"""Environment registry and compliance resolution."""

from __future__ import annotations

from typing import Optional, Sequence

from ..instructions import ConfigError, InstructionClass
from .base import EnvModel
from .chain import ChainSwitchConfig, ChainSwitchEnv

ENV_NAMES = ("chain", "box_pushing", "overcooked", "warehouse")


def build_env(name: str, config: Optional[dict] = None) -> EnvModel:
    """Construct a fully wired environment with its macro set and instruction
    registry.  Unknown names or unknown config keys raise ConfigError."""
    config = dict(config or {})
    if name == "chain":
        return ChainSwitchEnv(_make_config(ChainSwitchConfig, config))
    if name == "box_pushing":
        from .box_pushing import BoxPushingConfig, BoxPushingEnv
        return BoxPushingEnv(_make_config(BoxPushingConfig, config))
    if name == "overcooked":
        from .overcooked import OvercookedConfig, OvercookedEnv
        return OvercookedEnv(_make_config(OvercookedConfig, config))
    if name == "warehouse":
        from .warehouse import WarehouseConfig, WarehouseEnv
        return WarehouseEnv(_make_config(WarehouseConfig, config))
    raise ConfigError(f"unknown environment {name!r}; expected one of {ENV_NAMES}")


def _make_config(cls, overrides: dict):
    fields = {f for f in cls.__dataclass_fields__}
    bad = sorted(set(overrides) - fields)
    if bad:
        raise ConfigError(f"unknown config keys for {cls.__name__}: {bad}")
    coerced = {}
    for k, v in overrides.items():
        coerced[k] = tuple(v) if isinstance(v, list) else v
    return cls(**coerced)


def compliance_event(env: EnvModel, instruction_class: InstructionClass,
                     events_per_step: Sequence[Sequence[str]],
                     expired: bool) -> str:
    """Resolve one activation window to followed / violated / pending."""
    pred = instruction_class.compliance
    if pred is None:
        raise ConfigError(
            f"class {instruction_class.class_id} has no compliance predicate")
    return pred.resolve(events_per_step, expired)
