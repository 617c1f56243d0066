"""Flat run configuration: documented defaults, JSON config files, and
--set key=value overrides (overrides win over file values).

Every summary a pipeline stage writes echoes the effective configuration,
and feeding that echo back reproduces the run byte-for-byte (mock
backend). All component seeds derive from the single `seed` value.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass
from typing import Mapping

from .errors import ConfigError
from .model import ToyModelSpec
from .optim import TrainConfig
from .qagen import LLMClientSpec


@dataclass
class RunConfig:
    # model topology
    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    n_classes: int = 4
    max_seq_len: int = 32
    adapter_targets: str = "attn_q,attn_v"
    init_profile: str = "adapter_friendly"
    # optimization
    learning_rate: float = 2e-4
    rank: int = 16
    alpha: float = 16.0
    batch_size: int = 2
    grad_accum_steps: int = 4
    warmup_steps: int = 5
    weight_decay: float = 0.01
    epochs: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    state_bits: int = 8
    qlora: bool = False
    block_size: int = 64
    # generation backend
    backend: str = "mock"
    endpoint: str = ""
    model_name: str = "mock-qa"
    credential_env: str = "LLM_API_KEY"
    max_retries: int = 2
    timeout_s: float = 30.0
    max_concurrency: int = 4
    # data handling
    test_fraction: float = 0.2
    eval_samples: int = 500
    seed: int = 0


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_DEFAULTS = RunConfig()


def _coerce(key: str, value, target_type):
    if target_type is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("true", "1", "yes", "on"):
            return True
        if text in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"config key {key}: cannot read {value!r} as a boolean")
    try:
        return target_type(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(
            f"config key {key}: cannot read {value!r} as {target_type.__name__}"
        ) from exc


def load_config(path=None, overrides: Mapping[str, object] | None = None) -> RunConfig:
    """Defaults, then JSON file values, then overrides; unknown keys rejected."""
    values: dict = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                file_values = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(file_values, dict):
            raise ConfigError(f"{path}: config must be a flat JSON object")
        values.update(file_values)
    if overrides:
        values.update(overrides)
    kwargs = {}
    for key, value in values.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key: {key}")
        kwargs[key] = _coerce(key, value, type(getattr(_DEFAULTS, key)))
    return RunConfig(**kwargs)


def parse_set_overrides(pairs) -> dict:
    """--set key=value strings to an override map."""
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def derive_seed(seed: int, tag: str) -> int:
    """Stable component seed from the run seed and a role tag."""
    return (int(seed) * 0x9E3779B1 + zlib.crc32(tag.encode("utf-8"))) % 2**31


def model_spec_from(cfg: RunConfig, n_classes: int | None = None) -> ToyModelSpec:
    targets = tuple(t.strip() for t in cfg.adapter_targets.split(",") if t.strip())
    return ToyModelSpec(
        vocab_size=cfg.vocab_size,
        d_model=cfg.d_model,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        d_ff=cfg.d_ff,
        n_classes=cfg.n_classes if n_classes is None else n_classes,
        max_seq_len=cfg.max_seq_len,
        adapter_targets=targets,
    )


def train_config_from(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg.learning_rate,
        rank=cfg.rank,
        alpha=cfg.alpha,
        batch_size=cfg.batch_size,
        grad_accum_steps=cfg.grad_accum_steps,
        warmup_steps=cfg.warmup_steps,
        weight_decay=cfg.weight_decay,
        epochs=cfg.epochs,
        seed=derive_seed(cfg.seed, "train"),
        adam_beta1=cfg.adam_beta1,
        adam_beta2=cfg.adam_beta2,
        adam_epsilon=cfg.adam_epsilon,
        state_bits=cfg.state_bits,
    )


def client_spec_from(cfg: RunConfig) -> LLMClientSpec:
    return LLMClientSpec(
        backend=cfg.backend,
        endpoint=cfg.endpoint,
        model_name=cfg.model_name,
        credential_env=cfg.credential_env,
        max_retries=cfg.max_retries,
        timeout_s=cfg.timeout_s,
        max_concurrency=cfg.max_concurrency,
    )
