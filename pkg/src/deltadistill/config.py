"""Run configuration: a single serializable record driving every pipeline stage.

The config hash is embedded in every output manifest so downstream commands
can detect mismatched inputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .scoring import FilterRule


@dataclass
class RunConfig:
    # paths
    seed_data: str = ""
    base_corpus: str = ""
    ft_corpus: str = ""
    out_dir: str = "out"
    in_domain_probes: str = ""
    out_domain_probes: str = ""

    # model parameters
    order: int = 3
    alpha: float = 0.1
    lam: float = 5.0
    max_vocab: int = 4096

    # filter rule
    rule: str = "low_high"
    tau: float = 1.5
    tau_f: float = 1.2
    tau_b: float = 1.6
    rho: float = 1.5

    # generation
    strategy: str = "prefix_resample"
    batch_size: int = 20
    demonstrations: int = 5
    target_size: int = 250
    max_iterations: int = 100
    max_len: int = 16
    temperature: float = 1.0
    prompt_order: int = 3
    prompt_alpha: float = 0.1
    prompt_temperature: float = 1.0
    prompt_max_len: int = 12

    # remote endpoint (instruction_template strategy)
    endpoint_url: str = ""
    endpoint_model: str = ""
    api_key_env: str = "DELTADISTILL_API_KEY"
    endpoint_timeout: float = 30.0
    endpoint_retries: int = 3
    cache_dir: str = ""

    # distillation
    target_kind: str = "tabular"
    target_order: int = 3
    target_alpha: float = 0.1
    epochs: int = 300
    learning_rate: float = 0.5
    report_every: int = 1

    # generation template variant: include demo responses or prompts only
    demos_include_responses: bool = True

    # run control
    rng_seed: int = 0
    workers: int = 1
    enumeration_budget: int = 10**6
    enum_length: int = 3

    def to_json(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        # out_dir is where results land, not part of what produced them, so
        # identical runs into different directories hash identically
        payload = {k: v for k, v in self.to_json().items() if k != "out_dir"}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]

    def filter_rule(self) -> FilterRule:
        if self.rule == "asymmetric":
            return FilterRule.asymmetric(self.tau_f, self.tau_b)
        if self.rule == "ratio":
            return FilterRule.ratio(self.rho)
        if self.rule == "none":
            return FilterRule.none()
        if self.rule in ("low_high", "symmetric", "low_low", "high_high"):
            return FilterRule(self.rule, tau=self.tau)
        raise ConfigError(f"unknown filter rule: {self.rule!r}")


_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def load_config(path: str | Path) -> RunConfig:
    """Read a JSON config file, rejecting unknown keys by name."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = set(raw) - _FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    return RunConfig(**raw)


def overlay_flags(config: RunConfig, **overrides) -> RunConfig:
    """Apply non-None flag values on top of a config (flags > file > defaults)."""
    for name, value in overrides.items():
        if value is None:
            continue
        if name not in _FIELD_NAMES:
            raise ConfigError(f"unknown config field: {name}")
        setattr(config, name, value)
    return config
