"""Flat key=value config files mapped onto the typed config dataclasses.

One file carries environment, credit-assignment and training keys side by side;
each loader picks the keys it understands. `env_config_text` is the canonical
serialization used for hashing and manifests.
"""

from __future__ import annotations

import hashlib

from .critic import TrainConfig
from .env import ConfigError, EnvConfig
from .gae import GaeConfig

# file key -> (EnvConfig field, type)
ENV_KEYS = {
    "n_event_categories": ("n_event_categories", int),
    "R": ("codebooks", int),
    "T": ("total_steps", int),
    "T_sketch": ("sketch_steps", int),
    "leak_prob": ("leak_prob", float),
    "fidelity_alpha": ("fidelity_alpha", float),
    "fidelity_beta": ("fidelity_beta", float),
    "min_run_len": ("min_run_len", int),
    "drop_substitute_split": ("drop_substitute_split", float),
    "seed": ("seed", int),
    "count_min": ("count_min", int),
    "count_max": ("count_max", int),
    "n_texture_tokens": ("n_texture_tokens", int),
    "body_drop_scale": ("body_drop_scale", float),
    "reorder_prob": ("reorder_prob", float),
}

GAE_KEYS = {
    "gamma": ("gamma", float),
    "lambda": ("lam", float),
    "interval": ("interval", int),
    "label_noise_sigma": ("label_noise_sigma", float),
}

TRAIN_KEYS = {
    "learning_rate": ("learning_rate", float),
    "train_steps": ("steps", int),
    "batch_size": ("batch_size", int),
    "hidden_width": ("hidden_width", int),
    "head_width": ("head_width", int),
    "val_every": ("val_every", int),
}


def parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip() or not value.strip():
            raise ConfigError(f"config line {line_no}: expected 'key = value', got {raw!r}")
        key = key.strip()
        if key in out:
            raise ConfigError(f"config line {line_no}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def parse_kv_file(path: str) -> dict[str, str]:
    with open(path) as f:
        return parse_kv_text(f.read())


def _pick(mapping: dict[str, str], keys: dict[str, tuple[str, type]]) -> dict:
    out = {}
    for file_key, (attr, typ) in keys.items():
        if file_key in mapping:
            try:
                out[attr] = typ(mapping[file_key])
            except ValueError as exc:
                raise ConfigError(f"config key {file_key}: {exc}") from exc
    return out


def env_config_from_mapping(mapping: dict[str, str]) -> EnvConfig:
    return EnvConfig(**_pick(mapping, ENV_KEYS))


def gae_config_from_mapping(mapping: dict[str, str]) -> GaeConfig:
    return GaeConfig(**_pick(mapping, GAE_KEYS))


def train_config_from_mapping(mapping: dict[str, str], seed: int | None = None) -> TrainConfig:
    kwargs = _pick(mapping, TRAIN_KEYS)
    kwargs["gae"] = gae_config_from_mapping(mapping)
    if seed is not None:
        kwargs["seed"] = seed
    return TrainConfig(**kwargs)


def load_config_file(path: str) -> dict[str, str]:
    mapping = parse_kv_file(path)
    known = set(ENV_KEYS) | set(GAE_KEYS) | set(TRAIN_KEYS) | {"schedule"}
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return mapping


def env_config_text(cfg: EnvConfig) -> str:
    """Canonical flat rendering: one line per key, interface order."""
    lines = []
    for file_key, (attr, typ) in ENV_KEYS.items():
        value = getattr(cfg, attr)
        lines.append(f"{file_key} = {value!r}" if typ is float else f"{file_key} = {value}")
    return "\n".join(lines) + "\n"


def env_config_from_text(text: str) -> EnvConfig:
    return env_config_from_mapping(parse_kv_text(text))


def env_config_hash(cfg: EnvConfig) -> str:
    return hashlib.sha256(env_config_text(cfg).encode()).hexdigest()
