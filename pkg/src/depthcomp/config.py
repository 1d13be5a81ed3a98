"""Key = value configuration files for training runs.

Network fields may be written bare (``modality = d``) or with a ``network.``
prefix. Lines starting with ``#`` and blank lines are ignored.
"""
from __future__ import annotations

from dataclasses import fields
from typing import Dict, Iterable, Optional

from .network import NetworkConfig, _parse_field
from .trainer import TrainConfig

TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"network"}
NETWORK_KEYS = {f.name for f in fields(NetworkConfig)}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


def parse_lines(lines: Iterable[str], source: str = "<config>") -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(key or line, f"{source}:{lineno}: expected 'key = value'")
        out[key] = value.strip()
    return out


def read_config_file(path: str) -> Dict[str, str]:
    with open(path) as fh:
        return parse_lines(fh, path)


def parse_overrides(items: Iterable[str]) -> Dict[str, str]:
    return parse_lines(items, "--set")


def _train_value(key: str, raw: str):
    if key in ("mode", "train_manifest", "val_manifest", "supervised_kind", "photo_target"):
        return raw
    if key in ("lr0", "beta1", "beta2"):
        return float(raw)
    if key == "scales":
        return tuple(int(x) for x in raw.replace(",", " ").replace("/", " ").split())
    if key == "batch_size" and raw.lower() in ("", "none", "auto"):
        return None
    return int(raw)


def build_train_config(kv: Dict[str, str], base: Optional[TrainConfig] = None) -> TrainConfig:
    """TrainConfig from string key/values; errors name the offending key."""
    train_kw, net_kw = {}, {}
    if base is not None:
        train_kw = {f.name: getattr(base, f.name) for f in fields(TrainConfig) if f.name != "network"}
        net_kw = {f.name: getattr(base.network, f.name) for f in fields(NetworkConfig)}
        if base.batch_size == (8 if base.network.has_image else 16):
            train_kw["batch_size"] = None  # keep the modality default when the modality changes
    for key, raw in kv.items():
        name = key[len("network."):] if key.startswith("network.") else key
        try:
            if name in NETWORK_KEYS:
                net_kw[name] = _parse_field(name, raw)
            elif name in TRAIN_KEYS:
                train_kw[name] = _train_value(name, raw)
            else:
                raise ConfigError(key, "unknown key")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(key, f"bad value {raw!r} ({exc})") from None
    try:
        net = NetworkConfig(**net_kw)
    except ValueError as exc:
        bad = next((k for k in net_kw if k in str(exc)), "network")
        raise ConfigError(bad, str(exc)) from None
    try:
        return TrainConfig(network=net, **train_kw)
    except ValueError as exc:
        bad = next((k for k in train_kw if k in str(exc)), "train")
        raise ConfigError(bad, str(exc)) from None


def dump_train_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        if f.name == "network":
            continue
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {' '.join(map(str, v)) if isinstance(v, tuple) else v}")
    lines.extend("network." + ln for ln in cfg.network.to_text().splitlines())
    return "\n".join(lines) + "\n"

