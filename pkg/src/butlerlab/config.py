"""Flat ``key = value`` configuration files.

Lines are ``key = value``; ``#`` starts a comment line. Every key has a type
and a default (``SCHEMA``); unknown keys are rejected so typos fail loudly.

    seed = 0
    host.n_layers = 4          # decoder blocks
    host.n_heads = 4
    host.embed_dim = 128
    host.head_dim = 32
    host.max_len = 256         # context limit, <= 512
    host.steps = 5000
    host.batch_size = 2
    host.seq_len = 256
    host.lr = 0.003
    butler.target_ratio = 0.011   # predictor size / host size, in [0.010, 0.012]
    butler.inter_dim = 0          # 0 = chosen by the budget search
    butler.reduced_dim = 0
    butler.hidden = 0
    butler.n_heads = 2
    train.steps = 2000
    train.batch_size = 4
    train.seq_len = 128
    train.lr = 0.0003
    train.block_size = 64
    train.domain = full           # full | causal
    train.loss_path = blockwise   # blockwise | naive
    policy.anchors = 4
    policy.window = 0             # 0 = window sized to the budget
    policy.obs_window = 16
    policy.page_size = 16
    policy.pooling = mean         # mean | max
    bench.pool_seed = 0           # pools the bundled corpus was drawn from
"""

from __future__ import annotations

import json
from pathlib import Path

SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "host.n_layers": (int, 4),
    "host.n_heads": (int, 4),
    "host.embed_dim": (int, 128),
    "host.head_dim": (int, 32),
    "host.max_len": (int, 256),
    "host.steps": (int, 5000),
    "host.batch_size": (int, 2),
    "host.seq_len": (int, 256),
    "host.lr": (float, 0.003),
    "butler.target_ratio": (float, 0.011),
    "butler.inter_dim": (int, 0),
    "butler.reduced_dim": (int, 0),
    "butler.hidden": (int, 0),
    "butler.n_heads": (int, 2),
    "train.steps": (int, 2000),
    "train.batch_size": (int, 4),
    "train.seq_len": (int, 128),
    "train.lr": (float, 3e-4),
    "train.block_size": (int, 64),
    "train.domain": (str, "full"),
    "train.loss_path": (str, "blockwise"),
    "policy.anchors": (int, 4),
    "policy.window": (int, 0),
    "policy.obs_window": (int, 16),
    "policy.page_size": (int, 16),
    "policy.pooling": (str, "mean"),
    "bench.pool_seed": (int, 0),
}


class ConfigError(ValueError):
    pass


def parse_flat(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        value = value.strip()
        if not value.startswith('"'):
            value = value.split(" #", 1)[0].strip()
        out[key.strip()] = value
    return out


def dump_flat(values: dict) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in values.items())


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw: str, typ: type):
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {typ.__name__}") from None


def resolve(text: str = "", overrides: dict | None = None) -> dict:
    """Defaults overlaid with file values and then explicit overrides."""
    values = {k: default for k, (_, default) in SCHEMA.items()}
    for key, raw in parse_flat(text).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw, SCHEMA[key][0])
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = SCHEMA[key][0](val)
    return values


def load(path: str | Path | None, overrides: dict | None = None) -> dict:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    return resolve(text, overrides)


def section(values: dict, prefix: str) -> dict:
    p = prefix + "."
    return {k[len(p) :]: v for k, v in values.items() if k.startswith(p)}


def quote(s: str) -> str:
    return json.dumps(s, ensure_ascii=True)


def unquote(s: str) -> str:
    return json.loads(s)
