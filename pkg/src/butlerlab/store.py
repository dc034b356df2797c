"""Checkpoint round trips for host and predictor models."""

from __future__ import annotations

from pathlib import Path

from . import checkpoint as ckpt_io
from .config import dump_flat, parse_flat, quote, unquote
from .host import HostConfig, HostModel, Tokenizer
from .predictor import Predictor, PredictorConfig

_HOST_KEYS = ("n_layers", "n_heads", "embed_dim", "head_dim", "vocab_size", "max_len", "ffn_mult")
_PRED_KEYS = ("reduced_dim", "inter_dim", "n_heads", "hidden")


def host_config_text(cfg: HostConfig, tok: Tokenizer) -> str:
    values = {"kind": "host", **{f"host.{k}": getattr(cfg, k) for k in _HOST_KEYS}, "alphabet": quote(tok.alphabet)}
    return dump_flat(values)


def parse_host_config(text: str) -> tuple[HostConfig, Tokenizer]:
    kv = parse_flat(text)
    if kv.get("kind") != "host":
        raise ckpt_io.CheckpointFormatError("config", f"expected a host checkpoint, got kind={kv.get('kind')!r}")
    cfg = HostConfig(**{k: int(kv[f"host.{k}"]) for k in _HOST_KEYS})
    return cfg, Tokenizer(unquote(kv["alphabet"]))


def butler_config_text(cfg: PredictorConfig, host_text: str) -> str:
    values = {
        "kind": "butler",
        **{f"butler.{k}": getattr(cfg, k) for k in _PRED_KEYS},
        "host_digest": ckpt_io.config_digest(host_text).hex(),
    }
    return dump_flat(values)


def save_host(path, model: HostModel, tok: Tokenizer, meta: dict) -> bytes:
    return ckpt_io.save_checkpoint(path, model.state_dict(), host_config_text(model.cfg, tok), {"kind": "host", **meta})


def load_host(path, expected_digest: bytes | None = None) -> tuple[HostModel, Tokenizer, ckpt_io.Checkpoint]:
    ck = ckpt_io.load_checkpoint(path, expected_digest)
    cfg, tok = parse_host_config(ck.config_text)
    model = HostModel(cfg)
    model.load_state_dict(ck.params)
    model.freeze()
    return model, tok, ck


def save_butler(path, pred: Predictor, host_text: str, meta: dict) -> bytes:
    return ckpt_io.save_checkpoint(path, pred.state_dict(), butler_config_text(pred.cfg, host_text), {"kind": "butler", **meta})


def load_butler(path: str | Path, host: HostModel, host_text: str) -> tuple[Predictor, ckpt_io.Checkpoint]:
    """Load a predictor and verify it was trained against ``host``."""
    ck = ckpt_io.load_checkpoint(path)
    kv = parse_flat(ck.config_text)
    if kv.get("kind") != "butler":
        raise ckpt_io.CheckpointFormatError("config", f"expected a butler checkpoint, got kind={kv.get('kind')!r}")
    if kv["host_digest"] != ckpt_io.config_digest(host_text).hex():
        raise ckpt_io.CheckpointFormatError("digest", "predictor was trained for a different host config")
    cfg = PredictorConfig(**{k: int(kv[f"butler.{k}"]) for k in _PRED_KEYS})
    pred = Predictor(host.cfg, cfg)
    pred.load_state_dict(ck.params)
    pred.freeze()
    return pred, ck
