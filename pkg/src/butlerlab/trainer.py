"""Fit the predictor's logits to the frozen host's pre-softmax logits.

Two loss paths share one reduction order. The naive path materialises both
L x L logit maps. The blockwise path recomputes the host product and the
predicted product one tile at a time, accumulates the squared error per
head, and produces the query/key gradients tile by tile on the way back, so
only ``block_size**2`` logits per head exist at any moment.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .host import BatchSampler, ContractError, HostModel, Tokenizer, split_corpus
from .nn import Rng, Tensor
from .predictor import Predictor, PredictorConfig

DOMAINS = ("full", "causal")


class TrainingError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    seq_len: int = 128
    lr: float = 3e-4
    block_size: int = 64
    seed: int = 0
    domain: str = "full"
    loss_path: str = "blockwise"

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}")
        if self.loss_path not in ("naive", "blockwise"):
            raise ValueError("loss_path must be 'naive' or 'blockwise'")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")


@dataclass(frozen=True)
class LossReport:
    step: int
    mse: float
    grad_norm: float
    wall_time: float


@dataclass
class BufferStats:
    """Largest logit tile held per head during a blockwise pass."""

    peak_tile: int = 0
    tiles: int = 0

    def see(self, rows: int, cols: int) -> None:
        self.peak_tile = max(self.peak_tile, rows * cols)
        self.tiles += 1


def scaled_dot(a: np.ndarray, b: np.ndarray, dim: int) -> np.ndarray:
    """``a @ b^T / sqrt(dim)`` over the last two axes, same arithmetic as the host."""
    return (a @ np.swapaxes(b, -1, -2)) * np.asarray(1.0 / math.sqrt(dim), dtype=a.dtype)


def _element_count(heads: int, n: int, domain: str) -> int:
    return heads * (n * n if domain == "full" else n * (n + 1) // 2)


def _sq_sums(diff: np.ndarray) -> np.ndarray:
    d = diff.astype(np.float64)
    return (d * d).sum(axis=(-2, -1))


def _finish(per_head: np.ndarray, count: int) -> float:
    return float(np.sum(per_head)) / count


def _flat_heads(x: np.ndarray) -> np.ndarray:
    return x.reshape((-1,) + x.shape[-2:])


def mse_logits_naive(a_pred, a_true, domain: str = "full"):
    """Mean squared error between logit maps over the chosen domain.

    Accepts arrays or a :class:`Tensor` for ``a_pred``; a Tensor input returns a
    differentiable scalar Tensor.
    """
    if domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}")
    pred_data = a_pred.data if isinstance(a_pred, Tensor) else np.asarray(a_pred)
    true_data = np.asarray(a_true)
    if pred_data.shape != true_data.shape:
        raise ContractError(f"shape mismatch: {pred_data.shape} vs {true_data.shape}")
    n = pred_data.shape[-1]
    heads = int(np.prod(pred_data.shape[:-2], dtype=np.int64))
    diff = _flat_heads(pred_data - true_data)
    if domain == "causal":
        diff = diff * np.tril(np.ones((n, n), dtype=diff.dtype))
    count = _element_count(heads, n, domain)
    value = _finish(_sq_sums(diff), count)
    if not isinstance(a_pred, Tensor):
        return value

    def bw(g):
        a_pred._accumulate((diff * (2.0 * g / count)).reshape(pred_data.shape).astype(pred_data.dtype), owned=True)

    return nn.custom(np.asarray(value, dtype=pred_data.dtype), (a_pred,), bw)


def _check_block_inputs(q, k, q_imp, k_imp, block_size):
    if block_size < 1:
        raise ContractError("block_size must be >= 1")
    q, k, q_imp, k_imp = (_flat_heads(np.asarray(x)) for x in (q, k, q_imp, k_imp))
    if q.shape != k.shape or q_imp.shape != k_imp.shape or q.shape[:2] != q_imp.shape[:2]:
        raise ContractError(f"incompatible shapes: Q{q.shape} K{k.shape} Qimp{q_imp.shape} Kimp{k_imp.shape}")
    return q, k, q_imp, k_imp


def _tiles(n: int, block: int, domain: str):
    for i0 in range(0, n, block):
        i1 = min(n, i0 + block)
        for j0 in range(0, n, block):
            if domain == "causal" and j0 > i1 - 1:
                break
            yield i0, i1, j0, min(n, j0 + block)


def _tile_diff(q, k, q_imp, k_imp, i0, i1, j0, j1, domain):
    true = scaled_dot(q[:, i0:i1], k[:, j0:j1], q.shape[-1])
    pred = scaled_dot(q_imp[:, i0:i1], k_imp[:, j0:j1], q_imp.shape[-1])
    diff = pred - true
    if domain == "causal" and j1 - 1 > i0:
        rows = np.arange(i0, i1)[:, None]
        cols = np.arange(j0, j1)[None, :]
        diff = diff * (cols <= rows)
    return diff


def mse_logits_blockwise(q, k, q_imp, k_imp, block_size: int = 64, domain: str = "full", stats: BufferStats | None = None) -> float:
    """Streaming version of the logit MSE; never holds more than one tile per head.

    ``q``/``k`` are the host's per-head queries/keys (..., L, D) and
    ``q_imp``/``k_imp`` the predictor's (..., L, d); leading axes are heads.
    """
    q, k, q_imp, k_imp = _check_block_inputs(q, k, q_imp, k_imp, block_size)
    heads, n = q.shape[:2]
    acc = np.zeros(heads, dtype=np.float64)
    for i0, i1, j0, j1 in _tiles(n, block_size, domain):
        if stats is not None:
            stats.see(i1 - i0, j1 - j0)
        acc += _sq_sums(_tile_diff(q, k, q_imp, k_imp, i0, i1, j0, j1, domain))
    return _finish(acc, _element_count(heads, n, domain))


def blockwise_grads(q, k, q_imp, k_imp, block_size: int = 64, domain: str = "full", stats: BufferStats | None = None):
    """Gradients of :func:`mse_logits_blockwise` w.r.t. ``q_imp`` and ``k_imp``."""
    shape = np.shape(q_imp)
    q, k, q_imp, k_imp = _check_block_inputs(q, k, q_imp, k_imp, block_size)
    heads, n, d = q_imp.shape
    count = _element_count(heads, n, domain)
    scale = np.asarray(2.0 / (count * math.sqrt(d)), dtype=q_imp.dtype)
    g_q = np.zeros_like(q_imp)
    g_k = np.zeros_like(k_imp)
    for i0, i1, j0, j1 in _tiles(n, block_size, domain):
        if stats is not None:
            stats.see(i1 - i0, j1 - j0)
        diff = _tile_diff(q, k, q_imp, k_imp, i0, i1, j0, j1, domain) * scale
        g_q[:, i0:i1] += diff @ k_imp[:, j0:j1]
        g_k[:, j0:j1] += np.swapaxes(diff, -1, -2) @ q_imp[:, i0:i1]
    return g_q.reshape(shape), g_k.reshape(shape)


def blockwise_loss(q_imp: Tensor, k_imp: Tensor, q, k, block_size: int, domain: str) -> Tensor:
    """Differentiable wrapper: forward and backward both stream over tiles."""
    value = mse_logits_blockwise(q, k, q_imp.data, k_imp.data, block_size, domain)

    def bw(g):
        gq, gk = blockwise_grads(q, k, q_imp.data, k_imp.data, block_size, domain)
        gscale = np.asarray(g, dtype=gq.dtype)
        q_imp._accumulate(gq * gscale, owned=True)
        k_imp._accumulate(gk * gscale, owned=True)

    return nn.custom(np.asarray(value, dtype=q_imp.data.dtype), (q_imp, k_imp), bw)


def host_qk(trace, n_heads: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack the host's queries/keys of layers 2..N as (B, (N-1)*H, L, D)."""
    return np.concatenate(trace.q[1:], axis=1), np.concatenate(trace.k[1:], axis=1)


def predictor_loss(pred: Predictor, trace, cfg: TrainConfig) -> Tensor:
    q_imp, k_imp = pred.project(trace.hidden)
    if cfg.loss_path == "blockwise":
        q, k = host_qk(trace, pred.host.n_heads)
        return blockwise_loss(q_imp, k_imp, q, k, cfg.block_size, cfg.domain)
    a_pred = nn.matmul(q_imp, nn.swap_last(k_imp)) * (1.0 / math.sqrt(pred.cfg.inter_dim))
    a_true = np.concatenate(trace.logits[1:], axis=1)
    return mse_logits_naive(a_pred, a_true, cfg.domain)


@dataclass
class PredictorTrainResult:
    predictor: Predictor
    reports: list[LossReport] = field(default_factory=list)


def train_predictor(
    host: HostModel,
    tokenizer: Tokenizer,
    corpus: str,
    pcfg: PredictorConfig,
    tcfg: TrainConfig,
    log_every: int = 0,
    log=None,
) -> PredictorTrainResult:
    if any(p.requires_grad for p in host.parameters()):
        raise ContractError("host must be frozen before predictor training")
    text = split_corpus(corpus)["butler"]
    pred = Predictor(host.cfg, pcfg, seed=tcfg.seed)
    sampler = BatchSampler(tokenizer, text, min(tcfg.seq_len, host.cfg.max_len), Rng(tcfg.seed, "butler-batches"))
    opt = nn.Adam(pred.parameters(), lr=tcfg.lr)
    reports: list[LossReport] = []
    t0 = time.perf_counter()
    for step in range(tcfg.steps):
        ids = sampler.sample(tcfg.batch_size)
        trace = host.trace_batch(ids)
        loss = predictor_loss(pred, trace, tcfg)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at step {step} (seed {tcfg.seed}, stream butler-batches)")
        nn.backward(loss)
        gnorm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in pred.parameters()))
        opt.step()
        reports.append(LossReport(step, value, gnorm, time.perf_counter() - t0))
        if log and log_every and (step + 1) % log_every == 0:
            recent = np.mean([r.mse for r in reports[-log_every:]])
            log(f"butler step {step + 1}/{tcfg.steps} mse {recent:.4f}")
    return PredictorTrainResult(pred, reports)
