"""Importance predictor: first-layer hidden states in, per-head attention logits out.

The network down-projects the hidden states, runs one small causal
self-attention block, up-projects back with a residual into the input, and
feeds the result to two SiLU MLPs that emit an importance query and key of
width ``d`` for every predicted head (host layers 2..N, all heads).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .host import ContractError, HostConfig, causal_mask
from .nn import Linear, Module, Rng, Tensor


class SizingError(ValueError):
    def __init__(self, message: str, smallest_ratio: float):
        super().__init__(message)
        self.smallest_ratio = smallest_ratio


BUDGET_BAND = (0.010, 0.012)


@dataclass(frozen=True)
class PredictorConfig:
    reduced_dim: int = 8  # width of the down-projected stream
    inter_dim: int = 8  # per-head importance query/key width
    n_heads: int = 2  # heads of the predictor's own attention block
    hidden: int = 16  # hidden width of the query/key MLPs

    def __post_init__(self):
        if self.reduced_dim % self.n_heads:
            raise ValueError("reduced_dim must be divisible by n_heads")
        if min(self.reduced_dim, self.inter_dim, self.n_heads, self.hidden) < 1:
            raise ValueError("predictor dimensions must be positive")


def predicted_heads(host: HostConfig) -> int:
    return (host.n_layers - 1) * host.n_heads


def count_params(host: HostConfig, cfg: PredictorConfig) -> int:
    """Closed-form parameter count; must agree with :meth:`Predictor.param_count`."""
    e, r, h = host.embed_dim, cfg.reduced_dim, cfg.hidden
    out = predicted_heads(host) * cfg.inter_dim
    down = e * r + r
    attn = 4 * r * r
    up = (r * r + r) + (r * e + e)
    qk = 2 * (e * h + h + h * out)
    return down + attn + up + qk


def size_for_budget(
    host: HostConfig,
    target_ratio: float = 0.011,
    host_params: int | None = None,
    inter_start: int = 8,
    n_heads: int = 2,
    min_hidden: int = 16,
) -> PredictorConfig:
    """Pick a predictor whose size is ``target_ratio`` of the host.

    For each interaction width from ``inter_start`` down, the reduced width is
    shrunk until the query/key MLP hidden width solved for the target is at
    least ``min_hidden``. Larger interaction widths win.
    """
    lo, hi = BUDGET_BAND
    if not lo <= target_ratio <= hi:
        raise ValueError(f"target ratio {target_ratio} outside [{lo}, {hi}]")
    if host_params is None:
        from .host import HostModel

        host_params = HostModel(host).param_count()
    target = target_ratio * host_params
    reduced = [r for r in (host.embed_dim // 2**k for k in range(1, 8)) if r >= n_heads and r % n_heads == 0]
    for d in range(min(inter_start, host.head_dim), 0, -1):
        for r in reduced:
            base = PredictorConfig(r, d, n_heads, 1)
            per_hidden = count_params(host, PredictorConfig(r, d, n_heads, 2)) - count_params(host, base)
            fixed = count_params(host, base) - per_hidden
            hidden = int((target - fixed) // per_hidden)
            for hcand in (hidden, hidden + 1):
                if hcand < min_hidden:
                    continue
                cfg = PredictorConfig(r, d, n_heads, hcand)
                if lo <= count_params(host, cfg) / host_params <= hi:
                    return cfg
    smallest = count_params(host, PredictorConfig(n_heads, 1, n_heads, 1)) / host_params
    raise SizingError(
        f"no predictor fits {target_ratio:.4f} of a {host_params}-parameter host; smallest ratio is {smallest:.4f}",
        smallest,
    )


class Predictor(Module):
    def __init__(self, host: HostConfig, cfg: PredictorConfig, seed: int = 0):
        self.host = host
        self.cfg = cfg
        rng = Rng(seed, "butler-init")
        e, r = host.embed_dim, cfg.reduced_dim
        out = predicted_heads(host) * cfg.inter_dim
        self.down = Linear(rng.child("down"), e, r, name="down")
        self.wq = nn.uniform_fan_in(rng, (r, r), r, "attn.wq")
        self.wk = nn.uniform_fan_in(rng, (r, r), r, "attn.wk")
        self.wv = nn.uniform_fan_in(rng, (r, r), r, "attn.wv")
        self.wo = nn.uniform_fan_in(rng, (r, r), r, "attn.wo")
        self.up1 = Linear(rng.child("up1"), r, r, name="up1")
        self.up2 = Linear(rng.child("up2"), r, e, name="up2")
        self.q1 = Linear(rng.child("q1"), e, cfg.hidden, name="q_imp.0")
        self.q2 = Linear(rng.child("q2"), cfg.hidden, out, bias=False, name="q_imp.1")
        self.k1 = Linear(rng.child("k1"), e, cfg.hidden, name="k_imp.0")
        self.k2 = Linear(rng.child("k2"), cfg.hidden, out, bias=False, name="k_imp.1")

    def project(self, hidden) -> tuple[Tensor, Tensor]:
        """Importance queries and keys, each (B, M, L, d) with M predicted heads."""
        x = np.asarray(hidden)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        b, n, e = x.shape
        if e != self.host.embed_dim:
            raise ContractError(f"hidden width {e} != host embed_dim {self.host.embed_dim}")
        if n > self.host.max_len:
            raise ContractError(f"sequence length {n} exceeds {self.host.max_len}")
        cfg = self.cfg
        src = Tensor(x, dtype=self.down.weight.data.dtype)
        z = self.down(nn.layer_norm(src))
        a = nn.layer_norm(z)
        hp, hd = cfg.n_heads, cfg.reduced_dim // cfg.n_heads

        def heads(t):
            return nn.transpose(nn.reshape(t, (b, n, hp, hd)), (0, 2, 1, 3))

        q, k, v = heads(a @ self.wq), heads(a @ self.wk), heads(a @ self.wv)
        p = nn.softmax(nn.matmul(q, nn.swap_last(k)) * (1.0 / math.sqrt(hd)), causal_mask(n, z.data.dtype))
        o = nn.reshape(nn.transpose(nn.matmul(p, v), (0, 2, 1, 3)), (b, n, cfg.reduced_dim))
        z = z + o @ self.wo
        refined = src + self.up2(nn.silu(self.up1(z)))
        u = nn.layer_norm(refined)
        m, d = predicted_heads(self.host), cfg.inter_dim

        def split(t):
            return nn.transpose(nn.reshape(t, (b, n, m, d)), (0, 2, 1, 3))

        q_imp = split(self.q2(nn.silu(self.q1(u))))
        k_imp = split(self.k2(nn.silu(self.k1(u))))
        return q_imp, k_imp

    def logits(self, hidden) -> Tensor:
        q_imp, k_imp = self.project(hidden)
        return nn.matmul(q_imp, nn.swap_last(k_imp)) * (1.0 / math.sqrt(self.cfg.inter_dim))

    def predict_importance(self, hidden) -> np.ndarray:
        """A_pred for one sequence: ((N-1)*H, L, L), unmasked and unnormalised."""
        hidden = np.asarray(hidden)
        if hidden.ndim != 2:
            raise ContractError(f"expected (L, E) hidden states, got shape {hidden.shape}")
        return self.logits(hidden).data[0]


def param_count(params) -> int:
    """Scalar parameter count of a module or an iterable of arrays/parameters."""
    if isinstance(params, Module):
        params = params.parameters()
    return int(sum(np.asarray(getattr(p, "data", p)).size for p in params))
