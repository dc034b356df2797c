"""Shared fixtures-as-functions for the test modules."""

from __future__ import annotations

import numpy as np

from butlerlab import nn
from butlerlab.host import HostConfig, HostModel
from butlerlab.nn import Linear, Parameter, Rng, Tensor
from butlerlab.predictor import Predictor, PredictorConfig
from butlerlab.trainer import TrainConfig, host_qk, mse_logits_naive, predictor_loss

TINY = HostConfig(n_layers=3, n_heads=2, embed_dim=16, head_dim=8, vocab_size=12, max_len=64)
TINY_PRED = PredictorConfig(reduced_dim=4, inter_dim=4, n_heads=2, hidden=6)


def tiny_host(seed: int = 0, cfg: HostConfig = TINY) -> HostModel:
    """Untrained host with random (not zero) output head, so logits are non-trivial."""
    h = HostModel(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    h.head.data[...] = rng.normal(0, 1, h.head.data.shape).astype(h.head.data.dtype)
    for blk in h.layers:
        blk.wq.data *= 3  # sharper attention so selections matter
        blk.wk.data *= 3
    h.freeze()
    return h


def _param(rng, shape, name="p", scale=1.0):
    return Parameter(rng.normal(0, scale, shape), name=name)


def _probe(out: Tensor, rng) -> Tensor:
    w = Tensor(rng.normal(size=out.shape))
    return (out * w).sum()


def grad_cases():
    """(name, builder) pairs; builder(seed) -> (f, params), to be called in float64 mode."""

    def unary(op, shape=(3, 4), scale=1.5):
        def build(seed):
            rng = np.random.default_rng(seed)
            x = _param(rng, shape, scale=scale)
            w = rng.normal(size=op(x).shape)
            return (lambda: (op(x) * Tensor(w)).sum()), [x]

        return build

    def binary(op, sa=(3, 4), sb=(4,)):
        def build(seed):
            rng = np.random.default_rng(seed)
            a, b = _param(rng, sa, "a"), _param(rng, sb, "b")
            w = rng.normal(size=np.broadcast_shapes(sa, sb))
            return (lambda: (op(a, b) * Tensor(w)).sum()), [a, b]

        return build

    def matmul_case(sa, sb):
        def build(seed):
            rng = np.random.default_rng(seed)
            a, b = _param(rng, sa, "a"), _param(rng, sb, "b")
            out_shape = np.matmul(np.zeros(sa), np.zeros(sb)).shape
            w = rng.normal(size=out_shape)
            return (lambda: (nn.matmul(a, b) * Tensor(w)).sum()), [a, b]

        return build

    def softmax_case(seed):
        rng = np.random.default_rng(seed)
        x = _param(rng, (2, 5, 5), scale=2.0)
        mask = np.triu(np.full((5, 5), -1e9), k=1)
        w = rng.normal(size=(2, 5, 5))
        return (lambda: (nn.softmax(x, mask) * Tensor(w)).sum()), [x]

    def layer_norm_case(seed):
        rng = np.random.default_rng(seed)
        x = _param(rng, (4, 6), "x")
        g = Parameter(1 + 0.3 * rng.normal(size=6), name="g")
        b = _param(rng, (6,), "b", 0.3)
        w = rng.normal(size=(4, 6))
        return (lambda: (nn.layer_norm(x, g, b) * Tensor(w)).sum()), [x, g, b]

    def layer_norm_plain(seed):
        rng = np.random.default_rng(seed)
        x = _param(rng, (4, 6), "x")
        w = rng.normal(size=(4, 6))
        return (lambda: (nn.layer_norm(x) * Tensor(w)).sum()), [x]

    def take_rows_case(seed):
        rng = np.random.default_rng(seed)
        emb = _param(rng, (7, 3))
        ids = rng.integers(0, 7, size=(2, 5))
        w = rng.normal(size=(2, 5, 3))
        return (lambda: (nn.take_rows(emb, ids) * Tensor(w)).sum()), [emb]

    def cross_entropy_case(seed):
        rng = np.random.default_rng(seed)
        x = _param(rng, (3, 5), scale=2.0)
        t = rng.integers(0, 5, size=3)
        return (lambda: nn.cross_entropy(x, t)), [x]

    def mse_case(seed):
        rng = np.random.default_rng(seed)
        x = _param(rng, (3, 4))
        t = rng.normal(size=(3, 4))
        return (lambda: nn.mse(x, t)), [x]

    def linear_case(seed):
        rng = np.random.default_rng(seed)
        lin = Linear(Rng(seed, "lin"), 4, 3, name="lin")
        x = Tensor(rng.normal(size=(2, 4)))
        w = rng.normal(size=(2, 3))
        return (lambda: (lin(x) * Tensor(w)).sum()), lin.parameters()

    def mean_case(seed):
        rng = np.random.default_rng(seed)
        x = _param(rng, (3, 4))
        return (lambda: nn.square(x).mean()), [x]

    return [
        ("add", binary(nn.add)),
        ("sub", binary(nn.sub)),
        ("mul", binary(nn.mul)),
        ("mul_const", unary(lambda x: nn.mul(x, 2.5))),
        ("square", unary(nn.square)),
        ("silu", unary(nn.silu, scale=3.0)),
        ("gelu", unary(nn.gelu, scale=3.0)),
        ("reshape", unary(lambda x: nn.reshape(x, (2, 6)))),
        ("transpose", unary(lambda x: nn.transpose(x, (1, 0)))),
        ("swap_last", unary(nn.swap_last, shape=(2, 3, 4))),
        ("slice_rows", unary(lambda x: nn.slice_rows(x, 2))),
        ("sum_all", unary(lambda x: nn.mul(nn.sum_all(x), 1.0), shape=(1,))),
        ("mean_all", mean_case),
        ("matmul_2d", matmul_case((3, 4), (4, 2))),
        ("matmul_batched", matmul_case((2, 2, 3, 4), (2, 2, 4, 3))),
        ("matmul_flat", matmul_case((2, 3, 4), (4, 5))),
        ("softmax_masked", softmax_case),
        ("layer_norm", layer_norm_case),
        ("layer_norm_plain", layer_norm_plain),
        ("take_rows", take_rows_case),
        ("cross_entropy", cross_entropy_case),
        ("mse", mse_case),
        ("linear", linear_case),
    ]


def predictor_loss_case(seed: int, loss_path: str = "naive", domain: str = "full"):
    """Full predictor loss graph on a 2-layer, 2-head toy host, L=8 (float64 mode)."""
    host_cfg = HostConfig(n_layers=2, n_heads=2, embed_dim=8, head_dim=4, vocab_size=6, max_len=16)
    host = HostModel(host_cfg, seed=seed)
    host.freeze()
    pred = Predictor(host_cfg, PredictorConfig(reduced_dim=4, inter_dim=3, n_heads=2, hidden=5), seed=seed)
    ids = np.random.default_rng(seed).integers(0, 6, size=(1, 8))
    trace = host.trace_batch(ids)
    tcfg = TrainConfig(block_size=3, domain=domain, loss_path=loss_path)

    def f():
        return predictor_loss(pred, trace, tcfg)

    return f, pred.parameters()


def _ln(x, g=None, eps=1e-5):
    xc = x - x.mean()
    out = xc / np.sqrt((xc * xc).mean() + eps)
    return out if g is None else out * g


def _gelu(z):
    return 0.5 * z * (1 + np.tanh(np.sqrt(2 / np.pi) * (z + 0.044715 * z**3)))


def reference_decode(host: HostModel, tokens, mask=None) -> np.ndarray:
    """Incremental KV-cache decoder that physically drops unselected K/V rows.

    Runs in float64, one token at a time. Row ``t`` of ``mask`` (when present)
    decides which cached rows each head of layers 2..N may read. Returns the
    (L, V) logits.
    """
    cfg = host.cfg
    sd = {k: v.astype(np.float64) for k, v in host.state_dict().items()}
    h_, d_ = cfg.n_heads, cfg.head_dim
    kc = [[] for _ in range(cfg.n_layers)]
    vc = [[] for _ in range(cfg.n_layers)]
    out = []
    for t, tok in enumerate(tokens):
        x = sd["tok_emb"][tok] + sd["pos_emb"][t]
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            a = _ln(x, sd[p + "ln1"])
            q = (a @ sd[p + "wq"]).reshape(h_, d_)
            kc[i].append((a @ sd[p + "wk"]).reshape(h_, d_))
            vc[i].append((a @ sd[p + "wv"]).reshape(h_, d_))
            keys, vals = np.stack(kc[i], axis=1), np.stack(vc[i], axis=1)  # (H, t+1, D)
            heads = []
            for h in range(h_):
                keep = np.arange(t + 1)
                if i > 0 and mask is not None and t < mask.steps:
                    keep = np.flatnonzero(mask.rows[t][i - 1, h])
                s = keys[h, keep] @ q[h] / np.sqrt(d_)
                w = np.exp(s - s.max())
                w /= w.sum()
                heads.append(w @ vals[h, keep])
            x = x + np.concatenate(heads) @ sd[p + "wo"]
            f = _ln(x, sd[p + "ln2"])
            x = x + _gelu(f @ sd[p + "fc1.weight"] + sd[p + "fc1.bias"]) @ sd[p + "fc2.weight"] + sd[p + "fc2.bias"]
        out.append(_ln(x, sd["ln_f"]) @ sd["head"] + sd["head_bias"])
    return np.stack(out)


__all__ = ["reference_decode", "TINY", "TINY_PRED", "tiny_host", "grad_cases", "predictor_loss_case", "host_qk", "mse_logits_naive"]
