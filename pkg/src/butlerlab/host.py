"""Small decoder-only transformer standing in for a frozen LLM.

Pre-norm blocks, learned absolute positions, GELU feed-forward with 4x
expansion. The forward pass can record every layer's pre-softmax attention
logits (before the causal mask) plus the first layer's post-attention
residual stream, which is what the importance predictor consumes.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import ContractError, Linear, Module, Parameter, Rng, Tensor

MASK_VALUE = -1e9
BOS = "\x02"


class VocabularyError(KeyError):
    pass


class ContextError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class HostConfig:
    n_layers: int = 4
    n_heads: int = 4
    embed_dim: int = 128
    head_dim: int = 32
    vocab_size: int = 64
    max_len: int = 256
    ffn_mult: int = 4

    def __post_init__(self):
        if self.embed_dim != self.n_heads * self.head_dim:
            raise ValueError(f"embed_dim {self.embed_dim} != n_heads*head_dim {self.n_heads * self.head_dim}")
        if self.n_layers < 2:
            raise ValueError("need at least 2 layers")
        if not 16 <= self.max_len <= 512:
            raise ValueError("max_len must lie in [16, 512]")


class Tokenizer:
    """Character-level vocabulary. Id 0 is reserved for begin-of-text."""

    def __init__(self, alphabet: str):
        chars = sorted(set(alphabet) - {BOS})
        self.alphabet = "".join(chars)
        self.itos = [BOS] + chars
        self.stoi = {c: i for i, c in enumerate(self.itos)}
        self.bos_id = 0

    @classmethod
    def from_corpus(cls, text: str) -> "Tokenizer":
        return cls("".join(sorted(set(text))))

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def tokenize(self, text: str) -> list[int]:
        try:
            return [self.stoi[c] for c in text]
        except KeyError as exc:
            raise VocabularyError(f"character {exc.args[0]!r} not in vocabulary") from None

    def encode(self, text: str) -> list[int]:
        return [self.bos_id] + self.tokenize(text)

    def detokenize(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.itos):
                raise VocabularyError(f"token id {i} outside vocabulary of size {len(self.itos)}")
            if i != self.bos_id:
                out.append(self.itos[i])
        return "".join(out)


@dataclass
class AttentionTrace:
    """Dense-run record for one sequence.

    ``logits`` holds all N*H heads, layer-major, shape (N*H, L, L), before
    masking. ``hidden`` is the first layer's residual stream after attention
    and before its feed-forward, shape (L, E). ``q``/``k`` are per layer,
    shape (H, L, D).
    """

    logits: np.ndarray
    hidden: np.ndarray
    q: list[np.ndarray]
    k: list[np.ndarray]
    n_layers: int
    n_heads: int

    def layer_logits(self, layer: int) -> np.ndarray:
        h = self.n_heads
        return self.logits[layer * h : (layer + 1) * h]

    @property
    def sparse_logits(self) -> np.ndarray:
        """Logits of layers 2..N, the heads that are predicted and masked."""
        return self.logits[self.n_heads :]


@dataclass
class BatchTrace:
    logits: list[np.ndarray]  # per layer (B, H, L, L)
    hidden: np.ndarray  # (B, L, E)
    q: list[np.ndarray]
    k: list[np.ndarray]

    def sequence(self, b: int) -> AttentionTrace:
        n = len(self.logits)
        h = self.logits[0].shape[1]
        return AttentionTrace(
            logits=np.concatenate([lg[b] for lg in self.logits], axis=0),
            hidden=self.hidden[b],
            q=[x[b] for x in self.q],
            k=[x[b] for x in self.k],
            n_layers=n,
            n_heads=h,
        )


def causal_mask(n: int, dtype) -> np.ndarray:
    return np.triu(np.full((n, n), MASK_VALUE, dtype=dtype), k=1)


class Block(Module):
    def __init__(self, rng: Rng, cfg: HostConfig, idx: int):
        e, f = cfg.embed_dim, cfg.embed_dim * cfg.ffn_mult
        p = f"layers.{idx}"
        dt = nn.default_dtype()
        self.ln1 = Parameter(np.ones(e, dtype=dt), name=f"{p}.ln1")
        self.wq = nn.uniform_fan_in(rng, (e, e), e, f"{p}.wq")
        self.wk = nn.uniform_fan_in(rng, (e, e), e, f"{p}.wk")
        self.wv = nn.uniform_fan_in(rng, (e, e), e, f"{p}.wv")
        self.wo = nn.uniform_fan_in(rng, (e, e), e, f"{p}.wo")
        self.ln2 = Parameter(np.ones(e, dtype=dt), name=f"{p}.ln2")
        self.fc1 = Linear(rng, e, f, name=f"{p}.fc1")
        self.fc2 = Linear(rng, f, e, name=f"{p}.fc2")


class HostModel(Module):
    def __init__(self, cfg: HostConfig, seed: int = 0):
        self.cfg = cfg
        rng = Rng(seed, "host-init")
        e = cfg.embed_dim
        dt = nn.default_dtype()
        self.tok_emb = Parameter(rng.uniform((cfg.vocab_size, e), -1.0, 1.0, dtype=np.float64).astype(dt), name="tok_emb")
        self.pos_emb = Parameter(rng.uniform((cfg.max_len, e), -1.0, 1.0, dtype=np.float64).astype(dt), name="pos_emb")
        self.layers = [Block(rng.child(f"layer{i}"), cfg, i) for i in range(cfg.n_layers)]
        self.ln_f = Parameter(np.ones(e, dtype=dt), name="ln_f")
        # zero head: the untrained model predicts the uniform distribution
        self.head = Parameter(np.zeros((e, cfg.vocab_size), dtype=dt), name="head")
        self.head_bias = Parameter(np.zeros(cfg.vocab_size, dtype=dt), name="head_bias")

    # ------------------------------------------------------------------ forward

    def forward(self, ids, layer_masks=None, record: bool = False):
        """Run the stack on a (B, L) batch of ids.

        ``layer_masks[i]`` replaces the causal mask of layer ``i`` (additive,
        broadcastable to (B, H, L, L)); ``None`` entries mean plain causal.
        Returns logits (B, L, V) and, if ``record``, a :class:`BatchTrace`.
        """
        cfg = self.cfg
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        b, n = ids.shape
        if n > cfg.max_len:
            raise ContextError(f"sequence length {n} exceeds context limit {cfg.max_len}")
        if n < 1:
            raise ContextError("empty sequence")
        dt = self.tok_emb.data.dtype
        causal = causal_mask(n, dt)
        x = nn.take_rows(self.tok_emb, ids) + nn.take_rows(self.pos_emb, np.arange(n))
        h_, d_ = cfg.n_heads, cfg.head_dim
        scale = 1.0 / math.sqrt(d_)
        rec_logits, rec_q, rec_k, hidden = [], [], [], None
        for i, blk in enumerate(self.layers):
            a = nn.layer_norm(x, blk.ln1)
            q = nn.transpose(nn.reshape(a @ blk.wq, (b, n, h_, d_)), (0, 2, 1, 3))
            k = nn.transpose(nn.reshape(a @ blk.wk, (b, n, h_, d_)), (0, 2, 1, 3))
            v = nn.transpose(nn.reshape(a @ blk.wv, (b, n, h_, d_)), (0, 2, 1, 3))
            scores = nn.matmul(q, nn.swap_last(k)) * scale
            mask = causal
            if layer_masks is not None and layer_masks[i] is not None:
                mask = layer_masks[i]
            p = nn.softmax(scores, mask)
            o = nn.reshape(nn.transpose(nn.matmul(p, v), (0, 2, 1, 3)), (b, n, cfg.embed_dim))
            x = x + o @ blk.wo
            if record:
                rec_logits.append(scores.data)
                rec_q.append(q.data)
                rec_k.append(k.data)
                if i == 0:
                    hidden = x.data
            f = nn.layer_norm(x, blk.ln2)
            x = x + blk.fc2(nn.gelu(blk.fc1(f)))
        x = nn.layer_norm(x, self.ln_f)
        logits = x @ self.head + self.head_bias
        if record:
            return logits, BatchTrace(rec_logits, hidden, rec_q, rec_k)
        return logits

    def forward_traced(self, tokens) -> tuple[np.ndarray, AttentionTrace]:
        logits, bt = self.forward(np.asarray(tokens)[None], record=True)
        return logits.data[0], bt.sequence(0)

    def trace_batch(self, ids) -> BatchTrace:
        _, bt = self.forward(ids, record=True)
        return bt

    def masked_logits(self, tokens, mask) -> np.ndarray:
        """Logits at every position with a selection mask applied to layers 2..N.

        Rows of ``mask`` beyond its step count stay causal-dense.
        """
        tokens = np.asarray(tokens)
        n = len(tokens)
        dt = self.tok_emb.data.dtype
        masks = [None] + [mask.additive(layer, n, dt) for layer in range(self.cfg.n_layers - 1)]
        return self.forward(tokens[None], layer_masks=masks).data[0]

    def forward_masked(self, tokens, mask) -> np.ndarray:
        """Next-token logits at the final position under ``mask``."""
        return self.masked_logits(tokens, mask)[-1]

    def dense_logits(self, tokens) -> np.ndarray:
        return self.forward(np.asarray(tokens)[None]).data[0]


def perplexity_from_logits(logits: np.ndarray, tokens) -> float:
    """exp of mean next-token cross-entropy; row i of ``logits`` predicts token i+1."""
    tokens = np.asarray(tokens)
    if len(tokens) < 2:
        raise ContractError("perplexity needs at least 2 tokens")
    lsm = nn.log_softmax_np(logits[:-1].astype(np.float64))
    nll = -lsm[np.arange(len(tokens) - 1), tokens[1:]]
    return float(np.exp(np.sum(nll) / nll.size))


def dense_perplexity(model: HostModel, tokens) -> float:
    if len(tokens) < 2:
        raise ContractError("perplexity needs at least 2 tokens")
    return perplexity_from_logits(model.dense_logits(tokens), tokens)


# ---------------------------------------------------------------------- data


def split_corpus(text: str) -> dict[str, str]:
    """Fixed line-aligned split: host 70%, predictor 20%, held-out 10%."""
    lines = text.splitlines(keepends=True)
    n = len(lines)
    a, b = int(n * 0.7), int(n * 0.9)
    return {"host": "".join(lines[:a]), "butler": "".join(lines[a:b]), "heldout": "".join(lines[b:])}


def line_starts(text: str) -> np.ndarray:
    starts = [0] + [i + 1 for i, c in enumerate(text) if c == "\n" and i + 1 < len(text)]
    return np.asarray(starts, dtype=np.int64)


def windows(tok: Tokenizer, text: str, seq_len: int) -> list[np.ndarray]:
    """Deterministic non-overlapping BOS-prefixed windows starting at line starts."""
    ids = np.asarray(tok.tokenize(text), dtype=np.int64)
    out, pos = [], 0
    starts = line_starts(text)
    for s in starts:
        if s < pos:
            continue
        chunk = ids[s : s + seq_len - 1]
        if len(chunk) < seq_len - 1:
            break
        out.append(np.concatenate([[tok.bos_id], chunk]))
        pos = s + seq_len - 1
    return out


class BatchSampler:
    def __init__(self, tok: Tokenizer, text: str, seq_len: int, rng: Rng):
        self.ids = np.asarray(tok.tokenize(text), dtype=np.int64)
        starts = line_starts(text)
        self.starts = starts[starts + seq_len - 1 <= len(self.ids)]
        if len(self.starts) == 0:
            raise DataError("text too short for the requested sequence length")
        self.seq_len = seq_len
        self.bos = tok.bos_id
        self.rng = rng

    def sample(self, batch: int) -> np.ndarray:
        picks = self.starts[self.rng.integers(0, len(self.starts), size=batch)]
        out = np.empty((batch, self.seq_len), dtype=np.int64)
        out[:, 0] = self.bos
        for r, s in enumerate(picks):
            out[r, 1:] = self.ids[s : s + self.seq_len - 1]
        return out


@dataclass
class HostTrainResult:
    model: HostModel
    tokenizer: Tokenizer
    initial_ppl: float
    final_ppl: float
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def heldout_perplexity(model: HostModel, seqs: list[np.ndarray]) -> float:
    nll, count = 0.0, 0
    for s in seqs:
        lsm = nn.log_softmax_np(model.dense_logits(s)[:-1].astype(np.float64))
        nll += float(-np.sum(lsm[np.arange(len(s) - 1), s[1:]]))
        count += len(s) - 1
    return math.exp(nll / count)


def train_host(
    corpus: str,
    cfg: HostConfig | None = None,
    steps: int = 5000,
    seed: int = 0,
    batch_size: int = 8,
    seq_len: int | None = None,
    lr: float = 3e-3,
    eval_windows: int = 16,
    tokenizer: Tokenizer | None = None,
    log_every: int = 0,
    log=None,
) -> HostTrainResult:
    cfg = cfg or HostConfig()
    if len(corpus) < 10 * cfg.max_len:
        raise DataError(f"corpus has {len(corpus)} characters, need at least {10 * cfg.max_len}")
    tok = tokenizer or Tokenizer.from_corpus(corpus)
    if cfg.vocab_size != tok.vocab_size:
        cfg = HostConfig(**{**cfg.__dict__, "vocab_size": tok.vocab_size})
    seq_len = seq_len or cfg.max_len
    parts = split_corpus(corpus)
    model = HostModel(cfg, seed=seed)
    heldout = windows(tok, parts["heldout"], seq_len)[:eval_windows]
    if not heldout:
        raise DataError("held-out split yields no evaluation windows")
    initial = heldout_perplexity(model, heldout)
    sampler = BatchSampler(tok, parts["host"], seq_len, Rng(seed, "batch-order"))
    opt = nn.Adam(model.parameters(), lr=lr)
    t0 = time.perf_counter()
    losses = []
    warmup = max(1, min(200, steps // 20))
    for step in range(steps):
        # linear warmup then cosine decay to 10%
        frac = step / max(1, steps)
        scale = min(1.0, (step + 1) / warmup) * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))
        for st in opt.states:
            st.lr = lr * scale
        ids = sampler.sample(batch_size)
        logits = model.forward(ids[:, :-1])
        loss = nn.cross_entropy(logits, ids[:, 1:])
        if not np.isfinite(loss.data):
            raise ArithmeticError(f"non-finite host loss at step {step}")
        nn.backward(loss)
        opt.step()
        losses.append(float(loss.data))
        if log and log_every and (step + 1) % log_every == 0:
            log(f"host step {step + 1}/{steps} loss {np.mean(losses[-log_every:]):.4f}")
    model.freeze()
    final = heldout_perplexity(model, heldout)
    return HostTrainResult(model, tok, initial, final, losses, time.perf_counter() - t0)
