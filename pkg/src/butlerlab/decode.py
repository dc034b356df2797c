"""Token-by-token decode simulation under a selection policy.

The whole input is treated as generated text (no prefill): at every step
``t`` the policy picks, for each head of layers 2..N, which of the tokens
0..t the query may see. Policies read the dense run's trace, which holds
the same values an incremental decoder would have at step ``t`` because
attention is causal. One masked forward then yields every step's logits.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .bench import BenchPools, BenchSample, Score, render_sample, score_prediction
from .host import AttentionTrace, ContextError, ContractError, HostModel, perplexity_from_logits
from .sparsity import Policy, PolicyConfig, PolicyError, SelectionMask, StepContext, make_policy, net_sparsity

RECORD_FIELDS = ("policy", "sparsity", "net_sparsity", "ppl_masked", "ppl_dense", "seed", "length")


class TruePredictor:
    """Stand-in predictor that returns the host's own logits (a perfect predictor)."""

    def importance(self, trace: AttentionTrace) -> np.ndarray:
        return trace.sparse_logits


def _importance(predictor, trace: AttentionTrace) -> np.ndarray:
    fn = getattr(predictor, "importance", None)
    if fn is not None:
        return fn(trace)
    return predictor.predict_importance(trace.hidden)


def step_context(trace: AttentionTrace, predictor=None) -> StepContext:
    predicted = None if predictor is None else _importance(predictor, trace)
    return StepContext(trace.logits, trace.k, trace.q, trace.n_layers, trace.n_heads, predicted)


def _policy(policy, host: HostModel, cfg: PolicyConfig | None, seed: int, predictor) -> Policy:
    if isinstance(policy, str):
        policy = make_policy(policy, cfg or PolicyConfig(), host.cfg.n_layers, host.cfg.n_heads, host.cfg.max_len, seed)
    if policy.needs_predictor and predictor is None:
        raise PolicyError(f"policy {policy.name!r} needs a predictor")
    return policy


@dataclass
class SimResult:
    policy: str
    sparsity: float
    seed: int
    length: int
    ppl_masked: float
    ppl_dense: float
    net_sparsity: float
    mask: SelectionMask = field(repr=False)
    continuation: list[int] | None = None
    wall_time: float = 0.0

    def record(self) -> dict:
        return {k: getattr(self, k) for k in RECORD_FIELDS}

    def to_json(self) -> str:
        return json.dumps(self.record(), sort_keys=False)


def simulate_decode(
    tokens,
    policy,
    host: HostModel,
    predictor=None,
    cfg: PolicyConfig | None = None,
    seed: int = 0,
) -> SimResult:
    """Masked vs dense perplexity of ``tokens`` with ``policy`` applied at every step."""
    t0 = time.perf_counter()
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) < 2:
        raise ContractError("simulation needs at least 2 tokens")
    pol = _policy(policy, host, cfg, seed, predictor)
    dense, trace = host.forward_traced(tokens)
    ctx = step_context(trace, predictor if pol.needs_predictor else None)
    mask = SelectionMask(host.cfg.n_layers - 1, host.cfg.n_heads)
    # rows 0..L-2 predict tokens 1..L-1; the last row scores nothing
    for t in range(len(tokens) - 1):
        mask.append(pol.select(t, ctx))
    masked = host.masked_logits(tokens, mask)
    return SimResult(
        policy=pol.name,
        sparsity=pol.cfg.sparsity,
        seed=seed,
        length=len(tokens),
        ppl_masked=perplexity_from_logits(masked, tokens),
        ppl_dense=perplexity_from_logits(dense, tokens),
        net_sparsity=net_sparsity(mask),
        mask=mask,
        wall_time=time.perf_counter() - t0,
    )


def greedy_continue(
    prefix,
    policy,
    host: HostModel,
    predictor=None,
    n: int = 1,
    cfg: PolicyConfig | None = None,
    seed: int = 0,
) -> list[int]:
    """Generate ``n`` tokens by masked greedy decoding; policy state persists across steps."""
    prefix = [int(x) for x in prefix]
    if len(prefix) + n > host.cfg.max_len:
        raise ContextError(f"prefix {len(prefix)} + {n} new tokens exceeds context limit {host.cfg.max_len}")
    if n == 0:
        return []
    pol = _policy(policy, host, cfg, seed, predictor)
    seq = list(prefix)
    mask = SelectionMask(host.cfg.n_layers - 1, host.cfg.n_heads)
    for _ in range(n):
        _, trace = host.forward_traced(seq)
        ctx = step_context(trace, predictor if pol.needs_predictor else None)
        while mask.steps < len(seq):
            mask.append(pol.select(mask.steps, ctx))
        logits = host.forward_masked(seq, mask)
        seq.append(int(np.argmax(logits)))
    return seq[len(prefix) :]


def dense_greedy(prefix, host: HostModel, n: int) -> list[int]:
    seq = [int(x) for x in prefix]
    for _ in range(n):
        seq.append(int(np.argmax(host.dense_logits(seq)[-1])))
    return seq[len(prefix) :]


# ------------------------------------------------------------------ benchmark


@dataclass
class BenchRow:
    sample_seed: int
    policy: str
    sparsity: float
    accuracy: int
    coverage: float
    produced: list[int] = field(default_factory=list, repr=False)


def score_sample(sample: BenchSample, policy, host: HostModel, predictor=None, cfg: PolicyConfig | None = None, seed: int = 0) -> tuple[Score, list[int]]:
    produced = greedy_continue(sample.prefix_ids, policy, host, predictor, len(sample.location_ids), cfg, seed)
    return score_prediction(sample.location_ids, produced), produced


def run_bench(
    host: HostModel,
    tokenizer,
    pools: BenchPools,
    policy: str,
    cfg: PolicyConfig,
    samples: int,
    seed: int,
    predictor=None,
) -> list[BenchRow]:
    """Score ``samples`` benchmark items with sample seeds ``seed .. seed+samples-1``."""
    rows = []
    for i in range(samples):
        sample = render_sample(pools, seed + i, tokenizer, max_tokens=host.cfg.max_len)
        score, produced = score_sample(sample, policy, host, predictor, cfg, seed + i)
        if score.accuracy and score.coverage != 1.0:
            raise ContractError(f"sample {seed + i}: accuracy without full coverage")
        rows.append(BenchRow(seed + i, policy, cfg.sparsity, score.accuracy, score.coverage, produced))
    return rows
