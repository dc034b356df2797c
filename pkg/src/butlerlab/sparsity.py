"""Token selection policies for decode-time KV sparsity.

Every policy answers one question per decode step ``t``: which past tokens
``0..t`` may each (layer, head) of host layers 2..N attend to? The anchors
``0..A-1`` and the current token are always kept. Everything else competes
for the remaining budget. When scores tie, the smaller index wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .host import MASK_VALUE, ContractError, causal_mask
from .nn import Rng, softmax_rows_np

POLICY_NAMES = (
    "oracle",
    "oracle-evict",
    "streaming",
    "h2o",
    "snapkv",
    "quest",
    "butler",
    "proxy-first",
    "proxy-prev",
    "random",
)


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    sparsity: float = 0.5
    anchors: int = 4
    window: int | None = None  # None: window sized to the step budget
    obs_window: int = 16
    page_size: int = 16
    pooling: str = "mean"

    def __post_init__(self):
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError("sparsity must lie in [0, 1)")
        if self.anchors < 0 or self.obs_window < 1 or self.page_size < 1:
            raise ValueError("anchors >= 0, obs_window >= 1 and page_size >= 1 required")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1")
        if self.pooling not in ("mean", "max"):
            raise ValueError("pooling must be 'mean' or 'max'")


def budget(t: int, sparsity: float, anchors: int) -> int:
    """Tokens a head may keep at step ``t``: the dense share, floored at anchors + current."""
    k = max(anchors + 1, math.ceil((1.0 - sparsity) * (t + 1) - 1e-9))
    return min(k, t + 1)


def forced_mask(t: int, anchors: int) -> np.ndarray:
    m = np.zeros(t + 1, dtype=bool)
    m[: min(anchors, t + 1)] = True
    m[t] = True
    return m


def topk_mask(values: np.ndarray, k: int, forced: np.ndarray, candidates: np.ndarray | None = None) -> np.ndarray:
    """Boolean keep-mask along the last axis.

    Forced positions are always in. The rest of the ``k`` slots go to the
    largest ``values`` among ``candidates``, and ties go to the smaller index.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[-1]
    forced = np.broadcast_to(forced, values.shape)
    n_forced = int(forced[(0,) * (values.ndim - 1)].sum()) if values.ndim > 1 else int(forced.sum())
    if k < n_forced:
        raise ContractError(f"budget {k} smaller than the {n_forced} forced tokens")
    eligible = np.ones(values.shape, dtype=bool) if candidates is None else np.broadcast_to(candidates, values.shape)
    score = np.where(forced, np.inf, np.where(eligible, values, -np.inf))
    order = np.argsort(-score, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(n), axis=-1)
    return (rank < min(k, n)) & (forced | eligible)


def _indices(mask: np.ndarray) -> list[int]:
    return [int(i) for i in np.flatnonzero(mask)]


def oracle_select(row, k: int, anchors: int) -> list[int]:
    """Top-``k`` by the true logits of the current query (``row`` covers 0..t)."""
    row = np.asarray(row)
    t = len(row) - 1
    return _indices(topk_mask(row, k, forced_mask(t, anchors)))


butler_select = oracle_select  # same rule, ranked by predicted logits
proxy_select = oracle_select  # same rule, ranked by another layer's logits


def streaming_select(t: int, window: int, anchors: int) -> list[int]:
    keep = set(range(min(anchors, t + 1))) | set(range(max(0, t - window + 1), t + 1))
    return sorted(keep)


def snapkv_scores(recent_rows, pooling: str = "mean") -> np.ndarray:
    rows = np.asarray(recent_rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None]
    return rows.mean(axis=-2) if pooling == "mean" else rows.max(axis=-2)


def snapkv_select(recent_rows, k: int, anchors: int, pooling: str = "mean") -> list[int]:
    """Top-``k`` by attention weight pooled over the observation window rows."""
    scores = snapkv_scores(recent_rows, pooling)
    t = scores.shape[-1] - 1
    return _indices(topk_mask(scores, k, forced_mask(t, anchors)))


# ------------------------------------------------------------------ H2O


@dataclass
class H2OState:
    """Per-cell retained set and accumulated attention, leading axes are cells."""

    alive: np.ndarray  # (..., capacity) bool
    acc: np.ndarray  # (..., capacity) float64

    @classmethod
    def empty(cls, cells: tuple[int, ...], capacity: int) -> "H2OState":
        return cls(np.zeros(cells + (capacity,), dtype=bool), np.zeros(cells + (capacity,), dtype=np.float64))

    def retained(self, cell=()) -> list[int]:
        return _indices(self.alive[cell])


def h2o_step(state: H2OState, t: int, weights: np.ndarray, k: int, anchors: int) -> np.ndarray:
    """Admit token ``t``, add this step's attention, evict down to ``k``.

    ``weights`` are the current query's post-softmax weights over positions
    0..t, zero wherever the token is not retained. Returns the keep-mask over
    0..t. Eviction takes the lowest accumulated score outside the anchors and
    the current token; among equal scores the larger index goes.
    """
    state.alive[..., t] = True
    state.acc[..., t] = 0.0
    state.acc[..., : t + 1] += np.where(state.alive[..., : t + 1], weights, 0.0)
    forced = forced_mask(t, anchors)
    while True:
        alive = state.alive[..., : t + 1]
        over = alive.sum(axis=-1) > k
        if not over.any():
            break
        evictable = alive & ~forced
        score = np.where(evictable, state.acc[..., : t + 1], np.inf)
        # reversed argmin picks the largest index among equal minima
        victim = t - np.argmin(score[..., ::-1], axis=-1)
        drop = (np.arange(t + 1) == victim[..., None]) & over[..., None]
        state.alive[..., : t + 1] &= ~drop
    return state.alive[..., : t + 1].copy()


# ------------------------------------------------------------------ Quest


@dataclass
class PageMeta:
    maxs: np.ndarray  # (pages, D)
    mins: np.ndarray  # (pages, D)
    page_size: int
    length: int

    @property
    def pages(self) -> int:
        return self.maxs.shape[-2]


def build_page_meta(keys, page_size: int) -> PageMeta:
    """Elementwise max/min of the key rows in each page of ``page_size`` tokens."""
    keys = np.asarray(keys)
    n = keys.shape[-2]
    starts = np.arange(0, n, page_size)
    return PageMeta(
        np.maximum.reduceat(keys, starts, axis=-2),
        np.minimum.reduceat(keys, starts, axis=-2),
        page_size,
        n,
    )


def page_scores(query, meta: PageMeta) -> np.ndarray:
    """Upper bound on q.k for each page: sum_i max(q_i*max_i, q_i*min_i)."""
    q = np.asarray(query, dtype=np.float64)[..., None, :]
    return np.maximum(q * meta.maxs, q * meta.mins).sum(axis=-1)


def quest_page_select(query, meta: PageMeta, k: int, anchors: int) -> list[int]:
    """Admit whole pages by score until ``k`` minus the forced count non-forced slots are filled."""
    return _indices(_quest_mask(page_scores(query, meta), meta.page_size, meta.length, k, anchors))


def _quest_mask(scores: np.ndarray, page_size: int, n: int, k: int, anchors: int) -> np.ndarray:
    t = n - 1
    forced = forced_mask(t, anchors)
    need = k - int(forced.sum())
    if need < 0:
        raise ContractError(f"budget {k} smaller than the forced set")
    pages = scores.shape[-1]
    page_of = np.arange(n) // page_size
    free_per_page = np.bincount(page_of[~forced], minlength=pages)
    order = np.argsort(-scores, axis=-1, kind="stable")
    covered = np.cumsum(free_per_page[order], axis=-1)
    # a page is admitted if coverage before it is still short of the need
    before = covered - free_per_page[order]
    admit_sorted = before < need
    admitted = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(admitted, order, admit_sorted, axis=-1)
    return np.take(admitted, page_of, axis=-1) | forced


# ------------------------------------------------------------------ masks


@dataclass
class SelectionMask:
    """Keep-masks per decode step: ``rows[t]`` is bool (layers 2..N, heads, t+1)."""

    n_layers: int  # masked layers, i.e. host layers - 1
    n_heads: int
    rows: list[np.ndarray] = field(default_factory=list)

    def append(self, keep: np.ndarray) -> None:
        t = len(self.rows)
        if keep.shape != (self.n_layers, self.n_heads, t + 1):
            raise ContractError(f"step {t}: mask shape {keep.shape}")
        if not keep.any(axis=-1).all():
            raise ContractError(f"step {t}: some head retains no tokens")
        self.rows.append(keep)

    @classmethod
    def full(cls, n_layers: int, n_heads: int, steps: int) -> "SelectionMask":
        m = cls(n_layers, n_heads)
        for t in range(steps):
            m.rows.append(np.ones((n_layers, n_heads, t + 1), dtype=bool))
        return m

    @property
    def steps(self) -> int:
        return len(self.rows)

    def indices(self, t: int, layer: int, head: int) -> list[int]:
        return _indices(self.rows[t][layer, head])

    def additive(self, layer: int, n: int, dtype) -> np.ndarray:
        """(1, H, n, n) additive attention mask for masked layer ``layer`` (0 = host layer 2)."""
        m = np.broadcast_to(causal_mask(n, dtype), (self.n_heads, n, n)).copy()
        for t in range(min(n, len(self.rows))):
            keep = self.rows[t][layer]
            if not keep.any(axis=-1).all():
                raise ContractError(f"step {t}: some head retains no tokens")
            m[:, t, : t + 1] = np.where(keep, 0.0, MASK_VALUE)
        return m[None]

    def counts(self) -> tuple[int, int]:
        kept = sum(int(r.sum()) for r in self.rows)
        total = sum(r.size for r in self.rows)
        return kept, total


def net_sparsity(mask: SelectionMask) -> float:
    kept, total = mask.counts()
    return 1.0 - kept / total if total else 0.0


# ------------------------------------------------------------------ policies


@dataclass
class StepContext:
    """What a policy may look at while choosing step ``t``.

    ``logits`` are the dense run's pre-softmax logits for all N*H heads,
    ``keys``/``queries`` per host layer (H, n, D), ``predicted`` the
    predictor's logits for layers 2..N.
    """

    logits: np.ndarray
    keys: list[np.ndarray]
    queries: list[np.ndarray]
    n_layers: int
    n_heads: int
    predicted: np.ndarray | None = None

    def rows(self, t: int, first: int = 1) -> np.ndarray:
        """True logits row ``t`` for host layers ``first``+1..N as (N-first, H, t+1)."""
        h = self.n_heads
        return self.logits[first * h :, t, : t + 1].reshape(self.n_layers - first, h, t + 1)


class Policy:
    name = "base"
    needs_predictor = False
    evicting = False

    def __init__(self, cfg: PolicyConfig, n_layers: int, n_heads: int, capacity: int, seed: int = 0):
        self.cfg = cfg
        self.cells = (n_layers - 1, n_heads)
        self.capacity = capacity
        self.seed = seed

    def k(self, t: int) -> int:
        return budget(t, self.cfg.sparsity, self.cfg.anchors)

    def forced(self, t: int) -> np.ndarray:
        return forced_mask(t, self.cfg.anchors)

    def select(self, t: int, ctx: StepContext) -> np.ndarray:
        raise NotImplementedError


class OraclePolicy(Policy):
    name = "oracle"

    def select(self, t, ctx):
        return topk_mask(ctx.rows(t), self.k(t), self.forced(t))


class ButlerPolicy(Policy):
    name = "butler"
    needs_predictor = True

    def select(self, t, ctx):
        if ctx.predicted is None:
            raise PolicyError("butler policy needs predicted logits")
        row = ctx.predicted[:, t, : t + 1].reshape(self.cells + (t + 1,))
        return topk_mask(row, self.k(t), self.forced(t))


class ProxyPolicy(Policy):
    """Rank each head by the same head's true logits in another layer."""

    def __init__(self, *args, source: str = "first", **kwargs):
        super().__init__(*args, **kwargs)
        self.source = source
        self.name = f"proxy-{source}"

    def select(self, t, ctx):
        all_rows = ctx.logits[:, t, : t + 1].reshape(ctx.n_layers, ctx.n_heads, t + 1)
        if self.source == "first":
            src = np.broadcast_to(all_rows[0], self.cells + (t + 1,))
        else:
            src = all_rows[:-1]  # host layer l uses layer l-1
        return topk_mask(src, self.k(t), self.forced(t))


class StreamingPolicy(Policy):
    name = "streaming"

    def select(self, t, ctx):
        window = self.cfg.window or max(1, self.k(t) - self.cfg.anchors)
        keep = np.zeros(t + 1, dtype=bool)
        keep[streaming_select(t, window, self.cfg.anchors)] = True
        return np.broadcast_to(keep, self.cells + (t + 1,)).copy()


class RandomPolicy(Policy):
    name = "random"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.rng = Rng(self.seed, "random-policy")

    def select(self, t, ctx):
        noise = self.rng.uniform(self.cells + (t + 1,), dtype=np.float64)
        return topk_mask(noise, self.k(t), self.forced(t))


class OracleEvictPolicy(Policy):
    """Oracle ranking restricted to tokens that survived every earlier step."""

    name = "oracle-evict"
    evicting = True

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.alive = np.zeros(self.cells + (self.capacity,), dtype=bool)

    def select(self, t, ctx):
        self.alive[..., t] = True
        cand = self.alive[..., : t + 1]
        keep = topk_mask(ctx.rows(t), self.k(t), self.forced(t), cand)
        self.alive[..., : t + 1] = keep
        return keep


def masked_softmax(logits: np.ndarray, keep: np.ndarray) -> np.ndarray:
    z = np.where(keep, logits.astype(np.float64), -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


class H2OPolicy(Policy):
    name = "h2o"
    evicting = True

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.state = H2OState.empty(self.cells, self.capacity)

    def select(self, t, ctx):
        alive = self.state.alive[..., : t + 1].copy()
        alive[..., t] = True
        weights = masked_softmax(ctx.rows(t), alive)
        return h2o_step(self.state, t, weights, self.k(t), self.cfg.anchors)


class SnapKVPolicy(Policy):
    """Pooled attention of the last ``obs_window`` queries, with permanent eviction."""

    name = "snapkv"
    evicting = True

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.alive = np.zeros(self.cells + (self.capacity,), dtype=bool)

    def select(self, t, ctx):
        self.alive[..., t] = True
        cand = self.alive[..., : t + 1]
        lo = max(0, t - self.cfg.obs_window + 1)
        h = ctx.n_heads
        rows = ctx.logits[h:, lo : t + 1, : t + 1].reshape(self.cells + (t + 1 - lo, t + 1))
        visible = cand[..., None, :] & (np.arange(t + 1)[None, :] <= np.arange(lo, t + 1)[:, None])
        weights = masked_softmax(rows, visible)
        scores = snapkv_scores(weights, self.cfg.pooling)
        keep = topk_mask(scores, self.k(t), self.forced(t), cand)
        self.alive[..., : t + 1] = keep
        return keep


class QuestPolicy(Policy):
    name = "quest"

    def select(self, t, ctx):
        out = np.empty(self.cells + (t + 1,), dtype=bool)
        for layer in range(self.cells[0]):
            keys = ctx.keys[layer + 1][:, : t + 1]
            meta = build_page_meta(keys, self.cfg.page_size)
            q = ctx.queries[layer + 1][:, t]
            scores = page_scores(q, meta)
            out[layer] = _quest_mask(scores, self.cfg.page_size, t + 1, self.k(t), self.cfg.anchors)
        return out


_REGISTRY = {
    "oracle": OraclePolicy,
    "oracle-evict": OracleEvictPolicy,
    "streaming": StreamingPolicy,
    "h2o": H2OPolicy,
    "snapkv": SnapKVPolicy,
    "quest": QuestPolicy,
    "butler": ButlerPolicy,
    "random": RandomPolicy,
}


def make_policy(name: str, cfg: PolicyConfig, n_layers: int, n_heads: int, capacity: int, seed: int = 0) -> Policy:
    if name in ("proxy-first", "proxy-prev"):
        return ProxyPolicy(cfg, n_layers, n_heads, capacity, seed, source=name.split("-")[1])
    try:
        cls = _REGISTRY[name]
    except KeyError:
        raise PolicyError(f"unknown policy {name!r}; choose from {', '.join(POLICY_NAMES)}") from None
    return cls(cfg, n_layers, n_heads, capacity, seed)
