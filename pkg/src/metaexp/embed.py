"""Skip-gram listing embeddings with market-level negative sampling.

Sessions are sequences of listing ids viewed by one user. For every position
``i`` and every ``j`` with ``0 < |i - j| <= window_k`` the model scores the
pair (center ``L_i``, context ``L_j``) against ``negatives_m`` listings drawn
from the center listing's market. Each pair's loss is weighted by ``1/|s|`` so
that a session contributes its mean log-likelihood.
"""

from __future__ import annotations

import struct
import threading
import warnings
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, field

import numba
import numpy as np

from metaexp.datamodel import ListingRecord, SearchSession
from metaexp.errors import DimensionMismatch, EmptyCorpus, SchemaError, UnknownListing

MAGIC = b"MXEM"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class EmbedConfig:
    dim: int = 16
    window_k: int = 5
    negatives_m: int = 5
    epochs: int = 5
    learning_rate: float = 0.05
    seed: int = 0
    min_count: int = 1

    def __post_init__(self):
        for name in ("dim", "window_k", "negatives_m", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.min_count < 0:
            raise ValueError("min_count must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    counts: tuple[int, ...]
    markets: tuple[str, ...]
    pools: dict[str, tuple[int, ...]]

    @property
    def index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)


@dataclass
class EmbeddingMatrix:
    vocab: tuple[str, ...]
    input_weights: np.ndarray
    output_weights: np.ndarray
    epoch_losses: list[float] = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.vocab)
        if self.input_weights.shape[0] != n or self.output_weights.shape != self.input_weights.shape:
            raise DimensionMismatch("weight matrices do not match the vocabulary size")
        if not (np.all(np.isfinite(self.input_weights)) and np.all(np.isfinite(self.output_weights))):
            raise ValueError("embedding weights must be finite")

    @property
    def dim(self) -> int:
        return self.input_weights.shape[1]

    @property
    def vectors(self) -> np.ndarray:
        """The listing demand vectors (input weights)."""
        return self.input_weights

    def vector(self, listing_id: str) -> np.ndarray:
        return self.input_weights[self.vocab.index(listing_id)]


def build_vocab(
    sessions: Sequence[SearchSession], listings: Sequence[ListingRecord], min_count: int = 1
) -> Vocabulary:
    """Sorted vocabulary of viewed listings with per-market token pools."""
    market_of = {r.listing_id: r.market_id for r in listings}
    counts: Counter[str] = Counter()
    for s in sessions:
        for lid in s.listings_viewed:
            if lid not in market_of:
                raise UnknownListing(f"session of user {s.user_id!r} references unknown listing {lid!r}")
            counts[lid] += 1
    tokens = tuple(sorted(lid for lid in market_of if counts[lid] >= max(min_count, 1)))
    markets = tuple(market_of[t] for t in tokens)
    pools: dict[str, list[int]] = {}
    for i, m in enumerate(markets):
        pools.setdefault(m, []).append(i)
    return Vocabulary(
        tokens=tokens,
        counts=tuple(counts[t] for t in tokens),
        markets=markets,
        pools={m: tuple(ix) for m, ix in sorted(pools.items())},
    )


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return np.exp(_log_sigmoid(x))


def pair_loss(center, context, negatives):
    """Negative-sampling loss of one (center, context) pair.

    ``loss = -log s(context . center) - sum_n log s(-negative_n . center)``

    Returns ``(loss, grad_center, grad_context, grad_negatives)`` where
    ``grad_negatives`` has one row per negative.
    """
    center = np.asarray(center, dtype=float)
    context = np.asarray(context, dtype=float)
    negatives = np.asarray(negatives, dtype=float).reshape(-1, center.shape[0]) \
        if len(negatives) else np.zeros((0, center.shape[0]))
    if center.ndim != 1 or context.shape != center.shape or negatives.shape[1] != center.shape[0]:
        raise DimensionMismatch("center, context and negatives must share one dimension")
    if not (np.all(np.isfinite(center)) and np.all(np.isfinite(context)) and np.all(np.isfinite(negatives))):
        raise ValueError("inputs must be finite")

    pos = context @ center
    neg = negatives @ center
    loss = -_log_sigmoid(pos) - np.sum(_log_sigmoid(-neg))
    g_pos = -_sigmoid(-pos)          # d loss / d pos
    g_neg = _sigmoid(neg)            # d loss / d neg_n
    grad_center = g_pos * context + g_neg @ negatives
    grad_context = g_pos * center
    grad_negatives = np.outer(g_neg, center)
    return float(max(loss, 0.0)), grad_center, grad_context, grad_negatives


# ---------------------------------------------------------------- training kernel

@numba.njit(cache=True)
def _next_u64(state):
    # splitmix64; state is a 1-element uint64 array
    state[0] += np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _randbelow(state, n):
    return np.int64(_next_u64(state) % np.uint64(n))


@numba.njit(cache=True)
def _log_sigmoid_scalar(x):
    if x >= 0:
        return -np.log1p(np.exp(-x))
    return x - np.log1p(np.exp(x))


@numba.njit(cache=True)
def _apply_pair(W, V, c, o, negs, step):
    """One SGD step on the pair loss; returns the pair's loss."""
    dim = W.shape[1]
    pos = 0.0
    for d in range(dim):
        pos += V[o, d] * W[c, d]
    loss = -_log_sigmoid_scalar(pos)
    g_pos = -np.exp(_log_sigmoid_scalar(-pos))
    grad_c = np.empty(dim)
    for d in range(dim):
        grad_c[d] = g_pos * V[o, d]
    g_negs = np.empty(negs.shape[0])
    for t in range(negs.shape[0]):
        n = negs[t]
        s = 0.0
        for d in range(dim):
            s += V[n, d] * W[c, d]
        loss -= _log_sigmoid_scalar(-s)
        g_negs[t] = np.exp(_log_sigmoid_scalar(s))
        for d in range(dim):
            grad_c[d] += g_negs[t] * V[n, d]
    # output-side updates use the pre-step center vector
    for d in range(dim):
        V[o, d] -= step * g_pos * W[c, d]
    for t in range(negs.shape[0]):
        n = negs[t]
        for d in range(dim):
            V[n, d] -= step * g_negs[t] * W[c, d]
    for d in range(dim):
        W[c, d] -= step * grad_c[d]
    return loss


@numba.njit(nogil=True, cache=True)
def _train_shard(W, V, tokens, offsets, token_pool, pool_flat, pool_start, pool_len,
                 window, n_neg, lr0, lr1, total_pairs, pairs_before, rng_state,
                 counters, token_market):
    """One pass over a shard of sessions. Returns (weighted loss, weight, pairs)."""
    loss_sum = 0.0
    weight_sum = 0.0
    done = 0
    n_vocab = W.shape[0]
    negs = np.empty(n_neg, dtype=np.int64)
    for s in range(offsets.shape[0] - 1):
        a = offsets[s]
        b = offsets[s + 1]
        length = b - a
        if length < 2:
            continue
        w = 1.0 / length
        for i in range(length):
            c = tokens[a + i]
            lo = max(0, i - window)
            hi = min(length, i + window + 1)
            for j in range(lo, hi):
                if j == i:
                    continue
                o = tokens[a + j]
                p = token_pool[c]
                for t in range(n_neg):
                    if p >= 0:
                        negs[t] = pool_flat[pool_start[p] + _randbelow(rng_state, pool_len[p])]
                    else:
                        negs[t] = _randbelow(rng_state, n_vocab)
                    if token_market[negs[t]] != token_market[c]:
                        counters[0] += 1
                    counters[1] += 1
                frac = (pairs_before + done) / max(total_pairs, 1)
                lr = lr0 + (lr1 - lr0) * min(frac, 1.0)
                loss_sum += w * _apply_pair(W, V, c, o, negs, lr * w)
                weight_sum += w
                done += 1
    return loss_sum, weight_sum, done


@numba.njit(nogil=True, cache=True)
def _eval_loss(W, V, tokens, offsets, token_pool, pool_flat, pool_start, pool_len,
               window, n_neg, rng_state):
    """Weighted objective over all pairs without updating the weights."""
    loss_sum = 0.0
    weight_sum = 0.0
    n_vocab = W.shape[0]
    dim = W.shape[1]
    for s in range(offsets.shape[0] - 1):
        a = offsets[s]
        length = offsets[s + 1] - a
        if length < 2:
            continue
        w = 1.0 / length
        for i in range(length):
            c = tokens[a + i]
            for j in range(max(0, i - window), min(length, i + window + 1)):
                if j == i:
                    continue
                o = tokens[a + j]
                pos = 0.0
                for d in range(dim):
                    pos += V[o, d] * W[c, d]
                loss = -_log_sigmoid_scalar(pos)
                p = token_pool[c]
                for t in range(n_neg):
                    if p >= 0:
                        n = pool_flat[pool_start[p] + _randbelow(rng_state, pool_len[p])]
                    else:
                        n = _randbelow(rng_state, n_vocab)
                    x = 0.0
                    for d in range(dim):
                        x += V[n, d] * W[c, d]
                    loss -= _log_sigmoid_scalar(-x)
                loss_sum += w * loss
                weight_sum += w
    return loss_sum / weight_sum


def _count_pairs(offsets: np.ndarray, window: int) -> int:
    total = 0
    for length in np.diff(offsets):
        for i in range(length):
            total += min(length, i + window + 1) - max(0, i - window) - 1
    return total


def train_embeddings(
    sessions: Sequence[SearchSession],
    listings: Sequence[ListingRecord],
    config: EmbedConfig,
    *,
    workers: int,
) -> EmbeddingMatrix:
    """Fit input/output weight matrices by SGD over all window pairs.

    Output is bit-reproducible for a fixed seed only with ``workers=1``. With
    more workers, sessions are sharded across threads that update the shared
    matrices without locks, so results depend on scheduling.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if not sessions:
        raise EmptyCorpus("no sessions to train on")
    vocab = build_vocab(sessions, listings, config.min_count)
    if not len(vocab):
        raise EmptyCorpus("vocabulary is empty after applying min_count")

    index = vocab.index
    seqs = [[index[l] for l in s.listings_viewed if l in index] for s in sessions]
    offsets = np.zeros(len(seqs) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(q) for q in seqs])
    tokens = np.fromiter((t for q in seqs for t in q), dtype=np.int64, count=int(offsets[-1]))

    rng = np.random.Generator(np.random.PCG64(config.seed))
    n, dim = len(vocab), config.dim
    W = rng.uniform(-0.5 / dim, 0.5 / dim, size=(n, dim))
    V = np.zeros((n, dim))

    pairs_per_epoch = _count_pairs(offsets, config.window_k)
    if pairs_per_epoch == 0:
        warnings.warn("corpus yields no training pairs; returning initial weights", RuntimeWarning)
        return EmbeddingMatrix(vocab.tokens, W, V, [], {"pairs": 0})

    market_codes = {m: k for k, m in enumerate(vocab.pools)}
    token_market = np.array([market_codes[m] for m in vocab.markets], dtype=np.int64)
    pool_flat, pool_start, pool_len = [], [], []
    for m, members in vocab.pools.items():
        pool_start.append(len(pool_flat))
        pool_len.append(len(members))
        pool_flat.extend(members)
    # markets too small to supply negatives fall back to the global pool
    usable = np.array([ln >= config.negatives_m + 1 for ln in pool_len])
    token_pool = np.where(usable[token_market], token_market, -1).astype(np.int64)
    pool_flat = np.array(pool_flat, dtype=np.int64)
    pool_start = np.array(pool_start, dtype=np.int64)
    pool_len = np.array(pool_len, dtype=np.int64)

    shards = np.array_split(np.arange(len(seqs)), workers)
    shard_data = []
    for k, ids in enumerate(shards):
        if len(ids) == 0:
            continue
        sub_offsets = offsets[ids[0]:ids[-1] + 2] - offsets[ids[0]]
        sub_tokens = tokens[offsets[ids[0]]:offsets[ids[-1] + 1]]
        state = np.array([(config.seed + 0x632BE59BD9B4E019 * (k + 1)) % 2**64], dtype=np.uint64)
        shard_data.append((sub_tokens, sub_offsets, state, _count_pairs(sub_offsets, config.window_k)))

    lr0, lr1 = config.learning_rate, 0.1 * config.learning_rate
    counters = np.zeros((len(shard_data), 2), dtype=np.int64)
    epoch_losses = []
    for epoch in range(config.epochs):
        results = [None] * len(shard_data)

        def run(k):
            sub_tokens, sub_offsets, state, shard_pairs = shard_data[k]
            results[k] = _train_shard(
                W, V, sub_tokens, sub_offsets, token_pool, pool_flat, pool_start, pool_len,
                config.window_k, config.negatives_m, lr0, lr1,
                shard_pairs * config.epochs, shard_pairs * epoch, state, counters[k], token_market,
            )

        if len(shard_data) == 1:
            run(0)
        else:
            threads = [threading.Thread(target=run, args=(k,)) for k in range(len(shard_data))]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        # same negative stream every epoch, so the curve only moves with the weights
        eval_state = np.array([config.seed ^ 0xA0761D6478BD642F], dtype=np.uint64)
        epoch_losses.append(float(_eval_loss(
            W, V, tokens, offsets, token_pool, pool_flat, pool_start, pool_len,
            config.window_k, config.negatives_m, eval_state,
        )))

    stats = {
        "pairs": int(pairs_per_epoch),
        "negative_draws": int(counters[:, 1].sum()),
        "cross_market_negatives": int(counters[:, 0].sum()),
        "workers": workers,
    }
    return EmbeddingMatrix(vocab.tokens, W, V, epoch_losses, stats)


# ---------------------------------------------------------------- persistence

def save_embeddings(emb: EmbeddingMatrix, path) -> None:
    """Binary layout: magic, version, |V|, dim, vocabulary, then W and V as
    row-major little-endian float32."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQI", FORMAT_VERSION, len(emb.vocab), emb.dim))
        for token in emb.vocab:
            raw = token.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(np.ascontiguousarray(emb.input_weights, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(emb.output_weights, dtype="<f4").tobytes())


def load_embeddings(path) -> EmbeddingMatrix:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise SchemaError("not an embedding file (bad magic)")
    version, n, dim = struct.unpack_from("<IQI", data, 4)
    if version != FORMAT_VERSION:
        raise SchemaError(f"unsupported embedding format version {version}")
    pos = 4 + struct.calcsize("<IQI")
    vocab = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        vocab.append(data[pos:pos + ln].decode("utf-8"))
        pos += ln
    size = n * dim * 4
    if len(data) != pos + 2 * size:
        raise SchemaError("embedding file is truncated or has trailing bytes")
    W = np.frombuffer(data, dtype="<f4", count=n * dim, offset=pos).reshape(n, dim).astype(float)
    V = np.frombuffer(data, dtype="<f4", count=n * dim, offset=pos + size).reshape(n, dim).astype(float)
    return EmbeddingMatrix(tuple(vocab), W, V)


def export_text(emb: EmbeddingMatrix, path) -> None:
    """word2vec-style text: ``|V| dim`` then one listing per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(emb.vocab)} {emb.dim}\n")
        for token, row in zip(emb.vocab, emb.input_weights):
            fh.write(token + " " + " ".join(repr(float(x)) for x in row) + "\n")
