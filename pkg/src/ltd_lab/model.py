"""Toy pre-LN transformer stacks with three forward modes.

``forward_baseline`` runs every layer at full sequence length.
``forward_random_ltd`` gathers each middle layer's kept token rows,
runs the layer on the short sequence, and combines the output back with
the untouched dropped rows, so the next layer always sees a full-length
input.  ``forward_tokenbypass`` instead picks one kept set and lets the
dropped tokens skip a whole span of consecutive middle layers.

Kept indices are sorted ascending everywhere, which preserves original
token order inside shortened sequences; for causal models the
original-position comparison then reduces to an ordinary
lower-triangular mask over the subsequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import checkpoint
from .schedule import DropPlan, _counter_rng
from .tensor import (Parameter, Tensor, add, combine_rows, cross_entropy,
                     dropout, embedding_lookup, gather_rows, gelu, layernorm,
                     matmul, mean, mul, reshape, softmax, transpose)

_DOMAIN_INIT = 0x696E6974  # "init"


class ModelError(ValueError):
    """Invalid model configuration or forward arguments."""


class BypassMetric(Enum):
    RANDOM = "random"
    LOSS_EMA = "loss_ema"


@dataclass(frozen=True)
class TransformerConfig:
    l: int
    d: int
    heads: int
    s: int
    vocab: int
    causal: bool = True
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.l < 2:
            raise ModelError(f"need at least 2 layers, got {self.l}")
        if self.d % self.heads != 0:
            raise ModelError(f"d={self.d} not divisible by heads={self.heads}")
        if self.vocab < 2:
            raise ModelError(f"vocab must be >= 2, got {self.vocab}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ModelError(f"dropout_rate must be in [0, 1)")


@dataclass(frozen=True)
class BypassConfig:
    """Span [start_layer, end_layer] that dropped tokens skip entirely.

    keep_highest_loss controls the LOSS_EMA direction: True keeps the
    tokens with the largest average loss (bypasses the easy ones).
    """

    start_layer: int
    end_layer: int
    keep_fraction: float
    metric: BypassMetric = BypassMetric.LOSS_EMA
    ema_decay: float = 0.9
    keep_highest_loss: bool = True

    def __post_init__(self):
        if not (0.0 < self.keep_fraction <= 1.0):
            raise ModelError(f"keep_fraction must be in (0, 1], "
                             f"got {self.keep_fraction}")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ModelError(f"ema_decay must be in [0, 1)")
        if self.start_layer > self.end_layer:
            raise ModelError("start_layer must not exceed end_layer")


class TokenLossEMA:
    """Per-vocabulary-id exponential moving average of observed loss."""

    def __init__(self, vocab: int, decay: float = 0.9):
        if not (0.0 <= decay < 1.0):
            raise ModelError(f"decay must be in [0, 1), got {decay}")
        self.decay = decay
        self.values = np.zeros(vocab)
        self.counts = np.zeros(vocab, dtype=np.int64)

    def seen(self, token_id: int) -> bool:
        return self.counts[token_id] > 0


def update_token_loss_ema(ema: TokenLossEMA, token_ids, per_token_losses):
    """Fold one batch of (id, loss) observations into the table.

    The first observation of an id initializes its entry to the loss;
    later ones apply decay*old + (1-decay)*loss in sequence order.
    """
    ids = np.asarray(token_ids).ravel()
    losses = np.asarray(per_token_losses).ravel()
    if ids.shape != losses.shape:
        raise ModelError(f"ids and losses disagree: {ids.shape} "
                         f"vs {losses.shape}")
    if losses.size and losses.min() < 0:
        raise ModelError("negative per-token loss")
    d = ema.decay
    for tid, loss in zip(ids.tolist(), losses.tolist()):
        if ema.counts[tid] == 0:
            ema.values[tid] = loss
        else:
            ema.values[tid] = d * ema.values[tid] + (1.0 - d) * loss
        ema.counts[tid] += 1
    return ema


class TransformerModel:
    """Parameter container plus the three forward modes."""

    def __init__(self, cfg: TransformerConfig, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}
        self._masks: dict[int, np.ndarray] = {}
        self._init_params()

    # -- parameters ---------------------------------------------------------

    def _add_param(self, name: str, values: np.ndarray):
        if name in self.params:
            raise ModelError(f"duplicate parameter name {name}")
        self.params[name] = Parameter(name, values.astype(self.dtype))

    def _init_params(self):
        cfg = self.cfg
        rng = _counter_rng(_DOMAIN_INIT, cfg.seed)
        std = 0.02
        # residual-branch output projections get the usual depth scaling
        resid_std = std / math.sqrt(2 * cfg.l)

        def normal(*shape, scale=std):
            return rng.normal(0.0, scale, size=shape)

        self._add_param("tok_emb", normal(cfg.vocab, cfg.d))
        self._add_param("pos_emb", normal(cfg.s, cfg.d))
        for i in range(cfg.l):
            p = f"h{i}."
            self._add_param(p + "ln1.g", np.ones(cfg.d))
            self._add_param(p + "ln1.b", np.zeros(cfg.d))
            for w in ("wq", "wk", "wv"):
                self._add_param(p + f"attn.{w}", normal(cfg.d, cfg.d))
            for b in ("bq", "bk", "bv"):
                self._add_param(p + f"attn.{b}", np.zeros(cfg.d))
            self._add_param(p + "attn.wo", normal(cfg.d, cfg.d, scale=resid_std))
            self._add_param(p + "attn.bo", np.zeros(cfg.d))
            self._add_param(p + "ln2.g", np.ones(cfg.d))
            self._add_param(p + "ln2.b", np.zeros(cfg.d))
            self._add_param(p + "mlp.w1", normal(cfg.d, 4 * cfg.d))
            self._add_param(p + "mlp.b1", np.zeros(4 * cfg.d))
            self._add_param(p + "mlp.w2", normal(4 * cfg.d, cfg.d, scale=resid_std))
            self._add_param(p + "mlp.b2", np.zeros(cfg.d))
        self._add_param("lnf.g", np.ones(cfg.d))
        self._add_param("lnf.b", np.zeros(cfg.d))
        # zero head: an untrained model emits uniform logits
        self._add_param("head", np.zeros((cfg.d, cfg.vocab)))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.values for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        if set(state) != set(self.params):
            raise ModelError("parameter names do not match this model")
        for k, arr in state.items():
            if arr.shape != self.params[k].values.shape:
                raise ModelError(f"shape mismatch for {k}")
            self.params[k].values = np.asarray(arr)

    def save(self, path):
        checkpoint.save_arrays(path, self.state_dict())

    def load(self, path):
        self.load_state_dict(checkpoint.load_arrays(path))

    # -- building blocks ----------------------------------------------------

    def _causal_mask(self, n: int) -> np.ndarray:
        # kept indices are sorted, so original-order causality over the
        # subsequence is exactly the lower-triangular mask of size n
        if n not in self._masks:
            m = np.where(np.tri(n, dtype=bool), 0.0, -1e9).astype(self.dtype)
            self._masks[n] = m
        return self._masks[n]

    def _drop(self, t: Tensor, rng) -> Tensor:
        if rng is None or self.cfg.dropout_rate == 0.0:
            return t
        return dropout(t, self.cfg.dropout_rate, rng)

    def _proj(self, x: Tensor, w: str, b: str, n: int) -> Tensor:
        # collapse (B, n, d) to one big GEMM
        wp, bp = self.params[w], self.params[b]
        d_in, d_out = wp.values.shape
        flat = reshape(x, (-1, d_in))
        y = add(matmul(flat, wp), bp)
        return reshape(y, (-1, n, d_out))

    def _split_heads(self, x: Tensor, n: int) -> Tensor:
        cfg = self.cfg
        hd = cfg.d // cfg.heads
        return transpose(reshape(x, (-1, n, cfg.heads, hd)), (0, 2, 1, 3))

    def _layer(self, i: int, x: Tensor, n: int, rng) -> Tensor:
        cfg = self.cfg
        hd = cfg.d // cfg.heads
        p = f"h{i}."

        a = layernorm(x, self.params[p + "ln1.g"], self.params[p + "ln1.b"])
        q = self._split_heads(self._proj(a, p + "attn.wq", p + "attn.bq", n), n)
        k = self._split_heads(self._proj(a, p + "attn.wk", p + "attn.bk", n), n)
        v = self._split_heads(self._proj(a, p + "attn.wv", p + "attn.bv", n), n)
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        if cfg.causal:
            scores = add(scores, self._causal_mask(n))
        probs = self._drop(softmax(scores, axis=-1), rng)
        ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (-1, n, cfg.d))
        x = add(x, self._drop(
            self._proj(ctx, p + "attn.wo", p + "attn.bo", n), rng))

        m = layernorm(x, self.params[p + "ln2.g"], self.params[p + "ln2.b"])
        m = gelu(self._proj(m, p + "mlp.w1", p + "mlp.b1", n))
        m = self._proj(m, p + "mlp.w2", p + "mlp.b2", n)
        return add(x, self._drop(m, rng))

    def _embed(self, tokens: np.ndarray, rng) -> Tensor:
        cfg = self.cfg
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ModelError(f"tokens must be (batch, length), got "
                             f"{tokens.shape}")
        n = tokens.shape[1]
        if n > cfg.s:
            raise ModelError(f"sequence length {n} exceeds model maximum "
                             f"{cfg.s}")
        h = add(embedding_lookup(self.params["tok_emb"], tokens),
                gather_rows(self.params["pos_emb"], np.arange(n)))
        return self._drop(h, rng)

    def _head(self, h: Tensor, n: int) -> Tensor:
        h = layernorm(h, self.params["lnf.g"], self.params["lnf.b"])
        flat = reshape(h, (-1, self.cfg.d))
        return reshape(matmul(flat, self.params["head"]),
                       (-1, n, self.cfg.vocab))

    # -- forward modes ------------------------------------------------------

    def forward_baseline(self, tokens, rng=None) -> Tensor:
        """Full-length forward; the reference path for every
        equivalence test.  rng enables dropout (None = eval)."""
        tokens = np.asarray(tokens)
        n = tokens.shape[1]
        h = self._embed(tokens, rng)
        for i in range(self.cfg.l):
            h = self._layer(i, h, n, rng)
        return self._head(h, n)

    def forward_random_ltd(self, tokens, plans: list[DropPlan],
                           rng=None) -> Tensor:
        """Per-layer gather -> layer -> combine around each sampled plan.

        Full plans take the exact baseline path, so an all-full plan
        list is bit-identical to forward_baseline.
        """
        tokens = np.asarray(tokens)
        n = tokens.shape[1]
        if len(plans) != self.cfg.l:
            raise ModelError(f"got {len(plans)} plans for {self.cfg.l} layers")
        h = self._embed(tokens, rng)
        for i, plan in enumerate(plans):
            if plan.num_kept + plan.dropped.size != n:
                raise ModelError(f"plan for layer {i} covers "
                                 f"{plan.num_kept + plan.dropped.size} "
                                 f"positions, sequence has {n}")
            if plan.is_full:
                h = self._layer(i, h, n, rng)
            else:
                sub = gather_rows(h, plan.kept)
                sub = self._layer(i, sub, plan.num_kept, rng)
                h = combine_rows(sub, h, plan.kept, plan.dropped)
        return self._head(h, n)

    def forward_tokenbypass(self, tokens, bcfg: BypassConfig,
                            ema: TokenLossEMA | None, select_rng,
                            rng=None) -> Tensor:
        """One kept set per sequence chosen at bcfg.start_layer; the
        dropped tokens skip every layer through bcfg.end_layer and are
        combined back before the next layer."""
        cfg = self.cfg
        tokens = np.asarray(tokens)
        n = tokens.shape[1]
        if bcfg.start_layer < 1 or bcfg.end_layer > cfg.l - 2:
            raise ModelError(
                f"bypass span [{bcfg.start_layer}, {bcfg.end_layer}] must lie "
                f"within middle layers [1, {cfg.l - 2}]")
        b = max(1, round(bcfg.keep_fraction * n))

        h = self._embed(tokens, rng)
        for i in range(bcfg.start_layer):
            h = self._layer(i, h, n, rng)

        if b == n:
            for i in range(bcfg.start_layer, bcfg.end_layer + 1):
                h = self._layer(i, h, n, rng)
        else:
            kept, dropped = _select_bypass_rows(
                tokens, b, bcfg, ema, select_rng)
            sub = gather_rows(h, kept)
            for i in range(bcfg.start_layer, bcfg.end_layer + 1):
                sub = self._layer(i, sub, b, rng)
            h = combine_rows(sub, h, kept, dropped)

        for i in range(bcfg.end_layer + 1, cfg.l):
            h = self._layer(i, h, n, rng)
        return self._head(h, n)


def _select_bypass_rows(tokens, b, bcfg, ema, rng):
    """Per-sequence kept/dropped index matrices, rows sorted ascending."""
    B, n = tokens.shape
    if bcfg.metric is BypassMetric.RANDOM:
        if rng is None:
            raise ModelError("RANDOM bypass metric needs a generator")
        score = rng.random((B, n))
    else:
        if ema is None:
            raise ModelError("LOSS_EMA bypass metric needs an EMA table")
        score = ema.values[tokens]
        # ids never observed yet are treated as maximally important
        score = np.where(ema.counts[tokens] > 0, score, np.inf)
        if not bcfg.keep_highest_loss:
            score = -score
    # stable sort keeps position order on ties, making selection
    # deterministic for a given score table
    order = np.argsort(-score, axis=1, kind="stable")
    kept = np.sort(order[:, :b], axis=1)
    dropped = np.sort(order[:, b:], axis=1)
    return kept, dropped


# ---------------------------------------------------------------------------
# losses


def lm_token_losses(logits: Tensor, tokens) -> tuple[Tensor, np.ndarray]:
    """Per-position next-token cross entropies and their target ids."""
    tokens = np.asarray(tokens)
    B, n, V = logits.shape
    if tokens.shape != (B, n):
        raise ModelError(f"tokens {tokens.shape} do not match logits "
                         f"{logits.shape}")
    if n < 2:
        raise ModelError("need at least 2 positions for a causal loss")
    preds = gather_rows(logits, np.arange(n - 1))
    targets = tokens[:, 1:].ravel()
    ce = cross_entropy(reshape(preds, (B * (n - 1), V)), targets)
    return ce, targets


def lm_loss(logits: Tensor, tokens) -> Tensor:
    """Causal language-model loss: mean next-token cross entropy."""
    ce, _ = lm_token_losses(logits, tokens)
    return mean(ce)


def mlm_loss(logits: Tensor, tokens, mask) -> Tensor:
    """Masked-LM loss: mean cross entropy over masked positions only."""
    tokens = np.asarray(tokens)
    mask = np.asarray(mask, dtype=bool)
    B, n, V = logits.shape
    if tokens.shape != (B, n) or mask.shape != (B, n):
        raise ModelError("tokens/mask shapes do not match logits")
    idx = np.flatnonzero(mask.ravel())
    if idx.size == 0:
        raise ModelError("mask selects no positions")
    picked = gather_rows(reshape(logits, (B * n, V)), idx)
    return mean(cross_entropy(picked, tokens.ravel()[idx]))


def make_mlm_batch(tokens, mask_id: int, vocab: int,
                   rng: np.random.Generator, mask_rate: float = 0.15):
    """Corrupt tokens for masked-LM training.

    Each position is selected with probability mask_rate; selected
    positions become mask_id 80% of the time, a random id 10%, and stay
    unchanged 10%.  Returns (corrupted, mask).
    """
    tokens = np.asarray(tokens)
    mask = rng.random(tokens.shape) < mask_rate
    corrupted = tokens.copy()
    action = rng.random(tokens.shape)
    corrupted[mask & (action < 0.8)] = mask_id
    randomized = mask & (action >= 0.8) & (action < 0.9)
    corrupted[randomized] = rng.integers(0, vocab, size=int(randomized.sum()))
    return corrupted, mask
