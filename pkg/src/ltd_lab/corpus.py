"""Deterministic synthetic corpora small enough to train on a desk CPU.

CHAR is a character-level word-salad stream with Zipf-weighted word
frequencies; MARKOV samples a strongly structured first-order chain
whose unigram entropy can be computed analytically from the transition
matrix, giving an independent learnability bound.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .schedule import _counter_rng

_DOMAIN_CORPUS = 0x636F7270  # "corp"

def _build_words(count: int = 200) -> tuple[str, ...]:
    """Synthetic vocabulary of 2-4 syllable words, fixed across seeds.

    A richer word inventory keeps the character LM from bottoming out
    within a few hundred iterations, so training-budget effects stay
    visible for the whole desk-scale run.
    """
    rng = _counter_rng(0x776F7264, 0)  # "word"; independent of corpus seed
    syllables = [c + v for c in "bcdfghjklmnprstvwz" for v in "aeiou"]
    words = []
    seen = set()
    while len(words) < count:
        n = int(rng.integers(2, 5))
        w = "".join(syllables[i] for i in rng.integers(0, len(syllables),
                                                       size=n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return tuple(words)


_WORDS = _build_words()

_ALPHABET = sorted(set("".join(_WORDS)) | {" "})
_CHAR_TO_ID = {c: i for i, c in enumerate(_ALPHABET)}

MARKOV_STATES = 16


class CorpusKind(Enum):
    CHAR = "char"
    MARKOV = "markov"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Corpus:
    kind: CorpusKind
    train: np.ndarray      # int64 token ids
    val: np.ndarray        # disjoint from train
    vocab: int             # includes one reserved mask id
    mask_id: int


def _char_stream(rng: np.random.Generator, n_tokens: int) -> np.ndarray:
    ranks = np.arange(1, len(_WORDS) + 1)
    weights = 1.0 / ranks
    weights /= weights.sum()
    out = np.empty(n_tokens, dtype=np.int64)
    pos = 0
    while pos < n_tokens:
        words = rng.choice(len(_WORDS), size=256, p=weights)
        text = " ".join(_WORDS[w] for w in words) + " "
        ids = [_CHAR_TO_ID[c] for c in text]
        take = min(len(ids), n_tokens - pos)
        out[pos:pos + take] = ids[:take]
        pos += take
    return out


def markov_transition_matrix(seed: int, states: int = MARKOV_STATES) -> np.ndarray:
    """Row-stochastic matrix with two strong successors per state."""
    rng = _counter_rng(_DOMAIN_CORPUS, seed, 1)
    P = np.full((states, states), 0.1 / (states - 2))
    for i in range(states):
        a, b = rng.choice(states, size=2, replace=False)
        P[i, a] = P[i, b] = 0.45
        # redistribute the background mass over the other states
        others = [j for j in range(states) if j not in (a, b)]
        P[i, others] = 0.1 / len(others)
    return P


def markov_unigram_entropy(seed: int, states: int = MARKOV_STATES) -> float:
    """Entropy (nats) of the chain's stationary distribution."""
    P = markov_transition_matrix(seed, states)
    pi = np.full(states, 1.0 / states)
    for _ in range(10_000):
        nxt = pi @ P
        if np.abs(nxt - pi).max() < 1e-14:
            pi = nxt
            break
        pi = nxt
    pi = pi / pi.sum()
    return float(-(pi * np.log(pi)).sum())


def _markov_stream(rng: np.random.Generator, seed: int,
                   n_tokens: int) -> np.ndarray:
    P = markov_transition_matrix(seed)
    cdf = np.cumsum(P, axis=1)
    out = np.empty(n_tokens, dtype=np.int64)
    state = int(rng.integers(MARKOV_STATES))
    u = rng.random(n_tokens)
    for i in range(n_tokens):
        out[i] = state
        state = int(np.searchsorted(cdf[state], u[i]))
    return out


def make_corpus(kind: CorpusKind, seed: int, size: int,
                val_size: int | None = None) -> Corpus:
    """Deterministic (train, validation) token streams.

    size is the training-token count; validation defaults to size//5
    and is generated from the same stream after the training portion,
    so the two never overlap.
    """
    if isinstance(kind, str):
        kind = CorpusKind(kind)
    if size < 1000:
        raise CorpusError(f"corpus size {size} too small; need >= 1000")
    if val_size is None:
        val_size = size // 5
    rng = _counter_rng(_DOMAIN_CORPUS, seed, 0)
    total = size + val_size
    if kind is CorpusKind.CHAR:
        stream = _char_stream(rng, total)
        vocab = len(_ALPHABET) + 1
    else:
        stream = _markov_stream(rng, seed, total)
        vocab = MARKOV_STATES + 1
    return Corpus(kind=kind, train=stream[:size], val=stream[size:],
                  vocab=vocab, mask_id=vocab - 1)
