"""Synthetic token corpora for training and probing toy hosts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BOUNDARY = 0


def uniform_corpus(vocab_size: int, n_seq: int, length: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab_size, size=(n_seq, length))


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    w, V = np.linalg.eig(P.T)
    pi = np.real(V[:, np.argmin(np.abs(w - 1.0))])
    return pi / pi.sum()


def entropy_rate(P: np.ndarray) -> float:
    """Entropy rate in nats of a stationary first-order chain: sum_i pi_i H(P_i)."""
    P = np.asarray(P, dtype=np.float64)
    pi = stationary_distribution(P)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(P > 0, P * np.log(P), 0.0).sum(axis=1)
    return float(pi @ h)


def two_class_chain(vocab_size: int = 8, seed: int = 0, concentration: float = 0.5) -> np.ndarray:
    """Transition matrix whose rows come in two types (first half / second half of the vocab)."""
    rng = np.random.default_rng(seed)
    rows = rng.dirichlet(np.full(vocab_size, concentration), size=2)
    half = vocab_size // 2
    return np.vstack([rows[0]] * half + [rows[1]] * (vocab_size - half))


def markov_corpus(P: np.ndarray, n_seq: int, length: int, seed: int = 0) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    rng = np.random.default_rng(seed)
    V = P.shape[0]
    cdf = np.cumsum(P, axis=1)
    cdf[:, -1] = 1.0
    out = np.empty((n_seq, length), dtype=np.int64)
    out[:, 0] = rng.choice(V, size=n_seq, p=stationary_distribution(P))
    u = rng.random((n_seq, length))
    for t in range(1, length):
        out[:, t] = (u[:, t, None] > cdf[out[:, t - 1]]).sum(axis=1)
    return out


@dataclass(frozen=True)
class Grammar:
    """Sentence grammar with boundary markers, topics and delayed trigger recall.

    Tokens: 0 is the boundary marker, ``triggers`` each force their paired
    ``targets`` token ``gap`` positions later (with probability ``recall_p``),
    the rest follow a sparse bigram table biased towards the sequence's topic.
    """

    vocab_size: int = 64
    n_pairs: int = 8
    gap: int = 3
    recall_p: float = 0.9
    mean_sentence: float = 8.0
    n_topics: int = 4
    topic_boost: float = 3.0
    fanout: int = 6
    seed: int = 0

    @property
    def triggers(self) -> np.ndarray:
        return np.arange(1, 1 + self.n_pairs)

    @property
    def targets(self) -> np.ndarray:
        return np.arange(1 + self.n_pairs, 1 + 2 * self.n_pairs)

    def tables(self) -> tuple[np.ndarray, np.ndarray]:
        """(bigram table, per-topic multiplicative boosts)."""
        rng = np.random.default_rng(self.seed)
        V = self.vocab_size
        content = np.arange(1, V)
        B = np.zeros((V, V))
        for a in range(V):
            succ = rng.choice(content, size=self.fanout, replace=False)
            B[a, succ] = rng.dirichlet(np.ones(self.fanout))
            B[a, content] += 0.02 / len(content)
            B[a] /= B[a].sum()
        boosts = np.ones((self.n_topics, V))
        for z in range(self.n_topics):
            boosts[z, rng.choice(content, size=V // self.n_topics, replace=False)] = self.topic_boost
        return B, boosts

    def sample(self, n_seq: int, length: int, seed: int = 0) -> np.ndarray:
        B, boosts = self.tables()
        rng = np.random.default_rng(seed)
        pairs = dict(zip(self.triggers.tolist(), self.targets.tolist()))
        p_end = 1.0 / self.mean_sentence
        out = np.empty((n_seq, length), dtype=np.int64)
        for s in range(n_seq):
            topic = rng.integers(self.n_topics)
            pending: dict[int, int] = {}
            prev = BOUNDARY
            for t in range(length):
                if t in pending:
                    tok = pending.pop(t)
                elif prev != BOUNDARY and rng.random() < p_end:
                    tok = BOUNDARY
                else:
                    p = B[prev] * boosts[topic]
                    p[BOUNDARY] = 0.0
                    tok = int(rng.choice(self.vocab_size, p=p / p.sum()))
                if tok in pairs and rng.random() < self.recall_p:
                    pending.setdefault(t + self.gap, pairs[tok])
                out[s, t] = tok
                prev = tok
        return out
