"""Greedy and beam-search inference.

PAD and SOS are never emitted. Returned token lists exclude the terminal
EOS; :class:`BeamHypothesis.finished` records whether one was produced.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .seq2seq import EOS, PAD, SOS, decode_logits, init_decoder_state

LENGTH_ALPHA = 0.7
MAX_LEN_CAP = 200


@dataclass
class BeamHypothesis:
    tokens: list
    log_prob: float = 0.0
    state: list = field(default=None, repr=False)
    finished: bool = False

    @property
    def length(self):
        return len(self.tokens) + (1 if self.finished else 0)

    def score(self, normalize=True, alpha=LENGTH_ALPHA):
        if not normalize or self.length == 0:
            return self.log_prob
        return self.log_prob / self.length**alpha


def default_max_len(enc_length):
    return max(1, min(MAX_LEN_CAP, math.ceil(1.5 * enc_length)))


def _step_log_probs(prev, state_rows, enc, store):
    state = [T.Tensor(s) for s in state_rows]
    logits, new_state, _ = decode_logits(prev, state, enc, store)
    logp = T.log_softmax(logits, axis=-1).data.astype(np.float64)
    logp[:, PAD] = -np.inf
    logp[:, SOS] = -np.inf
    return logp, [s.data for s in new_state]


def greedy_decode(enc, store, max_len=None):
    """Argmax decoding for every batch entry; returns one hypothesis each."""
    if max_len is None:
        max_len = default_max_len(enc.length)
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    with T.no_grad():
        B = enc.states.shape[0]
        state = [s.data for s in init_decoder_state(enc, store)]
        prev = np.full(B, SOS, dtype=np.int64)
        hyps = [BeamHypothesis([]) for _ in range(B)]
        live = np.ones(B, dtype=bool)
        for _ in range(max_len):
            logp, state = _step_log_probs(prev, state, enc, store)
            tok = logp.argmax(axis=-1)
            for b in np.flatnonzero(live):
                hyps[b].log_prob += float(logp[b, tok[b]])
                if tok[b] == EOS:
                    hyps[b].finished = True
                    live[b] = False
                else:
                    hyps[b].tokens.append(int(tok[b]))
            if not live.any():
                break
            prev = tok
    return hyps


def _settled(finished, live, max_len, normalize):
    """True once no live hypothesis can outscore the best finished one.

    Extending a hypothesis only lowers its log-probability, so the most a
    live one can still reach is log_prob / max_len**alpha (or log_prob for
    raw ranking). Stopping here returns what running to max_len would.
    """
    if not finished:
        return False
    best = max(h.score(normalize) for h in finished)
    cap = max_len**LENGTH_ALPHA if normalize else 1.0
    return all(h.log_prob / cap <= best for h in live)


def beam_search(enc, store, K=6, max_len=None, normalize=True, return_pool=False):
    """Length-bounded beam search for a single sample (``enc`` has batch 1).

    Each step expands every live hypothesis over the vocabulary and keeps the
    K best candidates by accumulated log-probability; candidates ending in
    EOS leave the beam as finished. Search stops when
    none are live, ``max_len`` steps were taken, or no live hypothesis can
    still beat the best finished one. The final pool (finished ones, plus
    the live ones when ``max_len`` cut them off) is ranked by
    log_prob / length**0.7, or by raw log-probability when ``normalize`` is
    false. Exact ties go to
    the lexicographically smaller token sequence.
    """
    if K < 1:
        raise ValueError("beam width K must be >= 1")
    if enc.states.shape[0] != 1:
        raise ValueError("beam_search decodes one sample at a time")
    if max_len is None:
        max_len = default_max_len(enc.length)
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    with T.no_grad():
        init = [s.data[0] for s in init_decoder_state(enc, store)]
        live = [BeamHypothesis([], 0.0, init)]
        finished = []
        for step in range(max_len):
            n = len(live)
            prev = np.array([h.tokens[-1] if h.tokens else SOS for h in live])
            rows = [np.stack([h.state[layer] for h in live]) for layer in range(len(init))]
            logp, new_rows = _step_log_probs(prev, rows, enc.select(np.zeros(n, dtype=np.int64)), store)
            total = np.array([h.log_prob for h in live])[:, None] + logp
            flat = total.reshape(-1)
            k = min(K, int(np.isfinite(flat).sum()))
            if k == 0:
                break
            kth = np.partition(flat, flat.size - k)[flat.size - k]
            cand = np.flatnonzero(flat >= kth)
            V = total.shape[1]
            cand = sorted(cand, key=lambda c: (-flat[c], live[c // V].tokens + [c % V]))[:k]
            nxt = []
            for c in cand:
                i, v = divmod(int(c), V)
                h = live[i]
                if v == EOS:
                    finished.append(BeamHypothesis(list(h.tokens), float(flat[c]), None, True))
                else:
                    state = [r[i] for r in new_rows]
                    nxt.append(BeamHypothesis(h.tokens + [v], float(flat[c]), state))
            live = nxt
            if not live or _settled(finished, live, max_len, normalize):
                break
        # partial hypotheses only compete when the length cap cut them off
        truncated = step == max_len - 1 or not finished
        pool = finished + (live if truncated else [])
        pool.sort(key=lambda h: (-h.score(normalize), h.tokens))
    if return_pool:
        return pool
    return pool[0]


def sequence_log_prob(enc, store, tokens, finished=True):
    """Log-probability of ``tokens`` (+ EOS when finished) under teacher forcing."""
    seq = list(tokens) + ([EOS] if finished else [])
    with T.no_grad():
        state = [s.data for s in init_decoder_state(enc, store)]
        prev = np.array([SOS])
        total = 0.0
        for tok in seq:
            logp, state = _step_log_probs(prev, state, enc, store)
            total += float(logp[0, tok])
            prev = np.array([tok])
    return total
