"""Bidirectional GRU encoder, additive-attention GRU decoder and NLL loss."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import gru_cell, gru_step, init_gru, init_linear, uniform_init

PAD, SOS, EOS = 0, 1, 2
N_RESERVED = 3
ENC_LAYERS = 2
DEC_LAYERS = 2


@dataclass(frozen=True)
class Seq2SeqConfig:
    feature_width: int
    vocab_size: int
    enc_hidden: int = 256
    dec_hidden: int = 512
    embed: int = 256
    attn_dim: int = 128

    def __post_init__(self):
        if self.vocab_size < N_RESERVED:
            raise ValueError(f"vocab_size must be >= {N_RESERVED}")


@dataclass
class EncoderStates:
    """Encoder outputs, batch-first.

    ``states`` is B x T'' x (2 * enc_hidden) with forward and backward
    directions concatenated per step; ``final`` is the last layer's forward
    state at T''-1 joined with its backward state at 0; ``keys`` caches the
    encoder-side projection of the additive attention score.
    """

    states: T.Tensor
    final: T.Tensor
    keys: T.Tensor = None

    @property
    def length(self):
        return self.states.shape[1]

    def select(self, index):
        """Row-select (and repeat) batch entries, e.g. for beam expansion."""
        index = np.asarray(index)
        return EncoderStates(
            self.states[index], self.final[index], None if self.keys is None else self.keys[index]
        )


def init_seq2seq(store, rng, cfg):
    He, Hd = cfg.enc_hidden, cfg.dec_hidden
    inp = cfg.feature_width
    for layer in range(ENC_LAYERS):
        for d in ("fwd", "bwd"):
            init_gru(store.view(f"encoder.l{layer}.{d}"), rng, inp, He)
        inp = 2 * He
    init_linear(store.view("bridge"), rng, 2 * He, DEC_LAYERS * Hd)
    store.add("decoder.embed.weight", rng.normal(0.0, 1.0, (cfg.vocab_size, cfg.embed)).astype(np.float32))
    init_gru(store.view("decoder.l0"), rng, cfg.embed, Hd)
    init_gru(store.view("decoder.l1"), rng, Hd, Hd)
    a = store.view("attn")
    a.add("w_enc", uniform_init(rng, (cfg.attn_dim, 2 * He), 2 * He))
    a.add("w_dec", uniform_init(rng, (cfg.attn_dim, Hd), Hd))
    a.add("bias", np.zeros(cfg.attn_dim, np.float32))
    a.add("v", uniform_init(rng, (1, cfg.attn_dim), cfg.attn_dim))
    init_linear(store.view("out"), rng, 2 * He + Hd, cfg.vocab_size)


def _run_direction(x, p, reverse):
    B, T_, _ = x.shape
    H = p["w_hh"].shape[1]
    gi = T.linear(x, p["w_ih"], p["b_ih"])
    h = T.Tensor(np.zeros((B, H), dtype=gi.data.dtype))
    outs = [None] * T_
    steps = range(T_ - 1, -1, -1) if reverse else range(T_)
    for t in steps:
        h = gru_step(gi[:, t, :], h, p)
        outs[t] = h
    return T.stack(outs, axis=1), h


def encode(seq, store):
    """Two stacked bidirectional GRU layers over a B x T' x D sequence."""
    if seq.ndim != 3:
        raise ValueError(f"encode expects B x T x D, got {seq.shape}")
    expected = store["encoder.l0.fwd.w_ih"].shape[1]
    if seq.shape[-1] != expected:
        raise ValueError(f"encode: feature width {seq.shape[-1]} != parameter width {expected}")
    x = seq
    for layer in range(ENC_LAYERS):
        fwd, h_f = _run_direction(x, store.view(f"encoder.l{layer}.fwd"), reverse=False)
        bwd, h_b = _run_direction(x, store.view(f"encoder.l{layer}.bwd"), reverse=True)
        x = T.concat([fwd, bwd], axis=-1)
    final = T.concat([h_f, h_b], axis=-1)
    keys = T.linear(x, store["attn.w_enc"])
    return EncoderStates(x, final, keys)


def init_decoder_state(enc, store):
    """Learned linear projection of the encoder's final states, one per layer."""
    h = T.linear(enc.final, store["bridge.weight"], store["bridge.bias"])
    Hd = store["decoder.l0.w_hh"].shape[1]
    return [h[:, i * Hd : (i + 1) * Hd] for i in range(DEC_LAYERS)]


def attend(h_d, enc, store):
    """Additive attention: score_t = v . tanh(W_enc h_t + W_dec h_d + b).

    Returns (context B x 2He, weights B x T'').
    """
    keys = enc.keys if enc.keys is not None else T.linear(enc.states, store["attn.w_enc"])
    q = T.linear(h_d, store["attn.w_dec"], store["attn.bias"])
    e = T.tanh(keys + T.reshape(q, (q.shape[0], 1, q.shape[1])))
    scores = T.reshape(T.linear(e, store["attn.v"]), e.shape[:2])
    alpha = T.softmax(scores, axis=1)
    ctx = T.matmul(T.reshape(alpha, (alpha.shape[0], 1, alpha.shape[1])), enc.states)
    return T.reshape(ctx, (ctx.shape[0], ctx.shape[2])), alpha


def decode_logits(prev_tokens, state, enc, store):
    """Advance the decoder one step; returns (logits, new_state, attention)."""
    prev_tokens = np.asarray(prev_tokens)
    V = store["decoder.embed.weight"].shape[0]
    if prev_tokens.size and (prev_tokens.min() < 0 or prev_tokens.max() >= V):
        raise ValueError(f"token id out of range [0, {V})")
    x = T.embedding(store["decoder.embed.weight"], prev_tokens)
    new_state = []
    for layer in range(DEC_LAYERS):
        x = gru_cell(x, state[layer], store.view(f"decoder.l{layer}"))
        new_state.append(x)
    ctx, alpha = attend(x, enc, store)
    logits = T.linear(T.concat([ctx, x], axis=-1), store["out.weight"], store["out.bias"])
    return logits, new_state, alpha


def decode_step(prev_tokens, state, enc, store):
    """One decoder step; returns (distribution over the vocabulary, new state)."""
    logits, new_state, _ = decode_logits(prev_tokens, state, enc, store)
    return T.softmax(logits, axis=-1), new_state


def run_decoder(enc, store, targets, ss_ratio=1.0, rng=None):
    """Decode against ``targets`` (B x L, EOS-terminated, PAD-padded).

    At each step the previous gold token is fed with probability
    ``ss_ratio``, otherwise the model's own argmax from the previous step.
    Returns (log-probs B x L x V, fed-in tokens B x L).
    """
    targets = np.asarray(targets)
    B, L = targets.shape
    if not 0.0 <= ss_ratio <= 1.0:
        raise ValueError("ss_ratio must be in [0, 1]")
    rng = rng if rng is not None else np.random.default_rng(0)
    state = init_decoder_state(enc, store)
    prev = np.full(B, SOS, dtype=np.int64)
    fed = np.empty((B, L), dtype=np.int64)
    steps = []
    for i in range(L):
        fed[:, i] = prev
        logits, state, _ = decode_logits(prev, state, enc, store)
        logp = T.log_softmax(logits, axis=-1)
        steps.append(logp)
        gold = rng.random(B) < ss_ratio
        prev = np.where(gold, targets[:, i], logits.data.argmax(axis=-1))
    return T.stack(steps, axis=1), fed


def nll_loss(log_probs, targets):
    """Sum of -log P(y_i) over non-PAD positions, averaged over the batch.

    ``log_probs`` is B x L x V (log of the decoder distributions).
    """
    targets = np.asarray(targets)
    B, L = targets.shape
    if log_probs.shape[:2] != (B, L):
        raise ValueError(f"log_probs {log_probs.shape} vs targets {targets.shape}")
    picked = T.getitem(log_probs, (np.arange(B)[:, None], np.arange(L)[None, :], targets))
    mask = targets != PAD
    if np.any(~np.isfinite(picked.data[mask])):
        raise FloatingPointError("zero probability assigned to a target token")
    masked = picked * T.as_tensor(mask.astype(picked.data.dtype), like=picked)
    return -T.tsum(masked) / B


def per_sample_nll(log_probs, targets):
    targets = np.asarray(targets)
    B, L = targets.shape
    picked = log_probs.data[np.arange(B)[:, None], np.arange(L)[None, :], targets]
    return -(picked * (targets != PAD)).sum(axis=1, dtype=np.float64)
