"""Parameter initialisers and the small layers shared by the model modules."""

import math

import numpy as np

from . import tensor as T

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def uniform_init(rng, shape, fan_in):
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_linear(p, rng, in_features, out_features, bias=True):
    p.add("weight", uniform_init(rng, (out_features, in_features), in_features))
    if bias:
        p.add("bias", np.zeros(out_features, np.float32))


def init_conv(p, rng, in_ch, out_ch, kernel):
    kernel = tuple(kernel)
    fan_in = in_ch * math.prod(kernel)
    p.add("weight", uniform_init(rng, (out_ch, in_ch) + kernel, fan_in))
    p.add("bias", np.zeros(out_ch, np.float32))


def init_batch_norm(p, channels):
    p.add("gamma", np.ones(channels, np.float32))
    p.add("beta", np.zeros(channels, np.float32))
    p.add("running_mean", np.zeros(channels, np.float32), trainable=False)
    p.add("running_var", np.ones(channels, np.float32), trainable=False)


def init_gru(p, rng, input_size, hidden):
    p.add("w_ih", uniform_init(rng, (3 * hidden, input_size), hidden))
    p.add("w_hh", uniform_init(rng, (3 * hidden, hidden), hidden))
    p.add("b_ih", np.zeros(3 * hidden, np.float32))
    p.add("b_hh", np.zeros(3 * hidden, np.float32))


def batch_norm(x, p, training):
    """Per-channel normalisation over every axis except 1."""
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    gamma = T.reshape(p["gamma"], bshape)
    beta = T.reshape(p["beta"], bshape)
    if training:
        mu = T.mean(x, axis=axes, keepdims=True)
        centred = x - mu
        var = T.mean(centred * centred, axis=axes, keepdims=True)
        n = x.size // x.shape[1]
        rm, rv = p["running_mean"], p["running_var"]
        unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
        rm.data = ((1 - BN_MOMENTUM) * rm.data + BN_MOMENTUM * mu.data.reshape(-1)).astype(rm.data.dtype)
        rv.data = ((1 - BN_MOMENTUM) * rv.data + BN_MOMENTUM * unbiased).astype(rv.data.dtype)
        return centred / T.sqrt(var + BN_EPS) * gamma + beta
    mu = p["running_mean"].data.reshape(bshape)
    inv = 1.0 / np.sqrt(p["running_var"].data.reshape(bshape) + BN_EPS)
    return (x - T.as_tensor(mu, like=x)) * T.as_tensor(inv, like=x) * gamma + beta


def gru_cell(x, h_prev, p):
    """One GRU step; gates ordered (reset, update, candidate).

    h' = (1 - z) * n + z * h_prev with n = tanh(W_in x + b_in + r * (W_hn h + b_hn)).
    """
    hidden = p["w_hh"].shape[1]
    if h_prev.shape[-1] != hidden:
        raise ValueError(f"gru_cell: hidden size {h_prev.shape[-1]} != parameter size {hidden}")
    if x.shape[0] != h_prev.shape[0]:
        raise ValueError(f"gru_cell: batch {x.shape[0]} != {h_prev.shape[0]}")
    gi = T.linear(x, p["w_ih"], p["b_ih"])
    return gru_step(gi, h_prev, p)


def gru_step(gi, h_prev, p):
    """GRU update given the precomputed input projection ``gi`` (B, 3H)."""
    H = p["w_hh"].shape[1]
    gh = T.linear(h_prev, p["w_hh"], p["b_hh"])
    r = T.sigmoid(gi[:, :H] + gh[:, :H])
    z = T.sigmoid(gi[:, H : 2 * H] + gh[:, H : 2 * H])
    n = T.tanh(gi[:, 2 * H :] + r * gh[:, 2 * H :])
    return n + z * (h_prev - n)
