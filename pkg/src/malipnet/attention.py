"""Channel, joint spatio-temporal and separate spatio-temporal attention.

The three modules run in sequence on the front-end feature map
``X`` (B x C x T' x H' x W'):

* channel attention gates each channel with a weight computed from the
  globally max- and average-pooled descriptors through a shared bottleneck
  MLP;
* joint attention gates every (t, h, w) position with a single map computed
  from the channel-wise max and mean;
* separate attention runs N paired spatial/temporal sub-branches and sums
  their per-frame L2-normalised outputs, yielding a B x T' x (C*H'*W')
  sequence.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import init_conv

NORM_EPS = 1e-12
# float32 rounds sigmoid(x) to exactly 1.0 for x > ~16.6; gates stay in (0, 1)
GATE_MARGIN = float(np.finfo(np.float32).eps)


@dataclass(frozen=True)
class AttentionConfig:
    channels: int
    height: int
    width: int
    reduction_ratio: int = 16
    n_subbranches: int = 3
    use_ca: bool = True
    use_jsta: bool = True
    use_ssta: bool = True

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channel count must be >= 1")
        if self.n_subbranches < 1:
            raise ValueError("n_subbranches must be >= 1")
        if self.reduction_ratio < 1:
            raise ValueError("reduction_ratio must be >= 1")

    @property
    def reduced(self):
        return max(1, self.channels // self.reduction_ratio)

    @property
    def feature_width(self):
        return self.channels * self.height * self.width


@dataclass
class AttentionTrace:
    """Attention maps captured during one forward pass (numpy arrays)."""

    channel_weights: np.ndarray = None  # B x C
    joint_map: np.ndarray = None  # B x 1 x T' x H' x W'
    spatial_maps: list = field(default_factory=list)  # N x [(B*T') x 1 x H' x W']
    temporal_maps: list = field(default_factory=list)  # N x [B x 1 x T']

    def maps(self):
        out = []
        if self.channel_weights is not None:
            out.append(self.channel_weights)
        if self.joint_map is not None:
            out.append(self.joint_map)
        return out + list(self.spatial_maps) + list(self.temporal_maps)

    def strictly_inside_unit_interval(self):
        return all(bool(np.all((m > 0) & (m < 1))) for m in self.maps())

    def mean_temporal(self):
        """B x T' temporal weights averaged over sub-branches."""
        if not self.temporal_maps:
            return None
        return np.mean([m[:, 0, :] for m in self.temporal_maps], axis=0)


def init_attention(store, rng, cfg, prefix="attention"):
    p = store.view(prefix)
    C = cfg.channels
    if cfg.use_ca:
        init_conv(p.view("ca.fc1"), rng, C, cfg.reduced, (1, 1, 1))
        init_conv(p.view("ca.fc2"), rng, cfg.reduced, C, (1, 1, 1))
    if cfg.use_jsta:
        init_conv(p.view("jsta.fuse"), rng, 2, 1, (1, 1, 1))
    if cfg.use_ssta:
        for i in range(cfg.n_subbranches):
            init_conv(p.view(f"ssta.spatial{i}"), rng, C, 1, (3, 3))
            init_conv(p.view(f"ssta.temporal{i}"), rng, cfg.feature_width, 1, (3,))


def _gate(x):
    return T.sigmoid(x, margin=GATE_MARGIN)


def _mlp(f, p):
    h = T.conv(f, p["fc1.weight"], p["fc1.bias"], dims=3)
    h = T.relu(h)
    return T.conv(h, p["fc2.weight"], p["fc2.bias"], dims=3)


def channel_attention(X, p, trace=None):
    """Gate channels by sigmoid(MLP(maxpool X) + MLP(avgpool X))."""
    if X.ndim != 5:
        raise ValueError(f"channel_attention expects rank 5, got {X.shape}")
    if X.shape[1] < 1:
        raise ValueError("channel_attention: C must be >= 1")
    f_max = T.tmax(X, axis=(2, 3, 4), keepdims=True)
    f_avg = T.mean(X, axis=(2, 3, 4), keepdims=True)
    a = _gate(_mlp(f_max, p) + _mlp(f_avg, p))
    if trace is not None:
        trace.channel_weights = a.data.reshape(a.shape[:2]).copy()
    return a * X


def joint_st_attention(Y, p, trace=None):
    """Gate each (t, h, w) position by a map fused from channel max and mean."""
    if Y.ndim != 5:
        raise ValueError(f"joint_st_attention expects rank 5, got {Y.shape}")
    desc = T.concat([T.tmax(Y, axis=1, keepdims=True), T.mean(Y, axis=1, keepdims=True)], axis=1)
    a = _gate(T.conv(desc, p["fuse.weight"], p["fuse.bias"], dims=3))
    if trace is not None:
        trace.joint_map = a.data.copy()
    return a * Y


def to_sequence(X):
    """B x C x T x H x W -> B x T x (C*H*W)."""
    B, C, T_, H, W = X.shape
    return T.reshape(T.transpose(X, (0, 2, 1, 3, 4)), (B, T_, C * H * W))


def separate_st_attention(Y, p, n_subbranches, trace=None):
    """Sum over sub-branches of (Z_S + Z_T) / ||Z_S + Z_T|| per (batch, frame)."""
    if Y.ndim != 5:
        raise ValueError(f"separate_st_attention expects rank 5, got {Y.shape}")
    B, C, T_, H, W = Y.shape
    D = C * H * W
    x_s = T.reshape(T.transpose(Y, (0, 2, 1, 3, 4)), (B * T_, C, H, W))
    x_t = T.reshape(T.transpose(Y, (0, 1, 3, 4, 2)), (B, D, T_))
    out = None
    for i in range(n_subbranches):
        sp, tp = p.view(f"spatial{i}"), p.view(f"temporal{i}")
        if tp["weight"].shape[1] != D:
            raise ValueError(
                f"temporal sub-branch expects {tp['weight'].shape[1]} features, input has {D}"
            )
        a_s = _gate(T.conv(x_s, sp["weight"], sp["bias"], dims=2, padding=1))
        a_t = _gate(T.conv(x_t, tp["weight"], tp["bias"], dims=1, padding=1))
        if trace is not None:
            trace.spatial_maps.append(a_s.data.copy())
            trace.temporal_maps.append(a_t.data.copy())
        z_s = T.reshape(a_s * x_s, (B, T_, D))
        z_t = T.transpose(a_t * x_t, (0, 2, 1))
        s = z_s + z_t
        norm = T.sqrt(T.tsum(s * s, axis=-1, keepdims=True) + NORM_EPS)
        term = s / norm
        out = term if out is None else out + term
    return out


def apply_all(X, store, cfg, trace=None, prefix="attention"):
    """CA -> JSTA -> SSTA with disabled modules passed through unchanged."""
    if X.ndim != 5:
        raise ValueError(f"apply_all expects rank 5, got {X.shape}")
    p = store.view(prefix)
    if cfg.use_ca:
        X = channel_attention(X, p.view("ca"), trace)
    if cfg.use_jsta:
        X = joint_st_attention(X, p.view("jsta"), trace)
    if cfg.use_ssta:
        return separate_st_attention(X, p.view("ssta"), cfg.n_subbranches, trace)
    return to_sequence(X)
