"""Three-block 3D-CNN visual front-end.

Each block is conv3d -> batch norm -> ReLU -> max-pool(1, 2, 2). Convolutions
use stride 1 and "same" padding, so the temporal extent is preserved and
each spatial extent is divided by 8 overall.
"""

from dataclasses import dataclass

from . import tensor as T
from .layers import batch_norm, init_batch_norm, init_conv

KERNELS = ((3, 5, 5), (3, 5, 5), (3, 3, 3))
POOL = (1, 2, 2)


@dataclass(frozen=True)
class FrontendConfig:
    channels: tuple = (32, 64, 96)
    in_channels: int = 3

    @property
    def out_channels(self):
        return self.channels[-1]


def init_frontend(store, rng, cfg, prefix="frontend"):
    p = store.view(prefix)
    cin = cfg.in_channels
    for i, (cout, k) in enumerate(zip(cfg.channels, KERNELS), start=1):
        init_conv(p.view(f"conv{i}"), rng, cin, cout, k)
        init_batch_norm(p.view(f"bn{i}"), cout)
        cin = cout


def output_extents(T_, H, W):
    """(T', H', W') produced for a T x H x W clip."""
    for _ in KERNELS:
        H, W = H // POOL[1], W // POOL[2]
    return T_, H, W


def extract_features(clip, store, cfg, training=False, prefix="frontend"):
    """Map a B x 3 x T x H x W clip to the B x C x T x H/8 x W/8 feature map."""
    if clip.ndim != 5:
        raise ValueError(f"expected a rank-5 clip, got shape {clip.shape}")
    if clip.shape[1] != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, got {clip.shape[1]}")
    _, _, _, H, W = clip.shape
    if H < 8 or W < 8:
        raise ValueError(f"frame extents {H}x{W} too small for three 2x spatial poolings")
    p = store.view(prefix)
    x = clip
    for i, k in enumerate(KERNELS, start=1):
        conv = p.view(f"conv{i}")
        pad = tuple(n // 2 for n in k)
        x = T.conv(x, conv["weight"], conv["bias"], dims=3, stride=1, padding=pad)
        x = batch_norm(x, p.view(f"bn{i}"), training)
        x = T.relu(x)
        x = T.pool(x, "max", POOL)
    return x
