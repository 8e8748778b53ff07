"""The full network: front-end -> attention stack -> seq2seq."""

from dataclasses import dataclass, replace

import numpy as np

from . import checkpoint
from . import tensor as T
from .attention import AttentionConfig, AttentionTrace, apply_all, init_attention
from .frontend import FrontendConfig, extract_features, init_frontend, output_extents
from .seq2seq import (
    Seq2SeqConfig,
    encode,
    init_seq2seq,
    nll_loss,
    run_decoder,
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    height: int = 64
    width: int = 128
    frontend_channels: tuple = (32, 64, 96)
    reduction_ratio: int = 16
    n_subbranches: int = 3
    use_ca: bool = True
    use_jsta: bool = True
    use_ssta: bool = True
    enc_hidden: int = 256
    dec_hidden: int = 512
    embed: int = 256
    attn_dim: int = 128

    @property
    def frontend(self):
        return FrontendConfig(tuple(self.frontend_channels))

    @property
    def attention(self):
        _, h, w = output_extents(1, self.height, self.width)
        return AttentionConfig(
            channels=self.frontend_channels[-1],
            height=h,
            width=w,
            reduction_ratio=self.reduction_ratio,
            n_subbranches=self.n_subbranches,
            use_ca=self.use_ca,
            use_jsta=self.use_jsta,
            use_ssta=self.use_ssta,
        )

    @property
    def seq2seq(self):
        return Seq2SeqConfig(
            feature_width=self.attention.feature_width,
            vocab_size=self.vocab_size,
            enc_hidden=self.enc_hidden,
            dec_hidden=self.dec_hidden,
            embed=self.embed,
            attn_dim=self.attn_dim,
        )

    def with_variant(self, modules):
        """Copy with exactly the named attention modules enabled."""
        modules = set(modules)
        return replace(self, use_ca="CA" in modules, use_jsta="JSTA" in modules, use_ssta="SSTA" in modules)


class MALipNet:
    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.store = T.ParameterStore()
        rng = np.random.default_rng(seed)
        init_frontend(self.store, rng, cfg.frontend)
        init_attention(self.store, rng, cfg.attention)
        init_seq2seq(self.store, rng, cfg.seq2seq)
        self.store.add("meta.frame_hw", np.array([cfg.height, cfg.width], np.float32), trainable=False)
        self.store.add("meta.reduction_ratio", np.array([cfg.reduction_ratio], np.float32), trainable=False)
        self.store.add("meta.n_subbranches", np.array([cfg.n_subbranches], np.float32), trainable=False)

    def features(self, clip, training=False, trace=None):
        clip = clip if isinstance(clip, T.Tensor) else T.Tensor(clip)
        X = extract_features(clip, self.store, self.cfg.frontend, training=training)
        return apply_all(X, self.store, self.cfg.attention, trace=trace)

    def encode(self, clip, training=False, trace=None):
        return encode(self.features(clip, training, trace), self.store)

    def loss(self, clip, targets, ss_ratio=1.0, rng=None, training=True):
        enc = self.encode(clip, training=training)
        log_probs, _ = run_decoder(enc, self.store, targets, ss_ratio, rng)
        return nll_loss(log_probs, targets)

    def trace(self, clip):
        """Forward in eval mode, returning (encoder states, AttentionTrace)."""
        tr = AttentionTrace()
        with T.no_grad():
            enc = self.encode(clip, training=False, trace=tr)
        return enc, tr

    def save(self, path):
        checkpoint.save(path, self.store)

    @classmethod
    def from_state(cls, arrays):
        cfg = infer_config(arrays)
        model = cls(cfg)
        model.store.load_state(arrays)
        return model

    @classmethod
    def load(cls, path):
        return cls.from_state(checkpoint.load(path))


def infer_config(arrays):
    """Recover a ModelConfig from checkpoint tensor names and shapes."""
    chans = tuple(int(arrays[f"frontend.conv{i}.weight"].shape[0]) for i in (1, 2, 3))
    h, w = (int(v) for v in arrays["meta.frame_hw"])
    use_ssta = "attention.ssta.spatial0.weight" in arrays
    return ModelConfig(
        vocab_size=int(arrays["decoder.embed.weight"].shape[0]),
        height=h,
        width=w,
        frontend_channels=chans,
        reduction_ratio=int(arrays["meta.reduction_ratio"][0]),
        n_subbranches=int(arrays["meta.n_subbranches"][0]),
        use_ca="attention.ca.fc1.weight" in arrays,
        use_jsta="attention.jsta.fuse.weight" in arrays,
        use_ssta=use_ssta,
        enc_hidden=int(arrays["encoder.l0.fwd.w_hh"].shape[1]),
        dec_hidden=int(arrays["decoder.l0.w_hh"].shape[1]),
        embed=int(arrays["decoder.embed.weight"].shape[1]),
        attn_dim=int(arrays["attn.w_enc"].shape[0]),
    )
