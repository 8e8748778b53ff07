"""Run configuration: flat ``key = value`` files with dataset profiles."""

from dataclasses import asdict, dataclass, fields, replace

from .model import ModelConfig

VARIANT_NAMES = ("CA", "JSTA", "SSTA")

# Per-dataset defaults; "toy" is the desk-scale setting.
PROFILES = {
    "cmlr": dict(epochs=60, batch_size=8, lr=0.0002, n_subbranches=3, beam_width=6),
    "grid": dict(epochs=30, batch_size=16, lr=0.0003, n_subbranches=4, beam_width=6),
    "toy": dict(
        epochs=10,
        batch_size=16,
        lr=0.003,
        n_subbranches=3,
        beam_width=6,
        reduction_ratio=4,
        frontend_channels="8,16,24",
        enc_hidden=32,
        dec_hidden=64,
        embed=16,
        attn_dim=32,
        height=16,
        width=32,
    ),
}


@dataclass(frozen=True)
class RunConfig:
    profile: str = "cmlr"
    epochs: int = 60
    batch_size: int = 8
    lr: float = 0.0002
    n_subbranches: int = 3
    beam_width: int = 6
    reduction_ratio: int = 16
    frontend_channels: str = "32,64,96"
    enc_hidden: int = 256
    dec_hidden: int = 512
    embed: int = 256
    attn_dim: int = 128
    height: int = 64
    width: int = 128
    variants: str = "CA,JSTA,SSTA"
    ss_start: float = 1.0
    ss_end: float = 0.5
    grad_clip: float = 5.0
    frames_per_token: int = 3
    max_train_samples: int = 0
    data: str = ""
    seed: int = 0
    out_dir: str = "run"
    log_wall_time: bool = False

    @property
    def modules(self):
        return parse_variants(self.variants)

    def model_config(self, vocab_size):
        return ModelConfig(
            vocab_size=vocab_size,
            height=self.height,
            width=self.width,
            frontend_channels=tuple(int(c) for c in self.frontend_channels.split(",")),
            reduction_ratio=self.reduction_ratio,
            n_subbranches=self.n_subbranches,
            enc_hidden=self.enc_hidden,
            dec_hidden=self.dec_hidden,
            embed=self.embed,
            attn_dim=self.attn_dim,
        ).with_variant(self.modules)

    def ss_ratio(self, epoch):
        """Teacher-forcing probability, linear from ss_start to ss_end."""
        if self.epochs <= 1:
            return self.ss_start
        frac = epoch / (self.epochs - 1)
        return self.ss_start + (self.ss_end - self.ss_start) * frac

    def to_text(self):
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_variants(text):
    if isinstance(text, (set, frozenset, list, tuple)):
        names = [str(t) for t in text]
    else:
        names = [t.strip() for t in str(text).split(",") if t.strip()]
    out = set()
    for n in names:
        key = n.upper()
        if key not in VARIANT_NAMES:
            raise ValueError(f"unknown variant {n!r}; expected a subset of {VARIANT_NAMES}")
        out.add(key)
    return frozenset(out)


def _coerce(name, value, typ):
    if typ in (bool, "bool"):
        v = str(value).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return str(value)


def parse_text(text):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return values


def build(values=None, **overrides):
    """Profile defaults, then file values, then explicit overrides."""
    merged = dict(values or {})
    merged.update({k: v for k, v in overrides.items() if v is not None})
    profile = merged.get("profile", "cmlr")
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    types = {f.name: f.type for f in fields(RunConfig)}
    cfg = replace(RunConfig(profile=profile), **PROFILES[profile])
    kwargs = {}
    for k, v in merged.items():
        if k not in types:
            raise KeyError(f"unknown config key {k!r}")
        kwargs[k] = _coerce(k, v, types[k])
    cfg = replace(cfg, **kwargs)
    parse_variants(cfg.variants)
    return cfg


def load(path, **overrides):
    with open(path, encoding="utf-8") as fh:
        return build(parse_text(fh.read()), **overrides)
