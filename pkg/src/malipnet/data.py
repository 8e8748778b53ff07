"""Synthetic "viseme" videos and the binary dataset container.

Every non-reserved token is drawn as a dark ellipse (mouth opening) with
its own (aperture, width) pair. A sample is ``silence_frames`` frames of a
nearly closed mouth, then ``frames_per_token`` frames per token, then the
same amount of silence again. Frames are grayscale on disk and replicated
to three channels when batched.

File layout, all integers u32 little-endian::

    b"MALPDATA" | version | sample count | vocab size
    per sample: T | H | W | T*H*W float32 LE | label length | label ids
"""

import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from .seq2seq import EOS, N_RESERVED, PAD

MAGIC = b"MALPDATA"
VERSION = 1
_MASK64 = (1 << 64) - 1
BACKGROUND = 0.75
MOUTH = 0.1
SILENCE_SHAPE = (0.08, 0.6)


class DatasetError(ValueError):
    pass


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class SynthSpec:
    vocab_size: int = 8
    n_samples: int = 2500
    min_tokens: int = 2
    max_tokens: int = 4
    frames_per_token: int = 3
    silence_frames: int = 2
    height: int = 16
    width: int = 32
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4")
        if self.frames_per_token < 2:
            raise ValueError("frames_per_token must be >= 2")
        if self.height < 8 or self.width < 8:
            raise ValueError(f"degenerate frame extents {self.height}x{self.width}")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError("need 1 <= min_tokens <= max_tokens")
        if self.silence_frames < 0 or self.noise_sigma < 0 or self.n_samples < 0:
            raise ValueError("silence_frames, noise_sigma and n_samples must be >= 0")

    @classmethod
    def from_mapping(cls, values):
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in values.items():
            if k not in types:
                raise KeyError(f"unknown SynthSpec key {k!r}")
            kwargs[k] = float(v) if types[k] in (float, "float") else int(v)
        return cls(**kwargs)

    def as_dict(self):
        return asdict(self)


def token_shape(token, vocab_size):
    """(aperture, width) in (0, 1] for a non-reserved token."""
    n = vocab_size - N_RESERVED
    g = max(2, math.ceil(math.sqrt(n)))
    j = token - N_RESERVED
    apertures = np.linspace(0.35, 0.95, g)
    widths = np.linspace(0.45, 0.95, g)
    return float(apertures[j // g]), float(widths[j % g])


def render(shape, height, width):
    """Anti-aliased dark ellipse centred on a uniform background."""
    aperture, w = shape
    ry = max(aperture * height * 0.35, 0.3)
    rx = max(w * width * 0.42, 0.3)
    y = np.arange(height) - (height - 1) / 2
    x = np.arange(width) - (width - 1) / 2
    r = np.sqrt((x[None, :] / rx) ** 2 + (y[:, None] / ry) ** 2)
    inside = np.clip((1.0 - r) * min(rx, ry) + 0.5, 0.0, 1.0)
    return (BACKGROUND - (BACKGROUND - MOUTH) * inside).astype(np.float32)


def generate_sample(spec, index):
    rng = np.random.default_rng(splitmix64((spec.seed << 32) ^ index))
    L = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
    tokens = rng.integers(N_RESERVED, spec.vocab_size, size=L)
    H, W = spec.height, spec.width
    silence = render(SILENCE_SHAPE, H, W)
    frames = [silence] * spec.silence_frames
    for tok in tokens:
        frames += [render(token_shape(int(tok), spec.vocab_size), H, W)] * spec.frames_per_token
    frames += [silence] * spec.silence_frames
    video = np.stack(frames).astype(np.float32)
    if spec.noise_sigma > 0:
        video = video + rng.normal(0.0, spec.noise_sigma, video.shape).astype(np.float32)
    video = np.clip(video, 0.0, 1.0).astype(np.float32)
    label = np.concatenate([tokens, [EOS]]).astype(np.int64)
    return video, label


def generate(spec):
    """All samples of ``spec`` as a list of (frames T x H x W, label) pairs."""
    return [generate_sample(spec, i) for i in range(spec.n_samples)]


def write(path, samples, vocab_size):
    chunks = [MAGIC, struct.pack("<III", VERSION, len(samples), vocab_size)]
    for frames, label in samples:
        frames = np.asarray(frames, dtype="<f4")
        Tn, H, W = frames.shape
        chunks.append(struct.pack("<III", Tn, H, W))
        chunks.append(frames.tobytes(order="C"))
        label = np.asarray(label, dtype="<u4")
        chunks.append(struct.pack("<I", label.size))
        chunks.append(label.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, fh, path):
        self.fh, self.path, self.pos = fh, path, 0

    def read(self, n, what):
        buf = self.fh.read(n)
        if len(buf) != n:
            raise DatasetError(f"{self.path}: truncated {what} at byte {self.pos}")
        self.pos += n
        return buf

    def u32(self, count, what):
        return struct.unpack(f"<{count}I", self.read(4 * count, what))


def read_header(fh, path="<stream>"):
    r = _Reader(fh, path)
    magic = fh.read(8)
    if magic != MAGIC:
        raise DatasetError(f"{path}: bad magic at byte 0")
    r.pos = 8
    version, count, vocab = r.u32(3, "header")
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version} at byte 8")
    return r, count, vocab


def load(path):
    """Stream (frames, label) pairs from a dataset file."""
    with open(path, "rb") as fh:
        r, count, _ = read_header(fh, path)
        for _ in range(count):
            Tn, H, W = r.u32(3, "sample extents")
            n = Tn * H * W
            frames = np.frombuffer(r.read(4 * n, "frames"), dtype="<f4").reshape(Tn, H, W).astype(np.float32)
            (L,) = r.u32(1, "label length")
            label = np.array(r.u32(L, "label"), dtype=np.int64)
            yield frames, label
        if fh.read(1):
            raise DatasetError(f"{path}: trailing bytes at byte {r.pos}")


def load_all(path):
    with open(path, "rb") as fh:
        _, _, vocab = read_header(fh, path)
    return list(load(path)), vocab


def split_of(index, fractions=(0.8, 0.1)):
    """Stable train/val/test assignment from a hash of the sample index."""
    u = (splitmix64(index ^ 0x5EED5EED) % 10_000) / 10_000
    if u < fractions[0]:
        return "train"
    if u < fractions[0] + fractions[1]:
        return "val"
    return "test"


def split_indices(n, split):
    return [i for i in range(n) if split_of(i) == split]


@dataclass
class Batch:
    clip: np.ndarray  # B x 3 x T x H x W, zero frames after each video
    targets: np.ndarray  # B x L, PAD after EOS
    frame_mask: np.ndarray  # B x T, True on real frames
    indices: list


def collate(samples, indices=None):
    """Pad videos with zero frames and labels with PAD to the batch maxima."""
    B = len(samples)
    Tmax = max(f.shape[0] for f, _ in samples)
    Lmax = max(len(lab) for _, lab in samples)
    H, W = samples[0][0].shape[1:]
    clip = np.zeros((B, 3, Tmax, H, W), dtype=np.float32)
    targets = np.full((B, Lmax), PAD, dtype=np.int64)
    mask = np.zeros((B, Tmax), dtype=bool)
    for b, (frames, label) in enumerate(samples):
        if frames.shape[1:] != (H, W):
            raise DatasetError("frame extents differ within a batch")
        clip[b, :, : frames.shape[0]] = frames[None]
        targets[b, : len(label)] = label
        mask[b, : frames.shape[0]] = True
    return Batch(clip, targets, mask, list(indices) if indices is not None else list(range(B)))


def speech_mask(n_frames, n_tokens, frames_per_token):
    """Boolean per-frame mask: True on token frames, False on silence."""
    lead = (n_frames - n_tokens * frames_per_token) // 2
    mask = np.zeros(n_frames, dtype=bool)
    mask[lead : lead + n_tokens * frames_per_token] = True
    return mask


def strip_label(label):
    """Token ids up to (not including) the first EOS, without PAD."""
    out = []
    for t in label:
        t = int(t)
        if t == EOS:
            break
        if t != PAD:
            out.append(t)
    return out
