"""Export captured attention maps and input saliency as CSV and PGM files."""

import csv
import os

import numpy as np

from . import data as D
from . import tensor as T


def write_pgm(path, image, vmax=1.0):
    """8-bit binary PGM; values are scaled by 255 / vmax and clipped."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {image.shape}")
    scale = 255.0 / vmax if vmax > 0 else 0.0
    pixels = np.clip(np.rint(image * scale), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def input_saliency(model, clip, targets):
    """|d loss / d pixel| summed over the colour channels: B x T x H x W."""
    x = T.Tensor(np.asarray(clip, np.float32), requires_grad=True)
    model.store.zero_grad()
    loss = model.loss(x, targets, 1.0, training=False)
    loss.backward()
    model.store.zero_grad()
    return np.abs(x.grad).sum(axis=1)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def export_sample(model, frames, label, index, out_dir, frames_per_token=None, saliency=False):
    """Write every attention map of one sample; returns a summary dict.

    Files are prefixed ``sample<index>_``: ``temporal.csv`` (one row per
    encoder frame), ``channel.csv``, ``spatial.csv`` / ``joint.csv`` (long
    format) and one PGM per frame for each spatial map. Map values lie in
    (0, 1) and are written to PGM on that absolute scale. When
    ``frames_per_token`` is given the temporal rows are flagged as speech or
    silence and the summary carries both means.
    """
    os.makedirs(out_dir, exist_ok=True)
    batch = D.collate([(frames, label)], [index])
    _, trace = model.trace(batch.clip)
    prefix = os.path.join(out_dir, f"sample{index}_")
    Tn = frames.shape[0]
    summary = {"sample": index, "frames": Tn}

    temporal = [m[0, 0] for m in trace.temporal_maps]
    speech = None
    if frames_per_token is not None:
        speech = D.speech_mask(Tn, len(D.strip_label(label)), frames_per_token)
    if temporal:
        mean = np.mean(temporal, axis=0)
        header = ["frame", "weight"] + [f"branch{i}" for i in range(len(temporal))]
        header += ["speech"] if speech is not None else []
        rows = []
        for t in range(Tn):
            row = [t, f"{mean[t]:.6f}"] + [f"{m[t]:.6f}" for m in temporal]
            rows.append(row + ([int(speech[t])] if speech is not None else []))
        _write_rows(prefix + "temporal.csv", header, rows)
        summary["mean_temporal"] = float(mean.mean())
        if speech is not None and speech.any() and (~speech).any():
            summary["mean_speech"] = float(mean[speech].mean())
            summary["mean_silence"] = float(mean[~speech].mean())

    if trace.channel_weights is not None:
        _write_rows(prefix + "channel.csv", ["channel", "weight"], [[c, f"{w:.6f}"] for c, w in enumerate(trace.channel_weights[0])])

    if trace.joint_map is not None:
        jm = trace.joint_map[0, 0]
        _write_rows(prefix + "joint.csv", ["frame", "row", "col", "weight"], _long(jm[None]))
        for t in range(Tn):
            write_pgm(f"{prefix}joint_t{t}.pgm", jm[t])

    if trace.spatial_maps:
        rows = []
        for b, m in enumerate(trace.spatial_maps):
            maps = m[:, 0]  # frames x H' x W' for this single sample
            rows += [[b] + r for r in _long(maps[None])]
            for t in range(Tn):
                write_pgm(f"{prefix}spatial{b}_t{t}.pgm", maps[t])
        _write_rows(prefix + "spatial.csv", ["branch", "frame", "row", "col", "weight"], rows)

    if saliency:
        sal = input_saliency(model, batch.clip, batch.targets)[0]
        peak = float(sal.max())
        for t in range(Tn):
            write_pgm(f"{prefix}saliency_t{t}.pgm", sal[t], vmax=peak)
        _write_rows(prefix + "saliency.csv", ["frame", "row", "col", "value"], _long(sal[None], fmt="{:.6g}"))
        summary["saliency_max"] = peak
    return summary


def _long(maps, fmt="{:.6f}"):
    """1 x T x H x W -> [[t, row, col, value], ...]."""
    _, Tn, H, W = maps.shape
    return [[t, i, j, fmt.format(maps[0, t, i, j])] for t in range(Tn) for i in range(H) for j in range(W)]


def export(model, samples, indices, out_dir, frames_per_token=None, saliency=False):
    """Export several samples and a ``summary.csv`` with one row each."""
    for i in indices:
        if not 0 <= i < len(samples):
            raise IndexError(f"sample id {i} out of range [0, {len(samples)})")
    summaries = [
        export_sample(model, *samples[i], i, out_dir, frames_per_token, saliency) for i in indices
    ]
    keys = []
    for s in summaries:
        keys += [k for k in s if k not in keys]
    _write_rows(
        os.path.join(out_dir, "summary.csv"),
        keys,
        [[s.get(k, "") if not isinstance(s.get(k), float) else f"{s[k]:.6f}" for k in keys] for s in summaries],
    )
    return summaries
