"""Command-line entry points: gen-data, train, eval, ablate, visualize.

Progress goes to stderr through :mod:`logging`; tables and metrics are
written to files (a short human summary is printed on stdout).
"""

import argparse
import csv
import logging
import os
import sys

from . import config as C
from . import data as D
from .ablation import format_table, run_ablation
from .checkpoint import CheckpointError
from .model import MALipNet
from .training import evaluate, fit
from .visualize import export

log = logging.getLogger("malipnet")

SPLITS = ("train", "val", "test", "all")


def _read_mapping(path):
    with open(path, encoding="utf-8") as fh:
        return C.parse_text(fh.read())


def _overrides(args):
    out = {}
    for key in ("seed", "data", "out_dir", "epochs"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def cmd_gen_data(args):
    values = _read_mapping(args.spec) if args.spec else {}
    if args.seed is not None:
        values["seed"] = args.seed
    spec = D.SynthSpec.from_mapping(values)
    log.info("generating %d samples (V=%d, seed=%d)", spec.n_samples, spec.vocab_size, spec.seed)
    D.write(args.out, D.generate(spec), spec.vocab_size)
    print(f"wrote {spec.n_samples} samples to {args.out}")


def _load_run_config(args):
    cfg = C.load(args.config, **_overrides(args))
    if not cfg.data:
        raise ValueError("no dataset: set 'data = <file>' in the config or pass --data")
    return cfg


def cmd_train(args):
    cfg = _load_run_config(args)
    res = fit(cfg)
    print(
        f"test error rate: beam(K={cfg.beam_width})={res.test.error_rate:.4f} "
        f"greedy={res.test_greedy.error_rate:.4f}; outputs in {res.out_dir}"
    )


def _indices(n, split):
    return list(range(n)) if split == "all" else D.split_indices(n, split)


def cmd_eval(args):
    model = MALipNet.load(args.checkpoint)
    samples, vocab = D.load_all(args.data)
    if vocab != model.cfg.vocab_size:
        raise ValueError(f"dataset vocabulary {vocab} != checkpoint vocabulary {model.cfg.vocab_size}")
    idx = _indices(len(samples), args.split)
    if not idx:
        raise ValueError(f"split {args.split!r} is empty")
    greedy = args.greedy
    res = evaluate(model, samples, idx, beam_width=args.beam, greedy=greedy)
    decoder = "greedy" if greedy else f"beam{args.beam}"
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "reference", "hypothesis"])
            for i in idx:
                ref = " ".join(map(str, D.strip_label(samples[i][1])))
                w.writerow([i, ref, " ".join(map(str, res.hypotheses[i]))])
    ops = res.ops
    print(
        f"{decoder} error_rate={res.error_rate:.6f} S={ops.S} D={ops.D} I={ops.I} N={ops.N} "
        f"loss={res.loss:.6f} samples={len(idx)}"
    )


def cmd_ablate(args):
    cfg = _load_run_config(args)
    rows = run_ablation(cfg, C.parse_variants(args.variants))
    print(format_table(rows))
    print(f"table written to {os.path.join(cfg.out_dir, 'ablation.csv')}")


def _run_config_near(checkpoint):
    path = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), "config.txt")
    return C.load(path) if os.path.exists(path) else None


def cmd_visualize(args):
    model = MALipNet.load(args.checkpoint)
    run_cfg = _run_config_near(args.checkpoint)
    data_path = args.data or (run_cfg.data if run_cfg else "")
    if not data_path:
        raise ValueError("no dataset: pass --data (no config.txt with 'data' next to the checkpoint)")
    samples, _ = D.load_all(data_path)
    try:
        ids = [int(s) for s in args.samples.split(",") if s.strip()]
    except ValueError:
        raise ValueError(f"--samples expects comma-separated integers, got {args.samples!r}") from None
    fpt = args.frames_per_token or (run_cfg.frames_per_token if run_cfg else None)
    summaries = export(model, samples, ids, args.out, frames_per_token=fpt, saliency=args.saliency)
    for s in summaries:
        if "mean_speech" in s:
            print(f"sample {s['sample']}: temporal weight speech={s['mean_speech']:.4f} silence={s['mean_silence']:.4f}")
    print(f"exported {len(ids)} sample(s) to {args.out}")


def build_parser():
    p = argparse.ArgumentParser(prog="malipnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic viseme dataset")
    g.add_argument("--spec", help="key = value file of SynthSpec fields (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (("train", cmd_train, "train one model"), ("ablate", cmd_ablate, "attention ablation grid")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True)
        s.add_argument("--data")
        s.add_argument("--out-dir", dest="out_dir")
        s.add_argument("--epochs", type=int)
        s.add_argument("--seed", type=int)
        if name == "ablate":
            s.add_argument("--variants", default="CA,JSTA,SSTA", help="comma-separated subset of CA,JSTA,SSTA ('' for none)")
        s.set_defaults(func=func)

    e = sub.add_parser("eval", help="decode a dataset split with a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    mode = e.add_mutually_exclusive_group()
    mode.add_argument("--beam", type=int, default=6, metavar="K")
    mode.add_argument("--greedy", action="store_true")
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--out", help="optional CSV of per-sample hypotheses")
    e.add_argument("--seed", type=int, help="accepted for uniformity; decoding is deterministic")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("visualize", help="export attention maps")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--samples", required=True, help="comma-separated sample ids")
    v.add_argument("--out", required=True)
    v.add_argument("--data", help="dataset file (default: 'data' from config.txt beside the checkpoint)")
    v.add_argument("--frames-per-token", dest="frames_per_token", type=int)
    v.add_argument("--saliency", action="store_true", help="also export |d loss / d pixel|")
    v.add_argument("--seed", type=int, help="accepted for uniformity; export is deterministic")
    v.set_defaults(func=cmd_visualize)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    if getattr(args, "beam", 1) is not None and getattr(args, "beam", 1) < 1:
        print("error: beam width must be >= 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except (ValueError, KeyError, IndexError, OSError, CheckpointError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
