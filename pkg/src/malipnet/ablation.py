"""Train and score every combination of the attention modules."""

import csv
import itertools
import logging
import os
from dataclasses import replace

from .config import VARIANT_NAMES, parse_variants
from .training import fit

log = logging.getLogger(__name__)

FIELDS = ("variant", "CA", "JSTA", "SSTA", "decoder", "error_rate", "S", "D", "I", "N", "test_loss")


def variant_name(modules):
    return "+".join(m for m in VARIANT_NAMES if m in modules) or "baseline"


def variant_grid(modules):
    """Every subset of ``modules``: baseline first, then by size, full last."""
    ordered = [m for m in VARIANT_NAMES if m in parse_variants(modules)]
    return [frozenset(c) for k in range(len(ordered) + 1) for c in itertools.combinations(ordered, k)]


def _row(name, modules, decoder, result):
    ops = result.ops
    return {
        "variant": name,
        **{m: int(m in modules) for m in VARIANT_NAMES},
        "decoder": decoder,
        "error_rate": f"{result.error_rate:.6f}",
        "S": ops.S,
        "D": ops.D,
        "I": ops.I,
        "N": ops.N,
        "test_loss": f"{result.loss:.6f}",
    }


def run_ablation(cfg, modules, samples=None, vocab_size=None, progress=True):
    """Train each variant with ``cfg``'s seed and collect test error rates.

    Rows follow the usual ablation layout: baseline, single modules, pairs,
    the full requested set, then the full set decoded greedily (no beam).
    Each variant trains into ``<out_dir>/<variant>``; the table is written
    to ``<out_dir>/ablation.csv`` and returned as a list of dicts.
    """
    grid = variant_grid(modules)
    rows = []
    full = grid[-1]
    greedy_row = None
    for mods in grid:
        name = variant_name(mods)
        run_cfg = replace(cfg, variants=",".join(sorted(mods)), out_dir=os.path.join(cfg.out_dir, name))
        if progress:
            log.info("ablation: training %s", name)
        res = fit(run_cfg, samples, vocab_size, progress=progress)
        rows.append(_row(name, mods, f"beam{cfg.beam_width}", res.test))
        if mods == full and mods:
            greedy_row = _row(f"{name} (w/o beam)", mods, "greedy", res.test_greedy)
    if greedy_row is not None:
        rows.append(greedy_row)
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_table(os.path.join(cfg.out_dir, "ablation.csv"), rows)
    return rows


def write_table(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS)
        w.writeheader()
        w.writerows(rows)


def format_table(rows):
    width = max(len(r["variant"]) for r in rows)
    lines = [f"{'variant':<{width}}  decoder  error_rate"]
    lines += [f"{r['variant']:<{width}}  {r['decoder']:<7}  {float(r['error_rate']):.4f}" for r in rows]
    return "\n".join(lines)
