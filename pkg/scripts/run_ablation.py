"""Component ablation on the synthetic world: baseline, +CFL, +UPL, full.

    python3 scripts/run_ablation.py --seeds 0 1 2 --steps 2000

Prints one row per variant averaged over seeds; ``--csv`` also writes them.
"""
import argparse
import dataclasses
import time
from pathlib import Path

import numpy as np

from opendet_lab.config import load_config
from opendet_lab.trainer import run_experiment

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

VARIANTS = {
    "baseline": ("baseline.cfg", {}),
    "+CFL": ("full.cfg", {"upl": {"beta": 0.0}}),
    "+UPL": ("full.cfg", {"ic": {"gamma_0": 0.0}}),
    "+CFL+UPL": ("full.cfg", {}),
}


def configure(name, seed, steps):
    path, overrides = VARIANTS[name]
    world, cfg = load_config(CONFIGS / path, seed=seed)
    for section, values in overrides.items():
        cfg = dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **values)})
    if steps is not None:
        cfg = dataclasses.replace(cfg, total_iterations=steps, warmup_iterations=min(cfg.warmup_iterations, steps // 10))
    return world, cfg


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--steps", type=int, default=None, help="override total_iterations")
    ap.add_argument("--csv", default=None)
    args = ap.parse_args()

    head = "variant,acc,unknown_as_known,mAP_K,WI,AOSE,AP_U,intra,inter,seconds"
    rows = [head]
    print(f"{'variant':<10}{'acc':>8}{'unk->k':>9}{'mAP_K':>8}{'WI':>8}{'AOSE':>8}{'AP_U':>8}"
          f"{'intra':>9}{'inter':>8}{'sec':>7}")
    for name in VARIANTS:
        t0 = time.perf_counter()
        res = [run_experiment(*configure(name, s, args.steps)) for s in args.seeds]
        sec = time.perf_counter() - t0
        m = lambda f: float(np.mean([f(r) for r in res]))  # noqa: E731
        vals = [m(lambda r: 100 * r.close_set_accuracy), m(lambda r: r.unknown_as_known),
                m(lambda r: 100 * r.report.map_k), m(lambda r: r.report.wi), m(lambda r: r.report.aose),
                m(lambda r: 100 * r.report.ap_u), m(lambda r: r.latent_final[0]), m(lambda r: r.latent_final[1])]
        print(f"{name:<10}{vals[0]:>8.2f}{vals[1]:>9.1f}{vals[2]:>8.2f}{vals[3]:>8.2f}{vals[4]:>8.1f}"
              f"{vals[5]:>8.2f}{vals[6]:>9.4f}{vals[7]:>8.3f}{sec:>7.1f}")
        rows.append(",".join([name] + [repr(v) for v in vals] + [f"{sec:.1f}"]))
    if args.csv:
        Path(args.csv).write_text("\n".join(rows) + "\n")


if __name__ == "__main__":
    main()
