"""``opendet-lab`` command line: train, eval, split, gradcheck, plot.

Every command writes its outputs plus ``manifest.json`` (command, resolved
config, seed, output directory, sha256 of each artifact) into ``--out``.
Exit status is 0 on success, 1 on a failed gradient check or aborted
training, 2 on bad input.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, dump_flat, load_config
from .gradcheck import format_table, run_gradcheck
from .openset_eval import (AnnotationFormatError, SplitShortfallError, SplitSpec, build_split, evaluate,
                           ingest_annotations, ingest_detections, load_registry)
from .plotting import latent_scatter, pr_curve, weighting_curves
from .trainer import (TrainingDivergedError, config_snapshot, run_experiment, save_checkpoint,
                      telemetry_csv)


class CommandError(Exception):
    pass


class TrainingAborted(Exception):
    pass


def _write(out: Path, name: str, data) -> tuple[str, str]:
    raw = data.encode() if isinstance(data, str) else data
    (out / name).write_bytes(raw)
    return name, hashlib.sha256(raw).hexdigest()


def _manifest(out: Path, command: str, config, seed, artifacts: list) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "output_dir": str(out),
        "artifacts": dict(sorted(artifacts)),
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _latent_csv(model, draw) -> str:
    z = model.latent(draw.features)
    head = ["index", "label", "cluster"] + [f"z{i}" for i in range(z.shape[1])]
    rows = [",".join(head)]
    for i, (c, k, v) in enumerate(zip(draw.labels, draw.cluster, z)):
        rows.append(",".join([str(i), str(int(c)), str(int(k))] + [repr(float(x)) for x in v]))
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    world, config = load_config(args.config, seed=args.seed)
    out = _outdir(args.out)
    arts = [_write(out, "config.txt", dump_flat(world, config))]
    try:
        result = run_experiment(world, config)
    except TrainingDivergedError as e:
        arts.append(_write(out, "diverged.json", json.dumps(e.state, indent=2, sort_keys=True, default=repr) + "\n"))
        _manifest(out, "train", config_snapshot(world, config), config.seed, arts)
        raise TrainingAborted(f"training aborted: {e}") from None
    report = result.report
    arts += [
        _write(out, "checkpoint.bin", save_checkpoint(result.model, None)),
        _write(out, "telemetry.csv", telemetry_csv(result.telemetry)),
        _write(out, "report.csv", report.to_csv()),
        _write(out, "report.json", report.to_json()),
        _write(out, "latent.csv", _latent_csv(result.model, result.test_draw)),
        _write(out, "summary.csv", "metric,value\n"
               f"close_set_accuracy,{result.close_set_accuracy!r}\n"
               f"unknown_as_known,{result.unknown_as_known}\n"
               f"latent_init_intra,{result.latent_init[0]!r}\n"
               f"latent_init_inter,{result.latent_init[1]!r}\n"
               f"latent_final_intra,{result.latent_final[0]!r}\n"
               f"latent_final_inter,{result.latent_final[1]!r}\n"),
    ]
    if result.bank is not None:
        arts.append(_write(out, "memory_bank.txt", result.bank.to_text()))
    _manifest(out, "train", config_snapshot(world, config), config.seed, arts)
    print(f"accuracy={result.close_set_accuracy:.4f} unknown_as_known={result.unknown_as_known} "
          f"mAP_K={100 * report.map_k:.2f} WI={report.wi:.2f} AOSE={report.aose} AP_U={100 * report.ap_u:.2f}")
    return 0


def cmd_eval(args) -> int:
    gt_doc = ingest_annotations(args.gt)
    det_doc = ingest_detections(args.det, categories=gt_doc.categories)
    registry = load_registry(args.split if args.split else args.gt)
    gts = registry.designate(gt_doc.records)
    report = evaluate(gts, det_doc.records, registry.known_category_ids, registry.unknown_label,
                      recall_level=args.recall_level, iou_threshold=args.iou, score_floor=args.score_floor)
    out = _outdir(args.out)
    arts = [_write(out, "report.csv", report.to_csv()), _write(out, "report.json", report.to_json())]
    flags = {"gt": str(args.gt), "det": str(args.det), "split": None if args.split is None else str(args.split),
             "recall_level": args.recall_level, "iou": args.iou, "score_floor": args.score_floor}
    _manifest(out, "eval", flags, None, arts)
    sys.stdout.write(report.to_csv())
    return 0


def cmd_split(args) -> int:
    spec = SplitSpec.from_json(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    known = ingest_annotations(args.known_source) if args.known_source else None
    manifest = build_split(spec, known, ingest_annotations(args.open_source))
    out = _outdir(args.out)
    arts = [_write(out, "split.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")]
    block = manifest["open_set"]
    arts.append(_write(out, "split_summary.csv", "metric,value\n"
                       f"known_images,{block['known_images']}\n"
                       f"open_images,{block['open_images']}\n"
                       f"annotations,{len(manifest['annotations'])}\n"
                       f"wilderness_ratio,{block['wilderness_ratio']!r}\n"))
    cfg = {"spec": str(args.spec), "known_source": args.known_source, "open_source": str(args.open_source)}
    _manifest(out, "split", cfg, spec.seed, arts)
    print(f"known_images={block['known_images']} open_images={block['open_images']} "
          f"wilderness_ratio={block['wilderness_ratio']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    rows = run_gradcheck(seed=seed, trials=args.trials)
    print(format_table(rows))
    if args.out:
        out = _outdir(args.out)
        csv = "loss,trials,max_relative_error,passed\n" + "".join(
            f"{r.name},{r.trials},{r.max_relative_error!r},{int(r.passed)}\n" for r in rows)
        _manifest(out, "gradcheck", {"trials": args.trials}, seed, [_write(out, "gradcheck.csv", csv)])
    return 0 if all(r.passed for r in rows) else 1


def _read_latent(path) -> tuple[np.ndarray, np.ndarray]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(lines) < 2:
        raise CommandError(f"{path}: no embeddings")
    head = lines[0].split(",")
    if "label" not in head:
        raise CommandError(f"{path}: needs a 'label' column")
    zcols = [i for i, h in enumerate(head) if h.startswith("z")]
    li = head.index("label")
    rows = [ln.split(",") for ln in lines[1:]]
    labels = np.array([int(r[li]) for r in rows])
    emb = np.array([[float(r[i]) for i in zcols] for r in rows])
    return emb, labels


def cmd_plot(args) -> int:
    kind = args.kind
    if kind == "weighting_curves":
        alphas = tuple(float(a) for a in args.alphas.split(",")) if args.alphas else (0.5, 1.0, 2.0, 3.0)
        plot = weighting_curves(alphas)
    elif kind == "latent_scatter":
        if not args.input:
            raise CommandError("latent_scatter needs --input (a latent CSV)")
        emb, labels = _read_latent(args.input)
        plot = latent_scatter(emb, labels, args.unknown_label)
    else:
        if not args.input:
            raise CommandError("pr_curve needs --input (JSON with tp, scores, num_gt)")
        doc = json.loads(Path(args.input).read_text())
        if not doc.get("tp"):
            raise CommandError(f"{args.input}: empty detection list")
        plot = pr_curve(doc["tp"], doc["scores"], int(doc["num_gt"]))
    out = _outdir(args.out)
    arts = [_write(out, f"{kind}.svg", plot.svg), _write(out, f"{kind}.csv", plot.csv)]
    _manifest(out, "plot", {"kind": kind, "input": args.input, "alphas": args.alphas}, None, arts)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="opendet-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the toy model and evaluate it on an open-set draw")
    t.add_argument("--config", required=True, help="flat key=value config file")
    t.add_argument("--seed", type=int, default=None, help="override the config seed")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="open-set metrics for a detection file")
    e.add_argument("--gt", required=True)
    e.add_argument("--det", required=True)
    e.add_argument("--split", default=None, help="file with the open_set block (default: the gt file)")
    e.add_argument("--recall-level", type=float, default=0.8)
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--score-floor", type=float, default=0.05)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("split", help="build an open-set test split")
    s.add_argument("--config", "--spec", dest="spec", required=True, help="split spec JSON")
    s.add_argument("--known-source", default=None)
    s.add_argument("--open-source", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    g = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--out", default=None)
    g.set_defaults(func=cmd_gradcheck)

    pl = sub.add_parser("plot", help="emit an SVG plot and its CSV data")
    pl.add_argument("--kind", required=True, choices=["weighting_curves", "latent_scatter", "pr_curve"])
    pl.add_argument("--input", default=None)
    pl.add_argument("--alphas", default=None, help="comma-separated alphas for weighting_curves")
    pl.add_argument("--unknown-label", type=int, default=None, help="label drawn as unknown in latent_scatter")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingAborted as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, AnnotationFormatError, SplitShortfallError, CommandError,
            ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
