"""``invlab`` command line: each subcommand runs one stage of the experiment grid."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..data import write_idx
from ..train import ConfigError
from .config import LabConfigError, load_config, schema_document
from .pipeline import Lab, build_source, run_config
from .report import emit_report

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 2, 3

COMMANDS = ("gen-data", "split", "train", "train-prior", "train-eval", "attack", "fisher", "evaluate", "sweep", "report")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment JSON file")
    common.add_argument("--boundary", type=int, help="run only this freeze boundary")
    common.add_argument("--seed", type=int, help="run only this seed")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--workers", type=int, default=1, help="parallel seeds for sweep")
    common.add_argument("--epoch", type=int, help="checkpoint epoch for attack (default: last)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="invlab", description="Transfer-learning defense vs model inversion lab.")
    p.add_argument("--print-schema", action="store_true", help="print the config schema with defaults and exit")
    sub = p.add_subparsers(dest="command")
    helps = {
        "gen-data": "write the configured source as IDX files under OUT/data",
        "split": "write the class-disjoint split manifest for each seed",
        "train": "stage-1 pre-training and stage-2 fine-tuning for each boundary",
        "train-prior": "train the decoder prior on the public split",
        "train-eval": "train the evaluation classifier on all private data",
        "attack": "attack one checkpoint per boundary and print its metrics",
        "fisher": "classification and inversion Fisher reports per boundary",
        "evaluate": "attack and score every checkpoint (no Fisher)",
        "sweep": "run the full grid and emit the report",
        "report": "emit report files from a finished output directory",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return p


def _gen_data(lab: Lab) -> dict:
    src = lab.source()
    if src.shape is None:
        raise LabConfigError("source images are not square; cannot write IDX", "/data")
    h, w = src.shape
    images = np.round(src.images.reshape(len(src), h, w) * 255).astype(np.uint8)
    out = lab.out / "data"
    out.mkdir(parents=True, exist_ok=True)
    img, lab_path = out / "images-idx3-ubyte", out / "labels-idx1-ubyte"
    write_idx(img, lab_path, images, src.labels)
    return {"images": str(img), "labels": str(lab_path), "count": len(src), "shape": [h, w]}


def _metrics_line(cell: dict) -> str:
    if cell["status"] != "done":
        return f"{cell['id']}: FAILED {cell['error']}"
    r = cell["report"]
    return (
        f"{cell['id']}: theta_c={r['theta_c']} acc={r['natural_acc']:.2f} top1={r['att_top1']:.2f} "
        f"top5={r['att_top5']:.2f} knn={r['knn_dist']:.4f}"
    )


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.print_schema:
        sys.stdout.write(schema_document())
        return EXIT_OK
    if not args.command:
        _parser().print_help()
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(args.boundary, args.seed, args.out)
    except (LabConfigError, ConfigError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    lab = Lab(cfg)
    failed = False
    try:
        if args.command == "sweep":
            result = run_config(cfg, workers=args.workers)
            if result.cells:
                emit_report(result)
            print(f"{len(result.cells)} cells done, {len(result.failures)} failed -> {cfg.out_dir}")
            failed = bool(result.failures)
        elif args.command == "report":
            result = lab.collect()
            if not result.cells:
                print("no completed cells to report", file=sys.stderr)
                return EXIT_PARTIAL
            for name, path in emit_report(result).items():
                print(path)
            failed = bool(result.failures)
        elif args.command == "gen-data":
            print(json.dumps(_gen_data(lab), indent=1))
        else:
            for seed in cfg["seeds"]:
                if args.command == "split":
                    print(lab.bundle(seed).manifest_json(), end="")
                elif args.command == "train-prior":
                    lab.generator(seed)
                    print(lab.out / f"seed{seed}" / "prior.ckpt")
                elif args.command == "train-eval":
                    lab.eval_model(seed)
                    print(lab.out / f"seed{seed}" / "eval.ckpt")
                else:
                    for setup in lab.setups():
                        if args.command == "train":
                            rec = lab.finetuned(seed, setup)
                            print(f"s{seed}/{setup.id}: theta_c={rec['theta_c']} final loss {rec['epoch_losses'][-1]:.4f}")
                        elif args.command == "attack":
                            epoch = args.epoch or max(lab.cell_epochs())
                            cell = lab.run_cell(seed, setup, epoch)
                            failed |= cell["status"] != "done"
                            print(_metrics_line(cell))
                        elif args.command == "evaluate":
                            for epoch in lab.cell_epochs():
                                cell = lab.run_cell(seed, setup, epoch)
                                failed |= cell["status"] != "done"
                                print(_metrics_line(cell))
                        elif args.command == "fisher":
                            rep = lab.fisher(seed, setup)
                            failed |= rep["status"] != "done"
                            print(json.dumps(rep if rep["status"] != "done" else {
                                "seed": seed, "setup": setup.id,
                                "layer_fi": {f"{r['task']}/{r['distance']}/{r['iteration']}": r["layer_fi"]
                                             for r in rep["reports"]},
                            }))
    except (LabConfigError, ConfigError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_PARTIAL if failed else EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
