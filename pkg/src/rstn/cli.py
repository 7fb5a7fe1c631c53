"""Command-line entry point: ``rstn <subcommand> [options]``.

Every subcommand prints a JSON summary on success.  On failure it prints
``{"error": <type>, "message": <text>}`` to stdout and exits with status 1
(2 for usage errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .baseline import stagewise_infer, stagewise_train
from .harness import ExperimentConfig, Report, case_result, crossval, gradcheck_unrolled, load_corpus, report_emit, with_overrides
from .inference import segment_volume, segment_with_oracle_boxes
from .model import VIEWPOINTS, load_bundle, save_bundle
from .recurrent import TrainLog, train
from .synthgen import PhantomSpec, generate_corpus, write_corpus
from .volume import dsc, load_rvol, save_mask


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (or PhantomSpec for synthgen)")
    common.add_argument("--seed", type=int, help="root seed (u64)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--method", choices=["rstn", "stagewise", "mix"])
    common.add_argument("--thr", type=float)
    common.add_argument("--max-iter", type=int, dest="max_iter")
    common.add_argument("--margin", type=int)
    common.add_argument("--saliency-kernel", type=int, choices=[1, 3, 5], dest="saliency_kernel")
    common.add_argument("--saliency-layers", type=int, choices=[1, 2], dest="saliency_layers")
    common.add_argument("--oracle-boxes", action="store_true", default=None, dest="oracle_boxes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rstn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synthgen", parents=[common], help="write a phantom corpus")
    s.add_argument("--n", type=int, default=48)
    sub.add_parser("train", parents=[common], help="train one model on the whole corpus")
    s = sub.add_parser("infer", parents=[common], help="segment one volume")
    s.add_argument("--weights", required=True, help="directory holding <view>.json bundles")
    s.add_argument("--volume", required=True, help="RVOL image header")
    s.add_argument("--label", help="RVOL label header (needed with --oracle-boxes)")
    s = sub.add_parser("eval", parents=[common], help="segment every corpus case with saved weights")
    s.add_argument("--weights", required=True)
    sub.add_parser("crossval", parents=[common], help="k-fold cross-validation")
    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the unrolled loss")
    s.add_argument("--T", type=int, default=1)
    s.add_argument("--phase", type=int, default=2, choices=[1, 2])
    return p


def _config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_json(json.loads(Path(args.config).read_text()))
    else:
        cfg = ExperimentConfig()
    return with_overrides(cfg, seed=args.seed, out=args.out, method=args.method, thr=args.thr,
                          max_iter=args.max_iter, margin=args.margin, saliency_kernel=args.saliency_kernel,
                          saliency_layers=args.saliency_layers, oracle_boxes=args.oracle_boxes)


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    return Path(args.out)


def _load_bundles(path) -> dict:
    path = Path(path)
    return {v: load_bundle(path / f"{v}.json") for v in VIEWPOINTS}


def _segment(bundles, x, y, cfg):
    if cfg.infer.oracle_boxes:
        if y is None:
            raise UsageError("--oracle-boxes needs ground truth")
        return segment_with_oracle_boxes(bundles, x, y, cfg.infer)
    if cfg.method == "stagewise":
        return stagewise_infer(bundles, x, cfg.infer)
    return segment_volume(bundles, x, cfg.infer)


def cmd_synthgen(args) -> dict:
    out = _require_out(args)
    spec = PhantomSpec.from_json(json.loads(Path(args.config).read_text())) if args.config else PhantomSpec()
    seed_base = args.seed if args.seed is not None else 1000
    corpus = generate_corpus(spec, args.n, seed_base)
    manifest = write_corpus(corpus, out)
    return {"manifest": str(manifest), "cases": len(corpus)}


def cmd_train(args) -> dict:
    cfg = _config(args)
    out = _require_out(args)
    corpus = load_corpus(cfg)
    if cfg.method == "mix":
        raise UsageError("train supports --method rstn or stagewise")
    log = TrainLog()
    fit = stagewise_train if cfg.method == "stagewise" else train
    bundles = fit(corpus.volumes, corpus.masks, cfg.train, cfg.seed, log)
    out.mkdir(parents=True, exist_ok=True)
    paths = [str(save_bundle(b, out / v)) for v, b in bundles.items()]
    (out / "train_log.jsonl").write_text(log.to_jsonl())
    return {"weights": paths, "steps": len(log.records)}


def cmd_infer(args) -> dict:
    cfg = _config(args)
    bundles = _load_bundles(args.weights)
    x = load_rvol(args.volume)
    y = load_rvol(args.label) if args.label else None
    z, trace = _segment(bundles, x, y, cfg)
    res = trace.to_json()
    if y is not None:
        res["dsc"] = dsc(z, y)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_mask(z, out / "mask")
        (out / "trace.json").write_text(json.dumps(trace.to_json(), sort_keys=True))
    return res


def cmd_eval(args) -> dict:
    cfg = _config(args)
    bundles = _load_bundles(args.weights)
    corpus = load_corpus(cfg)
    report = Report(cfg.method, cfg.infer.thr, cfg.infer.T, [list(corpus.ids)])
    label = cfg.method + ("+oracle" if cfg.infer.oracle_boxes else "")
    cases = []
    for cid, x, y in zip(corpus.ids, corpus.volumes, corpus.masks):
        z, tr = _segment(bundles, x, y, cfg)
        cases.append(case_result(cid, 0, z.data, y.data, tr))
    report.sections[label] = cases
    report.primary = label
    if args.out:
        report_emit(report, args.out)
    return report.summary()


def cmd_crossval(args) -> dict:
    cfg = _config(args)
    if cfg.infer.oracle_boxes:
        cfg = replace(cfg, oracle=True, infer=replace(cfg.infer, oracle_boxes=False))
    report = crossval(cfg)
    return {name: report.summary(name) for name in report.sections}


def cmd_gradcheck(args) -> dict:
    seed = args.seed if args.seed is not None else 2
    margin = args.margin if args.margin is not None else 2
    res = gradcheck_unrolled(T=args.T, phase=args.phase, seed=seed, margin=margin)
    res["pass"] = res["max_rel_error"] <= 1e-4
    return res


COMMANDS = {
    "synthgen": cmd_synthgen,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "crossval": cmd_crossval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        if e.code:
            print(json.dumps({"error": "UsageError", "message": "invalid command line"}))
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        result = COMMANDS[args.command](args)
    except UsageError as e:
        print(json.dumps({"error": "UsageError", "message": str(e)}))
        return 2
    except Exception as e:  # noqa: BLE001 - surfaced as machine-readable error
        print(json.dumps({"error": type(e).__name__, "message": str(e)}))
        return 1
    print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
