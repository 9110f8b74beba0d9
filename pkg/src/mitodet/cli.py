"""Command-line entry point.

Subcommands: train, evaluate, ablate, synth. Progress and results are
emitted as one JSON object per line on stdout; failures print a single
`mitodet: error: <code>: <message>` line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as config_mod
from . import data as data_mod
from . import evaluation

# structural keys that must agree between a checkpoint and a config it is
# evaluated under
_STRUCTURAL_PREFIXES = ("model.", "anchors.", "loss.")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _emit(obj):
    print(json.dumps(obj), flush=True)


def _load_config(args) -> config_mod.RunConfig:
    try:
        cfg = config_mod.load_config(args.config) if args.config \
            else config_mod.RunConfig()
        overrides = {}
        for item in args.set or []:
            key, value = config_mod.parse_override(item)
            overrides[key] = value
        if getattr(args, "manifest", None):
            overrides["data.manifest"] = args.manifest
        if getattr(args, "output_dir", None):
            overrides["output.dir"] = args.output_dir
        if overrides:
            cfg = config_mod.apply_overrides(cfg, overrides)
        return cfg
    except FileNotFoundError as exc:
        raise CliError("config-missing", str(exc)) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError("config-invalid", str(exc)) from exc


def _load_manifest(cfg) -> data_mod.Manifest:
    if not cfg.manifest:
        raise CliError("config-invalid", "no manifest path configured (data.manifest)")
    try:
        return data_mod.load_dataset(cfg.manifest)
    except data_mod.DatasetError as exc:
        raise CliError("dataset-invalid", str(exc)) from exc


def cmd_train(args) -> int:
    from .train import TrainingDiverged, train_model

    cfg = _load_config(args)
    manifest = _load_manifest(cfg)
    out = config_mod.resolve_output_dir(cfg)
    _emit({"event": "train-start", "output_dir": str(out),
           "n_cases": len(manifest.cases)})
    try:
        result = train_model(manifest, cfg, out_dir=out,
                             log_fn=lambda row: _emit({"event": "epoch", **row}))
    except TrainingDiverged as exc:
        raise CliError("training-diverged", str(exc)) from exc
    except ValueError as exc:
        raise CliError("dataset-invalid", str(exc)) from exc

    report = evaluation.evaluate_model(
        result.model, result.test_cases, images=result.image_cache,
        iou_threshold=cfg.iou_threshold, score_threshold=cfg.score_threshold,
        nms_threshold=cfg.nms_threshold, max_detections=cfg.max_detections,
        f1_score_threshold=result.f1_threshold,
        augmentation=cfg.augment.enabled,
    )
    evaluation.write_report_json(report, out / "report.json")
    _emit({"event": "done", "checkpoint": str(result.checkpoint_last),
           "best_val_map": result.best_val_map, **report.to_json_dict()})
    return 0


def _structural(flat: dict) -> dict:
    return {k: v for k, v in flat.items() if k.startswith(_STRUCTURAL_PREFIXES)}


def cmd_evaluate(args) -> int:
    from .model import load_checkpoint

    try:
        model, sidecar = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise CliError("checkpoint-missing", str(exc)) from exc

    stored_flat = (sidecar.get("extra") or {}).get("config")
    if args.config or args.set:
        cfg = _load_config(args)
        if stored_flat is not None:
            diff = {
                k: (v, config_mod.to_flat(cfg)[k])
                for k, v in _structural(stored_flat).items()
                if config_mod.to_flat(cfg).get(k) != v
            }
            if diff:
                lines = "; ".join(f"{k}: checkpoint={a!r} config={b!r}"
                                  for k, (a, b) in sorted(diff.items()))
                raise CliError(
                    "config-mismatch",
                    f"config disagrees with checkpoint on {lines}",
                )
    elif stored_flat is not None:
        cfg = config_mod.from_flat(stored_flat)
        if args.manifest:
            cfg = config_mod.apply_overrides(cfg, {"data.manifest": args.manifest})
    else:
        cfg = _load_config(args)

    manifest = _load_manifest(cfg)
    test_cases = [r for r in manifest.cases if r.tumor_type == cfg.held_out]
    if not test_cases:
        raise CliError("empty-test-split",
                       f"no cases of held-out type {cfg.held_out!r}")

    report = evaluation.evaluate_model(
        model, test_cases,
        iou_threshold=cfg.iou_threshold, score_threshold=cfg.score_threshold,
        nms_threshold=cfg.nms_threshold, max_detections=cfg.max_detections,
        f1_score_threshold=args.f1_threshold,
    )
    if args.out:
        evaluation.write_report_json(report, args.out)
    _emit({"event": "report", **report.to_json_dict()})
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    manifest = _load_manifest(cfg)
    out = config_mod.resolve_output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    reports = evaluation.run_ablation(
        manifest, cfg,
        progress=lambda msg: _emit({"event": "progress", "message": msg}),
    )
    evaluation.write_ablation_csv(reports, out / "ablation.csv")
    (out / "ablation.json").write_text(
        json.dumps([r.to_json_dict() for r in reports], indent=2) + "\n"
    )
    try:
        evaluation.plot_ablation(reports, out / "ablation.png")
    except Exception:
        pass  # plotting is best-effort; the tables are the record
    for r in reports:
        _emit({"event": "ablation-row", **r.to_json_dict()})
    _emit({"event": "done", "csv": str(out / "ablation.csv")})
    return 0


def cmd_synth(args) -> int:
    try:
        manifest = data_mod.generate_synthetic_dataset(
            args.cases, args.out_dir, image_size=args.image_size, seed=args.seed
        )
    except ValueError as exc:
        raise CliError("synth-invalid", str(exc)) from exc
    _emit({
        "event": "done",
        "manifest": str(Path(args.out_dir) / "manifest.json"),
        "n_cases": len(manifest.cases),
        "dataset_hash": data_mod.dataset_hash(manifest),
    })
    return 0


def _add_config_flags(p):
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (JSON value or bare string)")
    p.add_argument("--manifest", help="dataset manifest path (overrides data.manifest)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mitodet",
        description="anchor-based mitotic figure detector: train, evaluate, ablate",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a detector")
    _add_config_flags(p)
    p.add_argument("--output-dir", help="run directory (overrides output.dir)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the held-out split")
    p.add_argument("--checkpoint", required=True, help="checkpoint .pt path")
    _add_config_flags(p)
    p.add_argument("--out", help="write the report JSON here")
    p.add_argument("--f1-threshold", type=float, default=None,
                   help="operating score threshold for F1 (default: sweep)")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate all 2^3 component combinations")
    _add_config_flags(p)
    p.add_argument("--output-dir", help="run directory (overrides output.dir)")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--cases", type=int, default=60)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"mitodet: error: {exc.code}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
