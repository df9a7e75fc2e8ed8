"""Command-line entry point: synth, train, eval, scan.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema

from . import experiments as ex
from .baselines import load_checkpoint
from .hsi import CubeFormatError, read_cube
from .lisa import LisaModel, write_epoch_log
from .metrics import EVAL_REPORT_SCHEMA, EvalReport, detection_eval
from .pipeline import (BandMismatchError, DetectionFormatError, PipelineConfig, WeightModel, ingest_detections,
                       process_scan, train_weight_model, window_offsets, windowed_ground_truth,
                       write_records_csv, write_records_geojson)
from .synth import SynthConfig, write_dataset

log = logging.getLogger("spectra_invar")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from exc


def _snapshot(out, cfg):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def cmd_synth(args):
    raw = _read_json(args.config) if args.config else {}
    if "synth" in raw and isinstance(raw["synth"], dict):
        raw = raw["synth"]
    try:
        cfg = SynthConfig.from_dict(raw)
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid synth config: {exc}") from exc
    manifest = write_dataset(cfg, args.out, args.window_lines, args.overlap)
    log.info("wrote %d domains to %s", len(manifest["domains"]), args.out)
    return EXIT_OK


def _model_stem(model, ablate):
    return model if ablate is None else f"{model}_no_{ablate}"


def cmd_train(args):
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    if args.ablate and args.model != "lisa":
        raise UsageError("--ablate applies to --model lisa only")
    out = Path(args.out or cfg.out_dir)
    _snapshot(out, cfg)
    ckpt = out / f"{_model_stem(args.model, args.ablate)}.ckpt"
    if args.model == "weight":
        x, areas, grams = ex.weight_samples(cfg, cfg.scenario.source, "train")
        model, hist = train_weight_model(cfg.weight, x, areas, grams)
        model.save(ckpt)
        with open(out / "weight_epoch_log.csv", "w") as fh:
            fh.write("epoch,mse\n")
            for i, v in enumerate(hist):
                fh.write(f"{i + 1},{v:.9g}\n")
    else:
        train, _ = ex.scenario_splits(cfg)
        model, hist = ex.fit(args.model, cfg, train, args.ablate)
        model.save(ckpt)
        if hist:
            write_epoch_log(hist, out / f"{_model_stem(args.model, args.ablate)}_epoch_log.csv")
    print(ckpt)
    return EXIT_OK


def _load_model(path):
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args):
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    scen = ex.Scenario.named(args.scenario or cfg.scenario.name)
    cfg.scenario = scen
    models = [_load_model(p) for p in args.checkpoint]
    ps = ex.patch_sets_for(cfg)
    train, test = ex.scenario_splits(cfg, ps)
    diag = ex.diagnostic_splits(cfg, ps) if args.diagnostics else None
    reports = []
    for (kind, model), path in zip(models, args.checkpoint):
        if isinstance(model, LisaModel) and model.bands != test.x.shape[1]:
            raise UsageError(f"{path}: checkpoint expects {model.bands} bands, data has {test.x.shape[1]}")
        rep = ex.evaluate(model, test, kind, scen, diag if kind == "lisa" else None)
        jsonschema.validate(json.loads(rep.to_json()), EVAL_REPORT_SCHEMA)
        reports.append(rep)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for rep, path in zip(reports, args.checkpoint):
            (out / f"report_{Path(path).stem}.json").write_text(rep.to_json())
    if len(reports) == 1:
        print(reports[0].to_json())
    else:
        print(ex.comparison_table(reports))
    return EXIT_OK


def cmd_scan(args):
    for p in (args.cube, args.detections, args.lisa, args.weight):
        if not Path(p).exists():
            raise UsageError(f"file not found: {p}")
    try:
        pcfg = PipelineConfig(args.window_lines, args.overlap, args.iou_match, args.margin, args.g_min)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    kind, lisa_model = load_checkpoint(args.lisa)
    if not isinstance(lisa_model, LisaModel) or kind != "lisa":
        raise UsageError(f"{args.lisa} is not a LISA checkpoint")
    try:
        weight_model = WeightModel.load(args.weight)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        raise UsageError(f"cannot load weight checkpoint {args.weight}: {exc}") from exc
    try:
        cube = read_cube(args.cube)
    except CubeFormatError as exc:
        raise UsageError(f"{args.cube}: {exc}") from exc
    if pcfg.window_lines > cube.lines:
        raise UsageError(f"window of {pcfg.window_lines} lines exceeds the {cube.lines}-line cube")
    try:
        dets = ingest_detections(args.detections, pcfg.window_lines, cube.samples)
    except DetectionFormatError as exc:
        raise UsageError(f"{args.detections}: {exc}") from exc
    records, session = process_scan(cube, dets, lisa_model, weight_model, pcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_records_csv(records, out / "bunches.csv")
    write_records_geojson(records, out / "bunches.geojson")
    if args.report:
        gt = _read_json(args.report)
        boxes = [g["bbox"] if isinstance(g, dict) else g for g in gt]
        truth = {}
        for d in windowed_ground_truth(boxes, cube.lines, pcfg.window_lines, pcfg.overlap):
            truth.setdefault(d["window_offset"], []).append(d["bbox"])
        for off in window_offsets(cube.lines, pcfg.window_lines, pcfg.overlap):
            truth.setdefault(off, [])
        preds = [{"image_id": d.window_offset, "bbox": d.bbox, "score": d.score}
                 for ds in dets.values() for d in ds]
        rep = EvalReport(model="detections", scenario="scan", target_domains=[cube.domain.name],
                         detection=detection_eval(truth, preds))
        (out / "detection_report.json").write_text(rep.to_json())
    log.info("%d records, %d suppressed, %d failed, %d never framed", len(records), len(session.suppressed),
             len(session.failed), len(session.lost))
    print(out / "bunches.csv")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="spectra-invar", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-domain dataset")
    s.add_argument("--config", help="SynthConfig JSON (or an experiment config with a 'synth' key); defaults if omitted")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--window-lines", type=int, default=64, help="window length for the detection JSONL (lines)")
    s.add_argument("--overlap", type=float, default=0.5, help="window overlap fraction for the detection JSONL")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model and write a checkpoint plus epoch log")
    t.add_argument("--model", required=True, choices=["lisa", "predictor", "pls", "weight"], help="model kind")
    t.add_argument("--config", help="experiment config JSON; defaults if omitted")
    t.add_argument("--ablate", choices=sorted(ex.ABLATIONS), help="zero one auxiliary loss weight (lisa only)")
    t.add_argument("--out", help="run directory (default: out_dir from the config)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoint(s) on a scenario's held-out domain")
    e.add_argument("--scenario", choices=sorted(ex.SCENARIOS), help="scenario (default: from the config)")
    e.add_argument("--checkpoint", required=True, action="append",
                   help="checkpoint path; repeat to print a comparison table")
    e.add_argument("--config", help="experiment config JSON naming the data; defaults if omitted")
    e.add_argument("--diagnostics", action="store_true", help="add latent-space probe accuracy and MMD (lisa)")
    e.add_argument("--out", help="directory for report JSON files")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("scan", help="run the windowed scan pipeline over one cube")
    c.add_argument("--cube", required=True, help="cube file")
    c.add_argument("--detections", required=True, help="per-window detections JSONL")
    c.add_argument("--lisa", required=True, help="LISA checkpoint")
    c.add_argument("--weight", required=True, help="weight-model checkpoint")
    c.add_argument("--out", required=True, help="output directory for CSV and GeoJSON")
    c.add_argument("--report", help="ground-truth boxes JSON; adds a detection report")
    c.add_argument("--window-lines", type=int, default=64, help="window length in lines")
    c.add_argument("--overlap", type=float, default=0.5, help="window overlap fraction in [0, 1)")
    c.add_argument("--iou-match", type=float, default=0.5, help="IoU threshold for track association")
    c.add_argument("--margin", type=int, default=4, help="fully-framed margin in lines")
    c.add_argument("--g-min", type=float, default=0.5, help="minimum grape fraction for a record")
    c.set_defaults(func=cmd_scan)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ex.worker_count()
        return args.func(args)
    except (UsageError, ex.ConfigError, BandMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
