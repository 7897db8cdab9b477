"""Command-line entry point: ``sbprobe <subcommand> ...``.

Subcommands
    gen-toy-data   write the synthetic benchmark (PNG images + manifest.csv)
    enhance        apply a privacy model to images
    recover        apply a named prober (PP-D ... PP-AB) to images
    evaluate       full robustness (and detection) experiment, writes reports
    detect         per-image APEND scores as JSON records
    report         validate a report.json, re-derive its scores, print a table

Images are given as a manifest CSV, a directory of PNG/JPEG files or a single
image file. Components (classifier, verifier, autoencoder, synthesis model)
are trained on the training split of the configured dataset, or loaded from
weights named in the config.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import jsonschema
import yaml

from . import __version__
from .config import load_config
from .data import DatasetManifest, ManifestRecord, read_manifest, write_manifest, write_toy_dataset
from .detection import DetectorConfig, apend_score, fuse_with_supervised
from .errors import SBProbeError
from .harness import (build_components, build_plan, build_privacy_model, dump_json, emit_reports,
                      load_report, read_external_scores, recompute_check, reports_from_json,
                      run_robustness_experiment)
from .imaging import FaceImage, load_image, save_image

log = logging.getLogger("sbprobe")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def _parse_set(items: Sequence[str]) -> dict:
    """``a.b=value`` pairs into a nested dict; values are parsed as YAML scalars."""
    out: dict = {}
    for item in items or ():
        key, sep, val = item.partition("=")
        if not sep:
            raise SBProbeError(f"--set expects key=value, got {item!r}")
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(val)
    return out


def _config(args) -> dict:
    over = _parse_set(args.set)
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    return load_config(args.config, over)


def _gather(spec: str) -> list[tuple[str, FaceImage, ManifestRecord | None]]:
    """(relative name, image, manifest record) for a manifest, directory or single file."""
    p = Path(spec)
    if p.suffix.lower() == ".csv":
        man = read_manifest(p)
        return [(r.image_path, man.load(r), r) for r in man.records]
    if p.is_dir():
        files = sorted(f for f in p.rglob("*") if f.suffix.lower() in IMAGE_SUFFIXES)
        return [(f.relative_to(p).as_posix(), load_image(f, source_id=f.relative_to(p).as_posix()), None)
                for f in files]
    if p.is_file():
        return [(p.name, load_image(p, source_id=p.name), None)]
    raise SBProbeError(f"no such input: {spec}")


def _write_images(items, images: Sequence[FaceImage], out: Path) -> None:
    recs = []
    for (name, _, rec), im in zip(items, images):
        dest = save_image(im, out / name)
        rel = dest.relative_to(out).as_posix()
        if rec is not None:
            recs.append(ManifestRecord(rel, rec.subject_id, rec.attribute, rec.partition))
    if recs:
        write_manifest(DatasetManifest(recs, out.name, out), out / "manifest.csv")


def cmd_gen_toy_data(args) -> int:
    man = write_toy_dataset(args.out, args.subjects, args.images_per_subject, args.size, args.seed)
    print(f"wrote {len(man.records)} images to {args.out}")
    return 0


def cmd_enhance(args) -> int:
    cfg = _config(args)
    comp = build_components(cfg)
    name = args.model or cfg["privacy_model"]
    pm = build_privacy_model(name, cfg["privacy_models"][name], cfg, comp.dataset, comp.splits.train,
                             comp.classifier, comp.verifier)
    items = _gather(args.input)
    out = Path(args.out)
    enhanced = [pm.enhance(im) for _, im, _ in items]
    _write_images(items, enhanced, out)
    print(f"{name}: enhanced {len(enhanced)} images into {out}")
    return 0


def cmd_recover(args) -> int:
    cfg = _config(args)
    comp = build_components(cfg)
    pl = comp.toolkit.pipeline(args.prober)
    items = _gather(args.input)
    _write_images(items, [pl(im) for _, im, _ in items], Path(args.out))
    print(f"{args.prober}: recovered {len(items)} images into {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    plan = build_plan(cfg, privacy_model=args.model)
    result = run_robustness_experiment(plan)
    written = emit_reports(result, args.out)
    v = result.vanilla
    print(f"{plan.privacy_model.name}: SR {v.sr}  IL {v.il}  PIC {v.pic}")
    for name, r in result.reports.items():
        print(f"  {name:6s} ARR {r.arr}")
    if result.detection is not None:
        print(f"  APEND AUC {result.detection.auc}  EER {result.detection.eer}")
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def cmd_detect(args) -> int:
    cfg = _config(args)
    comp = build_components(cfg)
    names = args.probers or cfg["detection"]["probers"]
    det = DetectorConfig([comp.toolkit.pipeline(n) for n in names], comp.classifier,
                         args.weights or cfg["detection"]["weights"], cfg["workers"])
    ext_path = args.external_scores or cfg["detection"]["external_scores"]
    ext = read_external_scores(ext_path) if ext_path else None
    if ext is not None:
        # external tools usually key by file name only
        ext = {**{(Path(k).name, c): v for (k, c), v in ext.items()}, **ext}
    alpha = cfg["detection"]["alpha"] if args.alpha is None else args.alpha
    records = []
    for name, im, _ in _gather(args.input):
        s = apend_score(im, det)
        s.source_id = name
        if ext is not None:
            key = (name, "p") if (name, "p") in ext else (Path(name).name, "p")
            if key not in ext:
                raise SBProbeError(f"no external score for {name!r}")
            s.fused = fuse_with_supervised(s.d_fin, ext[key], alpha)
        records.append(s.to_dict(det.names))
    text = json.dumps(records, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_report(args) -> int:
    d = load_report(args.report)
    bad = recompute_check(d)
    vanilla, per = reports_from_json(d)
    if args.format == "json":
        sys.stdout.write(dump_json(d))
    else:
        rows = [("vanilla", vanilla)] + list(per.items())
        print(f"{'prober':8s} {'auc_gp':>14s} {'auc_gr':>14s} {'SR':>14s} {'IL':>14s} {'PIC':>14s} {'ARR':>14s}")
        for name, r in rows:
            cells = [r.auc.get("auc_gp"), r.auc.get("auc_gr"), r.sr, r.il, r.pic, r.arr]
            print(f"{name:8s} " + " ".join(f"{str(c) if c is not None else '-':>14s}" for c in cells))
        if "detection" in d:
            det = d["detection"]
            print(f"APEND {'+'.join(det['probers'])}: AUC {det['auc']['mean']:.3f}  EER {det['eer']['mean']:.3f}")
    if bad:
        print("recompute mismatch: " + ", ".join(bad), file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sbprobe", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("-c", "--config", help="YAML/JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path)")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        return p

    p = sub.add_parser("gen-toy-data", help="write the synthetic benchmark dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=100)
    p.add_argument("--images-per-subject", type=int, default=5)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_toy_data)

    p = with_config(sub.add_parser("enhance", help="apply a privacy model"))
    p.add_argument("input", help="manifest CSV, image directory or image file")
    p.add_argument("--model", help="privacy model name from the config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_enhance)

    p = with_config(sub.add_parser("recover", help="apply a recovery prober"))
    p.add_argument("input")
    p.add_argument("--prober", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_recover)

    p = with_config(sub.add_parser("evaluate", help="run the robustness experiment and write reports"))
    p.add_argument("--model", help="privacy model name from the config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = with_config(sub.add_parser("detect", help="APEND scores per image"))
    p.add_argument("input")
    p.add_argument("--probers", nargs="+")
    p.add_argument("--weights", nargs="+", type=float)
    p.add_argument("--external-scores", help="CSV with columns image, condition, score")
    p.add_argument("--alpha", type=float)
    p.add_argument("--out", help="JSON output file (default: stdout)")
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("report", help="validate and summarise a report.json")
    p.add_argument("report")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (SBProbeError, jsonschema.ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
