"""Command-line front end: ``unitax <subcommand> ...``.

Exit status is 0 on success, 1 when validation finds violations and 2 for
usage, parse and input errors.  Errors go to stderr as ``ERROR <kind>: <detail>``.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .aggregation import aggregate_probs, decode_argmax, export_matrix
from .errors import UnitaxError
from .loss import LabelSetTarget, LossConfig, ModulationMap, lsp_backward, lsp_forward
from .pyramid import ConfusionMatrix, PyramidConfig, PyramidModel, miou, multi_scale_infer, update_confusion
from .sampling import (
    RouletteSampler, class_frequencies, image_weight, load_records, lr_at, schedule_lookup,
)
from .taxonomy import (
    UniversalTaxonomy, build_taxonomy, load_relation_spec, universal_class_count, validate_taxonomy,
)
from .tnsr import atomic_write_bytes, read_tnsr, write_tnsr

DEFAULT_SEED = 0
log = logging.getLogger("unitax")


class UsageError(UnitaxError):
    kind = "UsageError"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dump(doc):
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _emit(doc, out):
    text = _dump(doc)
    if out:
        atomic_write_bytes(out, text.encode("utf-8"))
    else:
        sys.stdout.write(text)


def _require_files(*paths):
    for p in paths:
        if p is not None and not os.path.isfile(p):
            raise UsageError(f"input file not found: {p}")


def _load_taxonomy(path):
    return UniversalTaxonomy.from_json(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# subcommands


def cmd_build_taxonomy(args):
    _require_files(args.spec)
    tax = build_taxonomy(load_relation_spec(args.spec))
    log.info("built %d elementary classes", universal_class_count(tax))
    text = tax.to_json()
    if args.out:
        atomic_write_bytes(args.out, text.encode("utf-8"))
    else:
        sys.stdout.write(text)
    return 0


def cmd_validate(args):
    _require_files(args.spec, args.taxonomy)
    spec = load_relation_spec(args.spec)
    tax = _load_taxonomy(args.taxonomy)
    report = validate_taxonomy(tax, spec)
    sys.stdout.write(_dump(report.to_dict()))
    for v in report.violations:
        print(f"VIOLATION {v}", file=sys.stderr)
    return 0 if report.ok else 1


def cmd_export_matrices(args):
    _require_files(args.mapping)
    tax = _load_taxonomy(args.mapping)
    names = [args.dataset] if args.dataset else list(tax.datasets)
    doc = {
        "elements": list(tax.element_ids),
        "datasets": {ds: export_matrix(tax, ds).to_dict() for ds in names},
    }
    _emit(doc, args.out)
    return 0


def cmd_loss(args):
    _require_files(args.logits, args.labels, args.mapping, args.weights)
    m = export_matrix(_load_taxonomy(args.mapping), args.dataset)
    logits = read_tnsr(args.logits)
    labels = np.rint(read_tnsr(args.labels)).astype(np.int64)
    weights = read_tnsr(args.weights) if args.weights else np.ones(labels.shape)
    cfg = LossConfig(tile_rows=args.tile_rows, gamma=args.gamma)
    target = LabelSetTarget.from_matrix(labels, m, args.ignore_id)
    loss, state = lsp_forward(logits, target, ModulationMap(weights), cfg)
    print(f"{loss:.10g}")
    if args.grad_out:
        write_tnsr(args.grad_out, lsp_backward(state))
    return 0


def _decode(probs, m, include_void):
    dataset_probs, void = aggregate_probs(probs, m)
    return decode_argmax(dataset_probs, void, include_void, m.eval_mask)


def cmd_decode(args):
    _require_files(args.probs, args.mapping)
    m = export_matrix(_load_taxonomy(args.mapping), args.dataset)
    write_tnsr(args.out, _decode(read_tnsr(args.probs), m, args.include_void))
    return 0


def _parse_scales(text):
    try:
        scales = tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise UsageError(f"bad scale list {text!r}") from None
    if not scales or any(s <= 0 for s in scales):
        raise UsageError(f"bad scale list {text!r}")
    return scales


def cmd_infer(args):
    _require_files(args.image, args.mapping)
    scales = _parse_scales(args.scales)
    tax = _load_taxonomy(args.mapping)
    m = export_matrix(tax, args.dataset)
    image = read_tnsr(args.image)
    if image.ndim != 3:
        raise UsageError(f"image must be (C, H, W), got {image.shape}")
    model = PyramidModel.toy(universal_class_count(tax), seed=args.seed, cfg=PyramidConfig(eval_scales=scales))
    log.warning("infer uses a seeded random stand-in backbone, not trained weights")
    dataset_probs, void = multi_scale_infer(image, scales, model, m)
    pred = decode_argmax(dataset_probs, void, args.include_void, m.eval_mask)
    write_tnsr(args.out, pred)
    return 0


def cmd_score(args):
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise UsageError(f"not a directory: {d}")
    names = sorted(p.name for p in gt_dir.glob("*.tnsr"))
    if not names:
        raise UsageError(f"no .tnsr files in {gt_dir}")
    missing = [n for n in names if not (pred_dir / n).is_file()]
    if missing:
        raise UsageError(f"predictions missing for {missing}")
    cm = ConfusionMatrix.empty(args.classes)
    for n in names:
        gt = np.rint(read_tnsr(gt_dir / n)).astype(np.int64)
        pred = np.rint(read_tnsr(pred_dir / n)).astype(np.int64)
        cm = update_confusion(cm, pred, gt, args.ignore_id)
    ious = cm.iou()
    doc = {
        "iou": [None if np.isnan(v) else float(v) for v in ious],
        "miou": miou(cm),
        "pixels": cm.total,
    }
    sys.stdout.write(_dump(doc))
    return 0


def cmd_sample_plan(args):
    _require_files(args.records)
    records = load_records(Path(args.records).read_text(encoding="utf-8"))
    entry = schedule_lookup(args.epoch)
    freq = class_frequencies(records)
    weights = [image_weight(r, freq) for r in records]
    sampler = RouletteSampler(records, weights, args.seed)
    batches = [sampler.batch(entry.batch_size) for _ in range(args.batches)]
    doc = {"epoch": args.epoch, "seed": args.seed, "entry": entry.to_dict(), "batches": batches}
    _emit(doc, args.out)
    return 0


# --------------------------------------------------------------------------


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--verbose", "-v", action="count", default=argparse.SUPPRESS)

    p = _Parser(prog="unitax", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=f"unitax {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("build-taxonomy", parents=[common], help="build a universal taxonomy")
    s.add_argument("--spec", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_build_taxonomy)

    s = sub.add_parser("validate", parents=[common], help="check a taxonomy against a relation spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--taxonomy", required=True)
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("export-matrices", parents=[common], help="write aggregation matrices")
    s.add_argument("--mapping", required=True)
    s.add_argument("--dataset")
    s.add_argument("--out")
    s.set_defaults(func=cmd_export_matrices)

    s = sub.add_parser("loss", parents=[common], help="evaluate the log-sum-prob loss")
    s.add_argument("--logits", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--mapping", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--tile-rows", type=int, default=64)
    s.add_argument("--gamma", type=float, default=0.0)
    s.add_argument("--weights")
    s.add_argument("--ignore-id", type=int, default=255)
    s.add_argument("--grad-out")
    s.set_defaults(func=cmd_loss)

    s = sub.add_parser("decode", parents=[common], help="universal probabilities to dataset labels")
    s.add_argument("--probs", required=True)
    s.add_argument("--mapping", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--include-void", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("infer", parents=[common], help="multi-scale pyramidal inference")
    s.add_argument("--image", required=True)
    s.add_argument("--scales", default="0.75,1.0,1.5")
    s.add_argument("--mapping", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--include-void", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("score", parents=[common], help="per-class IoU and mIoU")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--ignore-id", type=int, default=255)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("sample-plan", parents=[common], help="roulette-wheel batch plan for an epoch")
    s.add_argument("--records", required=True)
    s.add_argument("--epoch", type=int, required=True)
    s.add_argument("--batches", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample_plan)
    return p


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        args.seed = getattr(args, "seed", DEFAULT_SEED)
        verbosity = getattr(args, "verbose", 0)
        logging.basicConfig(
            level=logging.WARNING - 10 * min(verbosity, 2),
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except UnitaxError as exc:
        print(f"ERROR {exc.kind}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"ERROR IOError: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
