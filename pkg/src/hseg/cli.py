"""``hseg`` command line: synthesis, training, prediction, evaluation, reports.

Exit codes: 0 success, 2 usage or configuration, 3 I/O or file format,
4 numerical failure.
"""

import argparse
import csv
import logging
import re
import sys
from pathlib import Path

import numpy as np

from hseg import dataio, metrics, severity
from hseg.checkpoint import load_checkpoint, save_checkpoint
from hseg.config import load_config
from hseg.ensemble import ensemble_predict, hard_labels, slice_uncertainty, train_ensemble, uncertainty_map
from hseg.errors import ConfigError, EnsembleError, HsegError, UndefinedCorrelationError, UsageError
from hseg.phantom import generate_phantom_dataset, perturb_boundaries
from hseg.training import write_trace_csv

log = logging.getLogger("hseg")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
MEMBER_RE = re.compile(r"member_(\d+)\.hseg$")


# ---------------------------------------------------------------------------
# shared helpers


def _run_config(args):
    cfg = load_config(args.config)
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg = cfg.set_text(key.strip(), value)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.override(seed=args.seed)
    return cfg


def _member_paths(models_dir):
    d = Path(models_dir)
    if not d.is_dir():
        raise UsageError(f"model directory {d} does not exist")
    found = []
    for p in d.iterdir():
        m = MEMBER_RE.match(p.name)
        if m:
            found.append((int(m.group(1)), p))
    if not found:
        raise EnsembleError(f"no member_<k>.hseg checkpoints in {d}")
    return [p for _, p in sorted(found)]


def _load_models(models_dir):
    models = [load_checkpoint(p) for p in _member_paths(models_dir)]
    kinds = {(type(m), tuple((k, v.shape) for k, v in m.params.items())) for m in models}
    if len(kinds) != 1:
        raise EnsembleError(f"checkpoints in {models_dir} do not share one architecture")
    return models


def _slice_id(record):
    return Path(record.labels).stem


def _ensure_dir(path):
    Path(path).mkdir(parents=True, exist_ok=True)
    return Path(path)


def _records(manifest, split):
    recs = list(manifest) if split == "all" else manifest.split(split)
    if not recs:
        raise UsageError(f"manifest has no records in split {split!r}")
    return recs


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg = _run_config(args)
    pcfg = cfg.phantom()
    manifest = generate_phantom_dataset(pcfg, args.out_dir)
    _, labels = manifest.load()
    counts = np.bincount(labels.reshape(-1), minlength=4)
    freq = counts / counts.sum()
    n_test = len(manifest.split("test"))
    print(f"wrote {len(manifest.volumes())} volumes, {len(manifest)} slices "
          f"({len(manifest) - n_test} train, {n_test} test) to {args.out_dir}")
    print("class frequencies: " + " ".join(
        f"{name}={f:.4f}" for name, f in zip(("non_lung", "healthy", "ggo", "con"), freq)))
    return EXIT_OK


def cmd_train(args):
    cfg = _run_config(args)
    cfg = cfg.override(k=args.ensemble_k)
    ens = cfg.ensemble()
    manifest = dataio.read_manifest(args.data)
    images, labels = manifest.load("train")
    if len(images) == 0:
        raise UsageError(f"manifest {args.data} has no train split")
    out = Path(args.out)
    ckpts = [out / f"member_{m}.hseg" for m in range(ens.k)]
    existing = sorted(out.glob("member_*.hseg")) if out.is_dir() else []
    if existing and not args.force:
        raise UsageError(f"{out} already holds checkpoints ({existing[0].name}, ...); use --force to overwrite")
    _ensure_dir(out)
    if args.force:
        for p in existing:
            p.unlink()
    jobs = ens.k if args.jobs is None else args.jobs
    log.info("training %d member(s) of %s on %d slices, jobs=%d", ens.k, ens.model_kind, len(images), jobs)
    results = train_ensemble((images, labels), ens, jobs=jobs)
    for m, ((model, trace), path) in enumerate(zip(results, ckpts)):
        save_checkpoint(model, path)
        write_trace_csv(out / f"member_{m}_loss.csv", trace)
        print(f"member {m}: seed {ens.member_seed(m)}, final loss {trace[-1][2]:.4f} -> {path}")
    return EXIT_OK


def _predict_one(models, image):
    soft, _ = ensemble_predict(models, image)
    return soft, hard_labels(soft)


def cmd_predict(args):
    models = _load_models(args.models)
    if args.image is not None:
        if args.out_soft is None or args.out_labels is None:
            raise UsageError("--image needs --out-soft and --out-labels")
        soft, labels = _predict_one(models, dataio.read_image(args.image))
        dataio.write_softmap(args.out_soft, soft)
        dataio.write_labels(args.out_labels, labels)
        if args.out_uncertainty:
            np.savetxt(args.out_uncertainty, uncertainty_map(soft), fmt="%.6f", delimiter=",")
        print(f"predicted {args.image}: {len(models)} member(s), labels -> {args.out_labels}")
        return EXIT_OK
    if args.data is None or args.out_dir is None:
        raise UsageError("give either --image with --out-soft/--out-labels, or --data with --out-dir")
    manifest = dataio.read_manifest(args.data)
    out = _ensure_dir(args.out_dir)
    recs = _records(manifest, args.split)
    for rec in recs:
        soft, labels = _predict_one(models, dataio.read_image(rec.image))
        stem = _slice_id(rec)
        dataio.write_labels(out / f"{stem}.pgm", labels)
        dataio.write_softmap(out / f"{stem}.sseg", soft)
    print(f"predicted {len(recs)} slices with {len(models)} member(s) -> {out}")
    return EXIT_OK


def _gt_pairs(args):
    """``{slice_id: gt_path}`` from --gt-dir or the manifest split."""
    if args.gt_dir is not None:
        return {p.stem: p for p in sorted(Path(args.gt_dir).glob("*.pgm"))}
    if args.data is not None:
        return {_slice_id(r): r.labels for r in _records(dataio.read_manifest(args.data), args.split)}
    raise UsageError("evaluate needs --gt-dir or --data")


def cmd_evaluate(args):
    pred_dir = Path(args.pred_dir)
    if not pred_dir.is_dir():
        raise UsageError(f"prediction directory {pred_dir} does not exist")
    gt = _gt_pairs(args)
    pred = {p.stem: p for p in sorted(pred_dir.glob("*.pgm"))}
    missing_pred = sorted(set(gt) - set(pred))
    missing_gt = sorted(set(pred) - set(gt)) if args.gt_dir is not None else []
    if missing_pred or missing_gt:
        parts = []
        if missing_pred:
            parts.append("no prediction for: " + ", ".join(missing_pred))
        if missing_gt:
            parts.append("no ground truth for: " + ", ".join(missing_gt))
        raise UsageError("; ".join(parts))
    if not gt:
        raise UsageError("no slices to evaluate")
    report = metrics.evaluate(
        (sid, dataio.read_labels(pred[sid]), dataio.read_labels(gt[sid])) for sid in sorted(gt))
    report.write_csv(args.out)
    print(",".join(metrics.CSV_COLUMNS))
    print(",".join(metrics._fmt(v) for v in report.aggregate_row()))
    print(report.summary())
    return EXIT_OK


def cmd_uncertainty(args):
    models = _load_models(args.models)
    manifest = dataio.read_manifest(args.data)
    recs = _records(manifest, args.split)
    rows, ent, agree = [], [], []
    for rec in recs:
        soft, _ = _predict_one(models, dataio.read_image(rec.image))
        sid = _slice_id(rec)
        row = [sid, rec.volume_id, float(uncertainty_map(soft).mean()), slice_uncertainty(soft)]
        if args.gt2 is not None:
            p2 = Path(args.gt2) / Path(rec.labels).name
            if not p2.is_file():
                raise UsageError(f"second annotation missing for {sid}: {p2}")
            gt1 = dataio.read_labels(rec.labels)
            d = metrics.binary_pathology_dice(dataio.read_labels(p2), gt1)
            row.append(d)
            # agreement on a lesion-free slice is 1 by convention and carries no signal
            if np.isin(gt1, metrics.PATHOLOGY).any():
                ent.append(row[3])
                agree.append(d)
        rows.append(row)
    header = ["slice_id", "volume_id", "mean_entropy", "pathology_entropy"]
    if args.gt2 is not None:
        header.append("inter_dice")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
    print(f"wrote entropy for {len(rows)} slices -> {args.out}; "
          f"mean entropy {np.mean([r[2] for r in rows]):.4f} nats")
    if args.gt2 is not None:
        try:
            r, p = metrics.pearson(ent, agree)
        except UndefinedCorrelationError as exc:
            raise UndefinedCorrelationError(f"{exc} (entropy vs inter-annotation Dice)") from None
        print(f"pearson r={r:.4f} p={p:.3e} over {len(ent)} slices with pathology "
              f"({len(rows) - len(ent)} lesion-free slices excluded)")
    return EXIT_OK


def cmd_rater2(args):
    manifest = dataio.read_manifest(args.data)
    out = _ensure_dir(args.out_dir)
    rng = np.random.default_rng(args.seed)
    recs = _records(manifest, args.split)
    for rec in recs:
        labels = dataio.read_labels(rec.labels)
        dataio.write_labels(out / Path(rec.labels).name, perturb_boundaries(labels, rng, args.flip_prob))
    print(f"wrote {len(recs)} perturbed label maps -> {out}")
    return EXIT_OK


def cmd_severity(args):
    manifest = dataio.read_manifest(args.data)
    recs = _records(manifest, args.split)
    volumes = {}
    for r in recs:
        volumes.setdefault(r.volume_id, []).append(r)
    models = None if args.use_gt else _load_models(args.models)
    reports = []
    for vid, vrecs in volumes.items():
        if args.use_gt:
            gt = np.stack([dataio.read_labels(r.labels) for r in vrecs])
            reports.append(severity.volume_report(vid, gt))
            continue
        images = np.stack([dataio.read_image(r.image) for r in vrecs])
        soft, _ = ensemble_predict(models, images)
        members = [hard_labels(ensemble_predict([m], images)[0]) for m in models]
        reports.append(severity.volume_report(vid, hard_labels(soft), members))
    severity.write_reports_csv(args.out, reports)
    for rep in reports:
        ext = "undefined" if rep.extent is None else f"{rep.extent:.4f}"
        grav = "undefined" if rep.gravity is None else f"{rep.gravity:.4f}"
        print(f"{rep.volume_id}: extent={ext} gravity={grav}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_config(p, seed=True):
    p.add_argument("--config", default=None, help="key = value run configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=None,
                   help="override one configuration key (repeatable)")
    if seed:
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="hseg", formatter_class=fmt,
                                     description="Hierarchical lung and lesion segmentation on CT slices.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", formatter_class=fmt, help="write a synthetic phantom dataset")
    _add_config(p)
    p.add_argument("--out-dir", required=True, help="dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", formatter_class=fmt, help="train an ensemble")
    _add_config(p)
    p.add_argument("--data", required=True, help="manifest.tsv with a train split")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--ensemble-k", type=int, default=None, help="ensemble size; None keeps the config k")
    p.add_argument("--jobs", type=int, default=None, help="parallel member processes; None means K")
    p.add_argument("--force", action="store_true", help="overwrite existing checkpoints")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", formatter_class=fmt, help="ensemble soft maps and labels")
    p.add_argument("--models", required=True, help="directory of member_<k>.hseg")
    p.add_argument("--image", default=None, help="single PGM image")
    p.add_argument("--out-soft", default=None, help="soft map output (.sseg) for --image")
    p.add_argument("--out-labels", default=None, help="label PGM output for --image")
    p.add_argument("--out-uncertainty", default=None, help="optional per-pixel entropy CSV for --image")
    p.add_argument("--data", default=None, help="manifest for batch prediction")
    p.add_argument("--split", default="test", choices=("train", "test", "all"), help="manifest split")
    p.add_argument("--out-dir", default=None, help="batch output directory")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", formatter_class=fmt, help="metric report for predicted labels")
    p.add_argument("--pred-dir", required=True, help="directory of predicted label PGMs")
    p.add_argument("--gt-dir", default=None, help="directory of reference label PGMs")
    p.add_argument("--data", default=None, help="manifest giving references (instead of --gt-dir)")
    p.add_argument("--split", default="test", choices=("train", "test", "all"), help="manifest split")
    p.add_argument("--out", required=True, help="report CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("uncertainty", formatter_class=fmt, help="per-slice entropy, optional agreement study")
    p.add_argument("--models", required=True, help="directory of member_<k>.hseg")
    p.add_argument("--data", required=True, help="manifest")
    p.add_argument("--split", default="test", choices=("train", "test", "all"), help="manifest split")
    p.add_argument("--gt2", default=None, help="directory of second-annotation label PGMs")
    p.add_argument("--out", required=True, help="per-slice CSV")
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("rater2", formatter_class=fmt, help="simulated second annotation by boundary jitter")
    p.add_argument("--data", required=True, help="manifest")
    p.add_argument("--split", default="test", choices=("train", "test", "all"), help="manifest split")
    p.add_argument("--out-dir", required=True, help="output label directory")
    p.add_argument("--seed", type=int, default=0, help="perturbation seed")
    p.add_argument("--flip-prob", type=float, default=0.5, help="probability a boundary pixel changes")
    p.set_defaults(func=cmd_rater2)

    p = sub.add_parser("severity", formatter_class=fmt, help="per-volume extent and gravity ratios")
    p.add_argument("--models", default=None, help="directory of member_<k>.hseg")
    p.add_argument("--data", required=True, help="manifest")
    p.add_argument("--split", default="all", choices=("train", "test", "all"), help="manifest split")
    p.add_argument("--use-gt", action="store_true", help="use reference labels instead of predictions")
    p.add_argument("--out", required=True, help="report CSV")
    p.set_defaults(func=cmd_severity)
    return parser


def _validate(args):
    if args.command == "train":
        if args.ensemble_k is not None and args.ensemble_k < 1:
            raise UsageError("--ensemble-k must be >= 1")
        if args.jobs is not None and args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
    if args.command == "severity" and not args.use_gt and args.models is None:
        raise UsageError("severity needs --models unless --use-gt is given")
    if args.command == "rater2" and not 0.0 <= args.flip_prob <= 1.0:
        raise UsageError("--flip-prob must lie in [0, 1]")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        _validate(args)
        return args.func(args)
    except HsegError as exc:
        print(f"hseg {args.command}: error: {exc}", file=sys.stderr)
        step = getattr(exc, "step", None)
        if step is not None:
            print(f"hseg {args.command}: failed at step {step}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"hseg {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
