"""Command-line entry point.

Exit codes: 0 success, 1 usage/validation/configuration error, 2 runtime or
numeric failure. Machine-readable results go to ``--out`` as line-delimited
JSON; a human summary goes to standard output.

Relative input paths that do not exist under the working directory are looked
up under ``$DFACON_DATA_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from dfacon import data as D
from dfacon.errors import DfaconError, InputError

logger = logging.getLogger("dfacon")

DATA_ROOT_ENV = "DFACON_DATA_ROOT"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _in(path: str | None) -> str | None:
    if path is None:
        return None
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if not p.exists() and not p.is_absolute() and root:
        return str(Path(root) / p)
    return str(p)


def _emit(records, out: str | None) -> None:
    if out is None:
        return
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write((rec if isinstance(rec, str) else json.dumps(rec)) + "\n")


def _probe(name):
    from dfacon.embedder import ProbePoint

    return ProbePoint(name)


def _load_model(path: str, device: str):
    from dfacon.trainer import load_checkpoint

    return load_checkpoint(_in(path), device=device)


# -- subcommands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    from dfacon.synth import SynthConfig, generate

    cfg = SynthConfig(
        n_anchors=args.anchors,
        forgeries_per_anchor={a: args.per_attack for a in D.AttackType.forgeries()},
        image_size=args.size,
        n_dissimilar=args.dissimilar,
        seed=args.seed,
        max_per_anchor=args.max_per_anchor,
    )
    manifest = generate(cfg, args.out)
    records = D.load_manifest(manifest)
    hist = D.attack_histogram(records)
    n_sim = sum(hist.values())
    print(f"wrote {manifest}: {n_sim} similar, {len(records) - n_sim} dissimilar pairs")
    for a, n in hist.items():
        print(f"  {a.value:<16}{n:>6}")
    return 0


def cmd_split(args) -> int:
    records = D.load_manifest(_in(args.manifest), verify_images=False)
    split = D.split_groups(D.group_by_anchor(records), args.ratio, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.write_manifest(D.pairs_for_groups(records, split.train_groups), out / "train.jsonl", relative_to=out)
    D.write_manifest(D.pairs_for_groups(records, split.val_groups), out / "val.jsonl", relative_to=out)
    D.write_split(split, out / "split.json")
    print(f"{len(split.train_groups)} train / {len(split.val_groups)} held-out anchor groups -> {out}")
    return 0


def cmd_train(args) -> int:
    from dfacon.embedder import EncoderConfig, make_encoder
    from dfacon.trainer import TrainConfig, save_checkpoint, train

    records = D.load_manifest(_in(args.manifest))
    split = D.split_groups(D.group_by_anchor(records), args.train_ratio, args.seed)
    warmup = args.warmup if args.warmup is not None else args.epochs // 5
    cfg = TrainConfig(
        epochs=args.epochs, warmup_epochs=warmup, base_lr=args.lr, momentum=args.momentum,
        weight_decay=args.weight_decay, batch_size=args.batch_size, anchors_per_batch=args.anchors_per_batch,
        positives_per_anchor=args.positives_per_anchor, patience=args.patience,
        temperature=args.temperature, seed=args.seed, head_variant=args.head,
    )
    enc = EncoderConfig(kind=args.encoder, weights=args.weights, seed=args.seed, dim=args.dim,
                        head_variant=args.head, projection_dim=args.projection_dim)
    logger.info("train config: %s", cfg)
    handle = make_encoder(args.encoder, enc, device=args.device)
    result = train(split, handle, cfg)
    ckpt = save_checkpoint(handle, args.out, cfg)
    D.write_split(split, Path(args.out).with_suffix(".split.json"))
    _emit(result.log, args.log)
    if args.figures:
        from dfacon.plotting import plot_training_log

        plot_training_log(result.log, Path(args.figures) / "training.png")
    s = result.state
    print(f"checkpoint {ckpt}: {len(result.log)} epochs, best epoch {s.best_epoch} "
          f"(val loss {s.best_val_loss:.4f}){', stopped early' if result.stopped_early else ''}")
    return 0


def _originals(source: str) -> list[tuple[str, str]]:
    p = Path(source)
    if p.is_dir() and not (p / D.MANIFEST_NAME).exists():
        files = sorted(f for f in p.iterdir() if f.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".webp"))
        return [(f.stem, str(f)) for f in files]
    groups = D.group_by_anchor(D.load_manifest(p))
    return [(g.anchor_id, g.original_path) for g in groups]


def cmd_build_index(args) -> int:
    from dfacon.detector import build_index, save_index

    model = _load_model(args.model, args.device)
    index = build_index(_originals(_in(args.originals)), model, _probe(args.probe))
    path = save_index(index, args.out)
    Path(str(path) + ".json").write_text(json.dumps({
        "model": str(Path(_in(args.model)).resolve()), "probe": index.probe.value,
        "dim": index.dim, "count": len(index), "fingerprint": index.model_fingerprint,
    }) + "\n")
    print(f"index {path}: {len(index)} originals, {index.dim}-d {index.probe.value}")
    return 0


def cmd_detect(args) -> int:
    from dfacon.detector import load_index, query

    index_path = _in(args.index)
    index = load_index(index_path)
    model_path = args.model
    if model_path is None:
        sidecar = Path(str(index_path) + ".json")
        if not sidecar.exists():
            raise InputError("--model not given and the index has no sidecar naming its checkpoint")
        model_path = json.loads(sidecar.read_text())["model"]
    model = _load_model(model_path, args.device)
    k = min(args.k, len(index))
    verdicts = [query(index, _in(img), model, args.threshold, k) for img in args.image]
    _emit([v.to_dict() for v in verdicts], args.out)
    for v in verdicts:
        flag = "INFRINGING" if v.infringing else "clear"
        print(f"{v.query_id}: {flag} (best {v.best_match} {v.best_score:.4f}, threshold {v.threshold_used})")
        for aid, s in v.topk:
            print(f"    {aid:<24}{s:.4f}")
    return 0


def cmd_pairscore(args) -> int:
    from dfacon.detector import pairwise_score

    model = _load_model(args.model, args.device)
    score = pairwise_score(_in(args.a), _in(args.b), model, _probe(args.probe))
    _emit([{"a": args.a, "b": args.b, "probe": args.probe, "score": score}], args.out)
    print(f"{score:.6f}")
    return 0


def cmd_calibrate(args) -> int:
    from dfacon.evaluation import calibrate_threshold

    model = _load_model(args.model, args.device)
    pairs = D.load_manifest(_in(args.manifest))
    thr = calibrate_threshold(pairs, model, _probe(args.probe))
    _emit([{"threshold": thr, "probe": args.probe, "pairs": len(pairs)}], args.out)
    print(f"threshold {thr:.6f} ({args.probe}, {len(pairs)} pairs)")
    return 0


def cmd_evaluate(args) -> int:
    from dfacon.evaluation import calibrate_threshold, format_table, metrics_from_scores, report_records, score_pairs

    if args.threshold is None and args.calibrate is None:
        raise InputError("evaluate needs --threshold or --calibrate VAL_MANIFEST")
    model = _load_model(args.model, args.device)
    probe = _probe(args.probe)
    thr = args.threshold
    if thr is None:
        thr = calibrate_threshold(D.load_manifest(_in(args.calibrate)), model, probe)
    pairs = D.load_manifest(_in(args.manifest))
    scores = score_pairs(pairs, model, probe)
    report = metrics_from_scores(scores, pairs, thr, probe, dim=model.dim(probe))
    _emit(report_records(report, args.label), args.out)
    if args.figures:
        from dfacon.plotting import plot_per_attack, plot_score_distributions

        fig = Path(args.figures)
        plot_score_distributions(report.scores, report.labels, thr, fig / "scores.png", f"{args.label} ({probe.value})")
        plot_per_attack({args.label: report}, fig / "per_attack.png")
    print(format_table({args.label: report}, f"threshold {thr:.4f}, probe {probe.value}"))
    return 0


def cmd_ablate(args) -> int:
    from dfacon.evaluation import ablate_probe, format_table

    model = _load_model(args.model, args.device)
    test = D.load_manifest(_in(args.manifest))
    val = D.load_manifest(_in(args.calibrate)) if args.calibrate else None
    ab = ablate_probe(test, model, val)
    records = []
    for probe, rep in ab.reports.items():
        records.append({"probe": probe.value, **rep.to_dict()})
    records.append({"delta_encoder_minus_projection": ab.deltas})
    _emit(records, args.out)
    if args.figures:
        from dfacon.plotting import plot_ablation

        plot_ablation(ab, Path(args.figures) / "ablation.png")
    print(format_table({f"{p.value} ({r.dim}-d)": r for p, r in ab.reports.items()}, "probe-point ablation"))
    print("delta (encoder - projection): " + ", ".join(f"{k} {v:+.4f}" for k, v in ab.deltas.items()))
    return 0


def cmd_criterion_check(args) -> int:
    from dfacon.criterion import CriterionConfig, Transform, calibrate_delta, check_infringement
    from dfacon.embedder import load_rgb

    transforms = tuple(Transform(t) for t in args.transforms) if args.transforms else tuple(Transform)
    delta = args.delta
    if args.calibrate:
        pairs = D.load_manifest(_in(args.calibrate))
        base = CriterionConfig(delta=1.0, domain=args.domain, transforms=transforms,
                               min_region_fraction=args.min_region_fraction)
        delta = calibrate_delta([(load_rgb(r.candidate_path), load_rgb(r.original_path), r.is_similar)
                                 for r in pairs], base)
        print(f"calibrated delta {delta:.6f} on {len(pairs)} pairs")
    cfg = CriterionConfig(delta=delta, domain=args.domain, transforms=transforms,
                          min_region_fraction=args.min_region_fraction)
    if args.generated is None or args.original is None:
        if args.calibrate:
            _emit([{"delta": delta}], args.out)
            return 0
        raise InputError("criterion-check needs --generated and --original (or --calibrate)")
    report = check_infringement(load_rgb(_in(args.generated)), load_rgb(_in(args.original)), cfg,
                                keep_grid=args.grid)
    _emit([{"delta": delta, **report.to_dict(include_grid=args.grid)}], args.out)
    if report.infringing:
        w = report.witness
        r = w.region
        print(f"INFRINGING: {w.transform.value}, region ({r.x},{r.y},{r.width}x{r.height}), "
              f"{w.domain.value} distance {w.distance:.4f} < {w.threshold:.4f}")
    else:
        print("no infringement under the configured transforms and regions")
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed")
    common.add_argument("--device", default="cpu", help="torch device")
    common.add_argument("--log-level", default="WARNING", help="logging level")
    common.add_argument("--config", default=None, help="JSON file of flag defaults; explicit flags win")

    p = Parser(prog="dfacon", description="contrastive copyright-infringement detection for generated art",
               formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_, formatter_class=fmt)
        sp.set_defaults(func=func)
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic forgery dataset")
    sp.add_argument("--anchors", type=int, default=10, help="number of original artworks")
    sp.add_argument("--per-attack", type=int, default=1, help="forgeries per attack type per anchor")
    sp.add_argument("--max-per-anchor", type=int, default=None, help="cap forgeries per anchor, rotating attacks")
    sp.add_argument("--dissimilar", type=int, default=20, help="number of dissimilar pairs")
    sp.add_argument("--size", type=int, default=64, help="image side in pixels")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("split", cmd_split, "split a manifest by anchor group into train/val manifests")
    sp.add_argument("--manifest", required=True, help="manifest file or directory")
    sp.add_argument("--ratio", type=float, default=0.8, help="fraction of anchor groups in train.jsonl")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("train", cmd_train, "train an encoder with the supervised contrastive loss")
    sp.add_argument("--manifest", required=True, help="manifest file or directory")
    sp.add_argument("--encoder", default="toy_cnn", choices=["toy_cnn", "reference_cnn"], help="encoder kind")
    sp.add_argument("--weights", default="random", choices=["random", "pretrained"], help="initial weights")
    sp.add_argument("--dim", type=int, default=64, help="toy_cnn feature width")
    sp.add_argument("--head", default="mlp", choices=["mlp", "linear"], help="projection head variant")
    sp.add_argument("--projection-dim", type=int, default=128, help="projection output width")
    sp.add_argument("--epochs", type=int, default=50, help="maximum epochs")
    sp.add_argument("--warmup", type=int, default=None, help="warmup epochs (default: epochs // 5)")
    sp.add_argument("--lr", type=float, default=0.01, help="base learning rate")
    sp.add_argument("--momentum", type=float, default=0.9, help="SGD momentum")
    sp.add_argument("--weight-decay", type=float, default=0.0, help="SGD weight decay")
    sp.add_argument("--batch-size", type=int, default=128, help="maximum batch size")
    sp.add_argument("--anchors-per-batch", type=int, default=None, help="anchors per batch (default: batch/4)")
    sp.add_argument("--positives-per-anchor", type=int, default=3, help="forgeries drawn per anchor")
    sp.add_argument("--patience", type=int, default=10, help="early-stopping patience in epochs")
    sp.add_argument("--temperature", type=float, default=0.07, help="loss temperature")
    sp.add_argument("--train-ratio", type=float, default=0.8, help="fraction of anchor groups used for training")
    sp.add_argument("--out", default="checkpoint.pt", help="checkpoint path")
    sp.add_argument("--log", default=None, help="per-epoch training log (JSON lines)")
    sp.add_argument("--figures", default=None, help="directory for training-curve figures")

    sp = add("build-index", cmd_build_index, "embed original artworks into a searchable index")
    sp.add_argument("--model", required=True, help="checkpoint path")
    sp.add_argument("--originals", required=True, help="manifest, or a directory of images (id = file stem)")
    sp.add_argument("--probe", default="encoder_output", choices=["encoder_output", "projection_output"])
    sp.add_argument("--out", required=True, help="index file path")

    sp = add("detect", cmd_detect, "score query images against an index")
    sp.add_argument("--index", required=True, help="index file")
    sp.add_argument("--model", default=None, help="checkpoint (default: the one recorded beside the index)")
    sp.add_argument("--image", required=True, nargs="+", help="query image(s)")
    sp.add_argument("--threshold", type=float, required=True, help="cosine threshold")
    sp.add_argument("--k", type=int, default=5, help="number of most similar originals to report")
    sp.add_argument("--out", default=None, help="verdict records (JSON lines)")

    sp = add("pairscore", cmd_pairscore, "cosine similarity of two images")
    sp.add_argument("--model", required=True, help="checkpoint path")
    sp.add_argument("--a", required=True, help="first image")
    sp.add_argument("--b", required=True, help="second image")
    sp.add_argument("--probe", default="encoder_output", choices=["encoder_output", "projection_output"])
    sp.add_argument("--out", default=None, help="result record (JSON lines)")

    sp = add("calibrate", cmd_calibrate, "pick the F1-maximizing threshold on labeled pairs")
    sp.add_argument("--model", required=True, help="checkpoint path")
    sp.add_argument("--manifest", required=True, help="validation manifest")
    sp.add_argument("--probe", default="encoder_output", choices=["encoder_output", "projection_output"])
    sp.add_argument("--out", default=None, help="result record (JSON lines)")

    sp = add("evaluate", cmd_evaluate, "precision/recall/F1 overall and per attack type")
    sp.add_argument("--model", required=True, help="checkpoint path")
    sp.add_argument("--manifest", required=True, help="test manifest")
    sp.add_argument("--threshold", type=float, default=None, help="fixed cosine threshold")
    sp.add_argument("--calibrate", default=None, help="validation manifest to calibrate the threshold on")
    sp.add_argument("--probe", default="encoder_output", choices=["encoder_output", "projection_output"])
    sp.add_argument("--label", default="model", help="row label in the report")
    sp.add_argument("--out", default=None, help="report records (JSON lines)")
    sp.add_argument("--figures", default=None, help="directory for score/attack figures")

    sp = add("ablate", cmd_ablate, "compare encoder-output and projection-output probes")
    sp.add_argument("--model", required=True, help="checkpoint path")
    sp.add_argument("--manifest", required=True, help="test manifest")
    sp.add_argument("--calibrate", default=None, help="validation manifest (default: calibrate on test)")
    sp.add_argument("--out", default=None, help="report records (JSON lines)")
    sp.add_argument("--figures", default=None, help="directory for the ablation figure")

    sp = add("criterion-check", cmd_criterion_check, "region-wise infringement check between two images")
    sp.add_argument("--generated", default=None, help="generated (suspect) image")
    sp.add_argument("--original", default=None, help="protected original image")
    sp.add_argument("--delta", type=float, default=0.1, help="distance threshold in [0,1] pixel scale")
    sp.add_argument("--domain", default="pixel", choices=["pixel", "edge"], help="representation")
    sp.add_argument("--transforms", nargs="*", default=None,
                    help="allowed transforms (default: all eight flips/rotations)")
    sp.add_argument("--min-region-fraction", type=float, default=1 / 16, help="smallest region / image area")
    sp.add_argument("--calibrate", default=None, help="labeled manifest to calibrate delta on")
    sp.add_argument("--grid", action="store_true", help="include every grid distance in the output")
    sp.add_argument("--out", default=None, help="report record (JSON lines)")
    return p


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    pre = Parser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        values = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config file {known.config}: {exc}") from exc
    values = {k.replace("-", "_"): v for k, v in values.items()}
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            sp.set_defaults(**values)


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    effective = {k: v for k, v in vars(args).items() if k != "func"}
    logger.info("effective config: %s", json.dumps(effective, default=str, sort_keys=True))
    try:
        return args.func(args)
    except (InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DfaconError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything else is a runtime failure
        logger.debug("unhandled", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
