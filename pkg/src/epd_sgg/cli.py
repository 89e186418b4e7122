"""Command-line entry point: ``epd-sgg <command> [options]``.

Commands: gen-data, partition, train, eval, explain, ablate.
Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .ablation import MODES, expand_modes, run_variant
from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .config import RunConfig, format_config, load_config, parse_config_text, parse_value
from .datamodel import (
    DataError,
    GeneratorConfig,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from .epd import PANELS, explain
from .model import RelationModel
from .numcore import NumericError
from .training import check_compatible, evaluate_model, make_partition, train

log = logging.getLogger("epd_sgg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
# settings that only affect evaluation; a checkpoint may be evaluated with other values
EVAL_ONLY_KEYS = ("seed", "lambdas", "k_list", "graph_constraint")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _lambda_triple(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("--lambda needs exactly three values")
    return vals


def _similar_pairs(text: str) -> tuple[tuple[int, int, float], ...]:
    if text.strip().lower() in ("", "none"):
        return ()
    out = []
    for item in text.split(","):
        parts = item.split(":")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"similar pair {item!r} is not F:R:delta")
        try:
            out.append((int(parts[0]), int(parts[1]), float(parts[2])))
        except ValueError:
            raise argparse.ArgumentTypeError(f"similar pair {item!r} is not F:R:delta") from None
    return tuple(out)


def _set_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"--set expects KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _run_config(args, **extra) -> RunConfig:
    """Default < --config file < --set / explicit flags."""
    overrides = {}
    for key, raw in getattr(args, "set", None) or []:
        try:
            overrides[key] = parse_value(key, raw)
        except KeyError:
            raise UsageError(f"unknown config key {key!r}") from None
        except ValueError as e:
            raise UsageError(str(e)) from None
    for key in ("epochs", "lr", "batch_size"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if args.seed is not None:
        overrides["seed"] = args.seed
    overrides.update({k: v for k, v in extra.items() if v is not None})
    try:
        return load_config(args.config, overrides)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad configuration: {e}") from None


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    gen = GeneratorConfig(
        num_images=args.num_images,
        num_predicates=args.num_predicates,
        zipf_s=args.zipf_s,
        neg_frac=args.neg_frac,
        noise=args.noise,
        d_v=args.d_v,
        num_object_classes=args.num_object_classes,
        **({"similar_pairs": args.similar_pairs} if args.similar_pairs is not None else {}),
    )
    try:
        gen.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set = generate_synthetic(gen, seed, split=0, prefix="train")
    test_set = generate_synthetic(dataclasses.replace(gen, num_images=args.num_test_images), seed, split=1, prefix="test")
    save_dataset(train_set, out / "train.jsonl")
    save_dataset(test_set, out / "test.jsonl")
    meta = dataclasses.asdict(gen)
    meta.update(seed=seed, num_test_images=args.num_test_images)
    _write_json(out / "generator.json", meta)
    print(f"wrote {len(train_set)} train and {len(test_set)} test images to {out}")
    return EXIT_OK


def cmd_partition(args) -> int:
    cfg = _run_config(args)
    ds = load_dataset(args.data)
    check_compatible(cfg, ds)
    part = make_partition(cfg, ds)
    text = json.dumps(part.to_json(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    train_set = load_dataset(args.data)
    val_set = load_dataset(args.val) if args.val else None
    check_compatible(cfg, train_set)
    if val_set is not None:
        check_compatible(cfg, val_set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    partition = make_partition(cfg, train_set)
    _write_json(out / "partition.json", partition.to_json())
    model = RelationModel.create(cfg)
    # best-mR selection uses --val when given, else the training file
    select_on = val_set if val_set is not None else train_set
    kmax = max(cfg.k_list)
    best = {"mr": -1.0, "epoch": 0}
    log_path = out / "epochs.jsonl"
    log_file = open(log_path, "w", encoding="utf-8")

    def on_epoch(rec, m):
        rep = evaluate_model(m, select_on, partition)
        rec.metrics = {"split": "val" if val_set is not None else "train",
                       "r_at_k": {str(k): v for k, v in rep.r_at_k.items()},
                       "mr_at_k": {str(k): v for k, v in rep.mr_at_k.items()},
                       "mean": rep.mean}
        log_file.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
        log_file.flush()
        if rep.mr_at_k[kmax] > best["mr"]:
            best.update(mr=rep.mr_at_k[kmax], epoch=rec.epoch)
            save_checkpoint(m, partition, out / "best")
        print(f"epoch {rec.epoch:3d}  l_total {rec.l_total:.4f}  mR@{kmax} {rep.mr_at_k[kmax]:.4f}")

    try:
        train(model, train_set, partition, on_epoch=on_epoch)
    finally:
        log_file.close()
    save_checkpoint(model, partition, out / "final")
    if cfg.epochs == 0:
        save_checkpoint(model, partition, out / "best")
    _write_json(out / "best_epoch.json", {"epoch": best["epoch"], f"mr@{kmax}": max(best["mr"], 0.0)})
    print(f"checkpoints in {out / 'final'} and {out / 'best'}")
    return EXIT_OK


def _explicit_settings(args) -> dict:
    """Config keys the user set explicitly, from --config and --set."""
    values = {}
    if args.config is not None:
        try:
            values.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
        except ValueError as e:
            raise UsageError(f"{args.config}: {e}") from None
    for key, raw in args.set or []:
        try:
            values[key] = parse_value(key, raw)
        except KeyError:
            raise UsageError(f"unknown config key {key!r}") from None
        except ValueError as e:
            raise UsageError(str(e)) from None
    return values


def _load_for_eval(args):
    manifest = read_manifest(args.checkpoint)
    saved = RunConfig.from_dict(manifest["config"]).to_dict()
    explicit = _explicit_settings(args)
    diff = sorted(k for k, v in explicit.items()
                  if k not in EVAL_ONLY_KEYS and (list(v) if isinstance(v, tuple) else v) != saved[k])
    if diff and not args.force:
        raise DataError(f"config differs from the checkpoint in {', '.join(diff)} (use --force to evaluate anyway)")
    if diff:
        log.warning("config differs from checkpoint in %s; using the checkpoint's values", ", ".join(diff))
    model, partition = load_checkpoint(args.checkpoint)
    eval_settings = {k: v for k, v in explicit.items() if k in EVAL_ONLY_KEYS and k != "seed"}
    if eval_settings:
        model.config = model.config.replace(**eval_settings)
        model.hyper = model.config.hyper()
    return model, partition


def cmd_eval(args) -> int:
    model, partition = _load_for_eval(args)
    ds = load_dataset(args.data)
    check_compatible(model.config, ds)
    ks = args.k or model.config.k_list
    lambdas = args.lambdas or model.config.lambdas
    gc = False if args.no_graph_constraint else model.config.graph_constraint
    rep = evaluate_model(model, ds, partition, ks=ks, lambdas=lambdas, graph_constraint=gc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write(out / "metrics.json", out / "metrics.csv")
    for k in rep.ks:
        print(f"R@{k} {rep.r_at_k[k]:.4f}  mR@{k} {rep.mr_at_k[k]:.4f}")
    print(f"Mean {rep.mean:.4f}")
    return EXIT_OK


def cmd_explain(args) -> int:
    model, _ = _load_for_eval(args)
    ds = load_dataset(args.data)
    check_compatible(model.config, ds)
    matches = [img for img in ds.images if img.image_id == args.image_id]
    if not matches:
        raise DataError(f"no image {args.image_id!r} in {args.data}")
    img = matches[0]
    rows = [r for r, rel in enumerate(img.relations) if (rel.subj, rel.obj) == (args.subj, args.obj)]
    if not rows:
        raise DataError(f"image {args.image_id!r} has no candidate pair ({args.subj}, {args.obj})")
    C = model.config.num_predicate_classes
    if not 1 <= args.top_n <= C - 1:
        raise UsageError(f"--top-n must lie in [1, {C - 1}]")
    _, logits = model.relation_logits([img])
    sel = [z[rows[0]:rows[0] + 1] for z in logits]
    lambdas = args.lambdas or model.config.lambdas
    tables = explain(*sel, lambdas, args.top_n)
    result = {
        "image_id": img.image_id, "subj": args.subj, "obj": args.obj,
        "ground_truth": img.relations[rows[0]].predicate, "lambdas": list(lambdas),
        "panels": {name: [{"class": c, "score": s} for c, s in tables[p][0]] for p, name in enumerate(PANELS)},
    }
    for name, entries in result["panels"].items():
        print(name)
        for e in entries:
            print(f"  {e['class']:4d}  {e['score']:.4f}")
    if args.out:
        _write_json(Path(args.out), result)
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _run_config(args)
    try:
        names = expand_modes(args.modes)
    except ValueError as e:
        raise UsageError(str(e)) from None
    train_set = load_dataset(args.data)
    test_set = load_dataset(args.test)
    check_compatible(base, train_set)
    check_compatible(base, test_set)
    partition = make_partition(base, train_set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in names:
        res = run_variant(base, name, train_set, test_set, partition)
        rows.append(res.row())
        res.report.write(out / f"{name}.json")
        print(_format_row(rows[-1]), flush=True)
    _write_json(out / "ablation.json", rows)
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


def _format_row(row: dict) -> str:
    parts = [f"{row['variant']:<28}"]
    for k, v in row.items():
        if k == "variant":
            continue
        parts.append(f"{k} {'-' if v is None else f'{100 * v:.1f}'}")
    return "  ".join(parts)


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--config", default=None, help="key = value config file")
    common.add_argument("--set", action="append", type=_set_override, metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="epd-sgg", description="Ensemble predicate decoding on synthetic relation data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic train/test files")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--num-images", type=int, default=2000)
    g.add_argument("--num-test-images", type=int, default=500)
    g.add_argument("--num-predicates", type=int, default=50)
    g.add_argument("--num-object-classes", type=int, default=20)
    g.add_argument("--zipf-s", type=float, default=1.5)
    g.add_argument("--similar-pairs", type=_similar_pairs, default=None, metavar="F:R:delta,...")
    g.add_argument("--neg-frac", type=float, default=0.2)
    g.add_argument("--noise", type=float, default=GeneratorConfig.noise)
    g.add_argument("--d-v", type=int, default=32)
    g.set_defaults(func=cmd_gen_data)

    pa = sub.add_parser("partition", parents=[common], help="head/body/tail split of a training file")
    pa.add_argument("--data", required=True)
    pa.add_argument("--out", default=None, help="write the partition JSON here")
    pa.set_defaults(func=cmd_partition)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", required=True, help="training file")
    t.add_argument("--val", default=None, help="file used to pick the best-mR checkpoint")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a checkpoint"),
                                 ("explain", cmd_explain, "per-decoder score tables for one pair")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--lambda", dest="lambdas", type=_lambda_triple, default=None, metavar="MD,AD1,AD2")
        e.add_argument("--force", action="store_true", help="evaluate even if --config disagrees with the checkpoint")
        e.set_defaults(func=func)
        if name == "eval":
            e.add_argument("--out", required=True, help="report directory")
            e.add_argument("--k", type=_int_list, default=None, metavar="5,10")
            e.add_argument("--no-graph-constraint", action="store_true")
        else:
            e.add_argument("--out", default=None, help="write the tables as JSON here")
            e.add_argument("--image-id", required=True)
            e.add_argument("--subj", type=int, required=True)
            e.add_argument("--obj", type=int, required=True)
            e.add_argument("--top-n", type=int, default=5)

    a = sub.add_parser("ablate", parents=[common], help="train and compare model variants")
    a.add_argument("--data", required=True, help="training file")
    a.add_argument("--test", required=True, help="evaluation file")
    a.add_argument("--out", required=True)
    a.add_argument("--modes", type=lambda s: [m.strip() for m in s.split(",") if m.strip()],
                   default=["baseline_ce", "single_reweighted", "multi_nested"],
                   help=f"comma-separated subset of {', '.join(MODES)}")
    a.add_argument("--epochs", type=int, default=None)
    a.add_argument("--lr", type=float, default=None)
    a.add_argument("--batch-size", type=int, default=None)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as e:
        print(f"epd-sgg: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        print(f"epd-sgg: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"epd-sgg: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
