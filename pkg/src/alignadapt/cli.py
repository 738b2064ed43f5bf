"""Command-line entry point ``alt``.

Every failure prints a single JSON line on stderr and exits with the code
carried by the exception: 1 validation, 2 integrity/IO, 3 numeric.
"""
import argparse
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .config import TrainConfig
from .errors import AltError, IntegrityError, ParameterError, ValidationError

SEED_ENV = "ALT_SEED"


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


# -- helpers --------------------------------------------------------------
def prepare_out(path, force):
    """Create ``path``; refuse a non-empty directory unless ``force``."""
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ValidationError(f"--out {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise ValidationError(f"--out {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json_object(path, what="config"):
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"{what} file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: {what} must be a JSON object")
    return data


def resolve_seed(args, fallback=0):
    """--seed beats the environment variable, which beats the config file."""
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"{SEED_ENV}={env!r} is not an integer") from None
    return fallback


TRAIN_FLAGS = ("epochs", "warmup_epochs", "batch_size", "base_lr", "head_lr", "weight_decay",
               "r", "M", "d", "depth", "precision", "noise_mode", "query_mode", "corpus_mode",
               "temperature", "frames_per_clip", "ground_weight")


def effective_config(args):
    """Defaults, then the config file, then flags, then the seed override."""
    data = read_json_object(args.config) if args.config else {}
    TrainConfig.from_dict(data)         # reject unknown keys early
    for name in TRAIN_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    if getattr(args, "categories", None):
        data["corpus_categories"] = args.categories.split(",")
    data["seed"] = resolve_seed(args, data.get("seed", 0))
    return TrainConfig.from_dict(data)


def add_train_flags(p):
    p.add_argument("--config", help="JSON file mirroring the training config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--base-lr", dest="base_lr", type=float)
    p.add_argument("--head-lr", dest="head_lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--r", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--frames-per-clip", dest="frames_per_clip", type=int)
    p.add_argument("--precision", choices=("float32", "float64"))
    p.add_argument("--noise-mode", dest="noise_mode", choices=("gumbel", "off"))
    p.add_argument("--query-mode", dest="query_mode", choices=("aligned", "learnable"))
    p.add_argument("--corpus-mode", dest="corpus_mode", choices=("entities", "action_names"))
    p.add_argument("--categories", help="comma-separated corpus categories")
    p.add_argument("--temperature", type=float)
    p.add_argument("--ground-weight", dest="ground_weight", type=float,
                   help="weight of the caption-grounding term (0 disables)")


def add_out(p, required=True):
    p.add_argument("--out", required=required, help="output directory")
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")


# -- subcommands ----------------------------------------------------------
def cmd_data_gen(args):
    from .synthetic import DatasetSpec, gen_dataset

    data = read_json_object(args.config) if args.config else {}
    known = {f.name for f in fields(DatasetSpec)}
    if set(data) - known:
        raise ValidationError(f"unknown dataset keys: {sorted(set(data) - known)}")
    for name in known:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    data["seed"] = resolve_seed(args, data.get("seed", 0))
    spec = DatasetSpec(**data)
    spec.validate()
    out = prepare_out(args.out, args.force)
    manifest = gen_dataset(spec, out, force=True)
    write_json(out / "config.json", asdict(spec))
    print(f"wrote {len(manifest.samples)} samples to {out}")


def cmd_corpus_build(args):
    from .corpus import build_corpus, filter_by_category, load_lexicon
    from .synthetic import load_dataset

    if args.data:
        ds = load_dataset(args.data)
        labels = ds.seen_labels()
        lexicon = ds.lexicon() if not args.lexicon else load_lexicon(args.lexicon)
    else:
        if not (args.labels and args.lexicon):
            raise ValidationError("corpus build needs --data, or both --labels and --lexicon")
        path = Path(args.labels)
        if not path.exists():
            raise IntegrityError(f"labels file not found: {path}")
        labels = [line.strip() for line in path.read_text().splitlines() if line.strip()]
        lexicon = load_lexicon(args.lexicon)
    corpus = build_corpus(labels, lexicon)
    if args.categories:
        corpus = filter_by_category(corpus, args.categories.split(","))
    out = prepare_out(args.out, args.force)
    corpus.save(out / "corpus.jsonl")
    write_json(out / "config.json", {"labels": labels, "categories": args.categories,
                                     "data": args.data, "lexicon": args.lexicon})
    print(f"wrote {corpus.K} entities to {out / 'corpus.jsonl'}")


def cmd_corpus_embed(args):
    from .corpus import embed_entities, load_corpus, save_embeddings

    corpus = load_corpus(args.corpus)
    seed = resolve_seed(args, 0)
    emb = embed_entities(corpus, seed, args.d)
    out = prepare_out(args.out, args.force)
    save_embeddings(emb, out / "entities.alte")
    write_json(out / "config.json", {"corpus": args.corpus, "seed": seed, "d": args.d,
                                     "source_hash": emb.source_hash.hex()})
    print(f"wrote {emb.S.shape[0]}x{emb.S.shape[1]} embeddings to {out / 'entities.alte'}")


def cmd_train(args):
    from .corpus import load_corpus
    from .synthetic import load_dataset
    from .training import check_geometry, evaluate, save_checkpoint, train

    cfg = effective_config(args)
    ds = load_dataset(args.data)
    check_geometry(cfg, ds)
    corpus = load_corpus(args.corpus) if args.corpus else None
    out = prepare_out(args.out, args.force)
    write_json(out / "config.json", cfg.to_dict())
    result = train(cfg, ds, corpus, log_path=out / "train_log.jsonl")
    save_checkpoint(result.checkpoint, out / "checkpoint.altw")
    metrics = evaluate(result.model, ds, result.text, split="test")
    write_json(out / "metrics.json", metrics)
    last = result.history[-1] if result.history else {}
    print(json.dumps({"train_top1": last.get("train_top1"), "test_top1": metrics["top1"]}))


def load_ckpt_and_data(args):
    from .synthetic import load_dataset
    from .training import check_geometry, load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    check_geometry(ckpt.config, ds)
    return ckpt, ds


def cmd_eval(args):
    from .training import evaluate, zero_shot_eval

    ckpt, ds = load_ckpt_and_data(args)
    if args.zero_shot:
        metrics = zero_shot_eval(ckpt, ds.unseen_labels(), ds)
    else:
        metrics = evaluate(ckpt, ds, split=args.split)
    if args.out:
        out = prepare_out(args.out, args.force)
        write_json(out / "metrics.json", metrics)
        write_json(out / "config.json", {"ckpt": args.ckpt, "data": args.data, "split": args.split,
                                         "zero_shot": args.zero_shot})
    print(json.dumps({k: metrics[k] for k in ("top1", "top5", "loss")}))


def cmd_align(args):
    from .synthetic import alignment_precision
    from .training import alignment_dump

    ckpt, ds = load_ckpt_and_data(args)
    records = alignment_dump(ckpt, ds, split=args.split, with_sim=args.sim)
    out = prepare_out(args.out, args.force)
    with open(out / "alignment.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    precision = alignment_precision(records, ds)
    write_json(out / "config.json", {"ckpt": args.ckpt, "data": args.data, "split": args.split})
    write_json(out / "precision.json", {"alignment_precision": precision, "frames": len(records)})
    print(json.dumps({"frames": len(records), "alignment_precision": precision}))


def cmd_bench_flops(args):
    from .flops import VIT_B16_8F, ModelGeometry, count_flops, r_sweep, sweep_to_text

    if args.geometry == "vit-b16":
        g = ModelGeometry(**VIT_B16_8F, r=0)
    else:
        cfg = effective_config(args)
        g = ModelGeometry.from_config(cfg, args.K)
    r_values = [int(v) for v in args.sweep.split(",")] if args.sweep else [g.r]
    rows = r_sweep(g, r_values)
    report = count_flops(g.with_r(r_values[0]))
    out = prepare_out(args.out, args.force)
    write_json(out / "flops.json", {"report": report.to_dict(), "sweep": rows})
    text = report.to_text() + "\n\n" + sweep_to_text(rows) + "\n"
    (out / "flops.txt").write_text(text)
    write_json(out / "config.json", {"geometry": asdict(g), "sweep": r_values})
    print(sweep_to_text(rows))


def cmd_bench_time(args):
    from .flops import wallclock_bench

    ckpt, ds = load_ckpt_and_data(args)
    model = ckpt.model()
    text = ckpt.text_side()
    ids = ds.ids(args.split)[: args.clips]
    if not ids:
        raise ParameterError(f"split {args.split!r} is empty")
    frames, _ = ds.arrays(ids)
    result = wallclock_bench(model, frames, text.S, repetitions=args.reps)
    out = prepare_out(args.out, args.force)
    write_json(out / "timing.json", result)
    write_json(out / "config.json", {"ckpt": args.ckpt, "data": args.data, "clips": len(ids),
                                     "reps": args.reps})
    print(json.dumps({"mean": result["mean"], "sd": result["sd"]}))


def cmd_ablate(args):
    from .corpus import load_corpus
    from .synthetic import load_dataset
    from .flops import format_table
    from .training import ablation_run, check_geometry

    cfg = effective_config(args)
    ds = load_dataset(args.data)
    check_geometry(cfg, ds)
    corpus = load_corpus(args.corpus) if args.corpus else None
    seeds = [int(s) for s in args.seeds.split(",")]
    variants = args.variants.split(",")
    out = prepare_out(args.out, args.force)
    write_json(out / "config.json", {"base": cfg.to_dict(), "variants": variants, "seeds": seeds})
    rows = ablation_run(ds, cfg, variants, seeds, corpus)
    write_json(out / "ablation.json", rows)
    table = [("variant", "runs", "top1", "zero_shot")]
    for row in rows:
        zs = "-" if row["zero_shot_mean"] is None else f"{row['zero_shot_mean']:.3f}+-{row['zero_shot_sd']:.3f}"
        table.append((row["variant"], str(row["runs"]), f"{row['top1_mean']:.3f}+-{row['top1_sd']:.3f}", zs))
    text = "\n".join(format_table(table))
    (out / "ablation.txt").write_text(text + "\n")
    print(text)


# -- parser -----------------------------------------------------------------
def build_parser():
    parser = ArgumentParser(prog="alt", description="Entity-aligned video recognition on synthetic clips")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    data = sub.add_parser("data", help="generate synthetic datasets").add_subparsers(dest="action", required=True, parser_class=ArgumentParser)
    gen = data.add_parser("gen", help="render a synthetic dataset")
    gen.add_argument("--config")
    gen.add_argument("--seed", type=int)
    for name in ("n_entities", "n_actions", "n_unseen", "samples_per_action", "T", "H", "W", "patch"):
        gen.add_argument("--" + name.replace("_", "-"), dest=name, type=int)
    add_out(gen)
    gen.set_defaults(func=cmd_data_gen)

    corpus = sub.add_parser("corpus", help="build and embed entity corpora").add_subparsers(dest="action", required=True, parser_class=ArgumentParser)
    build = corpus.add_parser("build", help="build an entity corpus from labels and a lexicon")
    build.add_argument("--data")
    build.add_argument("--labels")
    build.add_argument("--lexicon")
    build.add_argument("--categories")
    add_out(build)
    build.set_defaults(func=cmd_corpus_build)
    embed = corpus.add_parser("embed", help="embed a corpus into an entity matrix")
    embed.add_argument("--corpus", required=True)
    embed.add_argument("--d", type=int, default=32)
    embed.add_argument("--seed", type=int)
    add_out(embed)
    embed.set_defaults(func=cmd_corpus_embed)

    tr = sub.add_parser("train", help="train on a synthetic dataset")
    tr.add_argument("--data", required=True)
    tr.add_argument("--corpus")
    tr.add_argument("--seed", type=int)
    add_train_flags(tr)
    add_out(tr)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--zero-shot", dest="zero_shot", action="store_true")
    add_out(ev, required=False)
    ev.set_defaults(func=cmd_eval)

    al = sub.add_parser("align", help="dump entity-to-region alignments")
    al.add_argument("--ckpt", required=True)
    al.add_argument("--data", required=True)
    al.add_argument("--split", default="test")
    al.add_argument("--sim", action="store_true", help="include full similarity rows")
    add_out(al)
    al.set_defaults(func=cmd_align)

    bench = sub.add_parser("bench", help="FLOPs and wall-clock benchmarks").add_subparsers(dest="action", required=True, parser_class=ArgumentParser)
    fl = bench.add_parser("flops", help="analytic multiply-add counts and r sweep")
    fl.add_argument("--geometry", choices=("config", "vit-b16"), default="config")
    fl.add_argument("--sweep", help="comma-separated r values")
    fl.add_argument("--K", type=int, default=15)
    fl.add_argument("--seed", type=int)
    add_train_flags(fl)
    add_out(fl)
    fl.set_defaults(func=cmd_bench_flops)
    tm = bench.add_parser("time", help="wall-clock seconds per clip")
    tm.add_argument("--ckpt", required=True)
    tm.add_argument("--data", required=True)
    tm.add_argument("--split", default="test")
    tm.add_argument("--clips", type=int, default=8)
    tm.add_argument("--reps", type=int, default=5)
    add_out(tm)
    tm.set_defaults(func=cmd_bench_time)

    ab = sub.add_parser("ablate", help="train and compare ablation variants")
    ab.add_argument("--data", required=True)
    ab.add_argument("--corpus")
    ab.add_argument("--variants", default="full,learnable_query")
    ab.add_argument("--seeds", default="0")
    ab.add_argument("--seed", type=int)
    add_train_flags(ab)
    add_out(ab)
    ab.set_defaults(func=cmd_ablate)
    return parser


def error_line(exc, code):
    return json.dumps({"error": type(exc).__name__, "code": code, "message": str(exc)})


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except AltError as exc:
        print(error_line(exc, exc.exit_code), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(error_line(exc, 2), file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(error_line(exc, 3), file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
