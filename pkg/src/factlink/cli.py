"""Command-line entry point.

Every subcommand exits 0 on success.  Failures print one JSON error record
to stderr: usage errors exit 2, data integrity failures exit 3, other
failures exit 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import gradcheck
from .candidates import build_pem, candidate_recall, read_alias_counts, write_alias_counts
from .encoder import EncoderConfig
from .errors import FactlinkError, IntegrityError, ParseError, ValidationError
from .evaluation import predict, relation_analysis, score, write_analysis, write_predictions
from .kb import load_kb, write_type_vocab
from .kbscore import weighted_facts
from .model import ABLATIONS, AblationFlags, ablate, build_model
from .pipeline import fact_dependent_keys, load_artifacts, load_world_dir
from .relex import RelexConfig
from .training import TrainConfig, load_model, train
from .world import WorldSpec, generate_world

EXIT_FAILURE, EXIT_USAGE, EXIT_INTEGRITY = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def _error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}, sort_keys=True), file=sys.stderr)


# ---------------------------------------------------------------- subcommands


def cmd_build_kb(args) -> int:
    art, data = load_artifacts(args.world, args.max_relations, args.type_budget)
    names = art.relation_vocab.class_names(art.kb)
    counts = art.kb.relation_counts()
    with open(Path(args.world) / "relations.tsv", "w", encoding="utf-8") as fh:
        for c, rid in enumerate(art.relation_vocab.standard):
            fh.write(f"{c}\t{names[c]}\t{counts[rid]}\n")
    write_type_vocab(art.kb, art.type_vocab, Path(args.world) / "types.tsv")
    _emit({"entities": art.kb.n_entities, "facts": len(art.kb.facts), "relation_classes": art.relation_vocab.size,
           "types": len(art.type_vocab)})
    return 0


def cmd_build_pem(args) -> int:
    rows = read_alias_counts(args.counts)
    pem = build_pem(rows)
    merged = {}
    for alias, eid, count in rows:
        key = (" ".join(alias.casefold().split()), eid)
        merged[key] = merged.get(key, 0) + count
    write_alias_counts(sorted((a, e, c) for (a, e), c in merged.items()), args.out)
    _emit({"aliases": len(pem), "rows": len(merged)})
    return 0


def cmd_gen_world(args) -> int:
    kw = {f.name: getattr(args, f.name) for f in fields(WorldSpec) if getattr(args, f.name, None) is not None}
    kw["seed"] = args.seed
    world = generate_world(WorldSpec(**kw), args.out)
    _emit({"out": str(args.out), **{k: world.manifest[k] for k in ("documents", "mentions", "n_facts")}})
    return 0


def _flags(names) -> AblationFlags:
    return ablate(AblationFlags(), names or [])


def cmd_train(args) -> int:
    art, data = load_artifacts(args.world, write_types=True)
    enc = EncoderConfig(vocab_size=len(art.vocab), d_model=args.d_model, n_layers=args.layers,
                        n_heads=args.heads, d_ff=2 * args.d_model)
    relex = RelexConfig(k=args.k, n_layers=args.re_layers, n_heads=args.heads, d_ff=2 * args.d_model)
    model = build_model(art, enc, flags=_flags(args.ablate), relex=relex, task_hidden=args.d_model,
                        seed=args.seed)
    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, max_steps=args.steps,
                      dropout=args.dropout, seed=args.seed, eval_every=args.eval_every)
    res = train(cfg, art, data["train"], data["dev"], model_config=model.config, out_dir=args.out)
    _emit({"checkpoint": str(res.checkpoint), "sha256": res.checkpoint_sha256,
           "final": res.metrics[-1] if res.metrics else None})
    return 0


def _load(args):
    art, data = load_artifacts(args.world)
    model = load_model(args.checkpoint, art)
    if getattr(args, "ablate", None):
        model = model.with_flags(ablate(model.flags, args.ablate))
    return model, data


def cmd_eval(args) -> int:
    model, data = _load(args)
    docs = data[args.split]
    preds = predict(model, docs, k=args.k)
    dep = fact_dependent_keys(data["manifest"], args.split)
    overall = score(preds)
    record = {"split": args.split, "ablate": args.ablate or [], "mentions": overall.n_mentions,
              "precision": overall.precision, "recall": overall.recall, "f1": overall.f1}
    if dep:
        record["fact_dependent_f1"] = score(preds, subset=dep).f1
        record["fact_independent_f1"] = score(preds, exclude=dep).f1
    if args.out:
        write_predictions(preds, args.out)
    _emit(record)
    return 0


def cmd_analyze(args) -> int:
    model, data = _load(args)
    rows = relation_analysis(model, data[args.split], args.threshold)
    if args.out:
        write_analysis(rows, args.out)
    for r in rows:
        print(f"{r.relation}\t{r.gold_count}\t{r.predicted_count}\t{r.recall:.4f}")
    return 0


def cmd_recall(args) -> int:
    data = load_world_dir(args.world)
    print(f"{candidate_recall(data['pem'], data[args.split], args.n):.1f}")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck.run(args.module, seed=args.seed)
    _emit({k: report[k] for k in ("module", "max_relative_error", "passed")})
    return 0 if report["passed"] else EXIT_FAILURE


def cmd_dump_facts(args) -> int:
    model, data = _load(args)
    docs = [d for d in data[args.split] if args.doc_id in (None, d.id)]
    if args.doc_id is not None and not docs:
        raise ValidationError(f"no document {args.doc_id!r} in split {args.split}")
    names = model.artifacts.relation_vocab.class_names(model.artifacts.kb)
    for doc in docs:
        out = model.forward(doc)
        if out.relations is None or out.facts is None:
            continue
        for rec in weighted_facts(out.relations, out.facts, out.psi_a_norm.data, out.layout, names,
                                  args.min_contribution):
            print(json.dumps({"doc_id": doc.id, **rec}, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="factlink", description="KB-aware entity disambiguation on synthetic worlds")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def world_arg(sp):
        sp.add_argument("--world", type=Path, required=True, help="world directory")

    def model_args(sp):
        world_arg(sp)
        sp.add_argument("--checkpoint", type=Path, required=True)
        sp.add_argument("--split", choices=("train", "dev", "test"), default="test")
        sp.add_argument("--ablate", nargs="*", choices=sorted(ABLATIONS), default=[])

    sp = sub.add_parser("build-kb", help="validate a KB and write relation and type vocabularies")
    world_arg(sp)
    sp.add_argument("--max-relations", type=int, default=128)
    sp.add_argument("--type-budget", type=int, default=1400)
    sp.set_defaults(func=cmd_build_kb)

    sp = sub.add_parser("build-pem", help="merge raw alias counts into a prior table")
    sp.add_argument("--counts", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_build_pem)

    sp = sub.add_parser("gen-world", help="generate a synthetic world")
    sp.add_argument("--out", type=Path, required=True)
    defaults = WorldSpec()
    for f in fields(WorldSpec):
        if f.name in ("seed", "split"):
            continue
        sp.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=type(getattr(defaults, f.name)),
                        default=None)
    sp.set_defaults(func=cmd_gen_world)

    sp = sub.add_parser("train", help="train a model on a world")
    world_arg(sp)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--steps", type=int, default=1000)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--dropout", type=float, default=0.05)
    sp.add_argument("--eval-every", type=int, default=250)
    sp.add_argument("--d-model", type=int, default=64)
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--re-layers", type=int, default=2)
    sp.add_argument("--heads", type=int, default=4)
    sp.add_argument("--k", type=int, default=600)
    sp.add_argument("--ablate", nargs="*", choices=sorted(ABLATIONS), default=[])
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="micro-F1 of a checkpoint")
    model_args(sp)
    sp.add_argument("--k", type=int, default=None)
    sp.add_argument("--out", type=Path, default=None, help="predictions.jsonl")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze-relations", help="per-relation gold/predicted/recall table")
    model_args(sp)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--out", type=Path, default=None, help="analysis.tsv")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("candidate-recall", help="gold recall of the top-n candidates")
    world_arg(sp)
    sp.add_argument("--n", type=int, default=30)
    sp.add_argument("--split", choices=("train", "dev", "test"), default="test")
    sp.set_defaults(func=cmd_recall)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    sp.add_argument("--module", choices=("all", *gradcheck.MODULES), default="all")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("dump-facts", help="print per-fact contributions to the KB score")
    model_args(sp)
    sp.add_argument("--doc-id", default=None)
    sp.add_argument("--min-contribution", type=float, default=0.0)
    sp.set_defaults(func=cmd_dump_facts)
    return p


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _error("usage", str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (IntegrityError, ParseError) as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_INTEGRITY
    except (ValidationError, ValueError) as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_USAGE
    except (FactlinkError, OSError) as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_FAILURE


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
