"""``seqmatch`` command-line entry point.

Commands: prepare, train, eval, rank, prefilter, ensemble.  Every command
accepts ``--config PATH`` (flat ``key = value`` lines, keys optionally
prefixed with the command name, e.g. ``train.lr = 0.001``), ``--seed`` and
``--out``.  Values resolve as command line > config file > built-in default.
Failures print one JSON object ``{"error": ..., "message": ...}`` to stderr
and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .data import ingest, prepare_examples, read_examples, write_jsonl
from .embedding import Vocabulary, load_embedding_file
from .esim import AblationFlags
from .pipeline import pool_sentences, rank_records, siamese_scores, two_stage_record
from .rank import (
    apply_threshold, ensemble, evaluate, lists_from_scores, rank_scores,
    read_scores, select_threshold, write_scores,
)
from .siamese import EncodedTable, SiameseConfig, encode_corpus
from .train import Hyperparams, build_model, read_checkpoint, model_from_checkpoint, train


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# value parsing
# ---------------------------------------------------------------------------

def parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def parse_flags(text: str) -> AblationFlags:
    """``ctx_compose=false[,name=value...]`` -> AblationFlags."""
    known = {f.name for f in fields(AblationFlags)}
    values = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        key, sep, val = item.partition("=")
        if not sep or key.strip() not in known:
            raise argparse.ArgumentTypeError(f"unknown ablation flag {item!r}; known: {sorted(known)}")
        values[key.strip()] = parse_bool(val)
    return AblationFlags(**values)


def read_config(path) -> dict[str, str]:
    """Flat ``dotted.key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

_HP_TYPES = {bool: parse_bool, int: int, float: float, str: str}
_HP_HELP = {
    "lr": "Adam learning rate", "batch_size": "examples per step", "epochs": "training epochs",
    "d_h": "hidden width (ESIM 300, Siamese 400)", "max_c": "context tokens kept", "max_r": "response tokens kept",
    "ratio": "negatives per positive", "ctx_compose": "compose the context side (ESIM)",
    "tie_composition": "share composition weights between sides (ESIM)",
    "keep_context": "which end of a long context to keep: last or first",
    "dropout": "dropout probability", "precision": "float64 or float32",
    "clip": "global gradient-norm clip, 0 disables", "emb_dim": "width of random tables when no file is given",
    "d_m": "attention heads (Siamese)", "d_a": "attention width (Siamese)",
    "mlp_hidden": "Siamese MLP width, 0 means d_h",
}


class _Command:
    def __init__(self, name: str, run: Callable, parser: argparse.ArgumentParser,
                 defaults: dict, converters: dict, required: Sequence[str], paths: Sequence[str]):
        self.name, self.run, self.parser = name, run, parser
        self.defaults, self.converters = defaults, converters
        self.required, self.paths = tuple(required), tuple(paths)


def _add(cmd: dict, parser, name: str, default=None, type=str, help="", required=False,
         path=False, **kw):
    dest = name.replace("-", "_")
    shown = f" (default: {default})" if default not in (None, False) else ""
    parser.add_argument(f"--{name}", dest=dest, type=type, help=help + shown, **kw)
    cmd["defaults"][dest] = default
    cmd["converters"][dest] = type
    if required:
        cmd["required"].append(dest)
    if path:
        cmd["paths"].append(dest)


def _hyperparam_options(cmd: dict, parser, only: Sequence[str] | None = None):
    for f in fields(Hyperparams):
        if f.name == "seed" or (only is not None and f.name not in only):
            continue
        _add(cmd, parser, f.name.replace("_", "-"), f.default, _HP_TYPES[type(f.default)],
             _HP_HELP.get(f.name, f.name))


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, _Command]]:
    root = argparse.ArgumentParser(prog="seqmatch", description="Response selection toolkit.")
    root.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = root.add_subparsers(dest="command", required=True)
    commands: dict[str, _Command] = {}

    def command(name: str, help: str):
        p = sub.add_parser(name, help=help, description=help, argument_default=argparse.SUPPRESS)
        cmd = {"defaults": {}, "converters": {}, "required": [], "paths": []}
        _add(cmd, p, "config", None, str, "flat key = value config file", path=True)
        _add(cmd, p, "seed", 0, int, "master seed")
        _add(cmd, p, "out", None, str, "output directory", required=True)
        return p, cmd

    def finish(name, run, p, cmd):
        commands[name] = _Command(name, run, p, cmd["defaults"], cmd["converters"],
                                  cmd["required"], cmd["paths"])

    p, c = command("prepare", "augment dialogues and sample negatives")
    _add(c, p, "data", None, str, "dialogue JSON-lines file", required=True, path=True)
    _hyperparam_options(c, p, only=("ratio", "max_c", "max_r", "keep_context"))
    finish("prepare", cmd_prepare, p, c)

    p, c = command("train", "train an ESIM or Siamese model")
    _add(c, p, "model", "esim", str, "model kind", choices=("esim", "siamese"))
    _add(c, p, "examples", None, str, "examples file written by prepare", required=True, path=True)
    _add(c, p, "dev", None, str, "dev pools (pool JSON-lines) for model selection", path=True)
    _add(c, p, "embeddings", None, str,
         "comma-separated embedding text files, one table each", path=True)
    _add(c, p, "freeze-embeddings", False, parse_bool, "keep loaded embedding tables fixed")
    _hyperparam_options(c, p)
    finish("train", cmd_train, p, c)

    p, c = command("eval", "compute ranking metrics from a score file")
    _add(c, p, "scores", None, str, "score JSON-lines file", required=True, path=True)
    _add(c, p, "pools", None, str, "pool file supplying the gold ids", required=True, path=True)
    _add(c, p, "threshold", None, str,
         "'select' to grid-search the no-answer threshold, or a fixed value")
    finish("eval", cmd_eval, p, c)

    p, c = command("rank", "score every candidate of every pool")
    _add(c, p, "checkpoint", None, str, "model checkpoint", required=True, path=True)
    _add(c, p, "vocab", None, str, "vocabulary file (default: next to the checkpoint)", path=True)
    _add(c, p, "pools", None, str, "pool JSON-lines file", required=True, path=True)
    _add(c, p, "flags", None, parse_flags, "ablation flags, e.g. ctx_compose=false")
    _hyperparam_options(c, p, only=("max_c", "max_r", "keep_context"))
    finish("rank", cmd_rank, p, c)

    p, c = command("prefilter", "Siamese prefilter with optional ESIM rerank")
    _add(c, p, "siamese", None, str, "Siamese checkpoint", required=True, path=True)
    _add(c, p, "siamese-vocab", None, str, "Siamese vocabulary (default: next to checkpoint)",
         path=True)
    _add(c, p, "esim", None, str, "ESIM checkpoint for the rerank stage", path=True)
    _add(c, p, "esim-vocab", None, str, "ESIM vocabulary (default: next to checkpoint)", path=True)
    _add(c, p, "pools", None, str, "pool JSON-lines file", required=True, path=True)
    _add(c, p, "cache", None, str, "candidate encoding cache; built when missing")
    _add(c, p, "top-n", 100, int, "candidates passed to the rerank stage")
    _add(c, p, "flags", None, parse_flags, "ESIM ablation flags")
    _hyperparam_options(c, p, only=("max_c", "max_r", "keep_context"))
    finish("prefilter", cmd_prefilter, p, c)

    p, c = command("ensemble", "average score files")
    _add(c, p, "scores", None, str, "comma-separated score files", required=True, path=True)
    finish("ensemble", cmd_ensemble, p, c)
    return root, commands


def resolve(cmd: _Command, cli: dict) -> argparse.Namespace:
    """Layer built-in defaults, then the config file, then command-line values."""
    values = dict(cmd.defaults)
    explicit = set(cli)
    if "config" in cli:
        for key, raw in read_config(cli["config"]).items():
            scope, _, name = key.rpartition(".")
            if scope and scope != cmd.name:
                continue
            dest = name.replace("-", "_")
            if dest not in cmd.converters or dest == "config":
                raise UsageError(f"unknown config key {key!r} for command {cmd.name}")
            try:
                values[dest] = cmd.converters[dest](raw)
                explicit.add(dest)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
    values.update(cli)
    missing = [f"--{d.replace('_', '-')}" for d in cmd.required if values.get(d) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")
    for dest in cmd.paths:
        for p in _split(values.get(dest)):
            if not Path(p).exists():
                raise FileNotFoundError(f"--{dest.replace('_', '-')}: no such file: {p}")
    ns = argparse.Namespace(**values)
    ns.explicit = frozenset(explicit)
    return ns


def _split(value) -> list[str]:
    if value is None:
        return []
    return [s for s in str(value).split(",") if s]


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _hyperparams(args) -> Hyperparams:
    names = Hyperparams.field_names()
    return Hyperparams(**{k: v for k, v in vars(args).items() if k in names})


def _vocab_for(checkpoint: str, explicit: str | None) -> Vocabulary:
    path = Path(explicit) if explicit else Path(checkpoint).parent / "vocab.txt"
    if not path.exists():
        raise FileNotFoundError(f"vocabulary file not found: {path}")
    return Vocabulary.load(path)


def _stored_settings(checkpoint: str, args, keys=("max_c", "max_r", "keep_context")) -> dict:
    """Truncation settings: explicit > checkpoint's training run > default."""
    header, _ = read_checkpoint(checkpoint)
    stored = header.get("meta", {}).get("hyperparams", {})
    out = {}
    for k in keys:
        out[k] = getattr(args, k) if k in args.explicit or k not in stored else stored[k]
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_prepare(args) -> dict:
    out = _out_dir(args)
    dialogues = ingest(args.data, "dialogue-json-lines")
    examples, stats = prepare_examples(dialogues, args.ratio, args.seed, args.max_c, args.max_r,
                                       args.keep_context)
    write_jsonl(out / "examples.jsonl", (ex.to_json() for ex in examples))
    report = stats.to_json()
    (out / "stats.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return report


def cmd_train(args) -> dict:
    out = _out_dir(args)
    hp = _hyperparams(args)
    if args.model == "siamese" and "d_h" not in args.explicit:
        hp = replace(hp, d_h=SiameseConfig.d_h)
    examples = read_examples(args.examples)
    vocab = Vocabulary()
    for ex in examples:
        vocab.update(ex.context)
        vocab.update(ex.response)
    dev = ingest(args.dev, "pool-json-lines") if args.dev else None
    tables = trainable = None
    files = _split(args.embeddings)
    if files:
        tables = [load_embedding_file(f, vocab, _embedding_dim(f)).table for f in files]
        trainable = [not args.freeze_embeddings] * len(tables)
    model = build_model(args.model, vocab, hp, tables, trainable)
    vocab.save(out / "vocab.txt")
    result = train(model, vocab, examples, hp, dev_pools=dev, out_dir=out)
    return {"checkpoint": str(result.checkpoint), "best_epoch": result.best_epoch,
            "best_criterion": result.best_criterion, "steps": result.steps}


def _embedding_dim(path) -> int:
    """Width of the first data row, skipping a ``count dim`` header."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            return len(parts) - 1
    raise ValueError(f"{path}: no embedding rows")


def cmd_eval(args) -> dict:
    out = _out_dir(args)
    pools = ingest(args.pools, "pool-json-lines")
    golds = {p.id: p.gold_ids for p in pools}
    lists = lists_from_scores(read_scores(args.scores), golds)
    theta = None
    if args.threshold is not None:
        theta = select_threshold(lists) if args.threshold == "select" else float(args.threshold)
        lists = apply_threshold(lists, theta)
    report = evaluate(lists)
    report.threshold = theta
    payload = report.to_json()
    (out / "metrics.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return payload


def cmd_rank(args) -> dict:
    out = _out_dir(args)
    vocab = _vocab_for(args.checkpoint, args.vocab)
    model = model_from_checkpoint(args.checkpoint, vocab)
    settings = _stored_settings(args.checkpoint, args)
    flags = args.flags if model.kind == "esim" else None
    pools = ingest(args.pools, "pool-json-lines")
    lists = rank_records(model, vocab, pools, settings["max_c"], settings["max_r"], flags,
                         settings["keep_context"])
    write_scores(out / "scores.jsonl", lists)
    summary = {"scores": str(out / "scores.jsonl"), "pools": len(lists),
               "flags": asdict(flags) if flags else None}
    if any(rl.gold_ids for rl in lists):
        summary["metrics"] = evaluate(lists).to_json()
    return summary


def cmd_prefilter(args) -> dict:
    out = _out_dir(args)
    s_vocab = _vocab_for(args.siamese, args.siamese_vocab)
    siamese = model_from_checkpoint(args.siamese, s_vocab)
    settings = _stored_settings(args.siamese, args)
    pools = ingest(args.pools, "pool-json-lines")
    cache_path = Path(args.cache) if args.cache else out / "encodings.bin"
    if cache_path.exists():
        table = EncodedTable.load(cache_path)
        table.check(siamese)
        built = False
    else:
        table = encode_corpus(siamese, pool_sentences(pools, settings["max_r"]), s_vocab)
        table.save(cache_path)
        built = True

    if args.esim:
        e_vocab = _vocab_for(args.esim, args.esim_vocab)
        esim = model_from_checkpoint(args.esim, e_vocab)
        e_set = _stored_settings(args.esim, args)
        lists = [two_stage_record(siamese, s_vocab, table, esim, e_vocab, rec,
                                  min(args.top_n, len(rec.candidates)), settings["max_c"],
                                  e_set["max_r"], args.flags, settings["keep_context"])
                 for rec in pools]
    else:
        lists = [rank_scores(rec.id, [c.id for c in rec.candidates],
                             siamese_scores(siamese, s_vocab, rec, table, settings["max_c"],
                                            settings["keep_context"]), rec.gold_ids)
                 for rec in pools]
    write_scores(out / "scores.jsonl", lists)
    summary = {"scores": str(out / "scores.jsonl"), "cache": str(cache_path),
               "cache_built": built, "pools": len(lists), "top_n": args.top_n}
    if any(rl.gold_ids for rl in lists):
        summary["metrics"] = evaluate(lists).to_json()
    return summary


def cmd_ensemble(args) -> dict:
    out = _out_dir(args)
    files = _split(args.scores)
    merged = ensemble([read_scores(f) for f in files])
    write_scores(out / "scores.jsonl", lists_from_scores(merged))
    return {"scores": str(out / "scores.jsonl"), "inputs": len(files), "pairs": len(merged)}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def run(argv: Sequence[str] | None = None) -> dict:
    """Parse ``argv`` and execute the command; returns its JSON summary."""
    root, commands = build_parser()
    ns = root.parse_args(argv)
    cli = {k: v for k, v in vars(ns).items() if k != "command"}
    cmd = commands[ns.command]
    return cmd.run(resolve(cmd, cli))


def main(argv: Sequence[str] | None = None) -> int:
    try:
        summary = run(argv)
    except SystemExit:
        raise
    except Exception as exc:  # reported as machine-readable JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
