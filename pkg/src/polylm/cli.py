"""Command-line entry point: ``polylm <command> [options]``.

Every command that produces artifacts writes them under ``--out`` together with
``run_manifest.json`` (command, resolved config, seed, input hashes, outputs).
Exit codes: 0 ok, 1 internal error, 2 usage/input error, 3 external client failure.
Errors are printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import architecture, datapipe, training
from .architecture import count_parameters, load_config
from .evaluation import clients as eval_clients
from .evaluation import harness, metrics
from .inference import GenerationConfig, generate
from .tokenizer import ChatTurn, TokenizerModel, bpe_train

logger = logging.getLogger("polylm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


def _sha256_path(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file() and p.name != "run_manifest.json":
                h.update(p.relative_to(path).as_posix().encode())
                h.update(b"\0")
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _need(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing required {what}")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return p


def _write_manifest(out: Path, command: str, config: dict, seed, inputs: dict[str, Path], outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {k: {"path": str(v), "sha256": _sha256_path(v)} for k, v in sorted(inputs.items())},
        "outputs": sorted(outputs),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, ensure_ascii=False, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _read_texts(path: Path) -> dict[str, list[str]]:
    """Texts by language from a sample JSONL (prompt + completion) or plain text lines."""
    if path.suffix == ".jsonl":
        by_lang: dict[str, list[str]] = {}
        for s in datapipe.read_jsonl(path):
            by_lang.setdefault(datapipe.canonical_code(s.language), []).append(s.prompt + "\n" + s.completion)
        return by_lang
    return {"all": [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]}


def _load_model(args):
    ckpt = _need(args.checkpoint, "--checkpoint")
    model, state, _ = training.load_checkpoint(ckpt)
    return model, ckpt


# ---------------------------------------------------------------------------
# commands


def cmd_count_params(args) -> int:
    rows = []
    for name in args.config:
        cfg = load_config(name)
        pc = count_parameters(cfg)
        rows.append({"config": cfg.name or name, "embedding": pc.embedding, "non_embedding": pc.non_embedding})
    if args.json:
        print(json.dumps(rows, indent=1))
    else:
        print(f"{'config':<20} {'embedding':>16} {'non-embedding':>18}")
        for r in rows:
            print(f"{r['config']:<20} {r['embedding']:>16,} {r['non_embedding']:>18,}")
    return 0


def cmd_train_tokenizer(args) -> int:
    src = _need(args.input, "--input")
    out = Path(args.out)
    texts = _read_texts(src)
    model = bpe_train(texts, args.vocab_size, seed=args.seed, budget_bytes=args.budget_bytes)
    model.save(out)
    _write_manifest(
        out,
        "train-tokenizer",
        {"vocab_size": args.vocab_size, "budget_bytes": args.budget_bytes, "trained_vocab_size": model.vocab_size},
        args.seed,
        {"input": src},
        ["vocab.tsv", "merges.txt"],
    )
    print(json.dumps({"vocab_size": model.vocab_size, "merges": len(model.merges), "out": str(out)}))
    return 0


def cmd_build_mixture(args) -> int:
    src = _need(args.input, "--input")
    out = Path(args.out)
    raw = datapipe.read_jsonl(src)
    kept = datapipe.filter_languages(raw)
    retention = datapipe.language_retention(raw, kept)
    specs = [datapipe.MixtureSourceSpec(kind, per_language_cap=args.cap if kind in args.cap_kinds else None) for kind in datapipe.SOURCE_KINDS]
    mixed = datapipe.build_mixture(kept, specs, args.seed)
    if args.holdout_dataset:
        pool = [s for s in mixed if s.dataset_id == args.holdout_dataset]
        rest = [s for s in mixed if s.dataset_id != args.holdout_dataset]
        train_part, held = datapipe.split_holdout(pool, args.holdout_n, args.seed)
        train_set = sorted(rest + train_part, key=lambda s: s.id)
    else:
        train_set, held = datapipe.split_holdout(mixed, args.holdout_n, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    datapipe.write_jsonl(train_set, out / "train.jsonl")
    datapipe.write_jsonl(held, out / "heldout.jsonl")
    report = {"train": datapipe.mixture_report(train_set), "heldout": datapipe.mixture_report(held), "language_retention": retention}
    _dump(out / "mixture_report.json", report)
    _write_manifest(
        out,
        "build-mixture",
        {"cap": args.cap, "cap_kinds": list(args.cap_kinds), "holdout_n": args.holdout_n, "holdout_dataset": args.holdout_dataset},
        args.seed,
        {"input": src},
        ["train.jsonl", "heldout.jsonl", "mixture_report.json"],
    )
    print(json.dumps({"train": len(train_set), "heldout": len(held), "out": str(out)}))
    return 0


def cmd_pack(args) -> int:
    src = _need(args.input, "--input")
    tok_dir = _need(args.tokenizer, "--tokenizer")
    out = Path(args.out)
    tok = TokenizerModel.load(tok_dir)
    samples = sorted(datapipe.read_jsonl(src), key=lambda s: s.id)
    seqs = datapipe.pack(samples, tok, args.context_len)
    manifest = datapipe.write_packed(seqs, out, args.context_len)
    _write_manifest(
        out,
        "pack",
        {"context_len": args.context_len},
        args.seed,
        {"input": src, "tokenizer": tok_dir},
        ["tokens.bin", "loss_mask.bin", "manifest.json"],
    )
    print(json.dumps(manifest["stats"]))
    return 0


def _train_config(args) -> training.TrainConfig:
    values = dataclasses.asdict(training.TrainConfig())
    if args.train_config:
        values.update(json.loads(_need(args.train_config, "--train-config").read_text(encoding="utf-8")))
    flags = {
        "total_steps": args.steps,
        "batch_size": args.batch_size,
        "lr_peak": args.lr_peak,
        "lr_end": args.lr_end,
        "warmup_steps": args.warmup_steps,
        "grad_clip": args.grad_clip,
        "seed": args.seed,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    if args.no_prompt_mask:
        values["mask_prompt"] = False
    if args.cross_document_mask:
        values["cross_document_mask"] = True
    return training.TrainConfig(**values)


def cmd_train(args) -> int:
    packed = _need(args.packed, "--packed")
    tok_dir = _need(args.tokenizer, "--tokenizer")
    out = Path(args.out)
    tok = TokenizerModel.load(tok_dir)
    seqs, context_len = datapipe.read_packed(packed)
    tc = _train_config(args).replace(context_len=context_len)
    inputs = {"packed": packed, "tokenizer": tok_dir}
    if args.resume:
        resume = _need(args.resume, "--resume")
        model, state, _ = training.load_checkpoint(resume)
        inputs["resume"] = resume
    else:
        base = load_config(args.config)
        cfg = base.replace(vocab_size=tok.vocab_size, max_seq_len=max(context_len, base.max_seq_len))
        model = (cfg, architecture.init_weights(cfg, seed=tc.seed))
        state = None
    if model[0].vocab_size != tok.vocab_size:
        raise ValueError(f"model vocab {model[0].vocab_size} != tokenizer vocab {tok.vocab_size}")
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    if not args.resume and log_path.exists():
        log_path.unlink()
    state, losses = training.train(model, seqs, tc, state, log_path=log_path, pad_id=tok.special_id("<PAD>"))
    training.save_checkpoint(model, state, out / "checkpoint", tc)
    _write_manifest(
        out,
        "train",
        {"model": model[0].to_dict(), "train": dataclasses.asdict(tc)},
        tc.seed,
        inputs,
        ["checkpoint", "train_log.jsonl"],
    )
    print(json.dumps({"steps": state.step, "first_loss": losses[0] if losses else None, "last_loss": losses[-1] if losses else None}))
    return 0


def cmd_generate(args) -> int:
    model, ckpt = _load_model(args)
    tok_dir = _need(args.tokenizer, "--tokenizer")
    tok = TokenizerModel.load(tok_dir)
    if args.turns:
        raw = json.loads(_need(args.turns, "--turns").read_text(encoding="utf-8"))
        turns = [ChatTurn(t["role"], t["content"]) for t in raw]
    elif args.prompt is not None:
        turns = [ChatTurn("user", args.prompt)]
    else:
        raise UsageError("give --prompt or --turns")
    gen = GenerationConfig(max_new_tokens=args.max_new_tokens, temperature=args.temperature, seed=args.seed)
    result = generate(model, turns, gen, tok)
    payload = {"completion": result.text, "metadata": result.metadata}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "generation.json", payload)
        _write_manifest(out, "generate", dataclasses.asdict(gen), args.seed, {"checkpoint": ckpt, "tokenizer": tok_dir}, ["generation.json"])
    print(json.dumps(payload, ensure_ascii=False))
    return 0


def _task_from_args(args) -> harness.EvalTask:
    if args.task not in harness.TASK_PRESETS:
        raise UsageError(f"unknown task {args.task!r}; choose from {sorted(harness.TASK_PRESETS)}")
    task = harness.TASK_PRESETS[args.task]
    changes = {}
    if args.languages:
        changes["languages"] = tuple(args.languages.split(","))
    if args.all_languages:
        changes["languages"] = None
    if args.shots is not None:
        changes["n_shots"] = args.shots
    if args.k is not None:
        changes["k"] = args.k
    if args.max_new_tokens is not None:
        changes["max_new_tokens"] = args.max_new_tokens
    if args.length_normalized:
        changes["length_normalized"] = True
    return dataclasses.replace(task, **changes)


def _make_clients(args):
    judge = tox = None
    if args.judge == "stub":
        judge = eval_clients.StubJudge()
    elif args.judge == "http":
        judge = eval_clients.HttpJudgeClient()
    if args.toxicity == "stub":
        tox = eval_clients.StubToxicity()
    elif args.toxicity == "http":
        tox = eval_clients.HttpToxicityClient()
    return judge, tox


def cmd_eval(args) -> int:
    model, ckpt = _load_model(args)
    tok_dir = _need(args.tokenizer, "--tokenizer")
    data_path = _need(args.data, "--data")
    tok = TokenizerModel.load(tok_dir)
    task = _task_from_args(args)
    judge, tox = _make_clients(args)
    lm = harness.TransformerLM(model, tok, model_id=args.model_id)
    report = harness.run_task(lm, task, harness.load_task_data(data_path), judge, tox, seed=args.seed, concurrency=args.concurrency)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    _write_manifest(
        out,
        "eval",
        {"task": dataclasses.asdict(task), "judge": args.judge, "toxicity": args.toxicity, "model_id": args.model_id},
        args.seed,
        {"checkpoint": ckpt, "tokenizer": tok_dir, "data": data_path},
        ["report.json"],
    )
    print(json.dumps({"task": report.task, "aggregate": report.aggregate, "per_language": report.per_language}))
    return 0


def cmd_report(args) -> int:
    import jsonschema

    paths = [_need(p, "--reports entry") for p in args.reports]
    reports = []
    for p in paths:
        f = p / "report.json" if p.is_dir() else p
        data = json.loads(f.read_text(encoding="utf-8"))
        jsonschema.validate(data, harness.REPORT_SCHEMA)
        rep = harness.EvalReport.from_dict(data)
        if abs(rep.aggregate - metrics.mean_over_languages(rep.per_language)) > 1e-9:
            raise ValueError(f"{f}: aggregate is not the mean of per-language scores")
        reports.append(rep)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    md = harness.reports_markdown(reports, digits=args.digits)
    (out / "report.md").write_text(md, encoding="utf-8")
    _dump(out / "reports.json", [r.to_dict() for r in reports])
    _write_manifest(out, "report", {"digits": args.digits}, None, {f"report{i}": p for i, p in enumerate(paths)}, ["report.md", "reports.json"])
    sys.stdout.write(md)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="polylm", description="Multilingual decoder recipe: accounting, data, training, inference, evaluation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser, metavar="COMMAND")

    def common(sp, out_required=True, seed_default=0):
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--out", required=out_required)

    sp = sub.add_parser("count-params", help="embedding / non-embedding parameter counts")
    sp.add_argument("--config", nargs="+", default=["aya-23-8b-shape", "aya-23-35b-shape"], help="preset names or .cfg files")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_count_params)

    sp = sub.add_parser("train-tokenizer", help="train the BPE tokenizer")
    sp.add_argument("--input", required=True, help="sample JSONL or plain text file")
    sp.add_argument("--vocab-size", type=int, default=4096)
    sp.add_argument("--budget-bytes", type=int, default=None, help="per-language byte budget")
    common(sp)
    sp.set_defaults(func=cmd_train_tokenizer)

    sp = sub.add_parser("build-mixture", help="filter, cap and split instruction samples")
    sp.add_argument("--input", required=True)
    sp.add_argument("--cap", type=int, default=3000, help="per (dataset, language) cap")
    sp.add_argument("--cap-kinds", nargs="+", default=["translated"], choices=datapipe.SOURCE_KINDS)
    sp.add_argument("--holdout-n", type=int, default=0)
    sp.add_argument("--holdout-dataset", default=None)
    common(sp)
    sp.set_defaults(func=cmd_build_mixture)

    sp = sub.add_parser("pack", help="render and pack samples into fixed-length rows")
    sp.add_argument("--input", required=True)
    sp.add_argument("--tokenizer", required=True)
    sp.add_argument("--context-len", type=int, default=8192)
    common(sp)
    sp.set_defaults(func=cmd_pack)

    sp = sub.add_parser("train", help="instruction fine-tuning")
    sp.add_argument("--packed", required=True)
    sp.add_argument("--tokenizer", required=True)
    sp.add_argument("--config", default="toy-train")
    sp.add_argument("--train-config", default=None, help="JSON file with TrainConfig fields")
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--batch-size", type=int, default=None)
    sp.add_argument("--lr-peak", type=float, default=None)
    sp.add_argument("--lr-end", type=float, default=None)
    sp.add_argument("--warmup-steps", type=int, default=None)
    sp.add_argument("--grad-clip", type=float, default=None)
    sp.add_argument("--no-prompt-mask", action="store_true")
    sp.add_argument("--cross-document-mask", action="store_true")
    sp.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    common(sp, seed_default=None)  # None: keep the seed from --train-config
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="complete a chat prompt")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--tokenizer", required=True)
    sp.add_argument("--prompt", default=None)
    sp.add_argument("--turns", default=None, help='JSON list of {"role", "content"}')
    sp.add_argument("--max-new-tokens", type=int, default=64)
    sp.add_argument("--temperature", type=float, default=0.0)
    common(sp, out_required=False)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("eval", help="run one evaluation task")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--tokenizer", required=True)
    sp.add_argument("--task", required=True, help=f"one of {', '.join(sorted(harness.TASK_PRESETS))}")
    sp.add_argument("--data", required=True, help="task JSONL")
    sp.add_argument("--languages", default=None, help="comma-separated override")
    sp.add_argument("--all-languages", action="store_true")
    sp.add_argument("--shots", type=int, default=None)
    sp.add_argument("--k", type=int, default=None)
    sp.add_argument("--max-new-tokens", type=int, default=None)
    sp.add_argument("--length-normalized", action="store_true")
    sp.add_argument("--judge", choices=["stub", "http", "none"], default="stub")
    sp.add_argument("--toxicity", choices=["stub", "http", "none"], default="stub")
    sp.add_argument("--concurrency", type=int, default=4)
    sp.add_argument("--model-id", default="toy")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="merge eval reports into markdown tables")
    sp.add_argument("--reports", nargs="+", required=True)
    sp.add_argument("--digits", type=int, default=1)
    common(sp)
    sp.set_defaults(func=cmd_report)
    return p


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(2, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except eval_clients.ExternalClientError as exc:
        return _fail(3, exc)
    except (UsageError, FileNotFoundError, architecture.ConfigError, datapipe.DataError, training.CheckpointError,
            harness.EvalError, ValueError, KeyError, OverflowError, OSError) as exc:
        return _fail(2, exc)
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal error", exc_info=True)
        return _fail(1, exc)


if __name__ == "__main__":
    sys.exit(main())
