"""Command-line surface.

Subcommands: gen-data, train, eval, generate, gradcheck, retrieve, ablate.
Exit codes: 0 success, 1 validation error (bad files, flags, or configs),
2 runtime/numeric error (including a failed gradient check or ablation run).
Commands that create an --out directory refuse to reuse an existing one
unless --force is given; all file writes inside go through temp+rename.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import DecodeConfig, load_config
from .data import generate_synthetic, load_dataset, save_dataset
from .errors import (CheckpointError, ConfigError, ContractError, DatasetError,
                     MmkError, NumericError, ReproducibilityError, SchemaError,
                     StepUnderflowError)
from .generation import generate_from_record
from .knowledge import index_knowledge, load_kb, retrieve, save_kb
from .metrics import rows_to_csv, rows_to_markdown, format_row
from .model import init_params, multitask_forward, prepare_record, prepare_records
from .tensor import add, finite_diff_check, scale
from .text import Vocabulary, build_vocab, tokenize
from .training import (evaluate_generation, run_ablation, split_dataset,
                       train_loop)

TASK_CHOICES = ("sum", "mcs", "di")


def _prepare_out_dir(path_str: str, force: bool) -> Path:
    out = Path(path_str)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"--out {out} already exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _load_ckpt_and_vocab(ckpt_path: str):
    params, header = ckpt_io.load_checkpoint(ckpt_path)
    vocab_path = Path(ckpt_path).parent / "vocab.json"
    if not vocab_path.exists():
        raise CheckpointError(f"no vocab.json next to checkpoint {ckpt_path}")
    vocab = Vocabulary.load(vocab_path)
    ckpt_io.verify_vocab(header, vocab)
    return params, header, vocab


def _decode_cfg(args) -> DecodeConfig:
    strategy = "greedy" if args.beam == 1 else "beam"
    cfg = DecodeConfig(strategy=strategy, beam_width=args.beam,
                       max_new_tokens=args.max_new, length_penalty=args.alpha)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    dialogues, kb = generate_synthetic(args.n, seed=args.seed, d_vis=args.dvis)
    save_dataset(dialogues, out / "dialogues.jsonl")
    save_kb(kb, out / "kb.jsonl")
    print(f"wrote {len(dialogues)} dialogues and {len(kb)} knowledge entries to {out}")
    return 0


def _parse_tasks(raw: str) -> tuple[str, ...]:
    tasks = tuple(t.strip() for t in raw.split(",") if t.strip())
    bad = [t for t in tasks if t not in TASK_CHOICES]
    if bad or not tasks:
        raise ConfigError(f"--tasks must be a comma list from {TASK_CHOICES}, got {raw!r}")
    return tasks


def cmd_train(args) -> int:
    exp = load_config(args.config)
    out = _prepare_out_dir(args.out, args.force)
    dialogues = load_dataset(args.data, expected_d_vis=exp.model.d_vis)
    kb = load_kb(args.kb) if args.kb else []
    tasks = _parse_tasks(args.tasks)
    result = train_loop(dialogues, kb, exp.model, exp.train, tasks, out_dir=out)
    print(f"trained {exp.train.max_steps} steps; best dev loss "
          f"{result.best_dev_loss:.4f} at step {result.best_step}; artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    params, header, vocab = _load_ckpt_and_vocab(args.ckpt)
    cfg = params.cfg
    dialogues = load_dataset(args.data, expected_d_vis=cfg.d_vis)
    kb_index = index_knowledge(load_kb(args.kb)) if args.kb else None
    splits = split_dataset(dialogues, args.split_mode, args.salt)
    part = dialogues if args.split == "all" else splits[args.split]
    if not part:
        raise DatasetError(f"split {args.split!r} selected no records")
    records = prepare_records(part, vocab, kb_index, cfg, args.k)
    dcfg = _decode_cfg(args)
    rows = []
    for task in TASK_CHOICES:
        report = evaluate_generation(records, part, task, params, vocab, dcfg)
        rows.append(format_row(task, report))
    header_cols = ("task", "B-1", "B-2", "B-3", "B-4", "BLEU", "R-1", "R-2",
                   "ROUGE-L", "METEOR", "Jaccard", "EmbedSim")
    csv_text = rows_to_csv(rows, header=header_cols)
    _atomic_write(Path(args.report), csv_text)
    _atomic_write(Path(args.report).with_suffix(".md"), rows_to_markdown(rows, header_cols))
    print(csv_text, end="")
    return 0


def cmd_generate(args) -> int:
    params, header, vocab = _load_ckpt_and_vocab(args.ckpt)
    cfg = params.cfg
    kb_index = index_knowledge(load_kb(args.kb)) if args.kb else None
    if args.input == "-":
        import io
        import tempfile
        with tempfile.NamedTemporaryFile("w", suffix=".jsonl", delete=False) as tmp:
            tmp.write(sys.stdin.read())
            source = tmp.name
    else:
        source = args.input
    dialogues = load_dataset(source, expected_d_vis=cfg.d_vis)
    dcfg = _decode_cfg(args)
    for dlg in dialogues:
        record = prepare_record(dlg, vocab, kb_index, cfg, args.k)
        text, score = generate_from_record(record, args.task, params, vocab, dcfg)
        print(json.dumps({"id": dlg.id, "task": args.task, "output": text,
                          "score": score}, ensure_ascii=False))
    return 0


def gradcheck_setup(exp):
    """Tiny fixed corpus + fresh params for the full-model gradient check.

    Modality vectors are live (synthetic visuals plus retrieved knowledge)
    so attention, FFN, layer norms, embeddings, and both adapter blocks all
    sit on the gradient path of the joint three-task loss."""
    dialogues, kb = generate_synthetic(2, seed=1234, d_vis=exp.model.d_vis)
    corpus = [u.text for d in dialogues for u in d.utterances]
    corpus += [d.target_for(t) for d in dialogues for t in TASK_CHOICES]
    vocab = build_vocab(corpus, min_freq=1)
    cfg = exp.model.with_vocab(len(vocab))
    records = prepare_records(dialogues, vocab, index_knowledge(kb), cfg,
                              exp.train.retrieval_k)
    params = init_params(cfg, seed=exp.train.seed)

    def loss_fn(named):
        losses = multitask_forward(records, TASK_CHOICES, params, train_mode=False)
        total = None
        for task in TASK_CHOICES:
            total = losses[task] if total is None else add(total, losses[task])
        return scale(total, 1.0 / len(TASK_CHOICES))

    return params, loss_fn


def cmd_gradcheck(args) -> int:
    exp = load_config(args.config)
    params, loss_fn = gradcheck_setup(exp)
    report = finite_diff_check(loss_fn, params.named, eps=args.eps, tol=args.tol,
                               max_coords_per_block=args.max_coords)
    print(report.summary())
    return 0 if report.passed else 2


def cmd_retrieve(args) -> int:
    idx = index_knowledge(load_kb(args.kb))
    results = retrieve(tokenize(args.query), idx, k=args.k)
    payload = [{"term": s.term, "description": s.description, "score": score}
               for s, score in results]
    print(json.dumps(payload, ensure_ascii=False, indent=2))
    return 0


def cmd_ablate(args) -> int:
    exp = load_config(args.config)
    out = _prepare_out_dir(args.out, args.force)
    dialogues = load_dataset(args.data, expected_d_vis=exp.model.d_vis)
    kb = load_kb(args.kb) if args.kb else []
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    outcome = run_ablation(dialogues, kb, exp, seeds, out_dir=out)
    print(outcome.markdown_text)
    if outcome.failures:
        print(f"{len(outcome.failures)} run(s) failed; see report", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_decode_flags(p, beam_default: int, alpha_default: float):
    p.add_argument("--beam", type=int, default=beam_default,
                   help="beam width (1 = greedy)")
    p.add_argument("--max-new", type=int, default=48, dest="max_new",
                   help="maximum generated tokens")
    p.add_argument("--alpha", type=float, default=alpha_default,
                   help="length penalty exponent")
    p.add_argument("--k", type=int, default=3, help="knowledge snippets to retrieve")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmksum",
        description="Multi-task knowledge-infused dialogue summarizer (desk scale)",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus + knowledge base",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--n", type=int, default=500, help="number of dialogues")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--dvis", type=int, default=20, help="visual feature dimension")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite an existing --out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--data", required=True, help="dataset JSONL")
    p.add_argument("--config", default="desk-default",
                   help="config file path or builtin name")
    p.add_argument("--tasks", default="sum,mcs,di", help="comma list of tasks to learn")
    p.add_argument("--kb", default=None, help="knowledge base JSONL")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite an existing --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score generations against gold targets",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", required=True, help="checkpoint file (vocab.json beside it)")
    p.add_argument("--data", required=True, help="dataset JSONL")
    p.add_argument("--kb", default=None, help="knowledge base JSONL")
    p.add_argument("--split", default="test", choices=("train", "dev", "test", "all"),
                   help="which split to score")
    p.add_argument("--split-mode", default="hash", choices=("hash", "none"),
                   dest="split_mode", help="split scheme used at training time")
    p.add_argument("--salt", default="mmksum-split-v1", help="split hash salt")
    p.add_argument("--report", required=True, help="CSV report path (writes .md too)")
    _add_decode_flags(p, beam_default=4, alpha_default=0.6)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="decode one task for each input dialogue",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", required=True, help="checkpoint file (vocab.json beside it)")
    p.add_argument("--input", required=True, help="dialogue JSONL path, or - for stdin")
    p.add_argument("--task", required=True, choices=TASK_CHOICES, help="which output")
    p.add_argument("--kb", default=None, help="knowledge base JSONL")
    _add_decode_flags(p, beam_default=1, alpha_default=0.0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--config", default="test-nano", help="config file path or builtin name")
    # 1e-6 keeps ReLU-kink bias (~eps) below tol while rounding noise stays ~1e-9
    p.add_argument("--eps", type=float, default=1e-6, help="central-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error to pass")
    p.add_argument("--max-coords", type=int, default=8, dest="max_coords",
                   help="sampled coordinates per parameter block")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("retrieve", help="query the knowledge base",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--kb", required=True, help="knowledge base JSONL")
    p.add_argument("--query", required=True, help="free-text query")
    p.add_argument("--k", type=int, default=3, help="results to return")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("ablate", help="run the four-row task-subset ablation grid",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--data", required=True, help="dataset JSONL")
    p.add_argument("--config", default="desk-default",
                   help="config file path or builtin name")
    p.add_argument("--kb", default=None, help="knowledge base JSONL")
    p.add_argument("--seeds", default="0,1,2", help="comma list of seeds")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite an existing --out")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SchemaError, ConfigError, ContractError, DatasetError,
            CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, ReproducibilityError, StepUnderflowError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except MmkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
