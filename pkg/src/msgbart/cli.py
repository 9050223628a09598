"""Command-line entry point: ``msgbart <command> ...``.

Machine-readable JSON goes to stdout, human logs to stderr.  Exit codes:
0 success, 1 usage or config error, 2 runtime contract violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T

log = logging.getLogger("msgbart")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SPLITS = ("train", "dev", "test")


class UsageError(Exception):
    pass


class ContractError(Exception):
    pass


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _load_config(path: Optional[str]):
    from .config import ConfigError, load_config

    try:
        return load_config(path)
    except FileNotFoundError as exc:
        raise UsageError(f"config not found: {path}") from exc
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _load_split(data: str, split: str):
    from .data import load_corpus

    root = Path(data)
    if not (root / f"{split}.jsonl").exists():
        raise UsageError(f"{root}: no {split}.jsonl; run gen-data first")
    return load_corpus(root, f"{split}.jsonl")


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .data import generate_world, kind_counts, save_corpus, split, write_instances

    cfg = _load_config(args.config)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {out}: {exc}") from exc
    corpus = generate_world(cfg.world)
    try:
        save_corpus(out, corpus)
    except OSError as exc:
        raise UsageError(f"cannot write corpus to {out}: {exc}") from exc
    parts = split(corpus, cfg.split.ratios, cfg.split.seed)
    stats = {
        "videos": len(corpus.video_ids()),
        "instances": len(corpus.instances),
        "vocab_size": len(corpus.vocab()),
        "kinds": kind_counts(corpus.instances),
        "splits": {},
    }
    for name in SPLITS:
        vids = set(parts[name])
        insts = [i for i in corpus.instances if i.video_id in vids]
        write_instances(out / f"{name}.jsonl", insts)
        stats["splits"][name] = {"videos": len(vids), "instances": len(insts), "kinds": kind_counts(insts)}
    (out / "splits.json").write_text(json.dumps(parts, sort_keys=True, indent=1) + "\n")
    (out / "stats.json").write_text(json.dumps(stats, sort_keys=True, indent=1) + "\n")
    log.info("wrote %d instances over %d videos to %s", stats["instances"], stats["videos"], out)
    _emit(stats)
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import build_model, train

    cfg = _load_config(args.config)
    if args.steps is not None:
        cfg.train.steps = args.steps
    train_corpus = _load_split(args.data, "train")
    dev = _load_split(args.data, "dev") if not args.no_dev else None
    if train_corpus.world is not None and train_corpus.world.to_dict() != cfg.world.to_dict():
        log.warning("corpus was generated with a different world config than --config")
    vocab = train_corpus.vocab()
    model = build_model(cfg, train_corpus, vocab)
    ckpt = Path(args.out_checkpoint)
    log_path = Path(args.log) if args.log else ckpt.with_suffix(".log.jsonl")
    log.info("training %d parameters for %d steps", model.params.count(), cfg.train.steps)
    with open(log_path, "w") as sink:
        result = train(cfg, model, train_corpus, dev, vocab, checkpoint=str(ckpt), sink=sink, meta={"run_config": cfg.to_dict()})
    _emit({"checkpoint": str(ckpt), "log": str(log_path), "best_step": result.best_step, "best_dev_accuracy": result.best_dev, "steps": cfg.train.steps})
    return EXIT_OK


def config_diff(a: dict, b: dict, prefix: str = "") -> List[str]:
    keys = []
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k, "<missing>"), b.get(k, "<missing>")
        if isinstance(va, dict) and isinstance(vb, dict):
            keys.extend(config_diff(va, vb, f"{prefix}{k}."))
        elif va != vb:
            keys.append(f"{prefix}{k}")
    return keys


def cmd_eval(args) -> int:
    from .config import DecodeConfig
    from .model import CheckpointError, MsgBart
    from .train import evaluate

    try:
        model, head = MsgBart.load(args.checkpoint)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {args.checkpoint}") from exc
    except CheckpointError as exc:
        raise ContractError(str(exc)) from exc
    decode = DecodeConfig()
    if args.config:
        cfg = _load_config(args.config)
        diff = config_diff(cfg.model.to_dict(), head["config"])
        if diff:
            raise ContractError("config and checkpoint disagree on: " + ", ".join(f"model.{k}" for k in diff))
        decode = cfg.decode
    elif "run_config" in head.get("extra", {}):
        decode = DecodeConfig(**head["extra"]["run_config"]["decode"])
    if args.decode:
        decode.strategy = args.decode
    if args.beam is not None:
        decode.beam_size = args.beam
    if args.penalty is not None:
        decode.penalty = args.penalty
    corpus = _load_split(args.data, args.split)
    vocab = corpus.vocab()
    if "vocab" in head and head["vocab"] != vocab.itos:
        raise ContractError("checkpoint vocabulary differs from the corpus vocabulary")
    report = evaluate(model, corpus, vocab, decode)
    if args.out:
        Path(args.out).write_text(report.dumps() + "\n")
    sys.stdout.write(report.dumps() + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import EPS_SWEEP, GRADCHECK_THRESHOLD, run_gradcheck, small_model_config

    if T.get_mode() != "f64":
        log.info("switching to 64-bit mode for gradient checks")
        T.set_mode("f64")
    cfg = _load_config(args.config)
    model_cfg = cfg.model if args.full_width else small_model_config(cfg.model)
    gate = args.eps
    sweep = sorted(set(EPS_SWEEP) | {gate}, reverse=True) if not args.no_sweep else [gate]
    results = run_gradcheck(model_cfg, sweep, seed=cfg.model.seed)
    table: Dict[str, Dict[str, float]] = {}
    worst = ("", "", 0.0)
    for r in results:
        name, err = r.worst
        table.setdefault(f"{r.eps:g}", {})[r.module] = err
        if r.eps == gate and err > worst[2]:
            worst = (r.module, name, err)
    passed = bool(worst[2] < GRADCHECK_THRESHOLD)
    _emit({"eps": gate, "threshold": GRADCHECK_THRESHOLD, "max_rel_error": table, "worst": {"module": worst[0], "param": worst[1], "rel_error": worst[2]}, "passed": passed})
    if not passed:
        log.error("gradient check failed: %s (%s) rel error %.3g at eps=%g", worst[1], worst[0], worst[2], gate)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_graph(args) -> int:
    from .data import load_assets, load_labels
    from .lm import Vocab
    from .model import MsgBart, collate, label_token_ids
    from .scenegraph import rn_transform
    from .train import build_model

    root = Path(args.assets)
    if not (root / "labels.json").exists():
        raise UsageError(f"{root}: not a corpus directory (no labels.json)")
    labels = load_labels(root)
    try:
        graph, track = load_assets(root, args.video_id, labels)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    frames = range(len(graph.frames)) if args.frame is None else [args.frame]
    if args.frame is not None and not 0 <= args.frame < len(graph.frames):
        raise UsageError(f"frame {args.frame} out of range 0..{len(graph.frames) - 1}")

    if args.rn:
        out = []
        for j in frames:
            rn = rn_transform(graph.frames[j])
            names = [labels.objects[l] if k == "object" else labels.relations[l] for k, l in zip(rn.node_kinds, rn.node_labels)]
            out.append({
                "frame": j,
                "nodes": [{"index": i, "kind": k, "id": n, "label": name} for i, (k, n, name) in enumerate(zip(rn.node_kinds, rn.node_ids, names))],
                "edges": [[int(s), int(t)] for t, s in zip(*np.nonzero(rn.adjacency))],
                "num_nodes": rn.num_nodes,
                "num_edges": int(rn.adjacency.sum()),
            })
        _emit({"video_id": args.video_id, "frames": out})
        return EXIT_OK

    if args.checkpoint:
        model, head = MsgBart.load(args.checkpoint)
        vocab = Vocab(head["vocab"])
    else:
        from .config import RunConfig
        from .data import build_vocab

        vocab = build_vocab(labels)
        model = MsgBart(RunConfig().model, len(vocab), len(labels.objects), len(labels.relations), label_token_ids(vocab, labels))
        log.info("no checkpoint given; scores come from an untrained model")
    from .data import DialogueInstance

    question = args.question or ""
    inst = DialogueInstance(args.video_id, [], question, "", "graph_dependent")
    batch = collate([inst], [graph], [track], vocab, model.cfg.lm.max_len)
    ctx = model.encode(batch)
    out = []
    for j in frames:
        frame = graph.frames[j]
        if args.rank:
            rn = rn_transform(frame)
            scores = ctx.node_scores[0, j, : rn.num_nodes] if ctx.node_scores is not None else np.zeros(rn.num_nodes)
            names = [labels.objects[l] if k == "object" else labels.relations[l] for k, l in zip(rn.node_kinds, rn.node_labels)]
            order = sorted(range(rn.num_nodes), key=lambda i: (-scores[i], i))
            out.append({"frame": j, "ranking": [{"index": i, "kind": rn.node_kinds[i], "label": names[i], "score": float(scores[i])} for i in order]})
        else:
            label = dict(frame.objects)
            n = len(frame.relations)
            scores = ctx.triplet_scores[0, j, :n] if ctx.triplet_scores is not None else np.zeros(n)
            out.append({
                "frame": j,
                "triplets": [
                    {"src": labels.objects[label[s]], "rel": labels.relations[r], "dst": labels.objects[label[d]], "class": c, "score": float(scores[t])}
                    for t, (s, r, d, c) in enumerate(frame.relations)
                ],
            })
    _emit({"video_id": args.video_id, "question": question, "frames": out})
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import DEFAULT_ROWS, ROWS, run_sweep
    from .plots import render_run_dir

    cfg = _load_config(args.config)
    if args.steps is not None:
        cfg.train.steps = args.steps
    rows = args.rows.split(",") if args.rows else list(DEFAULT_ROWS)
    unknown = [r for r in rows if r not in ROWS]
    if unknown:
        raise UsageError(f"unknown ablation rows {unknown}; known: {sorted(ROWS)}")
    train_corpus = _load_split(args.data, "train")
    dev, test = _load_split(args.data, "dev"), _load_split(args.data, "test")
    out = Path(args.out)
    results = run_sweep(cfg, rows, train_corpus, dev, test, out)
    figures = [str(p) for p in render_run_dir(out)]
    for r in results:
        log.info("%-22s acc %.3f  graph %.3f", r.row, r.report.answer_accuracy, r.report.per_kind_accuracy.get("graph_dependent", 0.0))
    _emit({"rows": [r.to_dict() for r in results], "figures": figures})
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plots import render_run_dir

    figures = render_run_dir(args.run_dir)
    if not figures:
        raise UsageError(f"{args.run_dir}: no logs or ablation table to plot")
    _emit({"figures": [str(p) for p in figures]})
    return EXIT_OK


def cmd_schema(args) -> int:
    from .config import config_schema

    sys.stdout.write(json.dumps(config_schema(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msgbart", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate the synthetic corpus and split files")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", help="train a model and keep the best-dev checkpoint")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out-checkpoint", required=True)
    s.add_argument("--log", help="JSON-lines training log (default: next to the checkpoint)")
    s.add_argument("--steps", type=int, help="override train.steps")
    s.add_argument("--no-dev", action="store_true", help="skip dev evaluation; save the final weights")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="decode a split and print an evaluation report")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=SPLITS, default="test")
    s.add_argument("--decode", choices=("greedy", "beam"))
    s.add_argument("--beam", type=int)
    s.add_argument("--penalty", type=float)
    s.add_argument("--config", help="fail if its model section differs from the checkpoint")
    s.add_argument("--out", help="also write the report here")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks (64-bit)")
    s.add_argument("--config")
    s.add_argument("--eps", type=float, default=1e-4, help="step size that decides pass/fail")
    s.add_argument("--no-sweep", action="store_true", help="only run the gating step size")
    s.add_argument("--full-width", action="store_true", help="check the configured width instead of a narrow copy")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("graph", help="inspect a video's scene graphs")
    s.add_argument("--assets", required=True, help="corpus directory")
    s.add_argument("--video-id", required=True)
    s.add_argument("--frame", type=int)
    s.add_argument("--checkpoint")
    mode = s.add_mutually_exclusive_group(required=True)
    mode.add_argument("--rn", action="store_true", help="relational-node transform")
    mode.add_argument("--rank", action="store_true", help="node ranking against --question")
    mode.add_argument("--triplets", action="store_true", help="triplets with question similarity")
    s.add_argument("--question")
    s.set_defaults(fn=cmd_graph)

    s = sub.add_parser("ablate", help="train and evaluate ablation rows; write reports and figures")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rows", help="comma-separated row names")
    s.add_argument("--steps", type=int)
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("plot", help="re-render figures for an ablation directory")
    s.add_argument("run_dir")
    s.set_defaults(fn=cmd_plot)

    s = sub.add_parser("schema", help="print the run-config JSON schema")
    s.set_defaults(fn=cmd_schema)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "graph" and args.rank and not args.question:
        log.error("--rank needs --question")
        return EXIT_USAGE
    try:
        return args.fn(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (ContractError, ValueError, KeyError, IndexError, RuntimeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
