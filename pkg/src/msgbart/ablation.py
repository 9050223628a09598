"""Ablation rows: named model-switch overrides trained and evaluated in turn."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .config import RunConfig
from .data import Corpus
from .metrics import EvalReport
from .model import MsgBart
from .train import TrainResult, build_model, evaluate, train

ROWS: Dict[str, Dict[str, object]] = {
    "full": {},
    "no_graph_encoder": {"use_graph_encoder": False},
    "no_graph_decoder": {"use_graph_decoder": False},
    "no_graph": {"use_graph_encoder": False, "use_graph_decoder": False},
    "no_pointer": {"pointer_mode": "none"},
    "single_pointer": {"pointer_mode": "single"},
    "no_node_similarity": {"use_node_similarity": False},
    "no_triplet_similarity": {"use_triplet_similarity": False},
}
DEFAULT_ROWS = ("full", "no_graph_encoder", "no_graph_decoder", "no_graph", "no_pointer", "single_pointer")


def row_config(cfg: RunConfig, row: str) -> RunConfig:
    if row not in ROWS:
        raise KeyError(f"unknown ablation row {row!r}; known: {sorted(ROWS)}")
    out = copy.deepcopy(cfg)
    for key, value in ROWS[row].items():
        setattr(out.model, key, value)
    return out


@dataclass
class RowResult:
    row: str
    report: EvalReport
    log: List[dict]
    best_step: int

    def to_dict(self) -> dict:
        return {"row": self.row, "best_step": self.best_step, "report": self.report.to_dict()}


def run_row(cfg: RunConfig, row: str, train_corpus: Corpus, dev: Corpus, test: Corpus, out_dir: Optional[Path] = None) -> RowResult:
    rc = row_config(cfg, row)
    vocab = train_corpus.vocab()
    model = build_model(rc, train_corpus, vocab)
    ckpt = None if out_dir is None else str(out_dir / f"{row}.ckpt")
    sink = None if out_dir is None else open(out_dir / f"{row}.log.jsonl", "w")
    try:
        result: TrainResult = train(rc, model, train_corpus, dev, vocab, checkpoint=ckpt, sink=sink, meta={"row": row})
    finally:
        if sink is not None:
            sink.close()
    if ckpt is not None:
        model, _ = MsgBart.load(ckpt)
    report = evaluate(model, test, vocab, rc.decode)
    if out_dir is not None:
        (out_dir / f"{row}.report.json").write_text(report.dumps() + "\n")
    return RowResult(row, report, result.log, result.best_step)


def run_sweep(cfg: RunConfig, rows: Sequence[str], train_corpus: Corpus, dev: Corpus, test: Corpus, out_dir: Optional[Path] = None) -> List[RowResult]:
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    results = [run_row(cfg, r, train_corpus, dev, test, out_dir) for r in rows]
    if out_dir is not None:
        table = {"rows": [r.to_dict() for r in results]}
        (out_dir / "ablation.json").write_text(json.dumps(table, sort_keys=True, indent=2) + "\n")
    return results
