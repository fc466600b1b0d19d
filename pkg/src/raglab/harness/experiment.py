"""Experiment orchestration: evaluate arm x task x k x shots grids from checkpoints."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..config import config_hash
from ..corpus import load_store
from ..errors import ArtifactMissing
from ..lm import load_checkpoint
from ..retriever import RetrievalContext, load_encoders, load_index
from .evaluate import evaluate_task
from .templates import load_eval_file


@dataclass(frozen=True)
class ArmSpec:
    """One model arm; arms without a retriever are evaluated closed-book."""

    name: str
    lm_ckpt: str
    encoder_ckpt: str | None = None
    index_path: str | None = None


@dataclass
class GridConfig:
    arms: list[ArmSpec] = field(default_factory=list)
    task_paths: list[str] = field(default_factory=list)
    store_path: str | None = None
    ks: list[int] = field(default_factory=lambda: [10])
    shots: list[int] = field(default_factory=lambda: [0])
    shots_path: str | None = None
    seed: int = 0
    max_examples: int = 2500
    max_new_tokens: int = 8

    def describe(self) -> dict:
        return {"arms": [[a.name, a.lm_ckpt, a.encoder_ckpt, a.index_path] for a in self.arms],
                "task_paths": self.task_paths, "store_path": self.store_path,
                "ks": self.ks, "shots": self.shots, "shots_path": self.shots_path,
                "seed": self.seed, "max_examples": self.max_examples,
                "max_new_tokens": self.max_new_tokens}


def _require(path: str | None, what: str) -> str:
    if path is None or not Path(path).exists():
        raise ArtifactMissing(f"{what} not found: {path}")
    return path


def run_experiment(grid: GridConfig, out_dir: str | Path | None = None) -> list[dict]:
    """Evaluate every grid cell; returns (and optionally writes) one row per cell."""
    rows: list[dict] = []
    grid_hash = config_hash(grid.describe())
    if grid.arms and grid.task_paths:
        store = None
        retrieval_needed = any(a.encoder_ckpt for a in grid.arms)
        if retrieval_needed:
            store = load_store(_require(grid.store_path, "chunk store"))
        shot_pool = None
        if grid.shots_path is not None:
            _, shot_pool = load_eval_file(_require(grid.shots_path, "shot pool"))
        tasks = [load_eval_file(_require(p, "task file")) for p in grid.task_paths]
        for arm in grid.arms:
            model = load_checkpoint(_require(arm.lm_ckpt, f"arm {arm.name} LM checkpoint"))
            retrieval = None
            if arm.encoder_ckpt is not None:
                query_enc, _ = load_encoders(_require(arm.encoder_ckpt,
                                                      f"arm {arm.name} encoder"))
                index = load_index(_require(arm.index_path, f"arm {arm.name} index"), store)
                retrieval = RetrievalContext(store=store, index=index, query_encoder=query_enc)
            ks = grid.ks if retrieval is not None else [0]
            for spec, examples in tasks:
                for k in ks:
                    for n_shots in grid.shots:
                        report = evaluate_task(
                            model, retrieval, spec, examples, k=k, n_shots=n_shots,
                            shot_pool=shot_pool, seed=grid.seed,
                            max_examples=grid.max_examples,
                            max_new_tokens=grid.max_new_tokens)
                        rows.append({"arm": arm.name, "task": spec.name, "k": k,
                                     "shots": n_shots, "metric": report.metric,
                                     "value": report.score, "seed": grid.seed,
                                     "config_hash": grid_hash})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.jsonl").write_text(
            "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
        (out / "summary.txt").write_text(_summary(rows), encoding="utf-8")
    return rows


def _summary(rows: list[dict]) -> str:
    if not rows:
        return "no results\n"
    header = f"{'arm':<16} {'task':<12} {'k':>3} {'shots':>5} {'metric':<12} {'value':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['arm']:<16} {r['task']:<12} {r['k']:>3} {r['shots']:>5} "
                     f"{r['metric']:<12} {r['value']:>8.4f}")
    return "\n".join(lines) + "\n"
