"""Task evaluation loop: few-shot assembly, retrieval-ensembled prediction, metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import EmptyGeneration, TemplateError
from ..fusion import ensemble_choice, ensemble_generate
from ..lm import BOS_ID, LanguageModel, greedy_generate, score_answer
from ..retriever import RetrievalContext
from .metrics import exact_match, token_f1
from .templates import EvalExample, TaskSpec, build_query, render_prompt, render_shot_block

DEV_SUBSAMPLE_CAP = 2500  # dev-set evaluation cap


@dataclass
class EvalReport:
    task: str
    metric: str
    score: float
    n_examples: int
    rows: list[dict] = field(default_factory=list)


def _select_shots(examples: list[EvalExample], shot_pool: list[EvalExample] | None,
                  n_shots: int, seed: int) -> list[EvalExample]:
    if n_shots == 0:
        return []
    if not shot_pool:
        raise ValueError("n_shots > 0 requires a shot pool from the training split")
    eval_ids = {ex.id for ex in examples}
    rng = np.random.default_rng([seed, 509])
    picks = rng.permutation(len(shot_pool))[:n_shots]
    shots = [shot_pool[int(i)] for i in sorted(picks)]
    overlap = {s.id for s in shots} & eval_ids
    if overlap:
        raise ValueError(f"shot hygiene violated: ids {sorted(overlap)} are in the eval split")
    return shots


def evaluate_task(model: LanguageModel, retrieval: RetrievalContext | None,
                  spec: TaskSpec, examples: list[EvalExample], *, k: int = 10,
                  n_shots: int = 0, shot_pool: list[EvalExample] | None = None,
                  scorer: str | None = None, seed: int = 0,
                  max_examples: int = DEV_SUBSAMPLE_CAP,
                  max_new_tokens: int = 8) -> EvalReport:
    """Score a task; k=0 (or no retrieval context) evaluates closed-book."""
    scorer = scorer or spec.scorer
    if len(examples) > max_examples:
        rng = np.random.default_rng([seed, 1021])
        picks = sorted(rng.permutation(len(examples))[:max_examples])
        examples = [examples[int(i)] for i in picks]
    shots = _select_shots(examples, shot_pool, n_shots, seed)
    shot_blocks = []
    for shot in shots:
        background = None
        if retrieval is not None and k > 0:
            background = retrieval.weighted_chunks(build_query(spec, shot), 1)[0][0].text
        shot_blocks.append(render_shot_block(spec, shot, background))

    rows = []
    values = []
    for example in examples:
        prompt = render_prompt(spec, example)
        if spec.kind == "multi_choice":
            if not example.choices or len(example.choices) < 2:
                raise TemplateError(f"example {example.id} needs >= 2 choices")
            if example.golds[0] not in example.choices:
                raise TemplateError(f"example {example.id} gold is not among the choices")
        if retrieval is None or k == 0:
            prediction = _closed_book(model, spec, example, prompt, shot_blocks,
                                      scorer, max_new_tokens)
        else:
            retrieved = retrieval.weighted_chunks(build_query(spec, example), k)
            if spec.kind == "multi_choice":
                prediction, _ = ensemble_choice(model, example.choices, prompt, retrieved,
                                                scorer, fewshot_blocks=shot_blocks)
            else:
                try:
                    prediction, _ = ensemble_generate(model, prompt, retrieved,
                                                      max_new_tokens,
                                                      fewshot_blocks=shot_blocks)
                except EmptyGeneration:
                    prediction = ""
        value = _score_prediction(spec, prediction, example)
        values.append(value)
        rows.append({"id": example.id, "prediction": prediction, "value": value})
    score = float(np.mean(values)) if values else 0.0
    return EvalReport(task=spec.name, metric=spec.metric, score=score,
                      n_examples=len(examples), rows=rows)


def _closed_book(model, spec, example, prompt, shot_blocks, scorer, max_new_tokens):
    full = "".join(shot_blocks) + prompt
    if spec.kind == "multi_choice":
        scored = [(score_answer(model, full, c, scorer).value, i)
                  for i, c in enumerate(example.choices)]
        return example.choices[min(scored)[1]]
    prefix = [BOS_ID] + model.vocab.encode(full)
    seq, _ = greedy_generate(model, prefix, max_new_tokens)
    return model.vocab.decode(seq.ids).strip()


def _score_prediction(spec: TaskSpec, prediction: str, example: EvalExample) -> float:
    if spec.metric == "accuracy":
        return float(prediction == example.golds[0])
    if spec.metric == "exact_match":
        return float(exact_match(prediction, example.golds))
    return token_f1(prediction, example.golds)
