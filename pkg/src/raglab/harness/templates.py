"""Evaluation prompt and retrieval-query templates, plus the eval-file format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ParseError, TemplateError

TASK_KINDS = ("multi_choice", "short_generation", "dialogue")
METRICS = ("exact_match", "accuracy", "token_f1")
TEMPLATE_IDS = ("qa", "multi_choice", "dialogue")
CHOICE_LETTERS = "ABCDEFGH"


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    prompt_template: str
    query_template: str
    metric: str
    scorer: str = "nll"

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise TemplateError(f"unknown task kind {self.kind!r}")
        if self.metric not in METRICS:
            raise TemplateError(f"unknown metric {self.metric!r}")
        if self.prompt_template not in TEMPLATE_IDS or self.query_template not in TEMPLATE_IDS:
            raise TemplateError("unknown template id")
        if self.kind == "multi_choice" and self.metric != "accuracy":
            raise TemplateError("multi_choice tasks must use the accuracy metric")
        if self.kind != "multi_choice" and self.metric == "accuracy":
            raise TemplateError(f"{self.kind} tasks need exact_match or token_f1")


@dataclass
class EvalExample:
    id: str
    fields: dict
    golds: list[str]
    choices: list[str] | None = None

    def __post_init__(self):
        if not self.golds:
            raise ValueError("gold answers must be non-empty")


def _field(example: EvalExample, name: str) -> str:
    try:
        return example.fields[name]
    except KeyError:
        raise TemplateError(f"example {example.id} is missing template field {name!r}") from None


def _choice_lines(example: EvalExample) -> str:
    if not example.choices or len(example.choices) < 2:
        raise TemplateError(f"example {example.id} needs at least 2 choices")
    return "\n".join(f"{CHOICE_LETTERS[i]}. {c}" for i, c in enumerate(example.choices))


def render_prompt(spec: TaskSpec, example: EvalExample) -> str:
    """Render the instruction part of the prompt, ending at the answer marker.

    The Background field, when retrieval is on, is prepended by the fusion layer.
    """
    t = spec.prompt_template
    if t == "qa":
        return f"Q: {_field(example, 'question')}\nA:"
    if t == "multi_choice":
        return f"Question: {_field(example, 'question')}\n{_choice_lines(example)}\nA:"
    if t == "dialogue":
        turns = _field(example, "turns")
        if not isinstance(turns, list) or not turns:
            raise TemplateError(f"example {example.id} needs a non-empty turns list")
        parts = [f"{'Q:' if i % 2 == 0 else 'A:'} {t}" for i, t in enumerate(turns)]
        return "\n".join(parts) + "\nA:"
    raise TemplateError(f"unknown prompt template {t!r}")


def build_query(spec: TaskSpec, example: EvalExample) -> str:
    """Retrieval query text; used identically at training and evaluation time."""
    t = spec.query_template
    if t == "qa":
        return _field(example, "question")
    if t == "multi_choice":
        return f"{_field(example, 'question')}\n{_choice_lines(example)}"
    if t == "dialogue":
        turns = _field(example, "turns")
        if not isinstance(turns, list) or not turns:
            raise TemplateError(f"example {example.id} needs a non-empty turns list")
        return " ".join(turns)
    raise TemplateError(f"unknown query template {t!r}")


def render_shot_block(spec: TaskSpec, example: EvalExample,
                      background: str | None = None) -> str:
    """A completed in-context example, optionally with its own top-1 Background."""
    body = f"{render_prompt(spec, example)} {example.golds[0]}\n\n"
    if background is not None:
        return f"Background: {background}\n\n{body}"
    return body


def save_eval_file(spec: TaskSpec, examples: list[EvalExample], path: str | Path) -> None:
    """JSONL eval file: a task-spec header line followed by one example per line."""
    lines = [json.dumps({"task": spec.name, "kind": spec.kind,
                         "prompt_template": spec.prompt_template,
                         "query_template": spec.query_template,
                         "metric": spec.metric, "scorer": spec.scorer}, sort_keys=True)]
    for ex in examples:
        record = {"id": ex.id, "fields": ex.fields, "golds": ex.golds}
        if ex.choices is not None:
            record["choices"] = ex.choices
        lines.append(json.dumps(record, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_eval_file(path: str | Path) -> tuple[TaskSpec, list[EvalExample]]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty eval file", 1)
    try:
        header = json.loads(lines[0])
        spec = TaskSpec(name=header["task"], kind=header["kind"],
                        prompt_template=header["prompt_template"],
                        query_template=header["query_template"],
                        metric=header["metric"], scorer=header.get("scorer", "nll"))
    except (json.JSONDecodeError, KeyError, TemplateError) as exc:
        raise ParseError(f"bad eval file header: {exc}", 1) from None
    examples = []
    for offset, line in enumerate(lines[1:]):
        number = offset + 2
        try:
            rec = json.loads(line)
            examples.append(EvalExample(id=rec["id"], fields=rec["fields"],
                                        golds=rec["golds"], choices=rec.get("choices")))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ParseError(f"bad eval example: {exc}", number) from None
    return spec, examples
