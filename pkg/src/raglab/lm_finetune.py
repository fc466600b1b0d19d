"""Retrieval-augmented instruction tuning.

Builds augmented fine-tuning instances (one per retrieved chunk, with the
given-context exceptions for summarization and reading comprehension),
serializes them with randomized field markers, packs them into
document-masked batches, and minimizes the label loss over a capped data
mixture.
"""
from __future__ import annotations

from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import ChunkStore
from .errors import (ContextOverflow, InvalidMixture, ParseError, RetrievalRequired,
                     TemplateError)
from .lm import AdamState, LanguageModel, TrainSchedule, train_step
from .retriever import RetrievalContext
from .vocab import BOS_ID, EOS_ID, PAD_ID, Vocabulary

CATEGORIES = ("dialogue", "open_qa", "reading_comprehension", "summarization", "cot")
GIVEN_CONTEXT_CATEGORIES = ("reading_comprehension", "summarization")

INST_START_MARKERS = ("Q:", "Question: ", "")
INST_END_MARKER = "\n"
ANSWER_START_MARKERS = ("A:", "Answer:")


@dataclass(frozen=True)
class Markers:
    inst_s: str
    inst_e: str
    answer_s: str


EVAL_MARKERS = Markers(inst_s="Q:", inst_e="\n", answer_s="A:")


def sample_markers(rng: np.random.Generator) -> Markers:
    return Markers(inst_s=INST_START_MARKERS[rng.integers(len(INST_START_MARKERS))],
                   inst_e=INST_END_MARKER,
                   answer_s=ANSWER_START_MARKERS[rng.integers(len(ANSWER_START_MARKERS))])


@dataclass
class FTExample:
    """One instruction-tuning example: instruction segment x and output segment y."""

    task_name: str
    category: str
    instruction: str
    output: str
    given_context: str | None = None
    self_contained_question: bool = False

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise TemplateError(f"unknown category {self.category!r}")
        if not self.output:
            raise ValueError("output segment must be non-empty")
        if self.category in GIVEN_CONTEXT_CATEGORIES and not self.given_context:
            raise ValueError(f"{self.category} examples must carry given_context")


@dataclass
class FTInstance:
    """A serialized training unit; the label mask covers exactly the output tokens."""

    ids: list[int]
    label_mask: list[bool]
    example_id: int | str
    background: str  # "given", "chunk:<id>", or "none"

    def __post_init__(self):
        if len(self.label_mask) != len(self.ids):
            raise ValueError("label_mask length mismatch")


def _mark(marker: str, text: str) -> str:
    if not marker:
        return text
    return marker + ("" if marker.endswith(" ") else " ") + text


def serialize_parts(example: FTExample, background: str | None,
                    markers: Markers = EVAL_MARKERS) -> tuple[str, str]:
    """Render (prompt, output) text for the example's category template.

    The prompt carries the optional Background field and ends right at the
    answer marker, so tokenizing the two parts separately yields an exact
    label-mask boundary.
    """
    bg = f"Background: {background}\n\n" if background is not None else ""
    cat = example.category
    if cat in ("open_qa", "reading_comprehension"):
        prompt = bg + _mark(markers.inst_s, example.instruction) + markers.inst_e + markers.answer_s
        return prompt, example.output
    if cat == "dialogue":
        turns = example.instruction.split("\n")
        rendered = " ".join(_mark("Q:" if i % 2 == 0 else "A:", t) for i, t in enumerate(turns))
        return bg + rendered + " A:", example.output
    if cat == "summarization":
        prompt = bg + "Summarize this article:" + markers.inst_e + markers.answer_s
        return prompt, example.output
    if cat == "cot":
        # rationale and final answer live together in the output field
        return bg + _mark(markers.inst_s, example.instruction) + markers.inst_e, example.output
    raise TemplateError(f"no template for category {cat!r}")


def serialize(example: FTExample, background: str | None,
              markers: Markers = EVAL_MARKERS) -> str:
    prompt, output = serialize_parts(example, background, markers)
    return prompt + " " + output


def query_text(example: FTExample) -> str:
    """Retrieval query for instance construction (same templates as evaluation)."""
    if example.category == "dialogue":
        return " ".join(example.instruction.split("\n"))
    return example.instruction


def _tokenized_instance(example: FTExample, background: str | None, markers: Markers,
                        vocab: Vocabulary, budget: int, example_id: int | str,
                        provenance: str) -> FTInstance:
    prompt, output = serialize_parts(example, background, markers)
    out_ids = vocab.encode(output)
    prompt_ids = vocab.encode(prompt)
    overflow = len(prompt_ids) + len(out_ids) - budget
    if overflow > 0:
        if background is None:
            raise ContextOverflow(
                f"instance needs {len(prompt_ids) + len(out_ids)} tokens, budget {budget}")
        words = background.split()
        keep = len(words) - overflow
        if keep < 0:
            raise ContextOverflow(
                f"instruction and output alone exceed the {budget}-token budget")
        prompt, output = serialize_parts(example, " ".join(words[:keep]), markers)
        prompt_ids = vocab.encode(prompt)
    return FTInstance(ids=prompt_ids + out_ids,
                      label_mask=[False] * len(prompt_ids) + [True] * len(out_ids),
                      example_id=example_id, background=provenance)


def make_instances(example: FTExample, retrieval: RetrievalContext | None, ktilde: int,
                   vocab: Vocabulary, window: int, markers_rng: np.random.Generator | None = None,
                   example_id: int | str = 0, mode: str = "ra-it") -> list[FTInstance]:
    """Build the instances for one example per its category rules.

    ra-it mode: open_qa/dialogue/cot get one instance per top-ktilde chunk;
    summarization and context-dependent reading comprehension use the given
    context only; self-contained reading comprehension gets ktilde+1. it mode
    skips retrieval entirely and builds a single instance.
    """
    if ktilde < 1:
        raise ValueError("ktilde must be >= 1")
    budget = window - 2  # room for the BOS/EOS pair added at packing time
    markers = sample_markers(markers_rng) if markers_rng is not None else EVAL_MARKERS

    def build(background, provenance):
        m = sample_markers(markers_rng) if markers_rng is not None else markers
        return _tokenized_instance(example, background, m, vocab, budget, example_id, provenance)

    cat = example.category
    uses_given = cat == "summarization" or (
        cat == "reading_comprehension" and not example.self_contained_question)
    if mode == "it":
        if example.given_context is not None and cat in GIVEN_CONTEXT_CATEGORIES:
            return [build(example.given_context, "given")]
        return [build(None, "none")]
    if mode != "ra-it":
        raise ValueError(f"unknown mode {mode!r}")

    if uses_given:
        return [build(example.given_context, "given")]
    instances = []
    if cat == "reading_comprehension":  # self-contained: given context plus retrieval
        instances.append(build(example.given_context, "given"))
    if retrieval is None:
        raise RetrievalRequired(f"category {cat!r} needs a retriever in ra-it mode")
    for chunk, _ in retrieval.weighted_chunks(query_text(example), ktilde):
        instances.append(build(chunk.text, f"chunk:{chunk.id}"))
    return instances


def completion_instance(chunk_text: str, chunk_id: int, vocab: Vocabulary,
                        window: int) -> FTInstance:
    """Plain-text completion unit for the unsupervised slice of the mixture."""
    ids = vocab.encode(chunk_text)[: window - 2]
    return FTInstance(ids=ids, label_mask=[True] * len(ids),
                      example_id=f"unsup:{chunk_id}", background="none")


@dataclass
class PackedBatch:
    """Token matrix with per-example document ids for block-diagonal attention."""

    ids: np.ndarray         # (B, S) int64
    label_mask: np.ndarray  # (B, S) bool
    doc_ids: np.ndarray     # (B, S) int64; padding gets unique negative ids
    instances: list[list[FTInstance]]  # per sequence, in packed order


def pack(instances: Sequence[FTInstance], window: int,
         rng: np.random.Generator | None = None,
         sequences_per_batch: int | None = None) -> list[PackedBatch]:
    """First-fit packing in shuffled order; every example is wrapped in BOS..EOS.

    The EOS terminator is included in the label region so the model learns to
    stop after the output segment.
    """
    order = list(range(len(instances)))
    if rng is not None:
        order = list(rng.permutation(len(instances)))
    bins: list[list[FTInstance]] = []
    space: list[int] = []
    for idx in order:
        inst = instances[idx]
        size = len(inst.ids) + 2
        if size > window:
            raise ContextOverflow(f"instance of {size} tokens cannot fit window {window}")
        for b, free in enumerate(space):
            if free >= size:
                bins[b].append(inst)
                space[b] -= size
                break
        else:
            bins.append([inst])
            space.append(window - size)

    batches = []
    step = sequences_per_batch or max(1, len(bins))
    for start in range(0, len(bins), step):
        group = bins[start:start + step]
        width = max(sum(len(i.ids) + 2 for i in seq) for seq in group)
        ids = np.full((len(group), width), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(group), width), dtype=bool)
        docs = np.zeros((len(group), width), dtype=np.int64)
        for row, seq in enumerate(group):
            pos = 0
            for doc_no, inst in enumerate(seq):
                n = len(inst.ids)
                ids[row, pos] = BOS_ID
                ids[row, pos + 1: pos + 1 + n] = inst.ids
                ids[row, pos + 1 + n] = EOS_ID
                mask[row, pos + 1: pos + 1 + n] = inst.label_mask
                mask[row, pos + 1 + n] = True
                docs[row, pos: pos + n + 2] = doc_no
                pos += n + 2
            docs[row, pos:] = -(np.arange(width - pos) + 1)
        batches.append(PackedBatch(ids=ids, label_mask=mask, doc_ids=docs, instances=group))
    return batches


@dataclass
class MixtureSpec:
    """Dataset sampling weights with the unsupervised/dialogue slices and per-dataset cap."""

    weights: dict[str, float] | None = None
    unsup_frac: float = 0.10
    dialogue_frac: float = 0.05
    cap: int = 7500


def capped_pool(items: Sequence, cap: int, seed: int, tag: int) -> list:
    """Seeded subsample of at most ``cap`` items, stable across runs."""
    if len(items) <= cap:
        return list(items)
    rng = np.random.default_rng([seed, tag, 1299709])
    picks = rng.permutation(len(items))[:cap]
    return [items[i] for i in sorted(picks)]


def _mixture_weights(names: list[str], sizes: dict[str, int], spec: MixtureSpec,
                     dialogue: frozenset[str] | set[str],
                     unsupervised: frozenset[str] | set[str]) -> np.ndarray:
    if spec.weights is not None:
        w = np.array([max(0.0, spec.weights.get(n, 0.0)) if sizes[n] > 0 else 0.0
                      for n in names])
    else:
        unsup = [n for n in names if n in unsupervised and sizes[n] > 0]
        dial = [n for n in names if n in dialogue and sizes[n] > 0]
        rest = [n for n in names if n not in unsupervised and n not in dialogue and sizes[n] > 0]
        unsup_mass = spec.unsup_frac if unsup else 0.0
        dial_mass = spec.dialogue_frac if dial else 0.0
        rest_mass = 1.0 - unsup_mass - dial_mass if rest else 0.0
        w = np.zeros(len(names))
        for group, mass in ((unsup, unsup_mass), (dial, dial_mass)):
            for n in group:
                w[names.index(n)] = mass / len(group)
        total_rest = sum(sizes[n] for n in rest)
        for n in rest:
            w[names.index(n)] = rest_mass * sizes[n] / total_rest
    if w.sum() <= 0:
        raise InvalidMixture("all mixture weights are zero")
    return w / w.sum()


def sample_mixture(datasets: Mapping[str, Sequence], spec: MixtureSpec, seed: int,
                   dialogue: frozenset[str] | set[str] = frozenset(),
                   unsupervised: frozenset[str] | set[str] = frozenset()) -> Iterator[tuple[str, object]]:
    """Infinite seeded stream of (dataset name, item) draws honoring the capped mixture."""
    names = sorted(datasets)
    pools = {n: capped_pool(datasets[n], spec.cap, seed, i) for i, n in enumerate(names)}
    sizes = {n: len(pools[n]) for n in names}
    weights = _mixture_weights(names, sizes, spec, dialogue, unsupervised)
    rng = np.random.default_rng([seed, 7919])
    while True:
        name = names[int(rng.choice(len(names), p=weights))]
        pool = pools[name]
        yield name, pool[int(rng.integers(len(pool)))]


@dataclass
class FTConfig:
    mode: str = "ra-it"
    ktilde: int = 3
    steps: int = 300
    batch_examples: int = 16
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    mixture: MixtureSpec = field(default_factory=MixtureSpec)
    eval_every: int = 0
    seed: int = 0


def ra_it_train(model: LanguageModel, datasets: dict[str, list[FTExample]],
                retrieval: RetrievalContext | None, config: FTConfig,
                unsup_store: ChunkStore | None = None,
                eval_fn=None) -> tuple[LanguageModel, list[dict]]:
    """Fine-tune on packed mixture batches; returns the best checkpoint seen.

    ``eval_fn(model) -> float`` (higher is better) drives early stopping when
    ``config.eval_every`` is set; without it the final parameters are returned.
    """
    if config.steps <= 0:
        return model, []
    rng = np.random.default_rng([config.seed, 104729])
    markers_rng = np.random.default_rng([config.seed, 15485863])

    pools: dict[str, list[FTInstance]] = {}
    dialogue_names: set[str] = set()
    for tag, name in enumerate(sorted(datasets)):
        examples = capped_pool(datasets[name], config.mixture.cap, config.seed, tag)
        instances: list[FTInstance] = []
        for i, ex in enumerate(examples):
            instances.extend(make_instances(
                ex, retrieval, config.ktilde, model.vocab, model.config.window,
                markers_rng=markers_rng, example_id=f"{name}:{i}", mode=config.mode))
        pools[name] = instances
        if examples and all(ex.category == "dialogue" for ex in examples):
            dialogue_names.add(name)
    unsup_names: set[str] = set()
    if unsup_store is not None and len(unsup_store) > 0:
        pools["unsup"] = [completion_instance(c.text, c.id, model.vocab, model.config.window)
                          for c in unsup_store.chunks]
        unsup_names.add("unsup")

    # caps were already applied example-side; disable re-capping of instances
    stream_spec = replace(config.mixture, cap=max(1, max(len(p) for p in pools.values())))
    stream = sample_mixture(pools, stream_spec, config.seed,
                            dialogue=dialogue_names, unsupervised=unsup_names)

    opt = AdamState(model.params, config.schedule)
    metrics: list[dict] = []
    best_score, best_params, best_step = -np.inf, None, -1
    for step in range(config.steps):
        batch_instances = [next(stream)[1] for _ in range(config.batch_examples)]
        loss = 0.0
        for batch in pack(batch_instances, model.config.window, rng=rng):
            loss = train_step(model, batch, opt)
        row = {"step": step + 1, "loss": loss}
        if eval_fn is not None and config.eval_every > 0 and (
                (step + 1) % config.eval_every == 0 or step + 1 == config.steps):
            score = float(eval_fn(model))
            row["dev_score"] = score
            if score > best_score:
                best_score, best_step = score, step + 1
                best_params = {k: v.copy() for k, v in model.params.items()}
        metrics.append(row)
    if best_params is not None:
        model.params = best_params
        metrics.append({"step": best_step, "selected": True, "dev_score": best_score})
    return model, metrics


def save_task_file(examples: Sequence[FTExample], path: str | Path) -> None:
    """Task file: task<TAB>category<TAB>instruction<TAB>output<TAB>context<TAB>self_contained."""
    from .corpus import _escape
    lines = []
    for ex in examples:
        ctx = _escape(ex.given_context) if ex.given_context is not None else ""
        lines.append("\t".join([ex.task_name, ex.category, _escape(ex.instruction),
                                _escape(ex.output), ctx, str(int(ex.self_contained_question))]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_task_file(path: str | Path) -> list[FTExample]:
    from .corpus import _unescape
    examples = []
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for offset, line in enumerate(lines):
        number = offset + 1
        fields = line.split("\t")
        if len(fields) != 6:
            raise ParseError(f"expected 6 tab-separated fields, got {len(fields)}", number)
        task, category, instruction, output, ctx, selfc = fields
        if selfc not in ("0", "1"):
            raise ParseError(f"self_contained flag must be 0 or 1, got {selfc!r}", number)
        try:
            examples.append(FTExample(
                task_name=task, category=category,
                instruction=_unescape(instruction, number), output=_unescape(output, number),
                given_context=_unescape(ctx, number) if ctx else None,
                self_contained_question=selfc == "1"))
        except (ValueError, TemplateError) as exc:
            raise ParseError(str(exc), number) from None
    return examples
