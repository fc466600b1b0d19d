"""Parallel in-context retrieval augmentation.

Each retrieved chunk is rendered into its own Background-prefixed prompt; the
language model scores (or decodes) every augmented prompt independently and
the outputs are mixed by the re-normalized retrieval weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .corpus import Chunk
from .errors import ContextOverflow, EmptyGeneration, InvalidAnswer
from .lm import LanguageModel, SCORERS, greedy_generate, log_prob
from .vocab import BOS_ID, split_words

BACKGROUND_START = "Background: "
BACKGROUND_END = "\n\n"


@dataclass
class AugmentedPrompt:
    """A Background-prefixed prompt plus a record of anything truncation removed."""

    chunk_id: int
    text: str
    dropped_blocks: list[int] = field(default_factory=list)  # 1-based few-shot indices
    dropped_background_words: int = 0

    @property
    def truncated(self) -> bool:
        return bool(self.dropped_blocks) or self.dropped_background_words > 0


def _count(text: str) -> int:
    return len(split_words(text))


def _assemble(blocks: list[str], background: str, prompt: str) -> str:
    return "".join(blocks) + BACKGROUND_START + background + BACKGROUND_END + prompt


def build_augmented_prompt(chunk: Chunk, prompt: str, window: int,
                           fewshot_blocks: tuple[str, ...] | list[str] = ()) -> AugmentedPrompt:
    """Prepend the chunk as a Background field, fitting the token window.

    If the assembly overflows, whole few-shot blocks are dropped oldest-first,
    then the background chunk is tail-truncated. The instruction itself is
    never cut; if it cannot fit alone, ContextOverflow is raised. ``window``
    here is the budget for the prompt text only; callers reserve room for the
    answer and the BOS marker before calling.
    """
    if not prompt:
        raise ValueError("prompt must be non-empty")
    blocks = list(fewshot_blocks)
    if _count(_assemble([], "", prompt)) > window:
        raise ContextOverflow(
            f"instruction alone needs {_count(prompt) + 1} tokens, window is {window}")
    dropped: list[int] = []
    while blocks and _count(_assemble(blocks, chunk.text, prompt)) > window:
        blocks.pop(0)
        dropped.append(len(dropped) + 1)
    background = chunk.text
    overflow = _count(_assemble(blocks, background, prompt)) - window
    dropped_words = 0
    if overflow > 0:
        words = split_words(background)
        keep = max(0, len(words) - overflow)
        dropped_words = len(words) - keep
        background = " ".join(words[:keep])
    return AugmentedPrompt(chunk_id=chunk.id, text=_assemble(blocks, background, prompt),
                           dropped_blocks=dropped, dropped_background_words=dropped_words)


def _logsumexp(values: list[float]) -> float:
    m = max(values)
    if math.isinf(m):
        return m
    return m + math.log(sum(math.exp(v - m) for v in values))


def _augmented_logprobs(model: LanguageModel, candidate_ids: list[int], prompt: str,
                        retrieved: list[tuple[Chunk, float]],
                        fewshot_blocks: tuple[str, ...] | list[str]) -> list[float]:
    budget = model.config.window - len(candidate_ids) - 1
    out = []
    for chunk, _ in retrieved:
        ap = build_augmented_prompt(chunk, prompt, budget, fewshot_blocks)
        prefix = [BOS_ID] + model.vocab.encode(ap.text)
        out.append(log_prob(model, candidate_ids, prefix))
    return out


def mixture_logprob(model: LanguageModel, candidate: str | list[int], prompt: str,
                    retrieved: list[tuple[Chunk, float]],
                    fewshot_blocks: tuple[str, ...] | list[str] = ()) -> float:
    """log sum_c p(candidate | chunk ∘ prompt) * weight(chunk), via log-sum-exp."""
    if not retrieved:
        raise ValueError("mixture needs at least one retrieved chunk")
    candidate_ids = model.vocab.encode(candidate) if isinstance(candidate, str) else list(candidate)
    lps = _augmented_logprobs(model, candidate_ids, prompt, retrieved, fewshot_blocks)
    log_w = [math.log(max(w, 1e-300)) for _, w in retrieved]
    return _logsumexp([lp + lw for lp, lw in zip(lps, log_w)])


@dataclass
class MixtureResult:
    """Per-chunk contributions and aggregate candidate probabilities of one ensemble."""

    per_chunk: list[tuple[int, float, float]]  # (chunk_id, weight, winner log-prob under chunk)
    aggregate: list[tuple[str, float]]  # (candidate, mixture probability), input order
    winner: str


def ensemble_choice(model: LanguageModel, choices: list[str], prompt: str,
                    retrieved: list[tuple[Chunk, float]], scorer: str = "nll",
                    fewshot_blocks: tuple[str, ...] | list[str] = ()) -> tuple[str, MixtureResult]:
    """Pick the choice whose mixture probability wins under the given scorer.

    Length normalizations (nll_token / nll_char) apply per choice after mixing;
    nll_compl divides by the choice probability conditioned on "Answer:" alone.
    Ties go to the earliest-listed choice.
    """
    if len(choices) < 2:
        raise ValueError("ensemble_choice needs at least two choices")
    if scorer not in SCORERS:
        raise ValueError(f"unknown scorer {scorer!r}")
    mix_lps: list[float] = []
    per_choice_chunk_lps: list[list[float]] = []
    scores: list[float] = []
    for choice in choices:
        ids = model.vocab.encode(choice)
        if not ids:
            raise InvalidAnswer(f"choice {choice!r} tokenizes to nothing")
        lps = _augmented_logprobs(model, ids, prompt, retrieved, fewshot_blocks)
        log_w = [math.log(max(w, 1e-300)) for _, w in retrieved]
        mix = _logsumexp([lp + lw for lp, lw in zip(lps, log_w)])
        mix_lps.append(mix)
        per_choice_chunk_lps.append(lps)
        if scorer == "nll":
            scores.append(-mix)
        elif scorer == "nll_token":
            scores.append(-mix / len(ids))
        elif scorer == "nll_char":
            scores.append(-mix / len(choice))
        else:
            base = log_prob(model, ids, [BOS_ID] + model.vocab.encode("Answer:"))
            scores.append(-(mix - base))
    best = min(range(len(choices)), key=lambda i: (scores[i], i))
    per_chunk = [(chunk.id, w, lp) for (chunk, w), lp in
                 zip(retrieved, per_choice_chunk_lps[best])]
    aggregate = [(c, math.exp(lp)) for c, lp in zip(choices, mix_lps)]
    return choices[best], MixtureResult(per_chunk=per_chunk, aggregate=aggregate,
                                        winner=choices[best])


def ensemble_generate(model: LanguageModel, prompt: str,
                      retrieved: list[tuple[Chunk, float]], max_new_tokens: int,
                      stop_tokens: tuple[int, ...] = (),
                      fewshot_blocks: tuple[str, ...] | list[str] = ()) -> tuple[str, MixtureResult]:
    """Greedy-decode each augmented prompt independently and vote by weighted probability.

    Identical answers (after trimming surrounding whitespace) pool their
    weight * probability mass; ties go to the group containing the best-ranked chunk.
    """
    if not retrieved:
        raise ValueError("ensemble_generate needs at least one retrieved chunk")
    budget = model.config.window - max_new_tokens - 1
    decoded: list[tuple[str, float, float]] = []  # (answer, weight, log-prob), retrieval order
    for chunk, weight in retrieved:
        ap = build_augmented_prompt(chunk, prompt, budget, fewshot_blocks)
        prefix = [BOS_ID] + model.vocab.encode(ap.text)
        seq, lp = greedy_generate(model, prefix, max_new_tokens, stop_tokens)
        decoded.append((model.vocab.decode(seq.ids).strip(), weight, lp))
    if all(answer == "" for answer, _, _ in decoded):
        raise EmptyGeneration("every augmented prompt decoded an empty string")

    groups: dict[str, list[int]] = {}
    for i, (answer, _, _) in enumerate(decoded):
        groups.setdefault(answer, []).append(i)
    group_items = []
    for answer, members in groups.items():
        log_score = _logsumexp([math.log(max(decoded[i][1], 1e-300)) + decoded[i][2]
                                for i in members])
        group_items.append((answer, log_score, min(members)))
    winner, win_score, _ = max(group_items, key=lambda g: (g[1], -g[2]))
    per_chunk = [(retrieved[i][0].id, decoded[i][1], decoded[i][2]) for i in groups[winner]]
    aggregate = [(answer, math.exp(s)) for answer, s, _ in group_items]
    return winner, MixtureResult(per_chunk=per_chunk, aggregate=aggregate, winner=winner)
