"""Synthetic knowledge-base task generator.

Every fact is one store chunk ("the {relation} of {entity} is {value}");
each question asks one fact, and the same entity's other facts act as
distractor chunks that mention the entity with a wrong (for the question)
value. Test bindings are held out of the pre-training text: test entities
only ever appear there in randomly re-paired "grounded QA" noise, so
closed-book accuracy on the test split stays at chance while every token
embedding still receives gradient.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..corpus import ChunkStore, build_store, save_store
from ..errors import ConfigError
from ..lm_finetune import FTExample, save_task_file
from .templates import EvalExample, TaskSpec, save_eval_file

RELATION_WORDS = ("color", "capital", "leader", "anthem", "mineral", "dish",
                  "river", "emblem", "motto", "climate", "forest", "harbor")
QUESTION_TEMPLATES = ("what is the {rel} of {ent}",
                      "tell me the {rel} of {ent}",
                      "the {rel} of {ent} is what")
_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class SynthConfig:
    n_entities: int = 150
    n_relations: int = 6
    values_per_relation: int = 20
    distractors_per_entity: int = 1
    test_frac: float = 0.2
    dev_frac: float = 0.15
    pretrain_repeats: int = 4
    qa_pretrain_fraction: float = 0.5   # train facts also rendered as QA text
    bg_pretrain_fraction: float = 0.25  # train facts rendered with a Background field
    # grounded QA lines: background+question+answer text over randomly re-paired
    # (entity, relation, value) triples; the pairing never repeats, so predicting
    # the answer requires reading the background rather than memorizing
    grounded_qa_lines: int = 4000
    # fraction of grounded lines whose background does NOT answer the question
    # (wrong entity or wrong relation, answer drawn independently); these teach
    # that a mismatched background must not be copied
    grounded_mismatch_fraction: float = 0.30
    # fraction of grounded lines with a two-fact background where only one fact
    # matches the question; selecting it requires entity-keyed copying
    grounded_selection_fraction: float = 0.30
    # query-adjacent chunks with no copyable fact pattern; they fill the deep
    # retrieval ranks the way off-topic passages do in a real corpus
    filler_chunks: int = 0
    max_words: int = 200

    def __post_init__(self):
        if self.n_entities < 100:
            raise ConfigError(f"need at least 100 entities, got {self.n_entities}")
        if self.distractors_per_entity + 1 > self.n_relations:
            raise ConfigError("distractors_per_entity + 1 exceeds the number of relations")
        if self.test_frac + self.dev_frac >= 1.0:
            raise ConfigError("test_frac + dev_frac must leave room for a train split")


@dataclass(frozen=True)
class Fact:
    entity: str
    relation: str
    value: str
    chunk_id: int
    split: str  # train | dev | test
    asked: bool

    @property
    def text(self) -> str:
        return f"the {self.relation} of {self.entity} is {self.value}"


@dataclass
class SyntheticKB:
    config: SynthConfig
    seed: int
    store: ChunkStore
    facts: list[Fact]
    task_spec: TaskSpec
    train_ft: list[FTExample]
    train_eval: list[EvalExample]
    dev_eval: list[EvalExample]
    test_eval: list[EvalExample]
    pretrain_lines: list[str]
    gold_chunks: dict[str, int] = field(default_factory=dict)  # eval id -> chunk id


def _pseudo_word(rng: np.random.Generator, syllables: int, used: set[str]) -> str:
    while True:
        word = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))]
                       + _VOWELS[rng.integers(len(_VOWELS))]
                       for _ in range(syllables))
        if word not in used:
            used.add(word)
            return word


def generate_synthetic_kb(config: SynthConfig, seed: int) -> SyntheticKB:
    rng = np.random.default_rng([seed, 2147483629])
    used = set(RELATION_WORDS) | {"what", "is", "the", "of", "tell", "me", "q", "a",
                                  "background", "answer", "question"}
    if config.n_relations > len(RELATION_WORDS):
        raise ConfigError(f"at most {len(RELATION_WORDS)} relations supported")
    relations = list(RELATION_WORDS[:config.n_relations])
    # each fact consumes a fresh value for its relation: no (relation, value)
    # pair repeats, so every fact sentence differs from all others by at least
    # two tokens and stays uniquely retrievable
    value_pools = {rel: [_pseudo_word(rng, 2, used)
                         for _ in range(config.values_per_relation)]
                   for rel in relations}
    value_cursor = {rel: 0 for rel in relations}

    def next_value(rel: str) -> str:
        if value_cursor[rel] == len(value_pools[rel]):
            value_pools[rel].append(_pseudo_word(rng, 2, used))
        value = value_pools[rel][value_cursor[rel]]
        value_cursor[rel] += 1
        return value

    entities = [_pseudo_word(rng, 3, used) for _ in range(config.n_entities)]

    order = rng.permutation(config.n_entities)
    n_test = int(round(config.test_frac * config.n_entities))
    n_dev = int(round(config.dev_frac * config.n_entities))
    split_of = {}
    for pos, ent_idx in enumerate(order):
        split_of[int(ent_idx)] = ("test" if pos < n_test
                                  else "dev" if pos < n_test + n_dev else "train")

    facts: list[Fact] = []
    documents: list[tuple[str, str]] = []
    for i, entity in enumerate(entities):
        rel_idx = rng.permutation(len(relations))[: 1 + config.distractors_per_entity]
        for j, r in enumerate(rel_idx):
            relation = relations[int(r)]
            fact = Fact(entity=entity, relation=relation, value=next_value(relation),
                        chunk_id=len(documents), split=split_of[i], asked=j == 0)
            facts.append(fact)
            documents.append(("synthetic", fact.text))
    # short enough that mean pooling keeps them competitive with foreign facts
    # for question-shaped queries, yet with no stable token after "is" to copy
    filler_texts = []
    for i in range(config.filler_chunks):
        rel = relations[i % len(relations)]
        w1, w2 = (_pseudo_word(rng, 2, used) for _ in range(2))
        filler_texts.append(f"is {w1} what the {rel} of {w2}")
        documents.append(("synthetic", filler_texts[-1]))
    store = build_store(documents, config.max_words)

    spec = TaskSpec(name="synth_qa", kind="short_generation", prompt_template="qa",
                    query_template="qa", metric="exact_match", scorer="nll")
    train_ft: list[FTExample] = []
    train_eval: list[EvalExample] = []
    dev_eval: list[EvalExample] = []
    test_eval: list[EvalExample] = []
    gold_chunks: dict[str, int] = {}
    counters = {"train": 0, "dev": 0, "test": 0}
    for fact in facts:
        if not fact.asked:
            continue
        template = QUESTION_TEMPLATES[int(rng.integers(len(QUESTION_TEMPLATES)))]
        question = template.format(rel=fact.relation, ent=fact.entity)
        split = fact.split
        ex_id = f"{split}-{counters[split]:04d}"
        counters[split] += 1
        gold_chunks[ex_id] = fact.chunk_id
        eval_ex = EvalExample(id=ex_id, fields={"question": question}, golds=[fact.value])
        if split == "train":
            train_ft.append(FTExample(task_name="synth_qa", category="open_qa",
                                      instruction=question, output=fact.value))
            train_eval.append(eval_ex)
        elif split == "dev":
            dev_eval.append(eval_ex)
        else:
            test_eval.append(eval_ex)

    # soundness: each asked fact is answerable by exactly one chunk
    for fact in facts:
        if not fact.asked:
            continue
        pattern = f"the {fact.relation} of {fact.entity} is"
        hits = sum(1 for c in store.chunks if pattern in c.text)
        if hits != 1:
            raise ConfigError(f"fact pattern {pattern!r} matches {hits} chunks")

    pretrain_lines: list[str] = []
    for fact in facts:
        if fact.split == "test":
            continue
        pretrain_lines.extend([fact.text] * config.pretrain_repeats)
    pretrain_lines.extend(filler_texts)
    train_asked = [f for f in facts if f.asked and f.split == "train"]
    for fact in train_asked:
        if rng.random() < config.qa_pretrain_fraction:
            template = QUESTION_TEMPLATES[int(rng.integers(len(QUESTION_TEMPLATES)))]
            q = template.format(rel=fact.relation, ent=fact.entity)
            pretrain_lines.append(f"Q: {q} A: {fact.value}")
        if rng.random() < config.bg_pretrain_fraction:
            template = QUESTION_TEMPLATES[int(rng.integers(len(QUESTION_TEMPLATES)))]
            q = template.format(rel=fact.relation, ent=fact.entity)
            pretrain_lines.append(f"Background: {fact.text} Q: {q} A: {fact.value}")
    # grounded lines draw from the full entity/value inventories so every token
    # embedding trains, but any fabricated triple that collides with a true
    # fact is re-paired: no held-out binding ever enters the pre-training text
    all_values = sorted({f.value for f in facts})
    true_value = {(f.entity, f.relation): f.value for f in facts}

    def fresh_value(ent, rel, *avoid):
        val = all_values[int(rng.integers(len(all_values)))]
        while true_value.get((ent, rel)) == val or val in avoid:
            val = all_values[int(rng.integers(len(all_values)))]
        return val

    def other_entity(ent):
        other = entities[int(rng.integers(config.n_entities))]
        while other == ent:
            other = entities[int(rng.integers(config.n_entities))]
        return other

    for _ in range(config.grounded_qa_lines):
        ent = entities[int(rng.integers(config.n_entities))]
        rel = relations[int(rng.integers(len(relations)))]
        template = QUESTION_TEMPLATES[int(rng.integers(len(QUESTION_TEMPLATES)))]
        q = template.format(rel=rel, ent=ent)
        r = rng.random()
        if r < config.grounded_mismatch_fraction:
            # background about someone/something else; the stated answer is
            # independent of the background value
            if rng.random() < 0.6:
                bg_ent, bg_rel = other_entity(ent), rel
            else:
                bg_ent = ent
                bg_rel = relations[int(rng.integers(len(relations)))]
                while bg_rel == rel:
                    bg_rel = relations[int(rng.integers(len(relations)))]
            bg_val = fresh_value(bg_ent, bg_rel)
            answer = fresh_value(ent, rel, bg_val)
            background = f"the {bg_rel} of {bg_ent} is {bg_val}"
        elif r < config.grounded_mismatch_fraction + config.grounded_selection_fraction:
            answer = fresh_value(ent, rel)
            e2 = other_entity(ent)
            r2 = relations[int(rng.integers(len(relations)))]
            matching = f"the {rel} of {ent} is {answer}"
            decoy = f"the {r2} of {e2} is {fresh_value(e2, r2, answer)}"
            background = (f"{matching} {decoy}" if rng.random() < 0.5
                          else f"{decoy} {matching}")
        else:
            answer = fresh_value(ent, rel)
            background = f"the {rel} of {ent} is {answer}"
        pretrain_lines.append(f"Background: {background} Q: {q} A: {answer}")
    perm = rng.permutation(len(pretrain_lines))
    pretrain_lines = [pretrain_lines[int(i)] for i in perm]

    for fact in facts:  # test bindings must never leak into the pre-training text
        if fact.split == "test":
            if any(fact.text in line for line in pretrain_lines):
                raise ConfigError(f"test fact {fact.text!r} leaked into pretrain text")

    return SyntheticKB(config=config, seed=seed, store=store, facts=facts, task_spec=spec,
                       train_ft=train_ft, train_eval=train_eval, dev_eval=dev_eval,
                       test_eval=test_eval, pretrain_lines=pretrain_lines,
                       gold_chunks=gold_chunks)


def write_synth_dataset(kb: SyntheticKB, out_dir: str | Path) -> dict[str, Path]:
    """Write the store, pre-training text, task files, and metadata under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"store": out / "store.chunks", "pretrain": out / "pretrain.txt",
             "train": out / "train.tsv", "dev": out / "dev.jsonl",
             "test": out / "test.jsonl", "shots": out / "shots.jsonl",
             "meta": out / "kb.json"}
    save_store(kb.store, paths["store"])
    paths["pretrain"].write_text("\n".join(kb.pretrain_lines) + "\n", encoding="utf-8")
    save_task_file(kb.train_ft, paths["train"])
    save_eval_file(kb.task_spec, kb.dev_eval, paths["dev"])
    save_eval_file(kb.task_spec, kb.test_eval, paths["test"])
    save_eval_file(kb.task_spec, kb.train_eval, paths["shots"])
    meta = {"seed": kb.seed, "config": asdict(kb.config), "gold_chunks": kb.gold_chunks,
            "counts": {"chunks": len(kb.store), "train": len(kb.train_ft),
                       "dev": len(kb.dev_eval), "test": len(kb.test_eval)}}
    paths["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
    return paths
