"""Command-line umbrella: ingest, build-index, train-lm, train-retriever, search,
infer, eval, synth-kb, experiment.

Every command accepts --seed and --config <key = value file>; explicit flags
override config-file values, which override built-in defaults. All artifacts
are deterministic functions of (inputs, seed, config).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import corpus, fusion, lm, lm_finetune, retriever, retriever_finetune
from .config import parse_config_file, validate_keys
from .errors import ArtifactMissing, ConfigError, RaglabError
from .harness import (GridConfig, ArmSpec, evaluate_task, generate_synthetic_kb,
                      load_eval_file, run_experiment, write_synth_dataset)
from .harness.synth import SynthConfig
from .harness.templates import build_query, render_prompt, render_shot_block
from .lm_finetune import (FTConfig, MixtureSpec, completion_instance, load_task_file,
                          pack, ra_it_train, sample_mixture)
from .retriever_finetune import (LSRConfig, lsr_train, make_corpus_examples,
                                 make_mti_examples, precompute_supervision)
from .vocab import Vocabulary


class _Command:
    """One subcommand: argparse wiring plus config-file key resolution."""

    def __init__(self, subparsers, name: str, help_text: str):
        self.parser = subparsers.add_parser(name, help=help_text)
        self.parser.add_argument("--seed", type=int, default=None)
        self.parser.add_argument("--config", type=str, default=None)
        self.parser.add_argument("--out-dir", type=str, default=None)
        self.registry: dict[str, object] = {"seed": 0, "out_dir": None}

    def opt(self, flag: str, *, type=str, default=None, required=False, choices=None):
        key = flag.lstrip("-").replace("-", "_")
        self.registry[key] = default
        kwargs = {"type": type, "default": None}
        if choices:
            kwargs["choices"] = choices
        self.parser.add_argument(flag, **kwargs)
        if required:
            self.registry[key] = _REQUIRED
        return self

    def positional(self, name: str, nargs: str):
        self.parser.add_argument(name, nargs=nargs)
        return self


_REQUIRED = object()


def _coerce(raw: str, default):
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _resolve(args: argparse.Namespace, command: _Command) -> dict:
    file_cfg = parse_config_file(args.config) if args.config else {}
    validate_keys(file_cfg, set(command.registry), args.command)
    resolved = {}
    for key, default in command.registry.items():
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            resolved[key] = cli_value
        elif key in file_cfg:
            template = None if default in (None, _REQUIRED) else default
            resolved[key] = _coerce(file_cfg[key], template)
        elif default is _REQUIRED:
            raise ConfigError(f"missing required option --{key.replace('_', '-')}")
        else:
            resolved[key] = default
    return resolved


def _build_parser() -> tuple[argparse.ArgumentParser, dict[str, _Command]]:
    parser = argparse.ArgumentParser(prog="raglab")
    sub = parser.add_subparsers(dest="command", required=True)
    cmds: dict[str, _Command] = {}

    c = _Command(sub, "ingest", "chunk documents into a store (one document per file)")
    c.opt("--source", required=True).opt("--max-words", type=int, default=200)
    c.opt("--out", required=True).positional("files", "+")
    cmds["ingest"] = c

    c = _Command(sub, "build-index", "embed a chunk store with the document encoder")
    c.opt("--store", required=True).opt("--out", required=True)
    c.opt("--encoder").opt("--out-encoder").opt("--dim", type=int, default=64)
    cmds["build-index"] = c

    c = _Command(sub, "train-lm", "pre-train or instruction-tune the language model")
    c.opt("--mode", required=True, choices=("pretrain", "ra-it", "it"))
    c.opt("--data", required=True).opt("--out", required=True).opt("--init")
    c.opt("--encoder").opt("--index")
    c.opt("--steps", type=int, default=300).opt("--batch", type=int, default=16)
    c.opt("--ktilde", type=int, default=3)
    c.opt("--peak-lr", type=float, default=1e-3).opt("--end-lr", type=float, default=1e-5)
    c.opt("--warmup", type=int, default=20)
    c.opt("--eval-every", type=int, default=0).opt("--eval-k", type=int, default=1)
    c.opt("--window", type=int, default=256).opt("--dim", type=int, default=64)
    c.opt("--heads", type=int, default=2).opt("--layers", type=int, default=2)
    c.opt("--vocab-cap", type=int, default=8192)
    c.opt("--unsup-frac", type=float, default=0.10)
    c.opt("--dialogue-frac", type=float, default=0.05)
    c.opt("--cap", type=int, default=7500)
    cmds["train-lm"] = c

    c = _Command(sub, "train-retriever", "LM-supervised fine-tuning of the query encoder")
    c.opt("--cache", required=True).opt("--encoder", required=True)
    c.opt("--index", required=True).opt("--store", required=True).opt("--out", required=True)
    c.opt("--tau", type=float, default=0.01)
    c.opt("--norm", default="auto", choices=("seq", "tok", "auto"))
    c.opt("--mix", default="corpus=0.95,mti=0.05")
    c.opt("--steps", type=int, default=200).opt("--lr", type=float, default=1e-5)
    c.opt("--batch-size", type=int, default=8)
    c.opt("--eval-every", type=int, default=0).opt("--val-frac", type=float, default=0.1)
    c.opt("--lm").opt("--corpus-sample", type=int, default=0).opt("--mti-tasks")
    c.opt("--k", type=int, default=10)
    cmds["train-retriever"] = c

    c = _Command(sub, "search", "query an index")
    c.opt("--idx", required=True).opt("--store", required=True).opt("--encoder", required=True)
    c.opt("--k", type=int, default=10).opt("--query", required=True).opt("--out")
    cmds["search"] = c

    c = _Command(sub, "infer", "ensemble inference over a task file")
    c.opt("--ckpt", required=True).opt("--idx", required=True).opt("--encoder", required=True)
    c.opt("--store", required=True).opt("--task", required=True).opt("--out", required=True)
    c.opt("--k", type=int, default=10)
    c.opt("--scorer", default="nll", choices=lm.SCORERS)
    c.opt("--fewshot", type=int, default=0).opt("--shots")
    c.opt("--max-new-tokens", type=int, default=8)
    cmds["infer"] = c

    c = _Command(sub, "eval", "score a task file")
    c.opt("--ckpt", required=True).opt("--task", required=True)
    c.opt("--idx").opt("--encoder").opt("--store")
    c.opt("--k", type=int, default=10).opt("--scorer")
    c.opt("--fewshot", type=int, default=0).opt("--shots")
    c.opt("--max-new-tokens", type=int, default=8).opt("--out")
    c.opt("--max-examples", type=int, default=2500)
    cmds["eval"] = c

    c = _Command(sub, "synth-kb", "generate the synthetic knowledge task")
    c.opt("--entities", type=int, default=150).opt("--relations", type=int, default=6)
    c.opt("--values", type=int, default=20).opt("--distractors", type=int, default=1)
    c.opt("--test-frac", type=float, default=0.2).opt("--dev-frac", type=float, default=0.15)
    c.opt("--pretrain-repeats", type=int, default=4)
    c.opt("--qa-fraction", type=float, default=0.5)
    c.opt("--bg-fraction", type=float, default=0.25)
    c.opt("--grounded-qa", type=int, default=4000)
    c.opt("--filler", type=int, default=0)
    c.opt("--max-words", type=int, default=200)
    cmds["synth-kb"] = c

    c = _Command(sub, "experiment", "run an evaluation grid from a config file")
    c.opt("--grid", required=True)
    cmds["experiment"] = c
    return parser, cmds


def _load_retrieval(store_path, index_path, encoder_path) -> retriever.RetrievalContext:
    store = corpus.load_store(store_path)
    query_enc, _ = retriever.load_encoders(encoder_path)
    index = retriever.load_index(index_path, store)
    return retriever.RetrievalContext(store=store, index=index, query_encoder=query_enc)


def _cmd_ingest(opts, files):
    documents = []
    for f in files:
        text = Path(f).read_text(encoding="utf-8")
        documents.append((opts["source"], text))
    store = corpus.build_store(documents, opts["max_words"])
    corpus.save_store(store, opts["out"])
    print(f"wrote {len(store)} chunks to {opts['out']}"
          + (f" ({store.duplicates_dropped} duplicates dropped)"
             if store.duplicates_dropped else ""))


def _cmd_build_index(opts):
    store = corpus.load_store(opts["store"])
    if opts["encoder"]:
        query_enc, doc_enc = retriever.load_encoders(opts["encoder"])
    else:
        if not opts["out_encoder"]:
            raise ConfigError("--out-encoder is required when initializing a fresh encoder")
        vocab = Vocabulary.build(c.text for c in store.chunks)
        query_enc, doc_enc = retriever.init_dual_encoders(vocab, dim=opts["dim"],
                                                          seed=opts["seed"])
    index = retriever.build_index(store, doc_enc)
    retriever.save_index(index, opts["out"])
    if opts["out_encoder"]:
        retriever.save_encoders(query_enc, doc_enc, opts["out_encoder"])
    print(f"indexed {len(store)} chunks -> {opts['out']}")


def _train_pretrain(opts, data: Path) -> lm.LanguageModel:
    texts = []
    store_path = data / "store.chunks"
    if store_path.exists():
        texts.extend(c.text for c in corpus.load_store(store_path).chunks)
    pretrain_path = data / "pretrain.txt"
    if not pretrain_path.exists():
        raise ArtifactMissing(f"pretrain mode needs {pretrain_path}")
    lines = [ln for ln in pretrain_path.read_text(encoding="utf-8").split("\n") if ln]
    texts.extend(lines)
    train_path = data / "train.tsv"
    if train_path.exists():
        for ex in load_task_file(train_path):
            texts.append(ex.instruction)
            texts.append(ex.output)
    texts.append("Background: Q: Question: A: Answer: Summarize this article:")
    vocab = Vocabulary.build(texts, max_types=opts["vocab_cap"])
    config = lm.LMConfig(dim=opts["dim"], heads=opts["heads"], layers=opts["layers"],
                         window=opts["window"])
    model = lm.LanguageModel(vocab, config, seed=opts["seed"])
    instances = [completion_instance(line, i, vocab, config.window)
                 for i, line in enumerate(lines)]
    schedule = lm.TrainSchedule(peak_lr=opts["peak_lr"], end_lr=opts["end_lr"],
                                warmup_steps=opts["warmup"], total_steps=opts["steps"])
    opt = lm.AdamState(model.params, schedule)
    rng = np.random.default_rng([opts["seed"], 64063])
    spec = MixtureSpec(weights={"pretrain": 1.0}, cap=max(1, len(instances)))
    stream = sample_mixture({"pretrain": instances}, spec, opts["seed"])
    for step in range(opts["steps"]):
        batch_instances = [next(stream)[1] for _ in range(opts["batch"])]
        for batch in pack(batch_instances, config.window, rng=rng):
            loss = lm.train_step(model, batch, opt)
        if (step + 1) % max(1, opts["steps"] // 10) == 0:
            print(f"step {step + 1}/{opts['steps']} loss {loss:.4f}")
    return model


def _cmd_train_lm(opts):
    data = Path(opts["data"])
    if opts["mode"] == "pretrain":
        model = _train_pretrain(opts, data)
        lm.save_checkpoint(model, opts["out"])
        print(f"saved {opts['out']}")
        return
    if not opts["init"]:
        raise ConfigError(f"--init checkpoint is required for mode {opts['mode']}")
    model = lm.load_checkpoint(opts["init"])
    examples = load_task_file(data / "train.tsv")
    retrieval = None
    if opts["mode"] == "ra-it":
        if not (opts["encoder"] and opts["index"]):
            raise ConfigError("ra-it mode needs --encoder and --index")
        retrieval = _load_retrieval(data / "store.chunks", opts["index"], opts["encoder"])
    unsup_store = None
    if (data / "store.chunks").exists():
        unsup_store = retrieval.store if retrieval else corpus.load_store(data / "store.chunks")
    schedule = lm.TrainSchedule(peak_lr=opts["peak_lr"], end_lr=opts["end_lr"],
                                warmup_steps=opts["warmup"], total_steps=opts["steps"])
    mixture = MixtureSpec(unsup_frac=opts["unsup_frac"],
                          dialogue_frac=opts["dialogue_frac"], cap=opts["cap"])
    config = FTConfig(mode=opts["mode"], ktilde=opts["ktilde"], steps=opts["steps"],
                      batch_examples=opts["batch"], schedule=schedule, mixture=mixture,
                      eval_every=opts["eval_every"], seed=opts["seed"])
    eval_fn = None
    dev_path = data / "dev.jsonl"
    if opts["eval_every"] > 0 and dev_path.exists():
        dev_spec, dev_examples = load_eval_file(dev_path)
        eval_k = opts["eval_k"] if retrieval is not None else 0

        def eval_fn(m):
            return evaluate_task(m, retrieval, dev_spec, dev_examples, k=eval_k,
                                 seed=opts["seed"], max_new_tokens=4).score

    model, metrics = ra_it_train(model, {"train": examples}, retrieval, config,
                                 unsup_store=unsup_store, eval_fn=eval_fn)
    lm.save_checkpoint(model, opts["out"])
    last = metrics[-1] if metrics else {}
    print(f"saved {opts['out']} ({json.dumps(last)})")


def _cmd_train_retriever(opts):
    store = corpus.load_store(opts["store"])
    query_enc, doc_enc = retriever.load_encoders(opts["encoder"])
    index = retriever.load_index(opts["index"], store)
    if retriever.is_stale(index, doc_enc):
        raise ConfigError("index fingerprint does not match the document encoder")
    cache = Path(opts["cache"])
    if cache.exists():
        batches = retriever_finetune.load_supervision_cache(cache)
    else:
        if not opts["lm"]:
            raise ConfigError("--lm is required to build a missing supervision cache")
        model = lm.load_checkpoint(opts["lm"])
        rctx = retriever.RetrievalContext(store=store, index=index, query_encoder=query_enc)
        examples = []
        if opts["corpus_sample"] > 0:
            got, _ = make_corpus_examples(store, opts["corpus_sample"], opts["seed"])
            examples.extend(got)
        if opts["mti_tasks"]:
            examples.extend(make_mti_examples(load_task_file(opts["mti_tasks"])))
        if not examples:
            raise ConfigError("no supervision examples: set --corpus-sample or --mti-tasks")
        batches = precompute_supervision(examples, rctx, model, opts["k"], cache_path=cache)
    mix = dict(part.split("=") for part in opts["mix"].split(","))
    doc_enc.trainable = False
    config = LSRConfig(tau=opts["tau"], normalization=opts["norm"], lr=opts["lr"],
                       steps=opts["steps"], batch_size=opts["batch_size"],
                       corpus_frac=float(mix.get("corpus", 0.95)),
                       mti_frac=float(mix.get("mti", 0.05)),
                       eval_every=opts["eval_every"], val_frac=opts["val_frac"],
                       seed=opts["seed"])
    query_enc, metrics = lsr_train(query_enc, doc_enc, index, batches, config)
    retriever.save_encoders(query_enc, doc_enc, opts["out"])
    last = metrics[-1] if metrics else {}
    print(f"saved {opts['out']} ({json.dumps(last)})")


def _cmd_search(opts):
    rctx = _load_retrieval(opts["store"], opts["idx"], opts["encoder"])
    results = rctx.top(opts["query"], opts["k"])
    lines = [f"{r.rank}\t{r.chunk_id}\t{r.score:.6f}\t{rctx.store[r.chunk_id].text}"
             for r in results]
    text = "\n".join(lines) + "\n"
    if opts["out"]:
        Path(opts["out"]).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _cmd_infer(opts):
    model = lm.load_checkpoint(opts["ckpt"])
    rctx = _load_retrieval(opts["store"], opts["idx"], opts["encoder"])
    spec, examples = load_eval_file(opts["task"])
    shot_blocks = []
    if opts["fewshot"] > 0:
        if not opts["shots"]:
            raise ConfigError("--fewshot > 0 needs --shots <eval file>")
        _, pool = load_eval_file(opts["shots"])
        rng = np.random.default_rng([opts["seed"], 509])
        picks = sorted(rng.permutation(len(pool))[: opts["fewshot"]])
        for i in picks:
            shot = pool[int(i)]
            bg = rctx.weighted_chunks(build_query(spec, shot), 1)[0][0].text
            shot_blocks.append(render_shot_block(spec, shot, bg))
    out_lines = []
    for example in examples:
        prompt = render_prompt(spec, example)
        retrieved = rctx.weighted_chunks(build_query(spec, example), opts["k"])
        if spec.kind == "multi_choice":
            prediction, mix = fusion.ensemble_choice(model, example.choices, prompt,
                                                     retrieved, opts["scorer"],
                                                     fewshot_blocks=shot_blocks)
            winner_score = dict((c, p) for c, p in mix.aggregate)[prediction]
        else:
            prediction, mix = fusion.ensemble_generate(model, prompt, retrieved,
                                                       opts["max_new_tokens"],
                                                       fewshot_blocks=shot_blocks)
            winner_score = dict((c, p) for c, p in mix.aggregate)[prediction]
        record = {"id": example.id, "prediction": prediction,
                  "winner_score": winner_score,
                  "per_chunk": [{"chunk_id": cid, "weight": w, "score": s}
                                for cid, w, s in mix.per_chunk]}
        out_lines.append(json.dumps(record, sort_keys=True))
    Path(opts["out"]).write_text("\n".join(out_lines) + "\n", encoding="utf-8")
    print(f"wrote {len(out_lines)} predictions to {opts['out']}")


def _cmd_eval(opts):
    model = lm.load_checkpoint(opts["ckpt"])
    retrieval = None
    if opts["idx"] and opts["encoder"] and opts["store"]:
        retrieval = _load_retrieval(opts["store"], opts["idx"], opts["encoder"])
    spec, examples = load_eval_file(opts["task"])
    shot_pool = None
    if opts["shots"]:
        _, shot_pool = load_eval_file(opts["shots"])
    report = evaluate_task(model, retrieval, spec, examples, k=opts["k"],
                           n_shots=opts["fewshot"], shot_pool=shot_pool,
                           scorer=opts["scorer"], seed=opts["seed"],
                           max_examples=opts["max_examples"],
                           max_new_tokens=opts["max_new_tokens"])
    if opts["out"]:
        lines = [json.dumps(r, sort_keys=True) for r in report.rows]
        Path(opts["out"]).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"{report.task} {report.metric}={report.score:.4f} n={report.n_examples}")


def _cmd_synth_kb(opts):
    if not opts["out_dir"]:
        raise ConfigError("synth-kb needs --out-dir")
    config = SynthConfig(n_entities=opts["entities"], n_relations=opts["relations"],
                         values_per_relation=opts["values"],
                         distractors_per_entity=opts["distractors"],
                         test_frac=opts["test_frac"], dev_frac=opts["dev_frac"],
                         pretrain_repeats=opts["pretrain_repeats"],
                         qa_pretrain_fraction=opts["qa_fraction"],
                         bg_pretrain_fraction=opts["bg_fraction"],
                         grounded_qa_lines=opts["grounded_qa"],
                         filler_chunks=opts["filler"],
                         max_words=opts["max_words"])
    kb = generate_synthetic_kb(config, opts["seed"])
    paths = write_synth_dataset(kb, opts["out_dir"])
    print(f"wrote synthetic task ({len(kb.store)} chunks, {len(kb.train_ft)} train / "
          f"{len(kb.dev_eval)} dev / {len(kb.test_eval)} test) to {opts['out_dir']}")
    return paths


def _cmd_experiment(opts):
    raw = parse_config_file(opts["grid"])
    arm_names = sorted({key.split(".")[1] for key in raw if key.startswith("arm.")})
    flat_keys = {"store", "tasks", "ks", "shots", "shots_path", "max_examples",
                 "max_new_tokens"}
    allowed = flat_keys | {f"arm.{n}.{f}" for n in arm_names for f in ("lm", "encoder", "index")}
    validate_keys(raw, allowed, "experiment grid")
    arms = []
    for name in arm_names:
        lm_ckpt = raw.get(f"arm.{name}.lm")
        if not lm_ckpt:
            raise ConfigError(f"arm {name} needs arm.{name}.lm")
        arms.append(ArmSpec(name=name, lm_ckpt=lm_ckpt,
                            encoder_ckpt=raw.get(f"arm.{name}.encoder"),
                            index_path=raw.get(f"arm.{name}.index")))
    split = lambda s: [p for p in s.split(",") if p]
    grid = GridConfig(arms=arms,
                      task_paths=split(raw.get("tasks", "")),
                      store_path=raw.get("store"),
                      ks=[int(x) for x in split(raw.get("ks", "10"))],
                      shots=[int(x) for x in split(raw.get("shots", "0"))],
                      shots_path=raw.get("shots_path"),
                      seed=opts["seed"],
                      max_examples=int(raw.get("max_examples", "2500")),
                      max_new_tokens=int(raw.get("max_new_tokens", "8")))
    if not opts["out_dir"]:
        raise ConfigError("experiment needs --out-dir")
    rows = run_experiment(grid, opts["out_dir"])
    print(f"wrote {len(rows)} result rows to {opts['out_dir']}")


def main(argv: list[str] | None = None) -> int:
    parser, cmds = _build_parser()
    args = parser.parse_args(argv)
    command = cmds[args.command]
    try:
        opts = _resolve(args, command)
        if args.command == "ingest":
            _cmd_ingest(opts, args.files)
        elif args.command == "build-index":
            _cmd_build_index(opts)
        elif args.command == "train-lm":
            _cmd_train_lm(opts)
        elif args.command == "train-retriever":
            _cmd_train_retriever(opts)
        elif args.command == "search":
            _cmd_search(opts)
        elif args.command == "infer":
            _cmd_infer(opts)
        elif args.command == "eval":
            _cmd_eval(opts)
        elif args.command == "synth-kb":
            _cmd_synth_kb(opts)
        elif args.command == "experiment":
            _cmd_experiment(opts)
    except RaglabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
