"""Small trainable autoregressive language model with hand-written gradients.

Architecture: 2-layer pre-norm causal self-attention, width 64, 2 heads,
learned positional embeddings, weight-tied output projection. Everything is
plain numpy so gradients are exactly checkable with finite differences.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContextOverflow, EmptyInput, InvalidAnswer, MaskError, ParseError
from .vocab import BOS_ID, EOS_ID, RESERVED_TOKENS, Vocabulary

CHECKPOINT_MAGIC = b"RLM1"
SCORERS = ("nll", "nll_char", "nll_token", "nll_compl")
ANSWER_MARKER = "Answer:"  # literal 7-char conditioning string for nll_compl


@dataclass
class TokenSequence:
    """Token ids with an optional mask marking output-segment positions."""

    ids: list[int]
    label_mask: list[bool] | None = None

    def __post_init__(self):
        if self.label_mask is not None and len(self.label_mask) != len(self.ids):
            raise MaskError(f"label_mask length {len(self.label_mask)} != ids length {len(self.ids)}")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class AnswerScore:
    scorer: str
    value: float


@dataclass
class LMConfig:
    dim: int = 64
    heads: int = 2
    layers: int = 2
    window: int = 256
    dtype: str = "float32"

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class TrainSchedule:
    """Cosine learning-rate schedule with linear warmup."""

    peak_lr: float = 1e-3
    end_lr: float = 1e-5
    warmup_steps: int = 20
    total_steps: int = 500

    def lr_at(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.peak_lr * (step + 1) / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        progress = min(1.0, (step - self.warmup_steps) / span)
        return self.end_lr + 0.5 * (self.peak_lr - self.end_lr) * (1.0 + math.cos(math.pi * progress))


# Published fine-tuning schedule kept as named defaults (500 steps, 200 warmup,
# lr 1e-5 -> 1e-7); the desk-scale default above is the same shape scaled up.
PAPER_LM_SCHEDULE = TrainSchedule(peak_lr=1e-5, end_lr=1e-7, warmup_steps=200, total_steps=500)


def _param_names(layers: int) -> list[str]:
    names = ["wte", "wpe"]
    for i in range(layers):
        names += [f"l{i}.wq", f"l{i}.wk", f"l{i}.wv", f"l{i}.wo", f"l{i}.w1", f"l{i}.w2"]
    return names


class LanguageModel:
    """Causal next-token predictor over a word vocabulary."""

    def __init__(self, vocab: Vocabulary, config: LMConfig | None = None, seed: int = 0):
        self.vocab = vocab
        self.config = config or LMConfig()
        self.seed = seed
        self.step_count = 0
        rng = np.random.default_rng(seed)
        d, v, w = self.config.dim, len(vocab), self.config.window
        dt = self.config.np_dtype
        init = lambda *shape: rng.normal(0.0, 0.08, shape).astype(dt)
        self.params: dict[str, np.ndarray] = {"wte": init(v, d), "wpe": init(w, d)}
        for i in range(self.config.layers):
            for name, shape in (("wq", (d, d)), ("wk", (d, d)), ("wv", (d, d)),
                                ("wo", (d, d)), ("w1", (d, 4 * d)), ("w2", (4 * d, d))):
                self.params[f"l{i}.{name}"] = init(*shape)

    @property
    def param_names(self) -> list[str]:
        return _param_names(self.config.layers)

    def copy(self) -> "LanguageModel":
        clone = object.__new__(LanguageModel)
        clone.vocab = self.vocab
        clone.config = replace(self.config)
        clone.seed = self.seed
        clone.step_count = self.step_count
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def tokenize(self, text: str) -> TokenSequence:
        return TokenSequence(ids=self.vocab.encode(text))

    def detokenize(self, seq: TokenSequence) -> str:
        return self.vocab.decode(seq.ids)


def _rmsnorm(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    scale = 1.0 / np.sqrt(ms + 1e-5)
    return x * scale, scale


def _rmsnorm_backward(x: np.ndarray, scale: np.ndarray, grad: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    dot = np.sum(grad * x, axis=-1, keepdims=True)
    return grad * scale - (scale ** 3) * dot * x / d


def build_allow(doc_ids: np.ndarray) -> np.ndarray:
    """Attention permission mask: causal and restricted to the same document id."""
    b, s = doc_ids.shape
    same = doc_ids[:, :, None] == doc_ids[:, None, :]
    causal = np.tril(np.ones((s, s), dtype=bool))
    return same & causal[None, :, :]


def positions_from_docs(doc_ids: np.ndarray) -> np.ndarray:
    """Position ids that restart at every document boundary.

    This makes a packed example see the same position embeddings it would see
    alone, so packing preserves per-example losses exactly.
    """
    b, s = doc_ids.shape
    idx = np.arange(s)[None, :].repeat(b, axis=0)
    change = np.ones((b, s), dtype=bool)
    change[:, 1:] = doc_ids[:, 1:] != doc_ids[:, :-1]
    last_start = np.maximum.accumulate(np.where(change, idx, 0), axis=1)
    return idx - last_start


def _forward(model: LanguageModel, ids: np.ndarray, allow: np.ndarray,
             pos_ids: np.ndarray):
    """Run the network; returns logits (B,S,V) and the cache needed for backward."""
    p = model.params
    cfg = model.config
    b, s = ids.shape
    if s > cfg.window:
        raise ContextOverflow(f"sequence length {s} exceeds window {cfg.window}")
    h_dim = cfg.dim // cfg.heads
    inv_scale = 1.0 / math.sqrt(h_dim)

    x = p["wte"][ids] + p["wpe"][pos_ids]
    cache: dict = {"ids": ids, "allow": allow, "pos_ids": pos_ids, "layers": []}

    def split_heads(t):
        return t.reshape(b, s, cfg.heads, h_dim).transpose(0, 2, 1, 3)

    for i in range(cfg.layers):
        x_in = x
        h1, sc1 = _rmsnorm(x_in)
        q = split_heads(h1 @ p[f"l{i}.wq"])
        k = split_heads(h1 @ p[f"l{i}.wk"])
        v = split_heads(h1 @ p[f"l{i}.wv"])
        scores = (q @ k.transpose(0, 1, 3, 2)) * inv_scale
        scores = np.where(allow[:, None, :, :], scores, -np.inf)
        scores = scores - np.max(scores, axis=-1, keepdims=True)
        ex = np.exp(scores)
        probs = ex / np.sum(ex, axis=-1, keepdims=True)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, s, cfg.dim)
        x_mid = x_in + ctx @ p[f"l{i}.wo"]

        h2, sc2 = _rmsnorm(x_mid)
        a1 = h2 @ p[f"l{i}.w1"]
        r = np.maximum(a1, 0.0)
        x = x_mid + r @ p[f"l{i}.w2"]
        cache["layers"].append(
            {"x_in": x_in, "h1": h1, "sc1": sc1, "q": q, "k": k, "v": v, "probs": probs,
             "ctx": ctx, "x_mid": x_mid, "h2": h2, "sc2": sc2, "a1": a1, "r": r})

    hf, scf = _rmsnorm(x)
    cache["x_out"], cache["hf"], cache["scf"] = x, hf, scf
    logits = hf @ p["wte"].T
    return logits, cache


def _backward(model: LanguageModel, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    cfg = model.config
    b, s = cache["ids"].shape
    h_dim = cfg.dim // cfg.heads
    inv_scale = 1.0 / math.sqrt(h_dim)
    grads = {name: np.zeros_like(arr) for name, arr in p.items()}

    grads["wte"] += np.einsum("bsv,bsd->vd", dlogits, cache["hf"])
    dhf = dlogits @ p["wte"]
    dx = _rmsnorm_backward(cache["x_out"], cache["scf"], dhf)

    def merge_heads(t):
        return t.transpose(0, 2, 1, 3).reshape(b, s, cfg.dim)

    for i in reversed(range(cfg.layers)):
        c = cache["layers"][i]
        # MLP block
        dr = dx @ p[f"l{i}.w2"].T
        grads[f"l{i}.w2"] += np.einsum("bsf,bsd->fd", c["r"], dx)
        da1 = dr * (c["a1"] > 0)
        grads[f"l{i}.w1"] += np.einsum("bsd,bsf->df", c["h2"], da1)
        dh2 = da1 @ p[f"l{i}.w1"].T
        dx_mid = dx + _rmsnorm_backward(c["x_mid"], c["sc2"], dh2)
        # attention block
        dctx_m = dx_mid @ p[f"l{i}.wo"].T
        grads[f"l{i}.wo"] += np.einsum("bsd,bse->de", c["ctx"], dx_mid)
        dctx = dctx_m.reshape(b, s, cfg.heads, h_dim).transpose(0, 2, 1, 3)
        dprobs = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = c["probs"].transpose(0, 1, 3, 2) @ dctx
        dscores = c["probs"] * (dprobs - np.sum(dprobs * c["probs"], axis=-1, keepdims=True))
        dq = (dscores @ c["k"]) * inv_scale
        dk = (dscores.transpose(0, 1, 3, 2) @ c["q"]) * inv_scale
        dqm, dkm, dvm = merge_heads(dq), merge_heads(dk), merge_heads(dv)
        grads[f"l{i}.wq"] += np.einsum("bsd,bse->de", c["h1"], dqm)
        grads[f"l{i}.wk"] += np.einsum("bsd,bse->de", c["h1"], dkm)
        grads[f"l{i}.wv"] += np.einsum("bsd,bse->de", c["h1"], dvm)
        dh1 = dqm @ p[f"l{i}.wq"].T + dkm @ p[f"l{i}.wk"].T + dvm @ p[f"l{i}.wv"].T
        dx = dx_mid + _rmsnorm_backward(c["x_in"], c["sc1"], dh1)

    np.add.at(grads["wte"], cache["ids"], dx)
    np.add.at(grads["wpe"], cache["pos_ids"], dx)
    return grads


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    y = z - m
    return y - np.log(np.sum(np.exp(y), axis=-1, keepdims=True))


def forward_logits(model: LanguageModel, ids: np.ndarray, doc_ids: np.ndarray | None = None) -> np.ndarray:
    """Logits for a batch (causal mask by default, document mask when doc_ids given)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if doc_ids is None:
        doc_ids = np.zeros_like(ids)
    doc_ids = np.asarray(doc_ids, dtype=np.int64)
    logits, _ = _forward(model, ids, build_allow(doc_ids), positions_from_docs(doc_ids))
    return logits


def next_token_dist(model: LanguageModel, prefix: TokenSequence | list[int]) -> np.ndarray:
    """Probability vector over the vocabulary for the token following the prefix."""
    ids = prefix.ids if isinstance(prefix, TokenSequence) else list(prefix)
    if not ids:
        raise EmptyInput("next_token_dist needs a non-empty prefix")
    logits = forward_logits(model, np.asarray([ids]))
    z = logits[0, -1]
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


def log_prob(model: LanguageModel, target: TokenSequence | list[int],
             prefix: TokenSequence | list[int]) -> float:
    """Sum of stepwise next-token log probabilities of the target after the prefix."""
    tgt = target.ids if isinstance(target, TokenSequence) else list(target)
    pre = prefix.ids if isinstance(prefix, TokenSequence) else list(prefix)
    if not tgt:
        return 0.0
    if not pre:
        raise EmptyInput("log_prob needs a non-empty prefix for a non-empty target")
    if len(pre) + len(tgt) > model.config.window:
        raise ContextOverflow(
            f"prefix+target length {len(pre) + len(tgt)} exceeds window {model.config.window}")
    full = np.asarray([pre + tgt])
    logits = forward_logits(model, full)
    lp = _log_softmax(logits[0, len(pre) - 1: len(pre) + len(tgt) - 1])
    return float(lp[np.arange(len(tgt)), tgt].sum())


def greedy_generate(model: LanguageModel, prefix: TokenSequence | list[int],
                    max_new_tokens: int, stop_tokens: tuple[int, ...] = ()) -> tuple[TokenSequence, float]:
    """Deterministic argmax decoding; stops at EOS, a stop token, or the budget.

    The returned log-prob is the re-scored log_prob of the emitted tokens.
    """
    pre = list(prefix.ids if isinstance(prefix, TokenSequence) else prefix)
    if not pre:
        raise EmptyInput("generation needs a non-empty prefix")
    if len(pre) > model.config.window:
        raise ContextOverflow(f"prefix length {len(pre)} exceeds window {model.config.window}")
    stops = set(stop_tokens) | {EOS_ID}
    current = list(pre)
    emitted: list[int] = []
    for _ in range(max_new_tokens):
        if len(current) >= model.config.window:
            break
        dist = next_token_dist(model, current)
        token = int(np.argmax(dist))  # argmax returns the lowest index on ties
        if token in stops:
            break
        emitted.append(token)
        current.append(token)
    lp = log_prob(model, emitted, pre) if emitted else 0.0
    return TokenSequence(ids=emitted), lp


def score_answer(model: LanguageModel, prompt: str, answer: str, scorer: str) -> AnswerScore:
    """Score an answer string under one of the four negative-log-likelihood variants."""
    if scorer not in SCORERS:
        raise ValueError(f"unknown scorer {scorer!r}; expected one of {SCORERS}")
    answer_ids = model.vocab.encode(answer)
    if not answer_ids:
        raise InvalidAnswer("answer tokenizes to an empty sequence")
    prefix = [BOS_ID] + model.vocab.encode(prompt)
    lp = log_prob(model, answer_ids, prefix)
    if scorer == "nll":
        value = -lp
    elif scorer == "nll_token":
        value = -lp / len(answer_ids)
    elif scorer == "nll_char":
        value = -lp / len(answer)
    else:  # nll_compl, computed wholly in the log domain
        base = log_prob(model, answer_ids, [BOS_ID] + model.vocab.encode(ANSWER_MARKER))
        value = -(lp - base)
    return AnswerScore(scorer=scorer, value=float(value))


def loss_and_grads(model: LanguageModel, ids: np.ndarray, label_mask: np.ndarray,
                   doc_ids: np.ndarray | None = None):
    """Mean masked next-token cross-entropy and its parameter gradients.

    ``label_mask[t]`` marks output-segment tokens; the loss covers positions
    whose prediction target carries the mask. An all-false mask yields loss 0
    and exactly zero gradients.
    """
    ids = np.asarray(ids, dtype=np.int64)
    label_mask = np.asarray(label_mask, dtype=bool)
    if label_mask.shape != ids.shape:
        raise MaskError(f"label_mask shape {label_mask.shape} != ids shape {ids.shape}")
    if doc_ids is None:
        doc_ids = np.zeros_like(ids)
    doc_ids = np.asarray(doc_ids, dtype=np.int64)
    logits, cache = _forward(model, ids, build_allow(doc_ids), positions_from_docs(doc_ids))

    targets = ids[:, 1:]
    weights = label_mask[:, 1:]
    n_labels = int(weights.sum())
    lp = _log_softmax(logits[:, :-1])
    b_idx, s_idx = np.indices(targets.shape)
    token_lp = lp[b_idx, s_idx, targets]
    loss_sum = float(-(token_lp * weights).sum())
    denom = max(n_labels, 1)
    loss_mean = loss_sum / denom

    probs = np.exp(lp)
    dlogits = np.zeros_like(logits)
    d_pre = probs.copy()
    d_pre[b_idx, s_idx, targets] -= 1.0
    d_pre *= weights[:, :, None] / denom
    dlogits[:, :-1] = d_pre
    grads = _backward(model, cache, dlogits)
    return loss_mean, loss_sum, n_labels, grads


class AdamState:
    """Adam moments plus a learning-rate schedule, one buffer set per parameter."""

    def __init__(self, params: dict[str, np.ndarray], schedule: TrainSchedule | None = None,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.schedule = schedule or TrainSchedule()
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def apply(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        lr = self.schedule.lr_at(self.t)
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (g * g)
            params[name] -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def train_step(model: LanguageModel, batch, opt: AdamState) -> float:
    """One optimizer update on a packed batch (any object with ids/label_mask/doc_ids)."""
    loss_mean, _, n_labels, grads = loss_and_grads(
        model, batch.ids, batch.label_mask, getattr(batch, "doc_ids", None))
    if n_labels > 0:
        opt.apply(model.params, grads)
    model.step_count += 1
    return loss_mean


def save_checkpoint(model: LanguageModel, path: str | Path) -> None:
    """Binary checkpoint: RLM1 header, hyperparameters, f32 params in fixed order, vocab."""
    parts = [CHECKPOINT_MAGIC]
    words = model.vocab.words
    parts.append(struct.pack("<7Q", model.config.window, model.config.dim,
                             model.config.layers, model.config.heads, len(words),
                             model.step_count, model.seed))
    for name in model.param_names:
        parts.append(model.params[name].astype("<f4").tobytes())
    parts.append(struct.pack("<I", len(words)))
    for word in words:
        raw = word.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> LanguageModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"bad checkpoint magic {raw[:4]!r}", 1)
    window, dim, layers, heads, n_words, step_count, seed = struct.unpack_from("<7Q", raw, 4)
    offset = 4 + 7 * 8
    v_total = n_words + len(RESERVED_TOKENS)
    config = LMConfig(dim=dim, heads=heads, layers=layers, window=window)
    shapes = {"wte": (v_total, dim), "wpe": (window, dim)}
    for i in range(layers):
        shapes.update({f"l{i}.wq": (dim, dim), f"l{i}.wk": (dim, dim), f"l{i}.wv": (dim, dim),
                       f"l{i}.wo": (dim, dim), f"l{i}.w1": (dim, 4 * dim), f"l{i}.w2": (4 * dim, dim)})
    params = {}
    for name in _param_names(layers):
        shape = shapes[name]
        count = int(np.prod(shape))
        params[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        offset += count * 4
    (stored_count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if stored_count != n_words:
        raise ParseError("vocabulary count mismatch in checkpoint")
    words = []
    for _ in range(n_words):
        (length,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        words.append(raw[offset:offset + length].decode("utf-8"))
        offset += length
    model = object.__new__(LanguageModel)
    model.vocab = Vocabulary(words)
    model.config = config
    model.seed = seed
    model.step_count = step_count
    model.params = params
    return model
