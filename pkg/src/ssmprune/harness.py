"""Tokenization, corpora, synthetic tasks and evaluation protocols."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .analysis import flops_estimate
from .model import LayerParams, Model, ModelConfig, ForwardRecord, forward, forward_pruned, init_model
from .pruning import CRITERIA, PruneSchedule, linear_schedule

log = logging.getLogger(__name__)

BYTE_VOCAB = 256
SPECIAL_TOKENS = {"<|bos|>": 256, "<|eos|>": 257}
VOCAB_SIZE = BYTE_VOCAB + len(SPECIAL_TOKENS)
LOG2E = 1.0 / math.log(2.0)


def byte_tokenize(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def detokenize(ids: Iterable[int]) -> str:
    """Inverse of :func:`byte_tokenize`; special tokens are dropped."""
    return bytes(i for i in ids if i < BYTE_VOCAB).decode("utf-8", errors="strict")


# ---------------------------------------------------------------------------
# corpora


def parse_id_lines(text: str) -> list[np.ndarray]:
    """One sequence per non-empty line of whitespace-separated decimal ids."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            ids = [int(tok) for tok in line.split()]
        except ValueError:
            raise ValueError(f"line {lineno}: expected unsigned decimal ids") from None
        if any(i < 0 for i in ids):
            raise ValueError(f"line {lineno}: negative token id")
        out.append(np.array(ids, dtype=np.int64))
    return out


def load_corpus(path: str | os.PathLike) -> list[np.ndarray]:
    """Load documents as token id arrays.

    ``path`` is a directory or a single file. ``*.ids`` files hold
    pre-tokenized sequences (one per line); anything else is read as UTF-8
    text and byte-tokenized, one document per file. Directory entries are
    read in sorted name order.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus not found: {path}")
    files = sorted(p for p in path.iterdir() if p.is_file()) if path.is_dir() else [path]
    docs: list[np.ndarray] = []
    for f in files:
        if f.suffix == ".ids":
            docs.extend(parse_id_lines(f.read_text(encoding="ascii")))
        else:
            raw = f.read_bytes()
            raw.decode("utf-8")  # reject invalid text; newlines are kept byte-exact
            docs.append(np.frombuffer(raw, dtype=np.uint8).astype(np.int64))
    return docs


def log2_softmax(logits: np.ndarray) -> np.ndarray:
    """Log-probabilities in bits. Uniform logits over V give exactly ``-log2 V`` for V a power of two."""
    z = logits.astype(np.float64) * LOG2E
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log2(np.sum(np.exp2(z), axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalSpec:
    snippet_len: int = 100
    context_lengths: tuple[int, ...] = (512, 1024, 1536, 2048)
    criterion: str = "influence"
    ratio: float = 0.1
    aggregator: str = "max"
    exclude_bias: bool = True
    chunk_size: int | None = None
    seed: int = 0
    n_docs: int | None = None  # None -> every eligible document
    length_normalize: bool = False

    def __post_init__(self) -> None:
        self.context_lengths = tuple(int(c) for c in self.context_lengths)
        if self.snippet_len < 1:
            raise ValueError("snippet_len must be >= 1")
        if not self.context_lengths or self.context_lengths[0] < 1:
            raise ValueError("context lengths must be >= 1")
        if any(b <= a for a, b in zip(self.context_lengths, self.context_lengths[1:])):
            raise ValueError("context lengths must be strictly increasing")
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if not 0 < self.ratio <= 1:
            raise ValueError("ratio must lie in (0, 1]")

    def schedule(self, prompt_len: int, n_layers: int) -> PruneSchedule:
        return linear_schedule(prompt_len, n_layers, self.ratio, 1)


def run_prompt(model: Model, prompt: Sequence[int], continuation: Sequence[int], spec: EvalSpec,
               **kwargs) -> tuple[np.ndarray, ForwardRecord]:
    """Forward ``prompt + continuation`` pruning only the prompt.

    Returns the per-token log-likelihood (bits) of ``continuation`` and the
    forward record. The final prompt token is protected and is the score
    target; continuation tokens are never pruned.
    """
    P = len(prompt)
    ids = np.concatenate([np.asarray(prompt, dtype=np.int64), np.asarray(continuation, dtype=np.int64)])
    record = forward_pruned(
        model, ids, spec.schedule(P, model.config.n_layers), spec.criterion, protected=[P - 1],
        prunable=P, aggregator=spec.aggregator, exclude_bias=spec.exclude_bias,
        chunk_size=spec.chunk_size, seed=spec.seed, **kwargs,
    )
    logp = log2_softmax(record.logits_at(range(P - 1, len(ids) - 1)))
    ll = logp[np.arange(len(continuation)), np.asarray(continuation, dtype=np.int64)]
    return ll, record


PPL_COLUMNS = ("context_len", "n_docs", "perplexity")


@dataclass
class PerplexityResult:
    rows: list[tuple[int, int, float]]  # (context_len, n_docs, perplexity)
    skipped: int
    snippet_digest: dict[int, str]  # context_len -> sha256 of the scored ids
    bits: dict[int, float] = field(default_factory=dict)  # total NLL in bits


def select_documents(docs: Sequence[np.ndarray], needed: int, spec: EvalSpec) -> tuple[list[int], int]:
    """Indices of eligible documents in seeded order, and the number skipped."""
    order = np.random.default_rng(spec.seed).permutation(len(docs))
    eligible = [int(i) for i in order if len(docs[i]) >= needed]
    skipped = len(docs) - len(eligible)
    if spec.n_docs is not None:
        eligible = eligible[: spec.n_docs]
    return eligible, skipped


def perplexity_with_context(model: Model, docs: Sequence[np.ndarray], spec: EvalSpec) -> PerplexityResult:
    """Perplexity of a fixed snippet conditioned on varying amounts of context.

    Every document contributes the snippet at ``[max_c, max_c + snippet_len)``;
    for context length ``c`` the input is the ``c`` tokens before it. The
    scored ids are therefore the same for every ``c``.
    """
    start = spec.context_lengths[-1]
    needed = start + spec.snippet_len
    chosen, skipped = select_documents(docs, needed, spec)
    if skipped:
        log.warning("skipped %d of %d documents shorter than %d tokens", skipped, len(docs), needed)
    rows = []
    digests = {}
    bits = {}
    for c in spec.context_lengths:
        total = 0.0
        h = hashlib.sha256()
        for i in chosen:
            doc = docs[i]
            snippet = doc[start : start + spec.snippet_len]
            h.update(np.ascontiguousarray(snippet, dtype="<i8").tobytes())
            ll, _ = run_prompt(model, doc[start - c : start], snippet, spec)
            total += -float(ll.sum())
        n_tokens = len(chosen) * spec.snippet_len
        ppl = float(2.0 ** (total / n_tokens)) if n_tokens else float("nan")
        rows.append((c, len(chosen), ppl))
        digests[c] = h.hexdigest()
        bits[c] = total
    return PerplexityResult(rows, skipped, digests, bits)


@dataclass
class PromptLabelItem:
    prompt: list[int]
    labels: list[list[int]]  # candidate continuations
    answer: int = 0  # index of the correct candidate

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if not self.labels or any(len(lab) == 0 for lab in self.labels):
            raise ValueError("every candidate label must be non-empty")
        if not 0 <= self.answer < len(self.labels):
            raise ValueError("answer index out of range")


def _as_ids(value, where: str) -> list[int]:
    if isinstance(value, str):
        return byte_tokenize(value)
    if isinstance(value, list) and all(isinstance(i, int) and i >= 0 for i in value):
        return value
    raise ValueError(f"{where}: expected a string or a list of non-negative ids")


def load_prompt_label_items(path: str | os.PathLike) -> list[PromptLabelItem]:
    """Read items from JSON lines ``{"prompt": ..., "labels": [...], "answer": i}``.

    Prompts and labels are either text (byte-tokenized) or id lists.
    """
    items = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            items.append(PromptLabelItem(
                _as_ids(obj["prompt"], f"line {lineno} prompt"),
                [_as_ids(lab, f"line {lineno} label") for lab in obj["labels"]],
                int(obj.get("answer", 0)),
            ))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"line {lineno}: malformed item ({exc})") from None
    return items


@dataclass
class PromptLabelResult:
    accuracy: float
    predictions: list[int]
    scores: list[list[float]]


def eval_prompt_label(model: Model, items: Sequence[PromptLabelItem], spec: EvalSpec) -> PromptLabelResult:
    """Multiple-choice accuracy with pruning applied to prompts only.

    Each candidate is scored by its summed log-likelihood (divided by its
    length when ``spec.length_normalize``); ties go to the first candidate.
    """
    predictions, all_scores = [], []
    for item in items:
        scores = []
        for label in item.labels:
            ll, _ = run_prompt(model, item.prompt, label, spec)
            score = float(ll.sum())
            scores.append(score / len(label) if spec.length_normalize else score)
        predictions.append(int(np.argmax(scores)))
        all_scores.append(scores)
    correct = sum(p == item.answer for p, item in zip(predictions, items))
    return PromptLabelResult(correct / len(items) if items else float("nan"), predictions, all_scores)


def uniform_logit_model(config: ModelConfig) -> Model:
    """Model whose logits are identically zero (every token equally likely)."""
    model = init_model(config, seed=0)
    model.embedding[...] = 0.0
    return model


# ---------------------------------------------------------------------------
# key-token task


@dataclass
class KeyTokenTask:
    tokens: np.ndarray
    key_positions: np.ndarray  # every position holding a key token
    answer: np.ndarray  # value of each key slot, in order of appearance
    n_filler: int
    n_values: int


def keytoken_vocab(n_keys: int, n_values: int = 4, n_filler: int = 16) -> int:
    return n_filler + n_keys * n_values


def gen_keytoken_task(seed: int, T: int, n_keys: int, *, span: int = 1, n_values: int = 4,
                      n_filler: int = 16) -> KeyTokenTask:
    """Filler sequence with ``n_keys`` key spans placed uniformly at random.

    Key ``i`` (in order of position) carries value ``v`` as token
    ``n_filler + i * n_values + v``, repeated ``span`` times in adjacent
    positions. The last position stays a filler whenever there is room.
    """
    if T < 1 or n_keys < 0 or span < 1:
        raise ValueError("need T >= 1, n_keys >= 0, span >= 1")
    if n_keys * span > T:
        raise ValueError(f"{n_keys} keys of span {span} do not fit in {T} tokens")
    rng = np.random.default_rng(seed)
    room = T - 1 if n_keys * span < T else T
    tokens = rng.integers(0, n_filler, size=T)
    slots = room - n_keys * (span - 1)
    starts = np.sort(rng.choice(slots, size=n_keys, replace=False)) + np.arange(n_keys) * (span - 1)
    values = rng.integers(0, n_values, size=n_keys)
    positions = []
    for i, (s, v) in enumerate(zip(starts, values)):
        tokens[s : s + span] = n_filler + i * n_values + v
        positions.extend(range(s, s + span))
    return KeyTokenTask(tokens.astype(np.int64), np.array(positions, dtype=np.int64), values.astype(np.int64),
                        n_filler, n_values)


def build_keytoken_model(n_keys: int, *, n_values: int = 4, n_filler: int = 16, n_layers: int = 2,
                         seed: int = 0) -> Model:
    """Hand-built model in which key tokens dominate the scan state.

    Residual channels: a constant, one channel per key slot (holding the
    key value), one filler-content channel, and read-out channels the last
    layer writes into. The step-size projection is strongly negative for
    every token except keys of the matching slot, which get a large step:
    keys overwrite their slot's state, fillers barely touch it. Filler
    content flows through its own slowly decaying channel so that fillers
    have small, unequal influence. All projection biases are zero, so
    excluding them while scoring changes nothing. Only the last layer
    writes to the residual stream; earlier layers are identities whose scans
    still drive pruning.
    """
    rng = np.random.default_rng(seed)
    one, slot0, fill = 0, 1, 1 + n_keys
    read0, read_fill = 2 + n_keys, 2 + 2 * n_keys
    d_model = 3 + 2 * n_keys
    # inner channels: 0 = constant, 1..n_keys = slots, n_keys + 1 = filler
    cfg = ModelConfig(n_layers=n_layers, d_model=d_model, expand=1, d_state=1, d_conv=0,
                      vocab_size=keytoken_vocab(n_keys, n_values, n_filler), dt_rank=1 + n_keys)
    di, rank = cfg.d_inner, cfg.dt_rank
    f_in = n_keys + 1

    emb = np.zeros((cfg.vocab_size, d_model))
    emb[:, one] = 8.0
    emb[:n_filler, fill] = rng.uniform(0.5, 1.5, size=n_filler)
    for i in range(n_keys):
        for v in range(n_values):
            emb[n_filler + i * n_values + v, slot0 + i] = 1.0 + v

    in_proj = np.zeros((d_model, 2 * di))
    in_proj[one, 0] = 1.0
    for i in range(n_keys):
        in_proj[slot0 + i, 1 + i] = 8.0
    in_proj[fill, f_in] = 1.0
    in_proj[one, di:] = 1.0  # gate path: constant

    x_proj = np.zeros((di, rank + 2))
    x_proj[0, 0] = 1.0  # rank component 0 <- constant
    for i in range(n_keys):
        x_proj[1 + i, 1 + i] = 1.0  # rank component 1+i <- slot i
    x_proj[0, rank] = 1.0  # B <- constant
    x_proj[0, rank + 1] = 1.0  # C <- constant

    dt_proj = np.zeros((rank, di))
    dt_proj[0, : 1 + n_keys] = -4.0  # constant and slot channels: tiny steps
    dt_proj[0, f_in] = -1.6  # filler channel: steps near 0.01
    for i in range(n_keys):
        dt_proj[1 + i, 1 + i] = 10.0  # a key of slot i fires its own channel

    a_log = np.zeros((di, 1))
    a_log[1 : 1 + n_keys] = math.log(3.0)

    def layer(read: bool) -> LayerParams:
        out_proj = np.zeros((di, d_model))
        if read:
            for i in range(n_keys):
                out_proj[1 + i, read0 + i] = 1.0
            out_proj[f_in, read_fill] = 1.0
        return LayerParams(
            norm=np.ones(d_model), in_proj=in_proj, conv_w=np.zeros((di, 0)), conv_b=np.zeros(di),
            x_proj=x_proj, dt_proj=dt_proj, dt_bias=np.zeros(di), a_log=a_log, out_proj=out_proj,
        )

    layers = [layer(read=i == n_layers - 1) for i in range(n_layers)]
    return Model(cfg, emb, layers, np.ones(d_model)).astype(np.float32)


def keytoken_deviation(model: Model, task: KeyTokenTask, schedule: PruneSchedule, criterion: str,
                       seed: int = 0, aggregator: str = "max") -> float:
    """Relative change of the final-token residual stream caused by pruning."""
    dense = forward(model, task.tokens).hidden[-1].astype(np.float64)
    pruned = forward_pruned(model, task.tokens, schedule, criterion, seed=seed,
                            aggregator=aggregator).hidden[-1].astype(np.float64)
    return float(np.linalg.norm(pruned - dense) / np.linalg.norm(dense))


# ---------------------------------------------------------------------------
# criterion x ratio sweeps

SWEEP_COLUMNS = ("criterion", "keep_ratio", "metric", "value", "flops_ratio")


def _flops_ratio(config: ModelConfig, schedule: PruneSchedule, tail: int = 0) -> float:
    pruned = flops_estimate(config, schedule.keep, schedule.length, tail).total
    dense = flops_estimate(config, None, schedule.length, tail).total
    return pruned / dense


def sweep_keytoken(criteria: Sequence[str], ratios: Sequence[float], seeds: Sequence[int], *,
                   length: int = 64, n_keys: int = 3, span: int = 2, aggregator: str = "max",
                   model: Model | None = None) -> list[tuple[str, float, str, float, float]]:
    """Median final-token deviation on key-token tasks, one row per (criterion, ratio)."""
    model = build_keytoken_model(n_keys) if model is None else model
    tasks = [gen_keytoken_task(s, length, n_keys, span=span) for s in seeds]
    rows = []
    for criterion in criteria:
        for r in ratios:
            schedule = linear_schedule(length, model.config.n_layers, r)
            devs = [keytoken_deviation(model, task, schedule, criterion, seed, aggregator)
                    for seed, task in zip(seeds, tasks)]
            rows.append((criterion, float(r), "median_deviation", float(np.median(devs)),
                         _flops_ratio(model.config, schedule)))
    return rows


def sweep_perplexity(model: Model, docs: Sequence[np.ndarray], spec: EvalSpec, criteria: Sequence[str],
                     ratios: Sequence[float]) -> list[tuple[str, float, str, float, float]]:
    """Perplexity per context length for each (criterion, ratio)."""
    rows = []
    for criterion in criteria:
        for r in ratios:
            cell = replace(spec, criterion=criterion, ratio=float(r))
            result = perplexity_with_context(model, docs, cell)
            for c, _, ppl in result.rows:
                flops = _flops_ratio(model.config, cell.schedule(c, model.config.n_layers), spec.snippet_len)
                rows.append((criterion, float(r), f"perplexity_{c}", ppl, flops))
    return rows


def sweep_prompt_label(model: Model, items: Sequence[PromptLabelItem], spec: EvalSpec, criteria: Sequence[str],
                       ratios: Sequence[float]) -> list[tuple[str, float, str, float, float]]:
    """Multiple-choice accuracy for each (criterion, ratio)."""
    L = model.config.n_layers
    rows = []
    for criterion in criteria:
        for r in ratios:
            cell = replace(spec, criterion=criterion, ratio=float(r))
            result = eval_prompt_label(model, items, cell)
            pruned = dense = 0
            for item in items:
                for label in item.labels:
                    P = len(item.prompt)
                    pruned += flops_estimate(model.config, cell.schedule(P, L).keep, P, len(label)).total
                    dense += flops_estimate(model.config, None, P, len(label)).total
            rows.append((criterion, float(r), "accuracy", result.accuracy, pruned / dense))
    return rows
