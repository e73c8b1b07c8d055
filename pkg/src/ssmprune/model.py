"""Mamba-style layer stack whose forward pass runs on a shrinking token set.

Each block is::

    pre-norm -> in_proj -> (value, gate)
    value -> causal depthwise conv (optional) -> silu -> selective scan
    scan output * silu(gate) -> out_proj -> residual add

Pruning happens at block boundaries: after block ``l`` the lowest-scored
prunable tokens are dropped and only survivors enter block ``l + 1``. The
convolution always runs over the compacted surviving sequence. Positions are
tracked in original (0-based) coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .kernel import ScanParams, scan
from .pruning import (
    CRITERIA,
    PruneSchedule,
    ScheduleError,
    influence_scores,
    linear_schedule,
    select_influence,
    select_random,
    select_uniform,
)

NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    expand: int = 2
    d_state: int = 16
    d_conv: int = 4
    vocab_size: int = 258
    dt_rank: int = 0  # 0 -> ceil(d_model / 16)

    def __post_init__(self) -> None:
        for name in ("n_layers", "d_model", "expand", "d_state", "vocab_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.d_conv < 0 or self.dt_rank < 0:
            raise ValueError("d_conv and dt_rank must be >= 0")
        if self.dt_rank == 0:
            object.__setattr__(self, "dt_rank", math.ceil(self.d_model / 16))

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    def to_strings(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_strings(cls, items: dict[str, str]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: int(v) for k, v in items.items() if k in known})


LAYER_FIELDS = ("norm", "in_proj", "conv_w", "conv_b", "x_proj", "dt_proj", "dt_bias", "a_log", "out_proj")


@dataclass
class LayerParams:
    norm: np.ndarray  # [d_model]
    in_proj: np.ndarray  # [d_model, 2 * d_inner]
    conv_w: np.ndarray  # [d_inner, d_conv]
    conv_b: np.ndarray  # [d_inner]
    x_proj: np.ndarray  # [d_inner, dt_rank + 2 * d_state]
    dt_proj: np.ndarray  # [dt_rank, d_inner]
    dt_bias: np.ndarray  # [d_inner]
    a_log: np.ndarray  # [d_inner, d_state]
    out_proj: np.ndarray  # [d_inner, d_model]

    def shapes(self, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        di, r, n = cfg.d_inner, cfg.dt_rank, cfg.d_state
        return {
            "norm": (cfg.d_model,),
            "in_proj": (cfg.d_model, 2 * di),
            "conv_w": (di, cfg.d_conv),
            "conv_b": (di,),
            "x_proj": (di, r + 2 * n),
            "dt_proj": (r, di),
            "dt_bias": (di,),
            "a_log": (di, n),
            "out_proj": (di, cfg.d_model),
        }


@dataclass
class Model:
    config: ModelConfig
    embedding: np.ndarray  # [vocab, d_model]; also the output head
    layers: list[LayerParams]
    norm_f: np.ndarray  # [d_model]

    def __post_init__(self) -> None:
        cfg = self.config
        if self.embedding.shape != (cfg.vocab_size, cfg.d_model):
            raise ValueError(f"embedding shape {self.embedding.shape} does not match config")
        if self.norm_f.shape != (cfg.d_model,):
            raise ValueError(f"norm_f shape {self.norm_f.shape} does not match config")
        if len(self.layers) != cfg.n_layers:
            raise ValueError(f"{len(self.layers)} layers given, config says {cfg.n_layers}")
        for i, layer in enumerate(self.layers):
            for name, shape in layer.shapes(cfg).items():
                if getattr(layer, name).shape != shape:
                    raise ValueError(f"layers.{i}.{name} has shape {getattr(layer, name).shape}, expected {shape}")

    @property
    def dtype(self) -> np.dtype:
        return self.embedding.dtype

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"embedding": self.embedding, "norm_f": self.norm_f}
        for i, layer in enumerate(self.layers):
            for name in LAYER_FIELDS:
                out[f"layers.{i}.{name}"] = getattr(layer, name)
        return out

    @classmethod
    def from_tensors(cls, config: ModelConfig, tensors: dict[str, np.ndarray]) -> "Model":
        try:
            layers = [
                LayerParams(**{name: tensors[f"layers.{i}.{name}"] for name in LAYER_FIELDS})
                for i in range(config.n_layers)
            ]
            return cls(config, tensors["embedding"], layers, tensors["norm_f"])
        except KeyError as exc:
            raise ValueError(f"missing tensor {exc.args[0]}") from None

    def astype(self, dtype) -> "Model":
        return Model.from_tensors(self.config, {k: v.astype(dtype) for k, v in self.tensors().items()})


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Random model with the usual selective-SSM initialization."""
    rng = np.random.default_rng(seed)
    cfg = config
    di, n, r = cfg.d_inner, cfg.d_state, cfg.dt_rank

    def dense(fan_in: int, fan_out: int) -> np.ndarray:
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))

    layers = []
    for _ in range(cfg.n_layers):
        # step sizes log-uniform in [1e-3, 1e-1], stored through inverse softplus
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=di))
        layers.append(
            LayerParams(
                norm=np.ones(cfg.d_model),
                in_proj=dense(cfg.d_model, 2 * di),
                conv_w=rng.normal(0.0, 1.0 / math.sqrt(max(cfg.d_conv, 1)), size=(di, cfg.d_conv)),
                conv_b=np.zeros(di),
                x_proj=dense(di, r + 2 * n),
                dt_proj=rng.uniform(-1.0, 1.0, size=(r, di)) * r**-0.5,
                dt_bias=dt + np.log(-np.expm1(-dt)),
                a_log=np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (di, 1))),
                out_proj=dense(di, cfg.d_model) / math.sqrt(2 * cfg.n_layers),
            )
        )
    model = Model(
        cfg,
        embedding=rng.normal(0.0, 0.02 * math.sqrt(cfg.d_model), size=(cfg.vocab_size, cfg.d_model)),
        layers=layers,
        norm_f=np.ones(cfg.d_model),
    )
    return model.astype(dtype)


# ---------------------------------------------------------------------------
# block


def rms_norm(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    scale = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    return (x * scale.astype(x.dtype)) * weight


def silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) = max(x, 0) + log1p(e^-|x|); several times faster than logaddexp
    out = np.abs(x)
    np.negative(out, out=out)
    np.exp(out, out=out)
    np.log1p(out, out=out)
    out += np.maximum(x, 0)
    return out


def causal_conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Depthwise causal convolution over the rows of ``x`` [k, d]."""
    width = weight.shape[1]
    k = x.shape[0]
    out = np.broadcast_to(bias, x.shape).copy()
    for j in range(width):
        lag = width - 1 - j
        if lag >= k:
            continue
        out[lag:] += x[: k - lag] * weight[:, j]
    return out


@dataclass
class BlockResult:
    out: np.ndarray  # [k, d_model], residual stream after the block
    params: ScanParams  # scan inputs
    y: np.ndarray  # [k, d_inner], raw scan output
    dt_raw: np.ndarray  # [k, d_inner], step-size projection before bias and softplus

    def decay_delta(self, exclude_bias: bool) -> np.ndarray | None:
        """Step sizes for the decay products used in scoring."""
        return softplus(self.dt_raw) if exclude_bias else None


def block_forward(layer: LayerParams, tokens: np.ndarray) -> BlockResult:
    """Run one block over ``tokens`` [k, d_model] (the surviving sequence)."""
    if tokens.ndim != 2 or tokens.shape[0] < 1 or tokens.shape[1] != layer.in_proj.shape[0]:
        raise ValueError(f"block input has shape {tokens.shape}, expected [k >= 1, {layer.in_proj.shape[0]}]")
    d_inner = layer.a_log.shape[0]
    rank = layer.dt_proj.shape[0]
    d_state = layer.a_log.shape[1]

    xz = rms_norm(tokens, layer.norm) @ layer.in_proj
    x, z = xz[:, :d_inner], xz[:, d_inner:]
    if layer.conv_w.shape[1]:
        x = causal_conv(x, layer.conv_w, layer.conv_b)
    u = silu(x)
    dbc = u @ layer.x_proj
    dt_raw = dbc[:, :rank] @ layer.dt_proj
    b = dbc[:, rank : rank + d_state]
    c = dbc[:, rank + d_state :]
    delta = softplus(dt_raw + layer.dt_bias)
    params = ScanParams(layer.a_log, delta, b, c, u)
    y = scan(params)
    out = tokens + (y * silu(z)) @ layer.out_proj
    return BlockResult(out, params, y, dt_raw)


# ---------------------------------------------------------------------------
# pruned forward


@dataclass
class LayerMaterials:
    """What analysis needs from one layer: positions entering it and its scan."""

    positions: np.ndarray
    params: ScanParams
    y: np.ndarray
    decay_delta: np.ndarray | None
    target: int  # index (into positions) of the score target


@dataclass
class ForwardRecord:
    active: list[np.ndarray]  # active[l] = original positions surviving layer l
    logits: np.ndarray  # [len(active[-1]), vocab]
    hidden: np.ndarray  # [len(active[-1]), d_model], residual stream before final norm
    length: int
    materials: list[LayerMaterials] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)  # block outputs per layer

    @property
    def positions(self) -> np.ndarray:
        return self.active[-1]

    def entering(self, layer: int) -> np.ndarray:
        return np.arange(self.length) if layer == 0 else self.active[layer - 1]

    def logits_at(self, positions: Iterable[int]) -> np.ndarray:
        lookup = {int(p): i for i, p in enumerate(self.positions)}
        try:
            index = [lookup[int(p)] for p in positions]
        except KeyError as exc:
            raise KeyError(f"position {exc.args[0]} was pruned") from None
        return self.logits[index]


def _segments(prunable: int, chunk_size: int | None) -> list[tuple[int, int]]:
    if chunk_size is None:
        return [(0, prunable)]
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    return [(s, min(s + chunk_size, prunable)) for s in range(0, prunable, chunk_size)]


def forward(model: Model, token_ids: Sequence[int], **kwargs) -> ForwardRecord:
    """Dense forward pass; the no-op schedule through :func:`forward_pruned`."""
    T = len(token_ids)
    return forward_pruned(model, token_ids, PruneSchedule.dense(T, model.config.n_layers), **kwargs)


def forward_pruned(
    model: Model,
    token_ids: Sequence[int],
    schedule: PruneSchedule,
    criterion: str = "influence",
    protected: Iterable[int] | None = None,
    *,
    prunable: int | None = None,
    aggregator: str = "max",
    exclude_bias: bool = True,
    chunk_size: int | None = None,
    seed: int = 0,
    keep_materials: bool = False,
    keep_outputs: bool = False,
) -> ForwardRecord:
    """Forward pass that prunes tokens after every block.

    Only positions ``< prunable`` (the prompt) are candidates; later positions
    (labels) pass through every layer untouched and are not counted in
    ``schedule.keep``. The score target is the last prunable token, which is
    protected by default. With ``chunk_size`` the prompt is split into chunks
    that are scored and pruned independently, each against its own last token
    (also protected); per-chunk keep counts follow a linear schedule at
    ``schedule.final_ratio``.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    T = len(ids)
    cfg = model.config
    if T < 1:
        raise ValueError("empty input")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
    if schedule.n_layers != cfg.n_layers:
        raise ScheduleError(f"schedule has {schedule.n_layers} layers, model has {cfg.n_layers}")
    P = T if prunable is None else int(prunable)
    if not 1 <= P <= T:
        raise ValueError(f"prunable length {P} outside [1, {T}]")
    if schedule.length != P:
        raise ScheduleError(f"schedule built for {schedule.length} tokens, prompt has {P}")

    segments = _segments(P, chunk_size)
    prot = set(range(P - 1, P)) if protected is None else {int(p) for p in protected}
    if any(not 0 <= p < T for p in prot):
        raise IndexError("protected positions out of range")
    prot = {p for p in prot if p < P}
    if chunk_size is not None:
        prot |= {stop - 1 for _, stop in segments}
        seg_keep = [
            linear_schedule(stop - start, cfg.n_layers, schedule.final_ratio,
                            sum(start <= p < stop for p in prot)).keep
            for start, stop in segments
        ]
    else:
        seg_keep = [schedule.keep]
        if min(schedule.keep) < len(prot):
            raise ScheduleError(f"keep count {min(schedule.keep)} is below the {len(prot)} protected tokens")
    prot_arr = np.array(sorted(prot), dtype=np.int64)
    rng = np.random.default_rng(seed)

    positions = np.arange(T)
    h = model.embedding[ids]
    active: list[np.ndarray] = []
    materials: list[LayerMaterials] = []
    outputs: list[np.ndarray] = []
    for layer_idx, layer in enumerate(model.layers):
        res = block_forward(layer, h)
        n_prompt = int(np.searchsorted(positions, P))
        if keep_materials:
            materials.append(LayerMaterials(positions, res.params, res.y,
                                            res.decay_delta(exclude_bias), n_prompt - 1))
        if keep_outputs:
            outputs.append(res.out)
        keep_idx = []
        decay = None
        for (start, stop), keeps in zip(segments, seg_keep):
            lo, hi = np.searchsorted(positions, [start, stop])
            k = keeps[layer_idx]
            m = hi - lo
            if k >= m:
                keep_idx.append(np.arange(lo, hi))
                continue
            local_prot = np.nonzero(np.isin(positions[lo:hi], prot_arr))[0]
            if criterion == "influence":
                if decay is None and exclude_bias:
                    decay = res.decay_delta(True)
                sub = ScanParams(res.params.a_log, res.params.delta[lo:hi], res.params.b[lo:hi],
                                 res.params.c[lo:hi], res.params.x[lo:hi])
                s = influence_scores(sub, aggregator=aggregator,
                                     decay_delta=None if decay is None else decay[lo:hi])
                sel = select_influence(s.scores, k, local_prot)
            elif criterion == "uniform":
                sel = select_uniform(m, k, local_prot)
            else:
                sel = select_random(m, k, local_prot, rng)
            keep_idx.append(lo + sel)
        keep_idx.append(np.arange(n_prompt, len(positions)))
        idx = np.concatenate(keep_idx)
        if len(idx) == len(positions):
            h = res.out
        else:
            h = res.out[idx]
            positions = positions[idx]
        active.append(positions)

    hidden = h
    logits = rms_norm(hidden, model.norm_f) @ model.embedding.T
    return ForwardRecord(active, logits, hidden, T, materials, outputs)
