"""Token influence scores, selection criteria and pruning schedules.

The influence of token ``t`` on the output at a target position ``T*`` is the
part of ``y[T*]`` that flows from ``x[t]`` through the recurrence::

    dy[t, d] = sum_n c_target[n] * prod_{k=t+1..T*} abar[k, d, n] * bbar[t, d, n] * x[t, d]

Removing ``x[t]`` from the scan changes ``y[T*]`` by exactly ``dy[t]``. A
token's score is ``max_d dy[t, d]`` (or the l2 norm over ``d``). Tokens with
the lowest scores are pruned.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .kernel import ScanParams

CRITERIA = ("influence", "uniform", "random")
AGGREGATORS = ("max", "l2")
DEFAULT_RATIOS = (0.9, 0.8, 0.7, 0.6, 0.5, 0.3, 0.1)

# time steps per block in influence_scores
SCORE_BLOCK = 64


class ScheduleError(ValueError):
    """Raised for schedules that cannot be realized."""


def round_half_away(value: Fraction) -> int:
    """Round a non-negative rational with halves going up."""
    if value < 0:
        return -round_half_away(-value)
    return int((value + Fraction(1, 2)).__floor__())


def _exact(r: float) -> Fraction:
    # decimal literal of r, so 0.7 means 7/10 rather than its binary neighbour
    return Fraction(Decimal(repr(float(r))))


@dataclass(frozen=True)
class PruneSchedule:
    """Tokens kept after each layer.

    ``keep[l]`` is the number of tokens that survive layer ``l`` and feed
    layer ``l + 1`` (the last entry feeds the head). Layer 0 always sees all
    ``length`` tokens.
    """

    keep: tuple[int, ...]
    final_ratio: float
    length: int

    def __post_init__(self) -> None:
        keep = tuple(int(k) for k in self.keep)
        object.__setattr__(self, "keep", keep)
        if not keep:
            raise ScheduleError("schedule needs at least one layer")
        if not 0 < self.final_ratio <= 1:
            raise ScheduleError(f"final ratio must lie in (0, 1], got {self.final_ratio}")
        if keep[0] > self.length or min(keep) < 1:
            raise ScheduleError(f"keep counts {keep} out of range for length {self.length}")
        if any(b > a for a, b in zip(keep, keep[1:])):
            raise ScheduleError(f"keep counts must be non-increasing, got {keep}")

    @property
    def n_layers(self) -> int:
        return len(self.keep)

    def entering(self) -> tuple[int, ...]:
        """Tokens entering each layer."""
        return (self.length,) + self.keep[:-1]

    @classmethod
    def dense(cls, length: int, n_layers: int) -> "PruneSchedule":
        return cls(keep=(length,) * n_layers, final_ratio=1.0, length=length)


def linear_schedule(length: int, n_layers: int, ratio: float, protected_count: int = 1) -> PruneSchedule:
    """Keep counts falling linearly from ``length`` to ``ratio * length``.

    ``keep[l] = max(round(length * (1 - (1 - ratio) * (l + 1) / n_layers)), protected_count)``
    with exact rational arithmetic and halves rounded away from zero.
    """
    if length < 1 or n_layers < 1:
        raise ScheduleError("length and n_layers must be >= 1")
    if not 0 < ratio <= 1:
        raise ScheduleError(f"ratio must lie in (0, 1], got {ratio}")
    if protected_count > length:
        raise ScheduleError(f"{protected_count} protected tokens exceed length {length}")
    r = _exact(ratio)
    keep = tuple(
        max(round_half_away(length * (1 - (1 - r) * Fraction(layer, n_layers))), protected_count)
        for layer in range(1, n_layers + 1)
    )
    return PruneSchedule(keep=keep, final_ratio=float(ratio), length=length)


def constant_schedule(length: int, n_layers: int, ratio: float, protected_count: int = 1) -> PruneSchedule:
    """Prune once at the first layer to ``round(ratio * length)`` and hold that count."""
    if length < 1 or n_layers < 1:
        raise ScheduleError("length and n_layers must be >= 1")
    if not 0 < ratio <= 1:
        raise ScheduleError(f"ratio must lie in (0, 1], got {ratio}")
    if protected_count > length:
        raise ScheduleError(f"{protected_count} protected tokens exceed length {length}")
    k = max(round_half_away(length * _exact(ratio)), protected_count)
    return PruneSchedule(keep=(k,) * n_layers, final_ratio=float(ratio), length=length)


# ---------------------------------------------------------------------------
# scores


@dataclass(frozen=True)
class InfluenceScores:
    scores: np.ndarray  # [target - offset + 1]
    target: int  # position scores are measured against
    contributions: np.ndarray  # [target - offset + 1, d], dy per channel
    offset: int = 0  # position of scores[0]

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.offset, self.offset + len(self.scores))


def aggregate(dy: np.ndarray, aggregator: str = "max") -> np.ndarray:
    if aggregator == "max":
        return dy.max(axis=-1)
    if aggregator == "l2":
        return np.sqrt(np.sum(dy * dy, axis=-1))
    raise ValueError(f"unknown aggregator {aggregator!r}; expected one of {AGGREGATORS}")


def influence_from_trace(
    abar: np.ndarray,
    bbar: np.ndarray,
    x: np.ndarray,
    c_target: np.ndarray,
    target: int | None = None,
    aggregator: str = "max",
) -> InfluenceScores:
    """Scores from discretized matrices via one backward sweep of suffix products."""
    if target is None:
        target = abar.shape[0] - 1
    if not 0 <= target < abar.shape[0]:
        raise IndexError(f"target {target} outside trace of length {abar.shape[0]}")
    dy = np.empty((target + 1, abar.shape[1]), dtype=np.result_type(abar, bbar, x, c_target))
    suffix = np.ones(abar.shape[1:], dtype=abar.dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(target, -1, -1):
            dy[t] = (suffix * bbar[t] * x[t][:, None]) @ c_target
            suffix = suffix * abar[t]
    if not np.all(np.isfinite(dy)):
        raise FloatingPointError("non-finite suffix product in influence scores")
    return InfluenceScores(aggregate(dy, aggregator), target, dy)


def influence_scores(
    params: ScanParams,
    target: int | None = None,
    aggregator: str = "max",
    decay_delta: np.ndarray | None = None,
) -> InfluenceScores:
    """Scores for positions ``0..target`` of one scan.

    The suffix products of ``abar`` are evaluated as ``exp(A * S)`` where
    ``S[t] = sum_{k=t+1..target} delta[k]`` is a reversed running sum, so the
    cost is ``O(T * d * n)`` without storing the trace. ``decay_delta``
    replaces ``delta`` inside the decay products only; the model passes the
    step size computed without its projection bias here.
    """
    T = params.length
    if target is None:
        target = T - 1
    if not 0 <= target < T:
        raise IndexError(f"target {target} outside sequence of length {T}")
    dd = params.delta if decay_delta is None else decay_delta
    if dd.shape != params.delta.shape:
        raise ValueError("decay_delta must match delta in shape")
    dtype = np.result_type(dd, params.b, params.x)
    A = np.ascontiguousarray(params.A.T, dtype=dtype)  # [n, d]
    stop = target + 1
    # suffix[t] = sum of dd over (t, target]
    suffix = np.zeros((stop, dd.shape[1]), dtype=dd.dtype)
    if stop > 1:
        suffix[:-1] = np.cumsum(dd[stop - 1 : 0 : -1], axis=0)[::-1]
    weights = params.c[target][None, :] * params.b[:stop]  # [t, n]
    drive = params.delta[:stop] * params.x[:stop]  # [t, d]
    dy = np.zeros((stop, dd.shape[1]), dtype=dtype)
    # Decay factors are shifted down by exp(cut) and those below it become
    # exactly zero. The shift is far under the rounding error of any factor
    # that matters, and it keeps the arithmetic out of slow subnormals.
    cut = np.log(np.finfo(dtype).tiny, dtype=dtype) / 2
    floor = np.exp(np.array(cut, dtype=dtype))
    # suffix shrinks along t, so rows whose every factor is below the cut
    # form a prefix that needs no work
    nearest = (suffix * A.max(axis=0)).max(axis=1)
    first = int(np.searchsorted(nearest, cut)) if stop > 1 else 0
    block = min(SCORE_BLOCK, stop)
    decay = np.empty((block,) + A.shape, dtype=dtype)
    for start in range(first, stop, block):
        end = min(start + block, stop)
        k = end - start
        arg = decay[:k]
        np.multiply(suffix[start:end, None, :], A, out=arg)
        np.maximum(arg, cut, out=arg)
        np.exp(arg, out=arg)
        arg -= floor
        dy[start:end] = np.matmul(weights[start:end, None, :], arg)[:, 0, :]
    dy *= drive
    if not np.all(np.isfinite(dy)):
        raise FloatingPointError("non-finite suffix product in influence scores")
    return InfluenceScores(aggregate(dy, aggregator), target, dy)


def chunked_scores(
    params: ScanParams,
    chunk_size: int,
    aggregator: str = "max",
    decay_delta: np.ndarray | None = None,
) -> list[InfluenceScores]:
    """Per-chunk scores, each measured against the last token of its chunk.

    The forward state still crosses chunk boundaries, but the influence of a
    token on its own chunk's last output does not depend on the carried-in
    state, so each chunk is scored on its own slice.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    out = []
    for start in range(0, params.length, chunk_size):
        stop = min(start + chunk_size, params.length)
        sub = ScanParams(params.a_log, params.delta[start:stop], params.b[start:stop],
                         params.c[start:stop], params.x[start:stop])
        dd = None if decay_delta is None else decay_delta[start:stop]
        s = influence_scores(sub, aggregator=aggregator, decay_delta=dd)
        out.append(InfluenceScores(s.scores, start + s.target, s.contributions, offset=start))
    return out


# ---------------------------------------------------------------------------
# selection


def _check_selection(T: int, k: int, protected: Iterable[int]) -> np.ndarray:
    prot = np.unique(np.asarray(list(protected), dtype=np.int64))
    if k > T:
        raise ScheduleError(f"cannot keep {k} of {T} tokens")
    if k < len(prot):
        raise ScheduleError(f"keep count {k} is below the {len(prot)} protected tokens")
    if len(prot) and (prot[0] < 0 or prot[-1] >= T):
        raise IndexError(f"protected positions {prot.tolist()} outside [0, {T})")
    return prot


def select_influence(scores: Sequence[float], k: int, protected: Iterable[int] = ()) -> np.ndarray:
    """Keep the ``k`` highest-scored positions; ties go to earlier positions."""
    scores = np.asarray(scores)
    T = len(scores)
    prot = _check_selection(T, k, protected)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    order = np.lexsort((np.arange(T), -scores))
    rest = order[~np.isin(order, prot)][: k - len(prot)]
    return np.sort(np.concatenate([prot, rest]))


def select_uniform(T: int, k: int, protected: Iterable[int] = ()) -> np.ndarray:
    """Evenly spaced positions ``round((i + 1) * T / k) - 1`` for ``i < k``.

    Each protected position that is missing replaces the nearest unprotected
    pick (the later one on a tie).
    """
    prot = _check_selection(T, k, protected)
    picks: list[int] = []
    for i in range(1, k + 1):
        pos = round_half_away(Fraction(i * T, k)) - 1
        if picks and pos <= picks[-1]:
            pos = picks[-1] + 1
        picks.append(pos)
    chosen = set(picks)
    prot_set = set(prot.tolist())
    for p in prot.tolist():
        if p in chosen:
            continue
        victims = [q for q in chosen if q not in prot_set]
        victim = min(victims, key=lambda q: (abs(q - p), -q))
        chosen.remove(victim)
        chosen.add(p)
    return np.array(sorted(chosen), dtype=np.int64)


def select_random(
    T: int,
    k: int,
    protected: Iterable[int] = (),
    seed: int | np.random.Generator | None = 0,
) -> np.ndarray:
    """Uniform sample without replacement over unprotected positions."""
    prot = _check_selection(T, k, protected)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    free = np.setdiff1d(np.arange(T), prot)
    pick = rng.choice(free, size=k - len(prot), replace=False)
    return np.sort(np.concatenate([prot, pick.astype(np.int64)]))
