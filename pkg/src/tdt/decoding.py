"""Greedy decoders for conventional transducers and TDT models.

A joiner is any callable ``joiner(t, context) -> logits`` where ``t`` is the
0-based frame index, ``context`` is the tuple of tokens emitted so far, and
``logits`` has length ``V + 1 + N_d`` (token block first, blank last in it).
Argmax ties go to the lowest index.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .lattice import DurationSet, JointProblem


class Joiner(Protocol):
    vocab_size: int

    def __call__(self, t: int, context: Sequence[int]) -> np.ndarray: ...


class TabularJoiner:
    """Serves ``logits[t, min(len(context), U)]`` from a stored lattice."""

    def __init__(self, problem: JointProblem):
        self.problem = problem
        self.vocab_size = problem.V
        self.durations = problem.durations

    def __call__(self, t: int, context: Sequence[int]) -> np.ndarray:
        if not 0 <= t < self.problem.T:
            raise IndexError(f"frame {t} outside [0, {self.problem.T})")
        return self.problem.logits[t, min(len(context), self.problem.U)]


class FunctionJoiner:
    """Wraps a plain function ``f(t, context)`` as a joiner."""

    def __init__(self, fn: Callable[[int, Sequence[int]], np.ndarray], vocab_size: int):
        self.fn = fn
        self.vocab_size = vocab_size

    def __call__(self, t, context):
        return np.asarray(self.fn(t, context))


@dataclass
class DecodePolicy:
    max_symbols_per_step: Optional[int] = 10

    def __post_init__(self):
        if self.max_symbols_per_step is not None and self.max_symbols_per_step < 1:
            raise ValueError("max_symbols_per_step must be a positive integer or None")


@dataclass
class DecodeResult:
    """Outcome of one greedy decode.

    ``emitted_durations`` has one entry per joint evaluation.  For conventional
    transducers a blank counts as duration 1 and a label as duration 0.
    ``token_frames`` is the frame at which each hypothesis token was emitted.
    """

    hypothesis: list[int] = field(default_factory=list)
    steps: int = 0
    emitted_durations: list[int] = field(default_factory=list)
    blank_count: int = 0
    nonblank_count: int = 0
    token_frames: list[int] = field(default_factory=list)
    forced_advances: int = 0

    def duration_histogram(self) -> dict[int, int]:
        return dict(sorted(Counter(self.emitted_durations).items()))

    def to_json(self) -> str:
        return json.dumps(
            {
                "hypothesis": self.hypothesis,
                "steps": self.steps,
                "durations": {str(k): v for k, v in self.duration_histogram().items()},
                "blank_count": self.blank_count,
                "nonblank_count": self.nonblank_count,
            }
        )


def _argmax(x: np.ndarray) -> int:
    # np.argmax already returns the first maximal index
    return int(np.argmax(x))


def greedy_rnnt(joiner: Joiner, T: int, policy: DecodePolicy | None = None) -> DecodeResult:
    """Frame-synchronous greedy search: blank advances one frame, labels stay."""
    policy = policy or DecodePolicy()
    V = joiner.vocab_size
    res = DecodeResult()
    t = 0
    symbols_here = 0
    while t < T:
        logits = joiner(t, tuple(res.hypothesis))
        res.steps += 1
        idx = _argmax(logits[: V + 1])
        if idx != V:
            res.hypothesis.append(idx)
            res.token_frames.append(t)
            res.nonblank_count += 1
            res.emitted_durations.append(0)
            symbols_here += 1
            if policy.max_symbols_per_step is not None and symbols_here >= policy.max_symbols_per_step:
                t += 1
                symbols_here = 0
                res.forced_advances += 1
        else:
            res.blank_count += 1
            res.emitted_durations.append(1)
            t += 1
            symbols_here = 0
    return res


def _tdt_emit(res: DecodeResult, logits: np.ndarray, t: int, V: int, durations: DurationSet) -> int:
    idx = _argmax(logits[: V + 1])
    d = durations[_argmax(logits[V + 1 :])]
    res.steps += 1
    if idx != V:
        res.hypothesis.append(idx)
        res.token_frames.append(t)
        res.nonblank_count += 1
    else:
        res.blank_count += 1
    return d


def greedy_tdt(
    joiner: Joiner, T: int, durations: DurationSet, policy: DecodePolicy | None = None
) -> DecodeResult:
    """Greedy TDT search: token and duration argmaxes are taken independently.

    Tokens are appended when non-blank and ``t`` always advances by the
    predicted duration.  After ``max_symbols_per_step`` consecutive zero
    advances at one frame the last advance is bumped to 1 frame.
    """
    policy = policy or DecodePolicy()
    durations = durations if isinstance(durations, DurationSet) else DurationSet(durations)
    V = joiner.vocab_size
    res = DecodeResult()
    t = 0
    zero_run = 0
    while t < T:
        d = _tdt_emit(res, joiner(t, tuple(res.hypothesis)), t, V, durations)
        if d == 0:
            zero_run += 1
            if policy.max_symbols_per_step is not None and zero_run >= policy.max_symbols_per_step:
                d = 1
                res.forced_advances += 1
        if d > 0:
            zero_run = 0
        res.emitted_durations.append(d)
        t += d
    return res


def batched_greedy_tdt(
    joiners: Sequence[Joiner],
    T_list: Sequence[int],
    durations: DurationSet,
    policy: DecodePolicy | None = None,
) -> list[DecodeResult]:
    """Decode a batch in lock step, advancing everyone by the smallest predicted duration.

    Utterances whose input is exhausted leave the batch and no longer take
    part in the minimum.
    """
    if not joiners:
        raise ValueError("batch is empty")
    if len(joiners) != len(T_list):
        raise ValueError("need one length per joiner")
    policy = policy or DecodePolicy()
    durations = durations if isinstance(durations, DurationSet) else DurationSet(durations)
    results = [DecodeResult() for _ in joiners]
    t = 0
    zero_run = 0
    while True:
        active = [b for b, T in enumerate(T_list) if t < T]
        if not active:
            break
        predicted = []
        for b in active:
            joiner = joiners[b]
            predicted.append(_tdt_emit(results[b], joiner(t, tuple(results[b].hypothesis)), t, joiner.vocab_size, durations))
        d = min(predicted)
        forced = False
        if d == 0:
            zero_run += 1
            if policy.max_symbols_per_step is not None and zero_run >= policy.max_symbols_per_step:
                d = 1
                forced = True
        if d > 0:
            zero_run = 0
        for b in active:
            results[b].emitted_durations.append(d)
            results[b].forced_advances += forced
        t += d
    return results


@dataclass
class EmissionStats:
    histogram: dict[int, int]
    blank_count: int
    nonblank_count: int

    @property
    def total(self) -> int:
        return sum(self.histogram.values())

    @property
    def mean_duration(self) -> float:
        n = self.total
        return sum(d * c for d, c in self.histogram.items()) / n if n else 0.0

    def to_csv(self) -> str:
        lines = ["duration,count"]
        lines += [f"{d},{c}" for d, c in sorted(self.histogram.items())]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "histogram": {str(d): c for d, c in sorted(self.histogram.items())},
            "blank_count": self.blank_count,
            "nonblank_count": self.nonblank_count,
            "mean_duration": self.mean_duration,
        }


def emission_stats(results: Sequence[DecodeResult]) -> EmissionStats:
    """Pool duration histograms and blank/non-blank counts over decodes."""
    hist: Counter = Counter()
    blanks = nonblanks = 0
    for r in results:
        hist.update(r.emitted_durations)
        blanks += r.blank_count
        nonblanks += r.nonblank_count
    return EmissionStats(dict(sorted(hist.items())), blanks, nonblanks)
