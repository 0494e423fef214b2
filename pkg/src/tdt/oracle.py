"""Brute-force references for the lattice code.

Nothing here shares code with the dynamic programs in :mod:`tdt.lattice`:
the log-softmax is recomputed locally and every path is scored one arc at a
time.  Intended for tiny instances only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .lattice import JointProblem

DEFAULT_PATH_CAP = 10**6


class PathCapExceeded(RuntimeError):
    """Raised instead of silently truncating an enumeration."""


@dataclass
class Path:
    tokens: list[int]
    durations: list[int]
    logscore: float


@dataclass
class PathEnumeration:
    total_logprob: float
    path_count: int
    paths: list[Path] = field(default_factory=list)

    def dump(self) -> str:
        """One ``tokens;durations;logscore`` line per stored path."""
        lines = []
        for p in self.paths:
            toks = " ".join(map(str, p.tokens))
            durs = " ".join(map(str, p.durations))
            lines.append(f"{toks};{durs};{float(p.logscore)!r}")
        return "\n".join(lines)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def pairwise_logsumexp(values) -> float:
    """Tree reduction of ``log(exp(a) + exp(b))``."""
    vals = [float(v) for v in values]
    if not vals:
        return -math.inf
    while len(vals) > 1:
        nxt = []
        for a, b in zip(vals[0::2], vals[1::2]):
            hi, lo = (a, b) if a >= b else (b, a)
            if hi == -math.inf:
                nxt.append(-math.inf)
            else:
                nxt.append(hi + math.log1p(math.exp(lo - hi)))
        if len(vals) % 2:
            nxt.append(vals[-1])
        vals = nxt
    return vals[0]


def count_rnnt_paths(T: int, U: int) -> int:
    """Monotone lattice paths from ``(1, 0)`` to ``(T, U)`` plus the final blank."""
    return math.comb(T - 1 + U, U)


def count_tdt_paths(T: int, U: int, durations) -> int:
    """Number of (symbol, duration) sequences from ``(1, 0)`` to ``(T+1, U)``."""
    durations = list(durations)
    ways = [[0] * (U + 1) for _ in range(T + 2)]
    ways[T + 1][U] = 1
    for t in range(T, 0, -1):
        for u in range(U, -1, -1):
            n = 0
            for d in durations:
                if t + d > T + 1:
                    continue
                if d > 0:
                    n += ways[t + d][u]
                if u < U:
                    n += ways[t + d][u + 1]
            ways[t][u] = n
    return ways[1][0]


def _check_cap(count: int, cap: int | None) -> None:
    cap = DEFAULT_PATH_CAP if cap is None else cap
    if count > cap:
        raise PathCapExceeded(f"{count} paths exceed the enumeration cap of {cap}")


def enumerate_rnnt(
    problem: JointProblem, sigma: float = 0.0, cap: int | None = None, keep_paths: bool = False
) -> PathEnumeration:
    """Sum over every blank-augmented label sequence of length ``T + U``."""
    T, U = problem.T, problem.U
    _check_cap(count_rnnt_paths(T, U), cap)
    logp = _log_softmax(problem.token_logits) - sigma
    y = [int(v) for v in problem.targets]
    blank = problem.blank
    scores: list[float] = []
    paths: list[Path] = []

    def walk(t, u, acc, seq):
        # t is 1-based
        if t == T and u == U:
            s = acc + logp[t - 1, u, blank]
            scores.append(s)
            if keep_paths:
                paths.append(Path(seq + [blank], [], s))
            return
        if u < U:
            walk(t, u + 1, acc + logp[t - 1, u, y[u]], seq + [y[u]])
        if t < T:
            walk(t + 1, u, acc + logp[t - 1, u, blank], seq + [blank])

    walk(1, 0, 0.0, [])
    return PathEnumeration(pairwise_logsumexp(scores), len(scores), paths)


def enumerate_tdt(
    problem: JointProblem, sigma: float = 0.0, cap: int | None = None, keep_paths: bool = False
) -> PathEnumeration:
    """Sum over every (symbol, duration) sequence that lands exactly on ``(T+1, U)``.

    Blank never takes duration 0.
    """
    T, U = problem.T, problem.U
    durations = list(problem.durations)
    _check_cap(count_tdt_paths(T, U, durations), cap)
    tok = _log_softmax(problem.token_logits) - sigma
    dur = _log_softmax(problem.duration_logits)
    y = [int(v) for v in problem.targets]
    blank = problem.blank
    scores: list[float] = []
    paths: list[Path] = []

    def walk(t, u, acc, toks, durs):
        if t == T + 1:
            if u == U:
                scores.append(acc)
                if keep_paths:
                    paths.append(Path(list(toks), list(durs), acc))
            return
        for k, d in enumerate(durations):
            if t + d > T + 1:
                continue
            if d > 0:
                walk(t + d, u, acc + tok[t - 1, u, blank] + dur[t - 1, u, k], toks + [blank], durs + [d])
            if u < U:
                walk(t + d, u + 1, acc + tok[t - 1, u, y[u]] + dur[t - 1, u, k], toks + [y[u]], durs + [d])

    walk(1, 0, 0.0, [], [])
    return PathEnumeration(pairwise_logsumexp(scores), len(scores), paths)


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences ``(f(x+h e_i) - f(x-h e_i)) / 2h`` for every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    f0 = f(x)
    if not np.isfinite(f0):
        raise ValueError(f"function is not finite at the evaluation point ({f0})")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"function is not finite near entry {np.unravel_index(i, x.shape)}")
        g[i] = (fp - fm) / (2 * h)
    return grad


def log_step_difference(f: Callable[[np.ndarray], float], probs: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Derivative with respect to free positive variables, stepping multiplicatively.

    Perturbs ``p -> p * exp(+-h)`` and divides the log-coordinate central
    difference by ``p``.  For a loss ``-log(a + b p)`` the relative truncation
    error is bounded by ``h**2 / 6`` however small ``p`` is, whereas an additive
    step ``p +- h`` degrades as ``(h dL/dp)**2``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    grad_log = central_difference(lambda x: f(np.exp(x)), np.log(probs), h)
    return grad_log / probs


def finite_diff(
    loss_fn: Callable[[JointProblem], float], problem: JointProblem, h: float = 1e-4
) -> np.ndarray:
    """Numeric gradient of ``loss_fn`` with respect to every raw logit of ``problem``."""
    return central_difference(lambda x: loss_fn(problem.with_logits(x)), problem.logits, h)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """Entrywise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps round-off on entries that are essentially zero from being
    reported as a large relative error.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom
