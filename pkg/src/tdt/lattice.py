"""Forward-backward recursions for RNN-T and TDT lattices.

Index conventions
-----------------
Time is 1-based in the math (``t = 1..T``, plus a terminal column ``t = T+1``)
and 0-based in storage: row ``i`` of every table holds ``t = i + 1``.  The label
index ``u`` is 0-based in both.  All tables therefore have shape ``(T+1, U+1)``
and row ``T`` is the terminal column.

Token logits occupy ``logits[..., :V+1]`` with blank at index ``V``; duration
logits occupy ``logits[..., V+1:]``.

Everything is computed in the log domain.  ``-inf`` is absorbing and never
turns into NaN.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import log_softmax, logsumexp

NEG_INF = -np.inf

__all__ = [
    "DurationSet",
    "JointProblem",
    "LatticeTables",
    "AlignmentPosterior",
    "split_log_probs",
    "rnnt_forward",
    "rnnt_backward",
    "rnnt_tables",
    "rnnt_loss",
    "tdt_forward",
    "tdt_backward",
    "tdt_tables",
    "tdt_loss",
    "alignment_posterior",
    "diagonal_identity",
    "diagonal_terms",
]


@dataclass(frozen=True)
class DurationSet:
    """Ordered set of frame advances a TDT joint can predict.

    Position ``k`` in :attr:`durations` is the duration-logit index ``k``.
    """

    durations: tuple[int, ...]

    def __init__(self, durations: Iterable[int]):
        ds = tuple(int(d) for d in durations)
        if not ds:
            raise ValueError("duration set is empty")
        if any(d < 0 for d in ds):
            raise ValueError(f"durations must be non-negative, got {ds}")
        if any(b <= a for a, b in zip(ds, ds[1:])):
            raise ValueError(f"durations must be strictly increasing, got {ds}")
        if ds[-1] < 1:
            raise ValueError("at least one duration must be >= 1")
        object.__setattr__(self, "durations", ds)

    @classmethod
    def parse(cls, spec: str) -> "DurationSet":
        """Parse ``"0-4"`` (inclusive range) or ``"0,1,2,4"``."""
        spec = spec.strip()
        m = re.fullmatch(r"(\d+)\s*-\s*(\d+)", spec)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if hi < lo:
                raise ValueError(f"empty duration range {spec!r}")
            return cls(range(lo, hi + 1))
        try:
            return cls(int(x) for x in spec.split(","))
        except ValueError as e:
            raise ValueError(f"cannot parse duration set {spec!r}") from e

    def __len__(self) -> int:
        return len(self.durations)

    def __iter__(self):
        return iter(self.durations)

    def __getitem__(self, idx: int) -> int:
        return self.durations[idx]

    def index(self, duration: int) -> int:
        return self.durations.index(duration)

    @property
    def has_zero(self) -> bool:
        return self.durations[0] == 0

    @property
    def max(self) -> int:
        return self.durations[-1]

    def __str__(self) -> str:
        ds = self.durations
        if len(ds) > 1 and ds == tuple(range(ds[0], ds[-1] + 1)):
            return f"{ds[0]}-{ds[-1]}"
        return ",".join(map(str, ds))


@dataclass
class JointProblem:
    """One lattice instance: raw joint logits plus the target sequence.

    Attributes:
        logits: float array of shape ``(T, U+1, V+1+N_d)``.
        targets: int array of length ``U`` with values in ``[0, V)``.
        vocab_size: ``V``, the number of real tokens (blank excluded).
        durations: the duration set; ``N_d = len(durations)``.
    """

    logits: np.ndarray
    targets: np.ndarray
    vocab_size: int
    durations: DurationSet

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        if not isinstance(self.durations, DurationSet):
            self.durations = DurationSet(self.durations)
        V = int(self.vocab_size)
        if V < 1:
            raise ValueError(f"vocab_size must be >= 1, got {V}")
        self.vocab_size = V
        if self.logits.ndim != 3:
            raise ValueError(f"logits must be 3-d (T, U+1, K), got shape {self.logits.shape}")
        T, U1, K = self.logits.shape
        if T == 0:
            raise ValueError("empty input: T must be >= 1")
        if U1 != len(self.targets) + 1:
            raise ValueError(
                f"logits have U+1={U1} label positions but {len(self.targets)} targets were given"
            )
        if K != V + 1 + len(self.durations):
            raise ValueError(
                f"last logit axis is {K}, expected V+1+N_d = {V}+1+{len(self.durations)}"
            )
        if len(self.targets) and (self.targets.min() < 0 or self.targets.max() >= V):
            raise ValueError(f"targets must lie in [0, {V})")

    @property
    def T(self) -> int:
        return self.logits.shape[0]

    @property
    def U(self) -> int:
        return self.logits.shape[1] - 1

    @property
    def V(self) -> int:
        return self.vocab_size

    @property
    def blank(self) -> int:
        return self.vocab_size

    @property
    def n_durations(self) -> int:
        return len(self.durations)

    @property
    def token_logits(self) -> np.ndarray:
        return self.logits[..., : self.V + 1]

    @property
    def duration_logits(self) -> np.ndarray:
        return self.logits[..., self.V + 1 :]

    def with_logits(self, logits: np.ndarray) -> "JointProblem":
        return JointProblem(logits, self.targets, self.vocab_size, self.durations)


@dataclass
class LatticeTables:
    """Forward and backward log tables of shape ``(T+1, U+1)``.

    ``alpha[i, u]`` is log alpha(t=i+1, u); row ``T`` is the terminal column.
    """

    alpha: np.ndarray
    beta: np.ndarray
    total_logprob: float

    @property
    def T(self) -> int:
        return self.alpha.shape[0] - 1

    @property
    def U(self) -> int:
        return self.alpha.shape[1] - 1


@dataclass
class AlignmentPosterior:
    """Log mass through each state, ``raw = log alpha + log beta`` over ``t <= T``."""

    raw: np.ndarray
    normalized: np.ndarray


def split_log_probs(problem: JointProblem, sigma: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Normalize the two logit blocks independently.

    The token block is log-softmaxed over ``V+1`` entries and then shifted down by
    ``sigma`` (logit under-normalization); the duration block is a plain
    log-softmax over ``N_d`` entries.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    token = log_softmax(problem.token_logits, axis=-1) - sigma
    duration = log_softmax(problem.duration_logits, axis=-1)
    return token, duration


def _label_scores(token_logp: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Blank scores ``(T, U+1)`` and next-label scores ``(T, U)``."""
    T, U1, _ = token_logp.shape
    blank = token_logp[:, :, -1]
    if U1 > 1:
        label = np.take_along_axis(
            token_logp[:, :-1, :], np.broadcast_to(targets[None, :, None], (T, U1 - 1, 1)), axis=2
        )[..., 0]
    else:
        label = np.empty((T, 0))
    return blank, label


def _check_token_logp(token_logp: np.ndarray, targets: np.ndarray) -> None:
    if token_logp.ndim != 3:
        raise ValueError(f"token log-probs must be 3-d, got shape {token_logp.shape}")
    if token_logp.shape[0] == 0:
        raise ValueError("empty input: T must be >= 1")
    if token_logp.shape[1] != len(targets) + 1:
        raise ValueError("token log-probs and targets disagree on U")


# --------------------------------------------------------------------------
# conventional transducer
# --------------------------------------------------------------------------


def rnnt_forward(token_logp: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    """Forward table of a conventional transducer.

    Rows ``0..T-1`` follow the usual recursion with ``alpha(1, 0) = 1``.  The
    terminal row holds ``alpha(T+1, U) = alpha(T, U) P(blank | T, U)`` so that RNN-T
    and TDT tables share one layout.
    """
    targets = np.asarray(targets, dtype=np.int64)
    _check_token_logp(token_logp, targets)
    blank, label = _label_scores(token_logp, targets)
    T, U1 = blank.shape
    alpha = np.full((T + 1, U1), NEG_INF)
    alpha[0, 0] = 0.0
    for i in range(T):
        row = alpha[i]
        if i > 0:
            row[:] = alpha[i - 1] + blank[i - 1]
        for u in range(1, U1):
            row[u] = np.logaddexp(row[u], row[u - 1] + label[i, u - 1])
    alpha[T, U1 - 1] = alpha[T - 1, U1 - 1] + blank[T - 1, U1 - 1]
    return alpha


def rnnt_backward(token_logp: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    """Backward table; ``beta(T+1, U) = 1`` so that ``beta(T, U) = P(blank | T, U)``."""
    targets = np.asarray(targets, dtype=np.int64)
    _check_token_logp(token_logp, targets)
    blank, label = _label_scores(token_logp, targets)
    T, U1 = blank.shape
    beta = np.full((T + 1, U1), NEG_INF)
    beta[T, U1 - 1] = 0.0
    for i in range(T - 1, -1, -1):
        row = beta[i]
        row[:] = beta[i + 1] + blank[i]
        for u in range(U1 - 2, -1, -1):
            row[u] = np.logaddexp(row[u], row[u + 1] + label[i, u])
    return beta


def rnnt_tables(token_logp: np.ndarray, targets: Sequence[int]) -> LatticeTables:
    alpha = rnnt_forward(token_logp, targets)
    beta = rnnt_backward(token_logp, targets)
    return LatticeTables(alpha, beta, float(beta[0, 0]))


def rnnt_loss(problem: JointProblem, sigma: float = 0.0) -> float:
    """Negative log-probability under a conventional transducer.

    Only the token block of the logits is used.
    """
    token_logp, _ = split_log_probs(problem, sigma)
    alpha = rnnt_forward(token_logp, problem.targets)
    return -float(alpha[problem.T, problem.U])


# --------------------------------------------------------------------------
# token-and-duration transducer
# --------------------------------------------------------------------------


def _check_tdt_inputs(token_logp, duration_logp, targets, durations):
    _check_token_logp(token_logp, targets)
    if duration_logp.shape != token_logp.shape[:2] + (len(durations),):
        raise ValueError(
            f"duration log-probs have shape {duration_logp.shape}, expected "
            f"{token_logp.shape[:2] + (len(durations),)}"
        )


def tdt_forward(
    token_logp: np.ndarray,
    duration_logp: np.ndarray,
    targets: Sequence[int],
    durations: DurationSet,
) -> np.ndarray:
    """Forward table over ``t = 1..T+1``.

    Blank arcs sum over the non-zero durations, label arcs over all of them.
    Arcs that would land beyond ``T+1`` simply do not exist.
    """
    targets = np.asarray(targets, dtype=np.int64)
    durations = DurationSet(durations) if not isinstance(durations, DurationSet) else durations
    _check_tdt_inputs(token_logp, duration_logp, targets, durations)
    blank, label = _label_scores(token_logp, targets)
    T, U1 = blank.shape
    alpha = np.full((T + 1, U1), NEG_INF)
    alpha[0, 0] = 0.0
    for i in range(T + 1):
        row = alpha[i]
        for k, d in enumerate(durations):
            j = i - d
            if d == 0 or j < 0:
                continue
            row[:] = np.logaddexp(row, alpha[j] + blank[j] + duration_logp[j, :, k])
            row[1:] = np.logaddexp(row[1:], alpha[j, :-1] + label[j] + duration_logp[j, :-1, k])
        if durations.has_zero and i < T:
            step = label[i] + duration_logp[i, :-1, 0]
            for u in range(1, U1):
                row[u] = np.logaddexp(row[u], row[u - 1] + step[u - 1])
    return alpha


def tdt_backward(
    token_logp: np.ndarray,
    duration_logp: np.ndarray,
    targets: Sequence[int],
    durations: DurationSet,
) -> np.ndarray:
    """Backward table with ``beta(T+1, U) = 1`` and ``beta(T+1, u) = 0`` elsewhere."""
    targets = np.asarray(targets, dtype=np.int64)
    durations = DurationSet(durations) if not isinstance(durations, DurationSet) else durations
    _check_tdt_inputs(token_logp, duration_logp, targets, durations)
    blank, label = _label_scores(token_logp, targets)
    T, U1 = blank.shape
    beta = np.full((T + 1, U1), NEG_INF)
    beta[T, U1 - 1] = 0.0
    for i in range(T - 1, -1, -1):
        row = beta[i]
        for k, d in enumerate(durations):
            j = i + d
            if d == 0 or j > T:
                continue
            row[:] = np.logaddexp(row, beta[j] + blank[i] + duration_logp[i, :, k])
            row[:-1] = np.logaddexp(row[:-1], beta[j, 1:] + label[i] + duration_logp[i, :-1, k])
        if durations.has_zero:
            step = label[i] + duration_logp[i, :-1, 0]
            for u in range(U1 - 2, -1, -1):
                row[u] = np.logaddexp(row[u], row[u + 1] + step[u])
    return beta


def tdt_tables(
    token_logp: np.ndarray,
    duration_logp: np.ndarray,
    targets: Sequence[int],
    durations: DurationSet,
) -> LatticeTables:
    alpha = tdt_forward(token_logp, duration_logp, targets, durations)
    beta = tdt_backward(token_logp, duration_logp, targets, durations)
    return LatticeTables(alpha, beta, float(alpha[-1, -1]))


def tdt_loss(problem: JointProblem, sigma: float = 0.0) -> float:
    """``-log`` of the (pseudo-)probability of the targets under the TDT lattice.

    With ``sigma > 0`` every token score is shifted down by ``sigma`` before the
    recursion, so the result is no longer a true negative log-probability.
    """
    token_logp, duration_logp = split_log_probs(problem, sigma)
    alpha = tdt_forward(token_logp, duration_logp, problem.targets, problem.durations)
    return -float(alpha[-1, -1])


# --------------------------------------------------------------------------
# posteriors and consistency identities
# --------------------------------------------------------------------------


def alignment_posterior(alpha: np.ndarray, beta: np.ndarray, total: float) -> AlignmentPosterior:
    """Log posterior of passing through each state ``(t, u)`` with ``t <= T``."""
    alpha = np.asarray(alpha)
    beta = np.asarray(beta)
    if alpha.shape != beta.shape or alpha.ndim != 2:
        raise ValueError(f"alpha {alpha.shape} and beta {beta.shape} must be equal 2-d shapes")
    raw = alpha[:-1] + beta[:-1]
    return AlignmentPosterior(raw=raw, normalized=raw - total)


def diagonal_terms(
    problem: JointProblem, sigma: float = 0.0, n: int = 1, rnnt: bool = False
) -> dict[str, np.ndarray]:
    """Log-domain terms whose sum equals the total probability for diagonal ``n``.

    Returns a dict with:
        ``nodes``: alpha*beta for states with ``t + u == n``;
        ``blank_jumps``/``label_jumps``: arcs from a state before the diagonal to
        one after it, as rows ``(log term, duration)``.

    For a conventional transducer no arc can jump a diagonal, so both jump
    arrays are empty.
    """
    T, U = problem.T, problem.U
    if not 1 <= n <= T + U:
        raise ValueError(f"diagonal index n must be in [1, {T + U}], got {n}")
    token_logp, duration_logp = split_log_probs(problem, sigma)
    if rnnt:
        tables = rnnt_tables(token_logp, problem.targets)
    else:
        tables = tdt_tables(token_logp, duration_logp, problem.targets, problem.durations)
    alpha, beta = tables.alpha, tables.beta

    nodes = []
    for i in range(T + 1):
        u = n - (i + 1)
        if 0 <= u <= U:
            nodes.append(alpha[i, u] + beta[i, u])

    blank_jumps: list[tuple[float, int]] = []
    label_jumps: list[tuple[float, int]] = []
    if not rnnt:
        blank, label = _label_scores(token_logp, problem.targets)
        for i in range(T):
            for u in range(U + 1):
                s = i + 1 + u
                if s >= n:
                    continue
                for k, d in enumerate(problem.durations):
                    if i + d > T:
                        continue
                    base = alpha[i, u] + duration_logp[i, u, k]
                    if d > 0 and s + d > n:
                        blank_jumps.append((base + blank[i, u] + beta[i + d, u], d))
                    if u < U and s + d + 1 > n:
                        label_jumps.append((base + label[i, u] + beta[i + d, u + 1], d))
    return {
        "nodes": np.array(nodes),
        "blank_jumps": np.array(blank_jumps).reshape(-1, 2),
        "label_jumps": np.array(label_jumps).reshape(-1, 2),
        "total": np.float64(tables.total_logprob),
    }


def diagonal_identity(problem: JointProblem, sigma: float = 0.0, n: int = 1, rnnt: bool = False) -> float:
    """``|log(sum of diagonal terms) - log P(y|x)|`` for diagonal ``n``."""
    terms = diagonal_terms(problem, sigma, n, rnnt=rnnt)
    parts = [terms["nodes"], terms["blank_jumps"][:, 0], terms["label_jumps"][:, 0]]
    lhs = logsumexp(np.concatenate(parts))
    if lhs == -np.inf and terms["total"] == -np.inf:
        # no alignment at all: both sides are exactly zero
        return 0.0
    return float(abs(lhs - terms["total"]))
