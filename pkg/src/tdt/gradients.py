"""Closed-form gradients of the RNN-T and TDT losses.

All functions return gradients of the *loss* ``-log P(y|x)``.  Probability-level
gradients are taken with respect to whatever scores the recursion consumed
(the pseudo-probabilities when ``sigma > 0``); logit-level gradients are with
respect to the raw joint logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import (
    NEG_INF,
    DurationSet,
    JointProblem,
    LatticeTables,
    _label_scores,
    rnnt_tables,
    split_log_probs,
    tdt_tables,
)

__all__ = [
    "GradOptions",
    "GradientBundle",
    "tdt_grad_token_probs",
    "tdt_grad_duration_probs",
    "tdt_grad_token_logits",
    "tdt_grad_duration_logits",
    "tdt_loss_and_grad",
    "rnnt_grad_token_probs",
    "rnnt_grad_token_logits",
    "rnnt_loss_and_grad",
    "apply_fastemit",
    "softmax_backward",
    "sampled_loss_grad",
]


@dataclass
class GradOptions:
    sigma: float = 0.0
    fastemit_lambda: float = 0.0
    omega: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not np.isfinite(self.fastemit_lambda) or self.fastemit_lambda < 0:
            raise ValueError(f"fastemit_lambda must be finite and >= 0, got {self.fastemit_lambda}")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega must be in [0, 1], got {self.omega}")


@dataclass
class GradientBundle:
    token_logit_grad: np.ndarray
    duration_logit_grad: np.ndarray
    loss: float


def _require_finite_total(tables: LatticeTables) -> float:
    total = tables.total_logprob
    if not np.isfinite(total):
        raise ValueError("targets have no valid alignment in this lattice (P(y|x) = 0)")
    return total


def _pad_rows(beta: np.ndarray, extra: int) -> np.ndarray:
    if extra <= 0:
        return beta
    pad = np.full((extra, beta.shape[1]), NEG_INF)
    return np.vstack([beta, pad])


def _log_b(tables: LatticeTables, duration_logp: np.ndarray, durations: DurationSet):
    """Log of the duration-weighted beta sums reachable by a blank / a label arc.

    Shapes ``(T, U+1)`` and ``(T, U)``.
    """
    T = tables.T
    beta = _pad_rows(tables.beta, durations.max)
    log_b_blank = np.full((T, tables.U + 1), NEG_INF)
    log_b_label = np.full((T, tables.U), NEG_INF)
    for k, d in enumerate(durations):
        ahead = beta[d : d + T]
        if d > 0:
            log_b_blank = np.logaddexp(log_b_blank, ahead + duration_logp[:, :, k])
        log_b_label = np.logaddexp(log_b_label, ahead[:, 1:] + duration_logp[:, :-1, k])
    return log_b_blank, log_b_label


def _log_c(tables: LatticeTables, token_logp: np.ndarray, targets, durations: DurationSet):
    """Log of the token-weighted beta sums for each duration, shape ``(T, U+1, N_d)``."""
    T, U = tables.T, tables.U
    beta = _pad_rows(tables.beta, durations.max)
    blank, label = _label_scores(token_logp, np.asarray(targets))
    log_c = np.full((T, U + 1, len(durations)), NEG_INF)
    for k, d in enumerate(durations):
        ahead = beta[d : d + T]
        log_c[:, :-1, k] = ahead[:, 1:] + label
        if d > 0:
            log_c[:, :, k] = np.logaddexp(log_c[:, :, k], ahead + blank)
    return log_c


def _scatter_label(arr: np.ndarray, targets: np.ndarray, values: np.ndarray) -> None:
    """``arr[t, u, targets[u]] += values[t, u]`` for ``u < U``."""
    T, U = values.shape
    if U == 0:
        return
    tt, uu = np.meshgrid(np.arange(T), np.arange(U), indexing="ij")
    arr[tt, uu, np.broadcast_to(targets, (T, U))] += values


def tdt_grad_token_probs(
    tables: LatticeTables,
    token_logp: np.ndarray,
    duration_logp: np.ndarray,
    targets,
    durations: DurationSet,
) -> np.ndarray:
    """Gradient of the loss with respect to the token probabilities ``P_T(v|t,u)``.

    Only the blank and next-label entries are non-zero.
    """
    targets = np.asarray(targets, dtype=np.int64)
    total = _require_finite_total(tables)
    log_b_blank, log_b_label = _log_b(tables, duration_logp, durations)
    alpha = tables.alpha[:-1]
    grad = np.zeros(token_logp.shape)
    grad[:, :, -1] = -np.exp(alpha + log_b_blank - total)
    _scatter_label(grad, targets, -np.exp(alpha[:, :-1] + log_b_label - total))
    return grad


def tdt_grad_duration_probs(
    tables: LatticeTables,
    token_logp: np.ndarray,
    duration_logp: np.ndarray,
    targets,
    durations: DurationSet,
) -> np.ndarray:
    """Gradient of the loss with respect to the duration probabilities ``P_D(d|t,u)``."""
    total = _require_finite_total(tables)
    log_c = _log_c(tables, token_logp, targets, durations)
    return -np.exp(tables.alpha[:-1, :, None] + log_c - total)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Chain ``dL/dp`` through ``p = softmax(h)`` along the last axis."""
    inner = np.sum(probs * grad_probs, axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def _token_logits_from_prob_grad(token_logp: np.ndarray, grad_probs: np.ndarray, sigma: float) -> np.ndarray:
    """Chain a gradient on ``P' = softmax(h) / e^sigma`` back to ``h``."""
    pseudo = np.exp(token_logp)
    real = np.exp(token_logp + sigma)
    inner = np.sum(pseudo * grad_probs, axis=-1, keepdims=True)
    return pseudo * grad_probs - real * inner


def apply_fastemit(grad_probs: np.ndarray, fastemit_lambda: float) -> np.ndarray:
    """Scale non-blank token-probability gradients by ``1 + lambda``; blank is last."""
    if fastemit_lambda < 0:
        raise ValueError(f"fastemit_lambda must be >= 0, got {fastemit_lambda}")
    out = np.array(grad_probs, dtype=np.float64)
    if fastemit_lambda:
        out[..., :-1] *= 1.0 + fastemit_lambda
    return out


def _merged_token_grad(
    tables: LatticeTables,
    token_logp: np.ndarray,
    log_b_blank: np.ndarray,
    log_b_label: np.ndarray,
    targets: np.ndarray,
    sigma: float,
) -> np.ndarray:
    total = _require_finite_total(tables)
    alpha = tables.alpha[:-1]
    beta = tables.beta[:-1]
    real = np.exp(token_logp + sigma)
    grad = real * np.exp(alpha + beta - total)[:, :, None]
    grad[:, :, -1] -= real[:, :, -1] * np.exp(alpha + log_b_blank - sigma - total)
    U = len(targets)
    if U:
        tt, uu = np.meshgrid(np.arange(tables.T), np.arange(U), indexing="ij")
        yy = np.broadcast_to(targets, (tables.T, U))
        grad[tt, uu, yy] -= real[tt, uu, yy] * np.exp(alpha[:, :-1] + log_b_label - sigma - total)
    return grad


def tdt_loss_and_grad(problem: JointProblem, options: GradOptions | None = None) -> GradientBundle:
    """TDT loss plus gradients for both logit blocks from one forward-backward pass.

    Without FastEmit the token-logit gradient is the merged closed form
    ``P_T(v) alpha (beta - b(v) / e^sigma) / P'``.  With FastEmit the
    probability-level gradient is scaled first and then chained through the
    (under-)softmax.
    """
    options = options or GradOptions()
    sigma = options.sigma
    token_logp, duration_logp = split_log_probs(problem, sigma)
    tables = tdt_tables(token_logp, duration_logp, problem.targets, problem.durations)
    if options.fastemit_lambda:
        grad_probs = tdt_grad_token_probs(tables, token_logp, duration_logp, problem.targets, problem.durations)
        grad_probs = apply_fastemit(grad_probs, options.fastemit_lambda)
        token_grad = _token_logits_from_prob_grad(token_logp, grad_probs, sigma)
    else:
        log_b_blank, log_b_label = _log_b(tables, duration_logp, problem.durations)
        token_grad = _merged_token_grad(tables, token_logp, log_b_blank, log_b_label, problem.targets, sigma)
    dur_grad_probs = tdt_grad_duration_probs(tables, token_logp, duration_logp, problem.targets, problem.durations)
    duration_grad = softmax_backward(np.exp(duration_logp), dur_grad_probs)
    return GradientBundle(token_grad, duration_grad, -tables.total_logprob)


def tdt_grad_token_logits(problem: JointProblem, options: GradOptions | None = None) -> np.ndarray:
    return tdt_loss_and_grad(problem, options).token_logit_grad


def tdt_grad_duration_logits(problem: JointProblem, options: GradOptions | None = None) -> np.ndarray:
    return tdt_loss_and_grad(problem, options).duration_logit_grad


def rnnt_grad_token_probs(tables: LatticeTables, token_logp: np.ndarray, targets) -> np.ndarray:
    """Conventional transducer gradient with respect to ``P(v|t,u)``."""
    targets = np.asarray(targets, dtype=np.int64)
    total = _require_finite_total(tables)
    alpha = tables.alpha[:-1]
    beta = tables.beta
    grad = np.zeros(token_logp.shape)
    grad[:, :, -1] = -np.exp(alpha + beta[1:] - total)
    _scatter_label(grad, targets, -np.exp(alpha[:, :-1] + beta[:-1, 1:] - total))
    return grad


def rnnt_grad_token_logits(problem: JointProblem, sigma: float = 0.0) -> np.ndarray:
    """Merged-softmax gradient ``P(v) alpha (beta(t,u) - beta(next)) / P``."""
    return rnnt_loss_and_grad(problem, sigma=sigma).token_logit_grad


def rnnt_loss_and_grad(
    problem: JointProblem, sigma: float = 0.0, fastemit_lambda: float = 0.0
) -> GradientBundle:
    """Conventional transducer loss on the token block; duration gradient is all zeros."""
    token_logp, _ = split_log_probs(problem, sigma)
    tables = rnnt_tables(token_logp, problem.targets)
    if fastemit_lambda:
        grad_probs = apply_fastemit(rnnt_grad_token_probs(tables, token_logp, problem.targets), fastemit_lambda)
        token_grad = _token_logits_from_prob_grad(token_logp, grad_probs, sigma)
    else:
        beta = tables.beta
        T = problem.T
        log_b_blank = beta[1:]
        log_b_label = beta[:T, 1:]
        token_grad = _merged_token_grad(tables, token_logp, log_b_blank, log_b_label, problem.targets, sigma)
    duration_grad = np.zeros(problem.duration_logits.shape)
    return GradientBundle(token_grad, duration_grad, -tables.total_logprob)


def sampled_loss_grad(
    problem: JointProblem, options: GradOptions, rng: np.random.Generator
) -> tuple[float, GradientBundle, str]:
    """Draw once per example: conventional transducer loss with probability ``omega``.

    Returns ``(loss, bundle, branch)`` with ``branch`` either ``"rnnt"`` or ``"tdt"``.
    The transducer branch ignores the duration logits and uses ``sigma = 0``.
    """
    draw = rng.random()
    if draw < options.omega:
        bundle = rnnt_loss_and_grad(problem, fastemit_lambda=options.fastemit_lambda)
        return bundle.loss, bundle, "rnnt"
    bundle = tdt_loss_and_grad(problem, options)
    return bundle.loss, bundle, "tdt"
