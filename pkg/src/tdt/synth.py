"""Force-alignment experiments on a free (simulated) joint tensor.

A random joint ``J ~ N(0, 1)`` and a random target are sampled from a seeded
Philox generator, then ``J`` itself is optimized with Adam against the TDT loss.
The optimized joint is analysed through its alignment posterior and a greedy
decode.

Random draws happen in a fixed order (targets, token logits, duration logits),
so the target only depends on ``(seed, U, V)`` and the token logits only on
``(seed, T, U, V)``.  Sweeping ``T`` or the duration set therefore keeps the
target fixed.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .decoding import DecodePolicy, DecodeResult, EmissionStats, TabularJoiner, emission_stats, greedy_tdt
from .gradients import GradOptions, sampled_loss_grad
from .lattice import AlignmentPosterior, DurationSet, JointProblem, alignment_posterior, split_log_probs, tdt_tables

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 5


class ExperimentDiverged(RuntimeError):
    def __init__(self, step: int, loss: float, message: str):
        super().__init__(f"step {step}: {message} (loss={loss})")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class ExperimentConfig:
    T: int = 70
    U: int = 10
    V: int = 5
    N_d: int = 8
    sigma: float = 0.05
    fastemit_lambda: float = 0.0
    omega: float = 0.0
    learning_rate: float = 0.1
    steps: int = 100
    seed: int = 0
    # explicit duration values; default is 0..N_d-1
    durations: Optional[tuple[int, ...]] = None
    max_symbols_per_step: Optional[int] = 10

    def __post_init__(self):
        if self.durations is not None:
            object.__setattr__(self, "durations", tuple(int(d) for d in self.durations))
            if len(self.durations) != self.N_d:
                object.__setattr__(self, "N_d", len(self.durations))
        if min(self.T, self.V, self.N_d) < 1 or self.U < 0 or self.steps < 0:
            raise ValueError(f"invalid experiment dimensions: {self}")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError("omega must be in [0, 1]")
        if self.sigma < 0 or self.fastemit_lambda < 0 or self.learning_rate <= 0:
            raise ValueError("sigma, fastemit_lambda must be >= 0 and learning_rate > 0")
        self.duration_set  # validates

    @property
    def duration_set(self) -> DurationSet:
        if self.durations is not None:
            return DurationSet(self.durations)
        return DurationSet(range(self.N_d))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["durations"] = list(self.duration_set)
        return d


APPENDIX_D = ExperimentConfig()


def make_rng(seed: int) -> np.random.Generator:
    """Philox 4x64 counter-based generator; normals come from NumPy's ziggurat."""
    return np.random.Generator(np.random.Philox(seed))


def sample_problem(config: ExperimentConfig, rng: np.random.Generator | None = None) -> JointProblem:
    rng = make_rng(config.seed) if rng is None else rng
    targets = rng.integers(0, config.V, size=config.U)
    token = rng.standard_normal((config.T, config.U + 1, config.V + 1))
    duration = rng.standard_normal((config.T, config.U + 1, config.N_d))
    return JointProblem(np.concatenate([token, duration], axis=-1), targets, config.V, config.duration_set)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), **hyper)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    """One bias-corrected Adam update; ``state`` is updated in place."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads**2
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    problem: JointProblem
    optimized: JointProblem
    losses: list[float]
    branches: list[str]
    posterior: AlignmentPosterior
    decode: DecodeResult
    stats: EmissionStats
    adam: dict = field(default_factory=lambda: {"beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "eps": ADAM_EPS})

    @property
    def target(self) -> list[int]:
        return [int(v) for v in self.problem.targets]

    @property
    def aligned(self) -> bool:
        return self.decode.hypothesis == self.target

    @property
    def first_token_frame(self) -> Optional[int]:
        return self.decode.token_frames[0] if self.decode.token_frames else None

    @property
    def mean_duration(self) -> float:
        return self.stats.mean_duration

    def summary(self) -> dict:
        return {
            "T": self.config.T,
            "U": self.config.U,
            "N_d": self.config.N_d,
            "durations": str(self.config.duration_set),
            "fastemit_lambda": self.config.fastemit_lambda,
            "sigma": self.config.sigma,
            "first_token_frame": self.first_token_frame,
            "mean_duration": self.mean_duration,
            "decode_steps": self.decode.steps,
            "initial_loss": self.losses[0],
            "final_loss": self.losses[-1],
            "aligned": self.aligned,
        }


def run_experiment(config: ExperimentConfig = APPENDIX_D) -> ExperimentResult:
    rng = make_rng(config.seed)
    problem = sample_problem(config, rng)
    options = GradOptions(sigma=config.sigma, fastemit_lambda=config.fastemit_lambda, omega=config.omega, rng_seed=config.seed)

    params = problem.logits.copy()
    state = AdamState.zeros_like(params)
    losses: list[float] = []
    branches: list[str] = []
    over = 0
    for step in range(config.steps + 1):
        current = problem.with_logits(params)
        loss, bundle, branch = sampled_loss_grad(current, options, rng)
        if not np.isfinite(loss):
            raise ExperimentDiverged(step, loss, "non-finite loss")
        losses.append(loss)
        branches.append(branch)
        if step and loss > DIVERGENCE_FACTOR * losses[0]:
            over += 1
            if over >= DIVERGENCE_PATIENCE:
                raise ExperimentDiverged(step, loss, f"loss above {DIVERGENCE_FACTOR}x initial for {over} steps")
        else:
            over = 0
        if step == config.steps:
            break
        grads = np.concatenate([bundle.token_logit_grad, bundle.duration_logit_grad], axis=-1)
        params = adam_step(state, params, grads, config.learning_rate)

    optimized = problem.with_logits(params)
    token_logp, duration_logp = split_log_probs(optimized, config.sigma)
    tables = tdt_tables(token_logp, duration_logp, optimized.targets, optimized.durations)
    posterior = alignment_posterior(tables.alpha, tables.beta, tables.total_logprob)
    decode = greedy_tdt(
        TabularJoiner(optimized), optimized.T, optimized.durations, DecodePolicy(config.max_symbols_per_step)
    )
    logger.info("T=%d N_d=%d lambda=%g: loss %.4f -> %.4f", config.T, config.N_d, config.fastemit_lambda, losses[0], losses[-1])
    return ExperimentResult(
        config, problem, optimized, losses, branches, posterior, decode, emission_stats([decode])
    )


def max_workers() -> int:
    """Worker cap from ``TDT_THREADS`` (0 or unset means one per CPU)."""
    try:
        n = int(os.environ.get("TDT_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


SUMMARY_FIELDS = ["T", "U", "N_d", "durations", "fastemit_lambda", "sigma", "first_token_frame",
                  "mean_duration", "decode_steps", "initial_loss", "final_loss", "aligned"]


def comparison_csv(results: Sequence[ExperimentResult]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in results:
        writer.writerow(r.summary())
    return buf.getvalue()


def sweep(configs: Sequence[ExperimentConfig], workers: int | None = None) -> tuple[list[ExperimentResult], str]:
    """Run each config independently and tabulate the results."""
    workers = min(workers or max_workers(), len(configs)) or 1
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(run_experiment, configs))
    else:
        results = [run_experiment(c) for c in configs]
    return results, comparison_csv(results)


def duration_sweep(max_durations: Sequence[int] = (1, 2, 4, 8), base: ExperimentConfig = APPENDIX_D) -> list[ExperimentConfig]:
    """Configs with duration sets ``0..k`` for each ``k``."""
    return [replace(base, durations=tuple(range(k + 1)), N_d=k + 1) for k in max_durations]


def length_sweep(
    lengths: Sequence[int] = (20, 40, 70, 100), base: ExperimentConfig = APPENDIX_D, max_duration: int | None = 8
) -> list[ExperimentConfig]:
    """Configs over input lengths, with durations ``0..max_duration`` (``None`` keeps ``base``'s set)."""
    if max_duration is not None:
        base = replace(base, durations=tuple(range(max_duration + 1)), N_d=max_duration + 1)
    return [replace(base, T=T) for T in lengths]


def fastemit_sweep(lambdas: Sequence[float] = (0.0, 1e-3, 1e-2), base: ExperimentConfig = APPENDIX_D) -> list[ExperimentConfig]:
    return [replace(base, fastemit_lambda=lam) for lam in lambdas]


# --------------------------------------------------------------------------
# artifacts
# --------------------------------------------------------------------------


def posterior_csv(matrix: np.ndarray) -> str:
    """One row per frame ``t``, one column per label position ``u``."""
    rows = [",".join(repr(float(x)) for x in row) for row in matrix]
    return "\n".join(rows) + "\n"


def posterior_pgm(normalized: np.ndarray) -> bytes:
    """8-bit binary PGM; ``[min, 0]`` maps linearly onto ``[0, 255]``, ``-inf`` to 0."""
    h, w = normalized.shape
    finite = normalized[np.isfinite(normalized)]
    lo = float(finite.min()) if finite.size else 0.0
    pix = np.zeros(normalized.shape, dtype=np.uint8)
    if lo < 0:
        scaled = (np.clip(normalized, lo, 0.0) - lo) / (-lo) * 255.0
        pix = np.where(np.isfinite(normalized), np.rint(scaled), 0).astype(np.uint8)
    else:
        pix[np.isfinite(normalized)] = 255
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def write_results(result: ExperimentResult, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = result.config.to_dict()
    meta["adam"] = result.adam
    meta["rng"] = "numpy Philox (4x64), standard_normal via ziggurat"
    (out / "config.json").write_text(json.dumps(meta, indent=2) + "\n")
    with open(out / "loss.csv", "w", newline="") as f:
        f.write("step,loss,branch\n")
        for i, (loss, br) in enumerate(zip(result.losses, result.branches)):
            f.write(f"{i},{loss!r},{br}\n")
    (out / "alignment.csv").write_text(posterior_csv(result.posterior.normalized))
    (out / "alignment_raw.csv").write_text(posterior_csv(result.posterior.raw))
    (out / "alignment.pgm").write_bytes(posterior_pgm(result.posterior.normalized))
    decode = json.loads(result.decode.to_json())
    decode["target"] = result.target
    decode["aligned"] = result.aligned
    decode["token_frames"] = result.decode.token_frames
    (out / "decode.json").write_text(json.dumps(decode) + "\n")
    (out / "durations.csv").write_text(result.stats.to_csv())
    return out
