"""Token-and-duration transducer loss, gradients, decoders and force-alignment harness."""

from .decoding import (
    DecodePolicy,
    DecodeResult,
    FunctionJoiner,
    TabularJoiner,
    batched_greedy_tdt,
    emission_stats,
    greedy_rnnt,
    greedy_tdt,
)
from .gradients import (
    GradientBundle,
    GradOptions,
    apply_fastemit,
    rnnt_grad_token_logits,
    rnnt_loss_and_grad,
    sampled_loss_grad,
    tdt_grad_duration_logits,
    tdt_grad_duration_probs,
    tdt_grad_token_logits,
    tdt_grad_token_probs,
    tdt_loss_and_grad,
)
from .lattice import (
    AlignmentPosterior,
    DurationSet,
    JointProblem,
    LatticeTables,
    alignment_posterior,
    diagonal_identity,
    rnnt_loss,
    split_log_probs,
    tdt_loss,
)

__version__ = "0.1.0"
