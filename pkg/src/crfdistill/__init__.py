"""Linear-chain CRF sequence labeling with structure-level knowledge distillation."""

from .data import Corpus, RawSentence, Span, decode_spans, encode_spans, span_f1, token_accuracy
from .encoder import ModelParams, TokenBatch, Vocab, backprop, encode, init_params
from .lattice import (
    KBestList,
    Lattice,
    Tagset,
    backward_scores,
    forward_scores,
    kbest_viterbi,
    log_partition,
    log_potential,
    nll_and_grad,
    posteriors,
    sequence_log_prob,
    viterbi,
)
from .losses import (
    InterpolationState,
    KDLossKind,
    anneal_lambda,
    emission_kd_loss,
    interpolated_loss,
    kd_loss_and_grad,
    pos_topwk_loss,
    posterior_kd_loss,
    token_kd_loss,
    topk_kd_loss,
    topwk_kd_loss,
)
from .pipeline import (
    TeacherCacheRecord,
    TeacherModel,
    TrainConfig,
    batch_by_tokens,
    cache_teachers,
    run_distillation,
    train_student,
    train_teacher,
)

__version__ = "0.1.0"
