"""Intrinsic Sparse Structure learning for LSTM and RHN language models."""

from iss_rnn.bench import CsrMatrix, run_bench, sparsify_random, spmm_csr, structured_shrink
from iss_rnn.cells import lstm_backward, lstm_sequence_forward, lstm_step, rhn_backward, rhn_forward
from iss_rnn.compaction import apply_compaction, plan_compaction, verify_equivalence
from iss_rnn.gradcheck import finite_difference_check
from iss_rnn.numerics import Rng, elementwise, gemm, rng_uniform
from iss_rnn.regularization import group_lasso_penalty, sgd_step_group_lasso, sgd_step_l1, threshold_weights
from iss_rnn.serialization import load_model, save_model
from iss_rnn.topology import build_lstm_iss_groups, build_rhn_iss_groups, detect_zero_groups, group_norm
from iss_rnn.training import calibrate_tau, perplexity, train_language_model

__all__ = [
    'gemm',
    'elementwise',
    'rng_uniform',
    'Rng',
    'lstm_step',
    'lstm_sequence_forward',
    'lstm_backward',
    'rhn_forward',
    'rhn_backward',
    'finite_difference_check',
    'build_lstm_iss_groups',
    'build_rhn_iss_groups',
    'group_norm',
    'detect_zero_groups',
    'group_lasso_penalty',
    'sgd_step_group_lasso',
    'threshold_weights',
    'sgd_step_l1',
    'train_language_model',
    'perplexity',
    'calibrate_tau',
    'plan_compaction',
    'apply_compaction',
    'verify_equivalence',
    'CsrMatrix',
    'sparsify_random',
    'spmm_csr',
    'structured_shrink',
    'run_bench',
    'save_model',
    'load_model',
]

__version__ = "0.1.0"
