"""Transducer speech recognition toolkit: losses, decoding, scoring and the staged pipeline."""

from ._rnntlab import (
    ConfigError,
    Error,
    Hypothesis,
    LanguageModel,
    Model,
    StageError,
    Vocabulary,
    WerBreakdown,
    build_vocab,
    config_hash,
    ctc_loss,
    lattice_memory_bytes,
    latency_ms,
    rescore,
    rnnt_loss,
    rnnt_loss_bruteforce,
    run_experiment,
    scheme_token_counts,
    stack_frames,
    total_lookahead_ms,
    wer,
)

__all__ = [name for name in dir() if not name.startswith("_")]
