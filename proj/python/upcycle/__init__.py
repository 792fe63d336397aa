"""Python bindings for the upcycle C++ core."""

from ._core import (
    CheckpointError,
    ShapeError,
    brute_force_lap,
    checkpoint_tensors,
    decode,
    evaluate_math,
    forward,
    gen_corpus,
    linear_cka,
    load_balance_loss,
    matmul,
    remap_ffn,
    router_probs,
    run_cli,
    shared_vocab,
    slerp,
    softmax_rows,
    solve_lap,
)

__all__ = [
    "CheckpointError",
    "ShapeError",
    "brute_force_lap",
    "checkpoint_tensors",
    "decode",
    "evaluate_math",
    "forward",
    "gen_corpus",
    "linear_cka",
    "load_balance_loss",
    "matmul",
    "remap_ffn",
    "router_probs",
    "run_cli",
    "shared_vocab",
    "slerp",
    "softmax_rows",
    "solve_lap",
]
