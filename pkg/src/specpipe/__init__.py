"""specpipe: deterministic simulator for pipelined speculative inference."""

from .engine import ExperimentConfig, SimResult, plan_layer_split, simulate
from .kvcache import AllocationExhausted, KVCache, SequenceAllocator
from .model import (
    Batch,
    BatchToken,
    LayeredModel,
    ModelConfig,
    build_model,
    build_tree_mask,
    eval_layers,
    greedy_sample,
    logits,
    reference_decode,
    sample_prompt,
)
from .speculation import (
    CutoffController,
    SpeculationState,
    SyntheticDraft,
    ToyDraft,
    rollback_draft,
    speculate_microbatch,
)
from .verify import VerifyResult, apply_acceptance, detect_stale_runs, verify_run

__version__ = "0.1.0"

__all__ = [
    "AllocationExhausted",
    "Batch",
    "BatchToken",
    "CutoffController",
    "ExperimentConfig",
    "KVCache",
    "LayeredModel",
    "ModelConfig",
    "SequenceAllocator",
    "SimResult",
    "SpeculationState",
    "SyntheticDraft",
    "ToyDraft",
    "VerifyResult",
    "apply_acceptance",
    "build_model",
    "build_tree_mask",
    "detect_stale_runs",
    "eval_layers",
    "greedy_sample",
    "logits",
    "plan_layer_split",
    "reference_decode",
    "rollback_draft",
    "sample_prompt",
    "simulate",
    "speculate_microbatch",
    "verify_run",
]
