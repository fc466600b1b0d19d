"""Evaluation harness: templates, metrics, the synthetic knowledge task, and
experiment orchestration."""
from .templates import (EvalExample, TaskSpec, build_query, load_eval_file,
                        render_prompt, render_shot_block, save_eval_file)
from .metrics import accuracy, exact_match, normalize_answer, token_f1
from .synth import SynthConfig, SyntheticKB, generate_synthetic_kb, write_synth_dataset
from .evaluate import EvalReport, evaluate_task
from .experiment import ArmSpec, GridConfig, run_experiment

__all__ = [
    "ArmSpec", "EvalExample", "EvalReport", "GridConfig", "SynthConfig", "SyntheticKB",
    "TaskSpec", "accuracy", "build_query", "evaluate_task", "exact_match",
    "generate_synthetic_kb", "load_eval_file", "normalize_answer", "render_prompt",
    "render_shot_block", "run_experiment", "save_eval_file", "token_f1",
    "write_synth_dataset",
]
