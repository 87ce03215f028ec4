"""Offline deep-Q toolkit for sequential skip prediction in music sessions."""

from .agent import (AgentConfig, DQNTrainer, QNetwork, ReplayBuffer, SkipDQN,
                    load_checkpoint, save_checkpoint, train)
from .data import (GeneratorConfig, RawRecord, Session, SessionError,
                   generate_sessions, generate_toy_sessions, parse_mssd,
                   split_sessions, write_mssd_csv)
from .env import EnvMode, SessionEnv, StepOutcome, Transition, rollout
from .evaluation import (EvalReport, StatResult, confidence_interval,
                         evaluate, maa, paired_t_test, split_session)
from .experiments import (ExperimentPlan, ExperimentResult, run_ablation,
                          run_experiment, run_leakage_report)
from .explain import (AttributionReport, BackgroundSet, attribute_sessions,
                      exact_shap, kernel_shap, sample_background)
from .schema import (FeatureDescriptor, FeatureSchema, SchemaError,
                     StateEncoder, apply_mask, build_schema, corrected_schema,
                     encode_record, fit_standardizer, schema_dump)

__version__ = "0.1.0"

__all__ = [
    "AgentConfig", "AttributionReport", "BackgroundSet", "DQNTrainer",
    "EnvMode", "EvalReport", "ExperimentPlan", "ExperimentResult",
    "FeatureDescriptor", "FeatureSchema", "GeneratorConfig", "QNetwork",
    "RawRecord", "ReplayBuffer", "Session", "SessionEnv", "SessionError",
    "SchemaError", "SkipDQN", "StatResult", "StepOutcome", "Transition",
    "apply_mask", "attribute_sessions", "build_schema", "confidence_interval",
    "corrected_schema", "encode_record", "evaluate", "exact_shap",
    "fit_standardizer", "generate_sessions", "generate_toy_sessions",
    "kernel_shap", "load_checkpoint", "maa", "paired_t_test", "parse_mssd",
    "rollout", "run_ablation", "run_experiment", "run_leakage_report",
    "sample_background", "save_checkpoint", "schema_dump", "split_session",
    "split_sessions", "train", "write_mssd_csv",
]
