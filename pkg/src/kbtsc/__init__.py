"""Few-shot time-series classification with a self-refining knowledge bank.

A vision-language model classifies imaged series against a bank of
ID-addressed knowledge bullets. Three roles refine the bank: a Generator
predicts and cites bullets, a Reflector tags them and diagnoses errors, and a
Modifier emits atomic ADD/MODIFY/DELETE operations. At test time a two-pass
re-check supplies pseudo-labels for a gated, deferred update.
"""

from .agents import ContrastPair, GeneratorOutput, ModifierOutput, ReflectionOutput, Roles, TaskContext, retrieve_contrast_pair
from .bank import BankOperation, Bullet, KnowledgeBank, tau_drop_for
from .data import Dataset, FewShotSplit, TimeSeriesSample, few_shot_split, load_multivariate, load_ucr_tsv, z_normalize
from .features import SeparabilityReport, StatsSummary, fisher_score, rank_features, summarize
from .pipeline import MetricsReport, Pipeline, RunConfig, StepRecord, compute_metrics
from .plotting import PlotConfig, render_contrast_pair, render_line_plot
from .vlm_client import FunctionClient, RemoteClient, ScriptedClient, VlmRequest, VlmResponse, call_with_repair, extract_json

__version__ = "0.1.0"

__all__ = [
    "ContrastPair",
    "GeneratorOutput",
    "ModifierOutput",
    "ReflectionOutput",
    "Roles",
    "TaskContext",
    "retrieve_contrast_pair",
    "BankOperation",
    "Bullet",
    "KnowledgeBank",
    "tau_drop_for",
    "Dataset",
    "FewShotSplit",
    "TimeSeriesSample",
    "few_shot_split",
    "load_multivariate",
    "load_ucr_tsv",
    "z_normalize",
    "SeparabilityReport",
    "StatsSummary",
    "fisher_score",
    "rank_features",
    "summarize",
    "MetricsReport",
    "Pipeline",
    "RunConfig",
    "StepRecord",
    "compute_metrics",
    "PlotConfig",
    "render_contrast_pair",
    "render_line_plot",
    "FunctionClient",
    "RemoteClient",
    "ScriptedClient",
    "VlmRequest",
    "VlmResponse",
    "call_with_repair",
    "extract_json",
]
