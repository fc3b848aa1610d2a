"""Experiment orchestration: corpora, probe sets, the run matrix and reports."""

from .corpus import CORPUS_KINDS, ProbeSet, generate_corpus, rank_frequency_slope, read_corpus, split_corpus, write_corpus
from .experiment import CorpusSpec, ExperimentSpec, ModelEntry, default_spec
from .report import emit_report, equal_step_ratio
from .runner import (
    SCHEMA_VERSION,
    CellResult,
    MatrixContext,
    RunRecord,
    load_distances,
    load_records,
    run_cell,
    run_distances,
    run_matrix,
    second_probe_check,
    write_spec,
)

__all__ = [
    "CORPUS_KINDS",
    "SCHEMA_VERSION",
    "CellResult",
    "CorpusSpec",
    "ExperimentSpec",
    "MatrixContext",
    "ModelEntry",
    "ProbeSet",
    "RunRecord",
    "default_spec",
    "emit_report",
    "equal_step_ratio",
    "generate_corpus",
    "load_distances",
    "load_records",
    "rank_frequency_slope",
    "read_corpus",
    "run_cell",
    "run_distances",
    "run_matrix",
    "second_probe_check",
    "split_corpus",
    "write_corpus",
    "write_spec",
]
