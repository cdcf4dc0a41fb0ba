"""Two-stage structuring: free text to structured reports, then grouping
across a patient's studies."""

from .pipeline import ReportStructurer
from .providers import (
    CompletionProvider,
    HttpCompletionProvider,
    RateLimiter,
    ScriptedProvider,
    completion_from_env,
    prompt_hash,
)
from .retrieval import FewShotIndex, bm25_tokenize
from .sequential import (
    SEQUENTIAL_SYSTEM_PROMPT,
    build_grouping_prompt,
    grouping_answer,
    grouping_lines,
    linearize_sequence_for_grouping,
    parse_grouping,
    structure_sequence,
)
from .single import (
    SINGLE_SYSTEM_PROMPT,
    Exchange,
    build_request,
    build_single_prompt,
    relations_to_report,
    report_to_relation_rows,
    run_with_repairs,
    structure_single,
)

__all__ = [
    "ReportStructurer",
    "CompletionProvider",
    "HttpCompletionProvider",
    "RateLimiter",
    "ScriptedProvider",
    "completion_from_env",
    "prompt_hash",
    "FewShotIndex",
    "bm25_tokenize",
    "SEQUENTIAL_SYSTEM_PROMPT",
    "build_grouping_prompt",
    "grouping_answer",
    "grouping_lines",
    "linearize_sequence_for_grouping",
    "parse_grouping",
    "structure_sequence",
    "SINGLE_SYSTEM_PROMPT",
    "Exchange",
    "build_request",
    "build_single_prompt",
    "relations_to_report",
    "report_to_relation_rows",
    "run_with_repairs",
    "structure_single",
]
