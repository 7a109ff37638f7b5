"""Multilingual evaluation: metrics, external clients and task runners."""

from .clients import (
    ExternalClientError,
    HttpJudgeClient,
    HttpToxicityClient,
    JudgeClient,
    StubJudge,
    StubToxicity,
    ToxicityClient,
)
from .harness import (
    REPORT_SCHEMA,
    TASK_PRESETS,
    ChoiceResult,
    EvalError,
    EvalReport,
    EvalTask,
    MissingClientError,
    TransformerLM,
    build_fewshot_prompt,
    load_task_data,
    markdown_table,
    reports_markdown,
    run_task,
    score_choices,
)
from .metrics import (
    bleu,
    corpus_bleu,
    expected_max_toxicity,
    harmful_rate,
    mean_over_languages,
    rouge_l,
    strict_match,
    toxicity_probability,
    win_rate,
)
