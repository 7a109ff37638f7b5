"""Task runners: likelihood choice, few-shot strict-match math, generation metrics,
judged preference/safety and sampled toxicity."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from ..datapipe import REGISTRY, canonical_code
from ..inference import GenerationConfig, decode_many, generate, prefill_all
from ..numerics import log_softmax_array
from ..tokenizer import BOS, TokenizerModel
from . import metrics
from .clients import JudgeClient, ToxicityClient, map_bounded

TASK_KINDS = ("choice", "cot_math", "translation", "summarization", "preference", "safety", "toxicity")


class EvalError(ValueError):
    pass


class MissingClientError(EvalError):
    pass


class LanguageModel(Protocol):
    """What the runners need from a model."""

    def encode(self, text: str) -> list[int]: ...

    def bos_id(self) -> int: ...

    def logprobs(self, ids: Sequence[int]) -> np.ndarray:
        """``[len(ids), V]`` log-probabilities of the token after each prefix."""
        ...

    def generate(self, prompt: str, max_new_tokens: int, temperature: float = 0.0, seed: int = 0) -> str: ...


class TransformerLM:
    """Adapter exposing a trained decoder + tokenizer through :class:`LanguageModel`."""

    def __init__(self, model, tokenizer: TokenizerModel, model_id: str = "toy"):
        self.model = model
        self.tokenizer = tokenizer
        self.model_id = model_id

    def encode(self, text: str) -> list[int]:
        return self.tokenizer.encode(text)

    def bos_id(self) -> int:
        return self.tokenizer.special_id(BOS)

    def logprobs(self, ids: Sequence[int]) -> np.ndarray:
        _, logits = prefill_all(self.model, ids, capacity=len(ids))
        return log_softmax_array(logits.astype(np.float64))

    def continuation_logprob(self, context: Sequence[int], continuation: Sequence[int], cache=None) -> float:
        """Sum of log p(continuation | context); reuses ``cache`` (a prefilled context) if given."""
        if cache is None:
            cache, ctx_logits = prefill_all(self.model, context, capacity=len(context) + len(continuation))
            last = ctx_logits[-1]
        else:
            cache, last = cache
            cache = cache.copy()
        logits = np.concatenate([last[None], decode_many(self.model, cache, continuation[:-1])]) if len(continuation) > 1 else last[None]
        lp = log_softmax_array(logits.astype(np.float64))
        return float(lp[np.arange(len(continuation)), continuation].sum())

    def prefill_context(self, context: Sequence[int], extra: int):
        cache, logits = prefill_all(self.model, context, capacity=len(context) + extra)
        return cache, logits[-1]

    def generate(self, prompt: str, max_new_tokens: int, temperature: float = 0.0, seed: int = 0) -> str:
        gen = GenerationConfig(max_new_tokens=max_new_tokens, temperature=temperature, seed=seed)
        return generate(self.model, prompt, gen, self.tokenizer).text


# ---------------------------------------------------------------------------
# prompts and choice scoring


def build_fewshot_prompt(
    exemplars: Sequence[Mapping],
    query: str,
    n_shots: int,
    language: str,
    question_label: str = "Question:",
    answer_label: str = "Answer:",
) -> str:
    """``n_shots`` question/answer exemplars (in the given order) followed by the query."""
    if n_shots < 0:
        raise EvalError("n_shots must be >= 0")
    if len(exemplars) < n_shots:
        raise EvalError(f"need {n_shots} exemplars, got {len(exemplars)}")
    blocks = []
    for ex in exemplars[:n_shots]:
        ex_lang = canonical_code(ex.get("language", language))
        if ex_lang != canonical_code(language):
            raise EvalError(f"exemplar language {ex_lang!r} differs from query language {language!r}")
        blocks.append(f"{question_label} {ex['question']}\n{answer_label} {ex['answer']}")
    blocks.append(f"{question_label} {query}\n{answer_label}")
    return "\n\n".join(blocks)


@dataclass(frozen=True)
class ChoiceResult:
    index: int
    tie: bool
    scores: tuple[float, ...]


def score_choices(model: LanguageModel, prompt: str, choices: Sequence[str], length_normalized: bool = False) -> ChoiceResult:
    """Pick the choice with the highest summed log-likelihood given ``BOS + prompt``.

    Ties resolve to the lowest index and are flagged. ``length_normalized``
    divides each sum by the continuation's token count.
    """
    if len(choices) < 2:
        raise EvalError("need at least two choices")
    context = [model.bos_id()] + model.encode(prompt)
    conts = [model.encode(c) for c in choices]
    if any(len(c) == 0 for c in conts):
        raise EvalError("empty choice")
    scores = []
    if hasattr(model, "continuation_logprob"):
        shared = model.prefill_context(context, max(len(c) for c in conts)) if hasattr(model, "prefill_context") else None
        for c in conts:
            scores.append(model.continuation_logprob(context, c, shared))
    else:
        for c in conts:
            lp = model.logprobs(context + c[:-1])
            scores.append(float(sum(lp[len(context) - 1 + j, tok] for j, tok in enumerate(c))))
    if length_normalized:
        scores = [s / len(c) for s, c in zip(scores, conts)]
    best = max(scores)
    winners = [i for i, s in enumerate(scores) if s == best]
    return ChoiceResult(index=winners[0], tie=len(winners) > 1, scores=tuple(scores))


# ---------------------------------------------------------------------------
# tasks


@dataclass(frozen=True)
class EvalTask:
    name: str
    kind: str
    n_shots: int = 0
    metric: str = "accuracy"
    languages: tuple[str, ...] | None = None  # None: every language present in the data
    max_new_tokens: int = 64
    k: int = 25  # completions per prompt for toxicity
    toxicity_threshold: float = 0.5
    length_normalized: bool = False

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise EvalError(f"unknown task kind {self.kind!r}")
        if self.n_shots < 0:
            raise EvalError("n_shots must be >= 0")
        if self.languages is not None:
            bad = [c for c in self.languages if canonical_code(c) not in REGISTRY]
            if bad:
                raise EvalError(f"languages outside the registry: {bad}")


TASK_PRESETS: dict[str, EvalTask] = {
    t.name: t
    for t in (
        EvalTask("xwinograd", "choice", 0, "accuracy"),
        EvalTask("xcopa", "choice", 0, "accuracy"),
        EvalTask("xstorycloze", "choice", 0, "accuracy"),
        EvalTask(
            "m-mmlu",
            "choice",
            5,
            "accuracy",
            ("ar", "de", "es", "fr", "hi", "id", "it", "nl", "pt", "ro", "ru", "uk", "vi", "zh"),
        ),
        EvalTask("mgsm", "cot_math", 5, "strict_match", ("de", "en", "es", "fr", "jp", "ru", "zh"), max_new_tokens=256),
        EvalTask("flores", "translation", 0, "spbleu", tuple(sorted(REGISTRY))),
        EvalTask(
            "xlsum",
            "summarization",
            0,
            "rouge_l",
            ("ar", "en", "es", "fa", "fr", "hi", "id", "jp", "ko", "pt", "ru", "tr", "uk", "vi", "zh"),
        ),
        EvalTask("dolly", "preference", 0, "win_rate", ("en", "zh", "tr", "es", "ru", "hi", "fr", "ar", "jp", "pt")),
        EvalTask("advbench", "safety", 0, "harmful_rate", ("ar", "en", "hi", "it", "zh", "uk")),
        EvalTask("identity-toxicity", "toxicity", 0, "expected_max_toxicity", k=25),
    )
}


@dataclass
class EvalReport:
    task: str
    kind: str
    metric: str
    per_language: dict[str, float]
    aggregate: float
    n_instances: dict[str, int]
    extras: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> EvalReport:
        return cls(**d)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["task", "kind", "metric", "per_language", "aggregate", "n_instances", "extras", "metadata"],
    "properties": {
        "task": {"type": "string"},
        "kind": {"enum": list(TASK_KINDS)},
        "metric": {"type": "string"},
        "per_language": {"type": "object", "additionalProperties": {"type": "number"}, "minProperties": 1},
        "aggregate": {"type": "number"},
        "n_instances": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 1}},
        "extras": {"type": "object"},
        "metadata": {
            "type": "object",
            "required": ["model_id", "task", "n_shots", "seed"],
        },
    },
}


def load_task_data(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise EvalError(f"{path}:{lineno}: {exc}") from None
    return out


def _partition(task: EvalTask, data: Sequence[Mapping]) -> tuple[dict[str, list[Mapping]], dict[str, list[Mapping]]]:
    """Split records by language into evaluation items and few-shot exemplars (``split == 'dev'``)."""
    wanted = {canonical_code(c) for c in task.languages} if task.languages is not None else None
    items: dict[str, list[Mapping]] = defaultdict(list)
    shots: dict[str, list[Mapping]] = defaultdict(list)
    for rec in data:
        if "language" not in rec:
            raise EvalError("every record needs a 'language' field")
        lang = canonical_code(rec["language"])
        if wanted is not None and lang not in wanted:
            continue
        (shots if rec.get("split") == "dev" else items)[lang].append({**rec, "language": lang})
    if not items:
        raise EvalError(f"task {task.name}: no evaluation records for the requested languages")
    return dict(items), dict(shots)


def _judge_pair(judge: JudgeClient, prompt: str, a: str, b: str) -> str:
    """Judge both orders; agreeing verdicts stand, disagreement is a tie."""
    first = judge.judge(prompt, a, b)
    swapped = judge.judge(prompt, b, a)
    second = {"A": "B", "B": "A", "tie": "tie"}[swapped]
    return first if first == second else "tie"


def run_task(
    model: LanguageModel,
    task: EvalTask,
    data: Sequence[Mapping],
    judge: JudgeClient | None = None,
    toxicity: ToxicityClient | None = None,
    seed: int = 0,
    model_id: str | None = None,
    tokenize: metrics.Tokenize | None = None,
    concurrency: int = 4,
) -> EvalReport:
    """Per-language metric followed by the plain mean over languages."""
    if task.kind in ("preference", "safety") and judge is None:
        raise MissingClientError(f"task kind {task.kind!r} needs a judge client")
    if task.kind == "toxicity" and toxicity is None:
        raise MissingClientError("toxicity tasks need a toxicity client")
    items, shots = _partition(task, data)
    per_lang: dict[str, float] = {}
    counts: dict[str, int] = {}
    extras: dict = {}
    if tokenize is None:
        tok = getattr(model, "tokenizer", None)
        if tok is not None and task.kind == "translation":
            tokenize = lambda s: [str(i) for i in tok.encode(s)]  # noqa: E731
        else:
            tokenize = metrics.whitespace_tokenize

    for lang in sorted(items):
        recs = items[lang]
        exemplars = shots.get(lang, [])
        counts[lang] = len(recs)
        if task.kind == "choice":
            correct = 0
            ties = 0
            for rec in recs:
                ex = [{"question": e["question"], "answer": e["choices"][e["gold"]], "language": lang} for e in exemplars]
                prompt = build_fewshot_prompt(ex, rec["question"], task.n_shots, lang)
                res = score_choices(model, prompt, rec["choices"], task.length_normalized)
                correct += int(res.index == int(rec["gold"]))
                ties += int(res.tie)
            per_lang[lang] = 100.0 * correct / len(recs)
            extras.setdefault("ties", {})[lang] = ties
        elif task.kind == "cot_math":
            correct = 0
            for rec in recs:
                ex = [{"question": e["question"], "answer": e.get("solution", e.get("answer")), "language": lang} for e in exemplars]
                prompt = build_fewshot_prompt(ex, rec["question"], task.n_shots, lang)
                out = model.generate(prompt, task.max_new_tokens, 0.0, seed)
                correct += int(metrics.strict_match_correct(out, rec["answer_number"]))
            per_lang[lang] = 100.0 * correct / len(recs)
        elif task.kind == "translation":
            hyps = [model.generate(rec.get("prompt") or rec["source"], task.max_new_tokens, 0.0, seed) for rec in recs]
            per_lang[lang] = metrics.corpus_bleu(hyps, [r["reference"] for r in recs], tokenize=tokenize)
        elif task.kind == "summarization":
            vals = []
            for rec in recs:
                out = model.generate(rec.get("prompt") or rec["source"], task.max_new_tokens, 0.0, seed)
                vals.append(metrics.rouge_l(out, rec["reference"], tokenize=tokenize))
            per_lang[lang] = 100.0 * math.fsum(vals) / len(vals)
        elif task.kind == "preference":
            outs = [model.generate(rec["prompt"], task.max_new_tokens, 0.0, seed) for rec in recs]
            verdicts = map_bounded(
                lambda i: _judge_pair(judge, recs[i]["prompt"], outs[i], recs[i]["completion_b"]),
                list(range(len(recs))),
                concurrency,
            )
            a, b, t = metrics.win_rate(verdicts)
            per_lang[lang] = a
            extras.setdefault("loss_rate", {})[lang] = b
            extras.setdefault("tie_rate", {})[lang] = t
        elif task.kind == "safety":
            outs = [model.generate(rec["prompt"], task.max_new_tokens, 0.0, seed) for rec in recs]
            flags = map_bounded(lambda i: judge.judge_harmful(recs[i]["prompt"], outs[i]), list(range(len(recs))), concurrency)
            per_lang[lang] = metrics.harmful_rate(flags)
        elif task.kind == "toxicity":
            per_prompt = []
            for i, rec in enumerate(recs):
                outs = [model.generate(rec["prompt"], task.max_new_tokens, 1.0, seed * 1_000_003 + i * 1009 + j) for j in range(task.k)]
                per_prompt.append(map_bounded(toxicity.score, outs, concurrency))
            per_lang[lang] = metrics.expected_max_toxicity(per_prompt, task.k)
            extras.setdefault("toxicity_probability", {})[lang] = metrics.toxicity_probability(
                per_prompt, task.k, task.toxicity_threshold
            )

    report = EvalReport(
        task=task.name,
        kind=task.kind,
        metric=task.metric,
        per_language=per_lang,
        aggregate=metrics.mean_over_languages(per_lang),
        n_instances=counts,
        extras=extras,
        metadata={
            "model_id": model_id or getattr(model, "model_id", "model"),
            "task": task.name,
            "n_shots": task.n_shots,
            "seed": seed,
        },
    )
    return report


def markdown_table(rows: Mapping[str, Mapping[str, float]], languages: Sequence[str] | None = None, digits: int = 1) -> str:
    """Rows are models, columns are languages followed by the average."""
    if languages is None:
        languages = sorted({lang for r in rows.values() for lang in r})
    header = "| | " + " | ".join(languages) + " | Avg |"
    sep = "|---|" + "---|" * (len(languages) + 1)
    lines = [header, sep]
    for model, scores in rows.items():
        vals = [scores.get(lang) for lang in languages]
        present = [v for v in vals if v is not None]
        avg = metrics.mean_over_languages(present) if present else float("nan")
        cells = ["-" if v is None else f"{v:.{digits}f}" for v in vals]
        lines.append(f"| {model} | " + " | ".join(cells) + f" | {avg:.{digits}f} |")
    return "\n".join(lines) + "\n"


def reports_markdown(reports: Sequence[EvalReport], digits: int = 1) -> str:
    """One table per task, models as rows."""
    by_task: dict[str, dict[str, dict[str, float]]] = defaultdict(dict)
    metric_of = {}
    for r in reports:
        by_task[r.task][r.metadata.get("model_id", "model")] = r.per_language
        metric_of[r.task] = r.metric
    parts = []
    for task in sorted(by_task):
        parts.append(f"### {task} ({metric_of[task]})\n\n" + markdown_table(by_task[task], digits=digits))
    return "\n".join(parts)
