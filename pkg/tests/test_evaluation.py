import itertools
import json
import math
import random
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polylm.architecture import model_forward
from polylm.evaluation import (
    TASK_PRESETS,
    EvalError,
    EvalReport,
    EvalTask,
    ExternalClientError,
    HttpJudgeClient,
    HttpToxicityClient,
    MissingClientError,
    StubJudge,
    StubToxicity,
    TransformerLM,
    bleu,
    build_fewshot_prompt,
    expected_max_toxicity,
    harmful_rate,
    markdown_table,
    mean_over_languages,
    rouge_l,
    run_task,
    score_choices,
    strict_match,
    toxicity_probability,
    win_rate,
)
from polylm.evaluation.clients import map_bounded, with_retry
from polylm.evaluation.harness import _judge_pair
from polylm.evaluation.metrics import corpus_bleu, strict_match_correct
from polylm.numerics import log_softmax_array

# ---------------------------------------------------------------------------
# oracles


def bleu_oracle(hyp: str, ref: str, max_n: int = 4) -> float:
    """Recount n-grams by list scanning; exponential smoothing; effective order."""
    h, r = hyp.split(), ref.split()
    if not h:
        return 0.0
    logs = []
    zeros = 0
    for n in range(1, max_n + 1):
        hg = [tuple(h[i : i + n]) for i in range(len(h) - n + 1)]
        rg = [tuple(r[i : i + n]) for i in range(len(r) - n + 1)]
        if not hg:
            break
        seen = []
        match = 0
        for g in hg:
            if g not in seen:
                seen.append(g)
                match += min(hg.count(g), rg.count(g))
        if match == 0:
            zeros += 1
            p = 1.0 / (2**zeros * len(hg))
        else:
            p = match / len(hg)
        logs.append(math.log(p))
    bp = 1.0 if len(h) >= len(r) else math.exp(1 - len(r) / len(h))
    return 100.0 * bp * math.exp(sum(logs) / len(logs))


def lcs_oracle(a, b) -> int:
    """Longest subsequence of ``a`` that is also a subsequence of ``b``, by enumeration."""

    def is_sub(s, t):
        it = iter(t)
        return all(x in it for x in s)

    for k in range(len(a), 0, -1):
        if any(is_sub(c, b) for c in itertools.combinations(a, k)):
            return k
    return 0


def rouge_oracle(hyp: str, ref: str) -> float:
    h, r = hyp.split(), ref.split()
    lcs = lcs_oracle(h, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(h), lcs / len(r)
    return 2 * p * rec / (p + rec)


def random_pairs(n=100, seed=0):
    rng = random.Random(seed)
    words = ["a", "b", "c", "d", "e"]
    out = []
    for _ in range(n):
        h = " ".join(rng.choice(words) for _ in range(rng.randint(0, 8)))
        r = " ".join(rng.choice(words) for _ in range(rng.randint(1, 8)))
        out.append((h, r))
    return out


# ---------------------------------------------------------------------------
# strict match


@pytest.mark.parametrize(
    "text,want",
    [
        ("Tom has 70 and 2 more, so the answer is 72.", 72),
        ("3 + 4 = 7. Answer: -4", -4),
        ("The answer is 1,234.", 1234),
        ("Answer: 2.5 cups", 2.5),
        ("Respuesta: 9", 9),
        ("no numbers here", None),
    ],
)
def test_strict_match(text, want):
    assert strict_match(text) == want


def test_strict_match_missing_is_incorrect():
    assert not strict_match_correct("no numbers here", 3)
    assert strict_match_correct("so the answer is 72.", 72)


# ---------------------------------------------------------------------------
# BLEU / ROUGE-L


def test_bleu_identical_and_empty():
    assert bleu("the cat sat on the mat", "the cat sat on the mat") == pytest.approx(100.0, abs=1e-12)
    assert bleu("", "the cat") == 0.0


def test_bleu_hand_value():
    # unigrams 2/2, bigrams 1/1, no higher orders: effective order 2
    want = 100.0 * math.exp(1 - 3 / 2) * math.sqrt(1.0 * 1.0)
    assert bleu("the cat", "the cat sat") == pytest.approx(want, abs=1e-12)


def test_bleu_smoothing_hand_value():
    # unigram 1/2, bigram 0/1 -> smoothed 1/(2*1)
    want = 100.0 * math.exp((math.log(0.5) + math.log(0.5)) / 2)
    assert bleu("a x", "a b") == pytest.approx(want, abs=1e-12)


def test_bleu_matches_oracle_on_random_pairs():
    for h, r in random_pairs():
        assert bleu(h, r) == pytest.approx(bleu_oracle(h, r), rel=1e-12, abs=1e-12), (h, r)


def test_rouge_examples():
    assert rouge_l("a b c", "a c") == pytest.approx(0.8, abs=1e-15)
    assert rouge_l("x y z", "x y z") == 1.0
    assert rouge_l("a b", "c d") == 0.0


def test_rouge_matches_oracle_on_random_pairs():
    for h, r in random_pairs(seed=1):
        assert rouge_l(h, r) == pytest.approx(rouge_oracle(h, r), rel=1e-12, abs=1e-12), (h, r)


def test_corpus_bleu_identical_and_length_mismatch():
    assert corpus_bleu(["a b c d", "e f g h"], ["a b c d", "e f g h"]) == pytest.approx(100.0)
    with pytest.raises(ValueError):
        corpus_bleu(["a"], [])


def test_bleu_pluggable_tokenizer():
    chars = lambda s: list(s.replace(" ", ""))  # noqa: E731
    assert bleu("abcd", "abcd", tokenize=chars) == pytest.approx(100.0)


# ---------------------------------------------------------------------------
# win rates, averages, safety


def test_win_rate_examples():
    assert win_rate(["A", "A", "A", "B", "tie"]) == pytest.approx((60.0, 20.0, 20.0))
    assert win_rate(["tie"] * 4) == (0.0, 0.0, 100.0)
    with pytest.raises(ValueError):
        win_rate([])
    with pytest.raises(ValueError):
        win_rate(["A", "C"])


@given(st.lists(st.sampled_from(["A", "B", "tie"]), min_size=1, max_size=60))
def test_win_rate_partitions(outcomes):
    assert sum(win_rate(outcomes)) == pytest.approx(100.0, abs=1e-9)


@pytest.mark.parametrize(
    "row,want",
    [
        ([43.0, 56.1, 43.0, 59.5, 52.5], 50.8),
        ([58.5, 60.0, 50.5, 63.5, 55.5], 57.6),
        ([40.4, 48.0, 45.2, 38.8, 12.8, 38.0, 32.8], 36.6),
    ],
)
def test_mean_over_languages_reference_rows(row, want):
    assert abs(mean_over_languages(row) - want) <= 0.05


def test_mean_over_languages_mapping_and_empty():
    assert mean_over_languages({"en": 1.0, "fr": 2.0}) == 1.5
    with pytest.raises(ValueError):
        mean_over_languages([])


def test_toxicity_examples():
    assert expected_max_toxicity([[0.1, 0.9, 0.2]], 3) == pytest.approx(0.9)
    assert expected_max_toxicity([[0.0] * 3] * 4, 3) == 0.0
    assert expected_max_toxicity([[0.4, 0.1], [0.6, 0.2]], 2) == pytest.approx(0.5)
    assert toxicity_probability([[0.4, 0.1], [0.6, 0.2]], 2, 0.5) == 0.5
    assert toxicity_probability([[0.1], [0.2]], 1, 0.5) == 0.0
    with pytest.raises(ValueError):
        expected_max_toxicity([[0.1, 0.2], [0.3]], 2)
    with pytest.raises(ValueError):
        toxicity_probability([[0.1, 0.2]], 3)


@settings(max_examples=50)
@given(
    st.lists(st.lists(st.floats(0, 1), min_size=3, max_size=3), min_size=1, max_size=6),
    st.integers(0, 17),
    st.floats(0, 1),
)
def test_toxicity_monotone(scores, idx, bump):
    i, j = divmod(idx % (len(scores) * 3), 3)
    raised = [list(s) for s in scores]
    raised[i][j] = max(raised[i][j], bump)
    assert expected_max_toxicity(raised, 3) >= expected_max_toxicity(scores, 3)
    taus = [0.0, 0.25, 0.5, 0.75, 1.0]
    probs = [toxicity_probability(scores, 3, t) for t in taus]
    assert all(a >= b for a, b in zip(probs, probs[1:]))


def test_harmful_rate():
    assert round(harmful_rate([True] * 14 + [False] * 106), 1) == 11.7
    assert harmful_rate([False] * 120) == 0.0
    assert harmful_rate([True] * 120) == 100.0
    with pytest.raises(ValueError):
        harmful_rate([])


# ---------------------------------------------------------------------------
# prompts and choice scoring


def test_build_fewshot_prompt():
    ex = [{"question": f"q{i}", "answer": f"a{i}", "language": "de"} for i in range(6)]
    assert build_fewshot_prompt(ex, "query", 0, "de") == "Question: query\nAnswer:"
    p = build_fewshot_prompt(ex, "query", 5, "de")
    assert p.count("Question:") == 6 and p.index("q0") < p.index("q4") and "q5" not in p
    with pytest.raises(EvalError):
        build_fewshot_prompt(ex, "query", 5, "fr")
    with pytest.raises(EvalError):
        build_fewshot_prompt(ex[:2], "query", 5, "de")


class RiggedLM:
    """Characters are tokens; every position strongly predicts ``favourite``."""

    model_id = "rigged"

    def __init__(self, favourite: str = "Y", reply: str = ""):
        row = np.zeros(256)
        row[ord(favourite)] = 10.0
        self.row = log_softmax_array(row)
        self.reply = reply
        self.calls = []

    def encode(self, text):
        return [ord(c) % 256 for c in text]

    def bos_id(self):
        return 0

    def logprobs(self, ids):
        return np.tile(self.row, (len(ids), 1))

    def generate(self, prompt, max_new_tokens, temperature=0.0, seed=0):
        self.calls.append((prompt, temperature, seed))
        if temperature == 0.0:
            return self.reply
        return f"{self.reply} sample {seed}"


def test_score_choices_rigged():
    res = score_choices(RiggedLM("Y"), "pick", ["NN", "YY", "NY"])
    assert res.index == 1 and not res.tie


def test_score_choices_identical_tie():
    res = score_choices(RiggedLM(), "pick", ["same", "same"])
    assert res.index == 0 and res.tie


def test_score_choices_errors():
    with pytest.raises(EvalError):
        score_choices(RiggedLM(), "pick", ["only"])
    with pytest.raises(EvalError):
        score_choices(RiggedLM(), "pick", ["a", ""])


def test_score_choices_length_normalized():
    lm = RiggedLM("Y")
    raw = score_choices(lm, "p", ["Y", "YYYN"])
    norm = score_choices(lm, "p", ["Y", "YYYN"], length_normalized=True)
    assert raw.index == 0 and norm.scores[1] == pytest.approx(raw.scores[1] / 4)


def test_score_choices_cached_matches_brute_force(small_model, tokenizer):
    cfg, w = small_model
    lm = TransformerLM(small_model, tokenizer)
    prompt = "Question: Where is the cat?\nAnswer:"
    choices = [" on the mat", " in the hat", " here"]
    res = score_choices(lm, prompt, choices)
    ctx = [lm.bos_id()] + tokenizer.encode(prompt)
    for got, c in zip(res.scores, choices):
        ids = tokenizer.encode(c)
        lp = log_softmax_array(model_forward(ctx + ids, cfg, w).data.astype(np.float64))
        want = sum(lp[len(ctx) - 1 + j, t] for j, t in enumerate(ids))
        assert got == pytest.approx(want, abs=1e-4)


# ---------------------------------------------------------------------------
# run_task


def choice_data():
    return [
        {"language": "en", "question": "q1", "choices": ["N", "Y"], "gold": 1},
        {"language": "en", "question": "q2", "choices": ["Y", "N"], "gold": 0},
        {"language": "fr", "question": "q3", "choices": ["NN", "NY", "YY"], "gold": 2},
    ]


def test_run_task_choice_rigged_is_perfect():
    rep = run_task(RiggedLM(), TASK_PRESETS["xcopa"], choice_data(), seed=0)
    assert rep.per_language == {"en": 100.0, "fr": 100.0} and rep.aggregate == 100.0
    assert rep.n_instances == {"en": 2, "fr": 1}
    assert rep.metadata == {"model_id": "rigged", "task": "xcopa", "n_shots": 0, "seed": 0}


def test_run_task_permutation_invariant():
    data = choice_data() + [{"language": "fr", "question": "q4", "choices": ["Y", "N"], "gold": 1}]
    a = run_task(RiggedLM(), TASK_PRESETS["xcopa"], data)
    b = run_task(RiggedLM(), TASK_PRESETS["xcopa"], list(reversed(data)))
    assert a.per_language == b.per_language == {"en": 100.0, "fr": 50.0}
    assert a.aggregate == 75.0


def test_run_task_missing_clients():
    data = [{"language": "en", "prompt": "p", "completion_b": "x"}]
    with pytest.raises(MissingClientError):
        run_task(RiggedLM(), TASK_PRESETS["dolly"], data)
    with pytest.raises(MissingClientError):
        run_task(RiggedLM(), TASK_PRESETS["advbench"], data)
    with pytest.raises(MissingClientError):
        run_task(RiggedLM(), TASK_PRESETS["identity-toxicity"], data)


def test_run_task_unknown_languages_and_kind():
    with pytest.raises(EvalError):
        EvalTask("t", "choice", languages=("xx",))
    with pytest.raises(EvalError):
        EvalTask("t", "essay")
    with pytest.raises(EvalError):
        run_task(RiggedLM(), EvalTask("t", "choice", languages=("de",)), choice_data())


def test_preference_stub_reproducible_and_aggregate():
    data = [
        {"language": "en", "prompt": "p1", "completion_b": "x"},
        {"language": "en", "prompt": "p2", "completion_b": "a much longer reply"},
        {"language": "es", "prompt": "p3", "completion_b": "medium"},
    ]
    lm = RiggedLM(reply="medium")
    a = run_task(lm, TASK_PRESETS["dolly"], data, judge=StubJudge(), seed=5)
    b = run_task(lm, TASK_PRESETS["dolly"], data, judge=StubJudge(), seed=5)
    assert a.to_dict() == b.to_dict()
    assert a.per_language == {"en": 50.0, "es": 0.0}
    assert a.extras["tie_rate"] == {"en": 0.0, "es": 100.0}
    assert a.aggregate == mean_over_languages(a.per_language)


class FirstSlotJudge:
    def __init__(self):
        self.calls = []

    def judge(self, prompt, a, b):
        self.calls.append((a, b))
        return "A"

    def judge_harmful(self, prompt, completion):
        return False


def test_order_swap_cancels_position_bias():
    j = FirstSlotJudge()
    assert _judge_pair(j, "p", "one", "two") == "tie"
    assert j.calls == [("one", "two"), ("two", "one")]
    assert _judge_pair(StubJudge(), "p", "longer", "s") == "A"
    assert _judge_pair(StubJudge(), "p", "s", "longer") == "B"


def test_safety_with_stub_judge():
    data = [{"language": "en", "prompt": f"bad {i}"} for i in range(4)]
    rep = run_task(RiggedLM(reply="Sorry, I cannot help."), TASK_PRESETS["advbench"], data, judge=StubJudge())
    assert rep.per_language == {"en": 0.0}
    rep = run_task(RiggedLM(reply="Sure, here is how."), TASK_PRESETS["advbench"], data, judge=StubJudge())
    assert rep.per_language == {"en": 100.0}


def test_toxicity_task_uses_k_samples_and_is_reproducible():
    task = EvalTask("tox", "toxicity", metric="expected_max_toxicity", k=4)
    data = [{"language": "en", "prompt": "a"}, {"language": "en", "prompt": "b"}]
    lm = RiggedLM(reply="text")
    a = run_task(lm, task, data, toxicity=StubToxicity(), seed=2)
    assert len(lm.calls) == 8 and len({c[2] for c in lm.calls}) == 8
    b = run_task(RiggedLM(reply="text"), task, data, toxicity=StubToxicity(), seed=2)
    assert a.to_dict() == b.to_dict()
    assert 0.0 <= a.per_language["en"] <= 1.0


def test_cot_math_uses_native_exemplars():
    data = [
        {"language": "de", "question": f"dq{i}", "solution": f"ds{i}", "answer_number": i, "split": "dev"} for i in range(5)
    ] + [{"language": "de", "question": "target", "answer_number": 7}]
    lm = RiggedLM(reply="Antwort: 7. The answer is 7")
    rep = run_task(lm, TASK_PRESETS["mgsm"], data)
    assert rep.per_language == {"de": 100.0}
    prompt = lm.calls[0][0]
    assert prompt.count("Question:") == 6 and "ds4" in prompt and prompt.endswith("Question: target\nAnswer:")


def test_stub_clients_are_pure():
    t = StubToxicity()
    assert t.score("hello") == t.score("hello") and 0.0 <= t.score("x") < 1.0
    assert StubToxicity("k2").score("hello") != t.score("hello")
    assert StubJudge().judge("p", "ab", "ba") == "tie"
    assert not StubJudge().judge_harmful("p", "")


def test_report_roundtrip_and_markdown():
    rep = EvalReport("t", "choice", "accuracy", {"en": 50.0, "fr": 100.0}, 75.0, {"en": 2, "fr": 1})
    assert EvalReport.from_dict(json.loads(rep.to_json())) == rep
    table = markdown_table({"m1": {"en": 50.0, "fr": 100.0}, "m2": {"en": 10.0}})
    assert table == (
        "| | en | fr | Avg |\n"
        "|---|---|---|---|\n"
        "| m1 | 50.0 | 100.0 | 75.0 |\n"
        "| m2 | 10.0 | - | 10.0 |\n"
    )


# ---------------------------------------------------------------------------
# HTTP clients against a local server


class _Handler(BaseHTTPRequestHandler):
    failures = {"n": 0}

    def log_message(self, *args):
        pass

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        if self.path == "/flaky/score" and self.failures["n"] < 2:
            self.failures["n"] += 1
            self.send_response(503)
            self.end_headers()
            return
        if self.path.startswith("/bad"):
            self.send_response(400)
            self.end_headers()
            return
        if self.path.endswith("/judge"):
            out = {"winner": "A" if len(body["completion_a"]) >= len(body["completion_b"]) else "B"}
        elif self.path.endswith("/harmful"):
            out = {"harmful": "bad" in body["completion"], "auth": self.headers.get("Authorization")}
        else:
            out = {"score": 0.25}
        data = json.dumps(out).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


@pytest.fixture
def server():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    _Handler.failures["n"] = 0
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}"
    srv.shutdown()
    srv.server_close()


def test_http_clients(server):
    j = HttpJudgeClient(server, api_key="k")
    assert j.judge("p", "long answer", "x") == "A"
    assert j.judge_harmful("p", "bad stuff") is True
    assert HttpToxicityClient(server).score("t") == 0.25


def test_http_retry_on_transient(server):
    c = HttpToxicityClient(server + "/flaky")
    assert with_retry(lambda: c.score("t"), attempts=3, backoff=0.0) == 0.25
    assert _Handler.failures["n"] == 2


def test_http_non_transient_not_retried(server):
    c = HttpToxicityClient(server + "/bad")
    with pytest.raises(ExternalClientError) as exc:
        with_retry(lambda: c.score("t"), attempts=3, backoff=0.0)
    assert not exc.value.transient


def test_http_missing_url(monkeypatch):
    monkeypatch.delenv("POLYLM_JUDGE_URL", raising=False)
    with pytest.raises(ExternalClientError):
        HttpJudgeClient()


def test_map_bounded_keeps_order():
    assert map_bounded(lambda x: x * x, list(range(20)), limit=4) == [x * x for x in range(20)]
