import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polylm import datapipe as dp
from polylm.datapipe import MixtureSourceSpec, Sample
from polylm.tokenizer import END_OF_TURN


def make(i, lang="en", dataset="d1", kind="translated", prompt=None, completion=None):
    return Sample(f"s{i:06d}", prompt or f"prompt {i}", completion or f"answer {i}", lang, dataset, kind)


def first_fit_lengths(lengths, C):
    """Greedy first-fit on lengths alone; oversize items occupy ceil(n / C) fresh bins."""
    bins = []
    for n in lengths:
        if n > C:
            full, rest = divmod(n, C)
            bins += [C] * full + ([rest] if rest else [])
            continue
        for k, used in enumerate(bins):
            if used + n <= C:
                bins[k] += n
                break
        else:
            bins.append(n)
    return bins


# -- registry -----------------------------------------------------------------


def test_registry_has_23_unique_languages():
    assert len(dp.LANGUAGES) == 23
    assert len(dp.REGISTRY) == 23
    assert set(dp.SAMPLE_SENTENCES) == set(dp.REGISTRY)
    assert dp.canonical_code("ja") == "jp" and dp.in_registry("JA")


# -- samples ------------------------------------------------------------------


def test_sample_validation():
    with pytest.raises(dp.DataError):
        Sample("x", "", "y", "en", "d", "human")
    with pytest.raises(dp.DataError):
        Sample("x", "p", "y", "en", "d", "crawled")


def test_jsonl_round_trip(tmp_path):
    samples = [make(1), make(2, lang="hi", completion="नमस्ते")]
    dp.write_jsonl(samples, tmp_path / "s.jsonl")
    assert dp.read_jsonl(tmp_path / "s.jsonl") == samples
    (tmp_path / "bad.jsonl").write_text('{"id": 1}\n')
    with pytest.raises(dp.DataError):
        dp.read_jsonl(tmp_path / "bad.jsonl")


# -- language filter ----------------------------------------------------------


def test_filter_drops_unsupported():
    samples = [make(1, "en"), make(2, "sw"), make(3, "tr")]
    kept = dp.filter_languages(samples)
    assert {s.language for s in kept} == {"en", "tr"}
    report = dp.language_retention(samples, kept)
    assert report == {"en": {"seen": 1, "kept": 1}, "sw": {"seen": 1, "kept": 0}, "tr": {"seen": 1, "kept": 1}}


def test_filter_keeps_all_registry_input():
    samples = [make(i, code) for i, code in enumerate(sorted(dp.REGISTRY))]
    assert dp.filter_languages(samples) == samples


def test_filter_canonicalizes_alias():
    assert dp.filter_languages([make(1, "ja")])[0].language == "jp"


# -- caps ---------------------------------------------------------------------


def test_cap_exact_counts():
    spec = MixtureSourceSpec("translated", per_language_cap=3000)
    big = [make(i, "en") for i in range(5000)]
    small = [make(10_000 + i, "fr") for i in range(2000)]
    out = dp.cap_samples(big + small, spec, seed=0)
    counts = dp.mixture_report(out)["by_language"]
    assert counts == {"en": 3000, "fr": 2000}


def test_cap_is_per_dataset_and_language():
    spec = MixtureSourceSpec("translated", per_language_cap=3)
    samples = [make(i, "en", f"d{i % 2}") for i in range(20)] + [make(100 + i, "de", "d0") for i in range(2)]
    out = dp.cap_samples(samples, spec, seed=1)
    per = {(r["dataset_id"], r["language"]): r["count"] for r in dp.mixture_report(out)["by_source_dataset_language"]}
    assert per == {("d0", "en"): 3, ("d1", "en"): 3, ("d0", "de"): 2}


def test_cap_deterministic_and_order_independent():
    spec = MixtureSourceSpec("translated", per_language_cap=10)
    samples = [make(i) for i in range(100)]
    a = dp.cap_samples(samples, spec, seed=5)
    shuffled = samples[:]
    random.Random(0).shuffle(shuffled)
    assert dp.cap_samples(shuffled, spec, seed=5) == a
    assert dp.cap_samples(samples, spec, seed=6) != a


def test_cap_leaves_uncovered_sources():
    spec = MixtureSourceSpec("translated", per_language_cap=1)
    human = [make(i, kind="human") for i in range(5)]
    assert dp.cap_samples(human, spec, seed=0) == human


def test_cap_spec_validation():
    with pytest.raises(dp.DataError):
        MixtureSourceSpec("translated", per_language_cap=0)


# -- holdout ------------------------------------------------------------------


def test_holdout_sizes_and_disjoint():
    samples = [make(i, dataset="dolly", kind="human") for i in range(15_000)]
    train, held = dp.split_holdout(samples, 200, seed=0)
    assert (len(train), len(held)) == (14_800, 200)
    assert not {s.id for s in train} & {s.id for s in held}
    assert dp.split_holdout(samples, 200, seed=0) == (train, held)


def test_holdout_zero_and_too_many():
    samples = [make(i) for i in range(5)]
    assert dp.split_holdout(samples, 0, seed=0) == (samples, [])
    with pytest.raises(dp.DataError):
        dp.split_holdout(samples, 6, seed=0)


# -- mixture ------------------------------------------------------------------


def test_mixture_report_counts_and_order_independence():
    assert dp.mixture_report([])["total"] == 0
    assert dp.mixture_report([])["by_source_kind"] == dict.fromkeys(dp.SOURCE_KINDS, 0)
    samples = [make(1, "en", kind="human"), make(2, "en", kind="templates"), make(3, "fr", kind="human")]
    rep = dp.mixture_report(samples)
    assert rep["by_source_kind"] == {"templates": 1, "human": 2, "translated": 0, "synthetic": 0}
    assert rep["by_language"] == {"en": 2, "fr": 1}
    assert dp.mixture_report(samples[::-1]) == rep


def test_build_mixture_filters_then_caps():
    samples = [make(i, "en") for i in range(10)] + [make(50, "sw")]
    out = dp.build_mixture(samples, [MixtureSourceSpec("translated", per_language_cap=4)], seed=0)
    assert len(out) == 4 and all(s.language == "en" for s in out)


def test_weighted_draw_follows_weights():
    samples = [make(i, kind="human") for i in range(10)] + [make(100 + i, kind="synthetic") for i in range(10)]
    specs = [MixtureSourceSpec("human", weight=3.0), MixtureSourceSpec("synthetic", weight=1.0)]
    draw = dp.weighted_draw(samples, specs, 4000, seed=0)
    share = sum(s.source_kind == "human" for s in draw) / len(draw)
    assert abs(share - 0.75) < 0.03
    assert dp.weighted_draw(samples, specs, 50, seed=1) == dp.weighted_draw(samples, specs, 50, seed=1)


# -- packing ------------------------------------------------------------------


def items_of(lengths, prompt_frac=0.5):
    out = []
    for k, n in enumerate(lengths):
        p = int(n * prompt_frac)
        out.append((f"x{k}", list(range(n)), [0] * p + [1] * (n - p)))
    return out


def test_pack_first_fit_example():
    seqs = dp.pack_rendered(items_of([5000, 3000, 200]), 8192)
    assert [[b[0] for b in s.boundaries] for s in seqs] == [["x0", "x1"], ["x2"]]
    assert [len(s) for s in seqs] == [8000, 200]


def test_pack_exact_fit():
    seqs = dp.pack_rendered(items_of([64]), 64)
    assert len(seqs) == 1 and len(seqs[0]) == 64


def test_pack_overflow_continues_in_next_sequence():
    seqs = dp.pack_rendered(items_of([150, 30]), 64)
    assert [len(s) for s in seqs] == [64, 64, 22 + 30]
    assert [b[0] for b in seqs[2].boundaries] == ["x0", "x1"]


def check_packing(lengths, C):
    items = items_of(lengths, prompt_frac=0.3)
    seqs = dp.pack_rendered(items, C)
    assert all(0 < len(s) <= C for s in seqs)
    assert sorted(len(s) for s in seqs) == sorted(first_fit_lengths(lengths, C))
    # conservation: every token of every item appears exactly once, in order
    pieces = {sid: ([], []) for sid, _, _ in items}
    for s in seqs:
        assert len(s.loss_mask) == len(s.tokens)
        cursor = 0
        for sid, a, b in s.boundaries:
            assert a == cursor and b > a
            cursor = b
            pieces[sid][0].extend(s.tokens[a:b])
            pieces[sid][1].extend(s.loss_mask[a:b])
        assert cursor == len(s)
    for sid, ids, mask in items:
        assert pieces[sid] == (list(ids), list(mask))
    assert sum(b - a for s in seqs for _, a, b in s.boundaries) == sum(lengths)


def test_pack_conservation_randomized():
    rng = random.Random(1234)
    for _ in range(1000):
        lengths = [rng.choice([rng.randint(1, 400), rng.randint(1, 9000), rng.randint(8000, 20000)]) for _ in range(rng.randint(1, 8))]
        check_packing(lengths, 8192)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 300), min_size=1, max_size=30), st.integers(1, 128))
def test_pack_conservation_property(lengths, C):
    check_packing(lengths, C)


def test_pack_real_samples_mask(tokenizer):
    samples = [make(i, prompt=f"question {i}?", completion=f"reply {i}") for i in range(12)]
    seqs = dp.pack(samples, tokenizer, 64)
    eot = tokenizer.special_id(END_OF_TURN)
    for s in seqs:
        for sid, a, b in s.boundaries:
            toks, mask = s.tokens[a:b], s.loss_mask[a:b]
            i = int(sid[1:])
            body = tokenizer.encode(f"reply {i}")
            assert [t for t, m in zip(toks, mask) if m] == body + [eot]
            assert mask[0] == 0  # BOS
    assert dp.packing_stats(seqs, 64)["samples"] == 12


def test_pack_rejects_bad_context():
    with pytest.raises(dp.DataError):
        dp.pack_rendered(items_of([3]), 0)


def test_packed_files_round_trip(tmp_path):
    seqs = dp.pack_rendered(items_of([10, 20, 70]), 32)
    manifest = dp.write_packed(seqs, tmp_path, 32)
    back, C = dp.read_packed(tmp_path)
    assert C == 32 and back == seqs
    raw = (tmp_path / "tokens.bin").read_bytes()
    assert len(raw) == 4 * manifest["n_tokens"]
    assert int.from_bytes(raw[4:8], "little") == seqs[0].tokens[1]
    assert json.loads((tmp_path / "manifest.json").read_text())["format"] == "packed-u32le-v1"
