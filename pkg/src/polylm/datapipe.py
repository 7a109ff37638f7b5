"""Instruction-tuning mixture construction and fixed-context packing."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .numerics import Rng
from .tokenizer import ChatTurn, TokenizerModel, render_chat

SOURCE_KINDS = ("templates", "human", "translated", "synthetic")


@dataclass(frozen=True)
class LanguageInfo:
    code: str
    name: str
    script: str
    family: str
    subgrouping: str


LANGUAGES: tuple[LanguageInfo, ...] = (
    LanguageInfo("ar", "Arabic", "Arabic", "Afro-Asiatic", "Semitic"),
    LanguageInfo("cs", "Czech", "Latin", "Indo-European", "Balto-Slavic"),
    LanguageInfo("de", "German", "Latin", "Indo-European", "Germanic"),
    LanguageInfo("el", "Greek", "Greek", "Indo-European", "Graeco-Phrygian"),
    LanguageInfo("en", "English", "Latin", "Indo-European", "Germanic"),
    LanguageInfo("es", "Spanish", "Latin", "Indo-European", "Italic"),
    LanguageInfo("fa", "Persian", "Arabic", "Indo-European", "Iranian"),
    LanguageInfo("fr", "French", "Latin", "Indo-European", "Italic"),
    LanguageInfo("he", "Hebrew", "Hebrew", "Afro-Asiatic", "Semitic"),
    LanguageInfo("hi", "Hindi", "Devanagari", "Indo-European", "Indo-Aryan"),
    LanguageInfo("id", "Indonesian", "Latin", "Austronesian", "Malayo-Polynesian"),
    LanguageInfo("it", "Italian", "Latin", "Indo-European", "Italic"),
    LanguageInfo("jp", "Japanese", "Japanese", "Japonic", "Japanesic"),
    LanguageInfo("ko", "Korean", "Hangul", "Koreanic", "Korean"),
    LanguageInfo("nl", "Dutch", "Latin", "Indo-European", "Germanic"),
    LanguageInfo("pl", "Polish", "Latin", "Indo-European", "Balto-Slavic"),
    LanguageInfo("pt", "Portuguese", "Latin", "Indo-European", "Italic"),
    LanguageInfo("ro", "Romanian", "Latin", "Indo-European", "Italic"),
    LanguageInfo("ru", "Russian", "Cyrillic", "Indo-European", "Balto-Slavic"),
    LanguageInfo("tr", "Turkish", "Latin", "Turkic", "Common Turkic"),
    LanguageInfo("uk", "Ukrainian", "Cyrillic", "Indo-European", "Balto-Slavic"),
    LanguageInfo("vi", "Vietnamese", "Latin", "Austroasiatic", "Vietic"),
    LanguageInfo("zh", "Chinese", "Han & Hant", "Sino-Tibetan", "Sinitic"),
)
REGISTRY: dict[str, LanguageInfo] = {lang.code: lang for lang in LANGUAGES}
# ISO 639-1 spelling used by most benchmark files
CODE_ALIASES = {"ja": "jp"}


def canonical_code(code: str) -> str:
    code = code.strip().lower()
    return CODE_ALIASES.get(code, code)


def in_registry(code: str) -> bool:
    return canonical_code(code) in REGISTRY


# one representative sentence per language, used for round-trip checks and fixtures
SAMPLE_SENTENCES: dict[str, str] = {
    "ar": "مرحبا، كيف حالك اليوم؟",
    "cs": "Dobrý den, jak se dnes máte?",
    "de": "Guten Tag, wie geht es Ihnen heute?",
    "el": "Καλημέρα, πώς είστε σήμερα;",
    "en": "Hello, how are you today?",
    "es": "Hola, ¿cómo estás hoy?",
    "fa": "سلام، امروز حال شما چطور است؟",
    "fr": "Bonjour, comment allez-vous aujourd'hui ?",
    "he": "שלום, מה שלומך היום?",
    "hi": "नमस्ते, आज आप कैसे हैं?",
    "id": "Halo, apa kabar hari ini?",
    "it": "Ciao, come stai oggi?",
    "jp": "こんにちは、今日はお元気ですか？",
    "ko": "안녕하세요, 오늘 어떻게 지내세요?",
    "nl": "Hallo, hoe gaat het vandaag met je?",
    "pl": "Dzień dobry, jak się dzisiaj masz?",
    "pt": "Olá, como você está hoje?",
    "ro": "Bună ziua, ce mai faci astăzi?",
    "ru": "Здравствуйте, как у вас дела сегодня?",
    "tr": "Merhaba, bugün nasılsın?",
    "uk": "Привіт, як у тебе справи сьогодні?",
    "vi": "Xin chào, hôm nay bạn thế nào?",
    "zh": "你好，你今天怎么样？",
}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    id: str
    prompt: str
    completion: str
    language: str
    dataset_id: str
    source_kind: str
    license_tag: str = ""

    def __post_init__(self):
        if not self.prompt or not self.completion:
            raise DataError(f"sample {self.id!r}: prompt and completion must be non-empty")
        if self.source_kind not in SOURCE_KINDS:
            raise DataError(f"sample {self.id!r}: unknown source_kind {self.source_kind!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> Sample:
        try:
            return cls(
                id=str(d["id"]),
                prompt=d["prompt"],
                completion=d["completion"],
                language=d["language"],
                dataset_id=d["dataset_id"],
                source_kind=d["source_kind"],
                license_tag=d.get("license_tag", ""),
            )
        except KeyError as exc:
            raise DataError(f"sample record missing field {exc}") from None


def read_jsonl(path: str | Path) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(Sample.from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def write_jsonl(samples: Iterable[Sample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            f.write(s.to_json() + "\n")


@dataclass(frozen=True)
class MixtureSourceSpec:
    source_kind: str
    dataset_ids: tuple[str, ...] = ()  # empty: every dataset of this kind
    per_language_cap: int | None = None
    weight: float = 1.0

    def __post_init__(self):
        if self.per_language_cap is not None and self.per_language_cap < 1:
            raise DataError("per_language_cap must be >= 1")
        if self.weight < 0:
            raise DataError("weight must be non-negative")

    def covers(self, sample: Sample) -> bool:
        return sample.source_kind == self.source_kind and (
            not self.dataset_ids or sample.dataset_id in self.dataset_ids
        )


def _by_id(samples: Iterable[Sample]) -> list[Sample]:
    return sorted(samples, key=lambda s: s.id)


def filter_languages(samples: Iterable[Sample]) -> list[Sample]:
    """Keep samples whose language is in the registry (aliases canonicalised)."""
    out = []
    for s in samples:
        code = canonical_code(s.language)
        if code in REGISTRY:
            out.append(s if code == s.language else Sample(**{**asdict(s), "language": code}))
    return out


def language_retention(before: Iterable[Sample], after: Iterable[Sample]) -> dict[str, dict[str, int]]:
    """Per language (aliases merged into the canonical code): samples seen and kept."""
    seen = Counter(canonical_code(s.language) for s in before)
    kept = Counter(canonical_code(s.language) for s in after)
    return {lang: {"seen": seen[lang], "kept": kept.get(lang, 0)} for lang in sorted(seen)}


def cap_samples(samples: Iterable[Sample], spec: MixtureSourceSpec, seed: int) -> list[Sample]:
    """Uniformly keep at most ``spec.per_language_cap`` samples per (dataset, language).

    Samples the spec does not cover pass through. The selection depends only on
    the seed and the sample ids, not on input order.
    """
    samples = _by_id(samples)
    if spec.per_language_cap is None:
        return samples
    groups: dict[tuple[str, str], list[Sample]] = defaultdict(list)
    out: list[Sample] = []
    for s in samples:
        if spec.covers(s):
            groups[(s.dataset_id, s.language)].append(s)
        else:
            out.append(s)
    rng = Rng(seed).split("cap")
    cap = spec.per_language_cap
    for (dataset, lang), group in sorted(groups.items()):
        if len(group) <= cap:
            out.extend(group)
            continue
        idx = rng.split(dataset).split(lang).choice(len(group), cap, replace=False)
        out.extend(group[i] for i in sorted(idx))
    return _by_id(out)


def split_holdout(samples: Iterable[Sample], n: int, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Seeded disjoint split into (train, heldout) with ``len(heldout) == n``."""
    samples = _by_id(samples)
    if n < 0 or n > len(samples):
        raise DataError(f"cannot hold out {n} of {len(samples)} samples")
    chosen = set(Rng(seed).split("holdout").choice(len(samples), n, replace=False).tolist()) if n else set()
    train = [s for i, s in enumerate(samples) if i not in chosen]
    held = [s for i, s in enumerate(samples) if i in chosen]
    return train, held


def build_mixture(samples: Iterable[Sample], specs: Sequence[MixtureSourceSpec], seed: int) -> list[Sample]:
    """Filter to registry languages, then apply every source's cap."""
    out = filter_languages(samples)
    for i, spec in enumerate(specs):
        out = cap_samples(out, spec, seed + i)
    return _by_id(out)


def weighted_draw(
    samples: Iterable[Sample], specs: Sequence[MixtureSourceSpec], n: int, seed: int
) -> list[Sample]:
    """Draw ``n`` samples with replacement: pick a source by weight, then a sample uniformly."""
    samples = _by_id(samples)
    pools = []
    weights = []
    for spec in specs:
        pool = [s for s in samples if spec.covers(s)]
        if pool and spec.weight > 0:
            pools.append(pool)
            weights.append(spec.weight)
    if not pools:
        raise DataError("no source has both samples and positive weight")
    p = np.asarray(weights, dtype=np.float64) / sum(weights)
    rng = Rng(seed).split("draw")
    which = rng.choice(len(pools), n, replace=True, p=p)
    return [pools[k][int(rng.integers(0, len(pools[k])))] for k in which]


def mixture_report(samples: Iterable[Sample]) -> dict:
    """Counts per source kind, language and dataset (and their combinations)."""
    samples = list(samples)
    by_kind = Counter(s.source_kind for s in samples)
    by_lang = Counter(s.language for s in samples)
    by_dataset = Counter(s.dataset_id for s in samples)
    by_triple = Counter((s.source_kind, s.dataset_id, s.language) for s in samples)
    return {
        "total": len(samples),
        "by_source_kind": {k: by_kind.get(k, 0) for k in SOURCE_KINDS},
        "by_language": dict(sorted(by_lang.items())),
        "by_dataset": dict(sorted(by_dataset.items())),
        "by_source_dataset_language": [
            {"source_kind": k, "dataset_id": d, "language": lang, "count": c}
            for (k, d, lang), c in sorted(by_triple.items())
        ],
    }


# ---------------------------------------------------------------------------
# packing


@dataclass
class PackedSequence:
    tokens: list[int] = field(default_factory=list)
    loss_mask: list[int] = field(default_factory=list)
    # (sample id, start, end) spans into ``tokens``
    boundaries: list[tuple[str, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tokens)

    def segment_ids(self) -> np.ndarray:
        seg = np.zeros(len(self.tokens), dtype=np.int64)
        for k, (_, start, end) in enumerate(self.boundaries):
            seg[start:end] = k
        return seg

    def _add(self, sample_id: str, ids: Sequence[int], mask: Sequence[int]) -> None:
        start = len(self.tokens)
        self.tokens.extend(ids)
        self.loss_mask.extend(mask)
        self.boundaries.append((sample_id, start, len(self.tokens)))


def render_sample(sample: Sample, tokenizer: TokenizerModel) -> tuple[list[int], list[int]]:
    r = render_chat([ChatTurn("user", sample.prompt)], sample.completion, tokenizer)
    return r.ids, r.completion_mask


def pack_rendered(
    items: Sequence[tuple[str, Sequence[int], Sequence[int]]], context_len: int
) -> list[PackedSequence]:
    """Greedy first-fit over pre-rendered ``(id, tokens, mask)`` items.

    An item longer than ``context_len`` fills fresh sequences and its tail stays
    open for later items.
    """
    if context_len < 1:
        raise DataError("context_len must be >= 1")
    seqs: list[PackedSequence] = []
    for sid, ids, mask in items:
        n = len(ids)
        if n == 0:
            raise DataError(f"sample {sid!r} rendered to zero tokens")
        if n <= context_len:
            for seq in seqs:
                if len(seq) + n <= context_len:
                    seq._add(sid, ids, mask)
                    break
            else:
                seq = PackedSequence()
                seq._add(sid, ids, mask)
                seqs.append(seq)
            continue
        for start in range(0, n, context_len):
            seq = PackedSequence()
            seq._add(sid, ids[start : start + context_len], mask[start : start + context_len])
            seqs.append(seq)
    return seqs


def pack(samples: Sequence[Sample], tokenizer: TokenizerModel, context_len: int) -> list[PackedSequence]:
    """Render samples in the chat format and pack them into ``context_len`` rows.

    Loss mask is 1 on completion tokens and the completion's END_OF_TURN.
    """
    items = []
    for s in samples:
        ids, mask = render_sample(s, tokenizer)
        items.append((s.id, ids, mask))
    return pack_rendered(items, context_len)


def packing_stats(seqs: Sequence[PackedSequence], context_len: int) -> dict:
    n_tokens = sum(len(s) for s in seqs)
    n_ids = len({b[0] for s in seqs for b in s.boundaries})
    return {
        "sequences": len(seqs),
        "samples": n_ids,
        "tokens": n_tokens,
        "loss_tokens": sum(sum(s.loss_mask) for s in seqs),
        "utilization": n_tokens / (len(seqs) * context_len) if seqs else 0.0,
        "samples_per_sequence": n_ids / len(seqs) if seqs else 0.0,
    }


def write_packed(seqs: Sequence[PackedSequence], directory: str | Path, context_len: int) -> dict:
    """Write ``tokens.bin`` (u32 LE), ``loss_mask.bin`` (u8) and ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tokens = np.asarray([t for s in seqs for t in s.tokens], dtype="<u4")
    mask = np.asarray([m for s in seqs for m in s.loss_mask], dtype="u1")
    (d / "tokens.bin").write_bytes(tokens.tobytes())
    (d / "loss_mask.bin").write_bytes(mask.tobytes())
    offset = 0
    rows = []
    for s in seqs:
        rows.append({"offset": offset, "length": len(s), "boundaries": [list(b) for b in s.boundaries]})
        offset += len(s)
    manifest = {
        "format": "packed-u32le-v1",
        "context_len": context_len,
        "n_tokens": int(tokens.size),
        "sequences": rows,
        "stats": packing_stats(seqs, context_len),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def read_packed(directory: str | Path) -> tuple[list[PackedSequence], int]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    tokens = np.frombuffer((d / "tokens.bin").read_bytes(), dtype="<u4")
    mask = np.frombuffer((d / "loss_mask.bin").read_bytes(), dtype="u1")
    if tokens.size != manifest["n_tokens"] or mask.size != tokens.size:
        raise DataError("packed arrays do not match the manifest")
    seqs = []
    for row in manifest["sequences"]:
        a, b = row["offset"], row["offset"] + row["length"]
        seqs.append(
            PackedSequence(
                tokens=tokens[a:b].astype(np.int64).tolist(),
                loss_mask=mask[a:b].astype(np.int64).tolist(),
                boundaries=[(str(x[0]), int(x[1]), int(x[2])) for x in row["boundaries"]],
            )
        )
    return seqs, int(manifest["context_len"])
