"""Byte-level BPE tokenizer with NFC normalisation, digit splitting and chat rendering.

Pretokenisation (after NFC):

* every Unicode number character (``\\p{N}``) is its own piece;
* a run of letters/marks, optionally preceded by one space, is a piece;
* a run of other non-space symbols, optionally preceded by one space, is a piece;
* whitespace runs are pieces, leaving the final space of a run to prefix the next word.

Pieces are encoded as UTF-8 bytes, so every string is representable even with an
empty merge table.
"""

from __future__ import annotations

import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import regex

from .numerics import Rng

BOS = "<BOS_TOKEN>"
START_OF_TURN = "<|START_OF_TURN_TOKEN|>"
END_OF_TURN = "<|END_OF_TURN_TOKEN|>"
USER = "<|USER_TOKEN|>"
CHATBOT = "<|CHATBOT_TOKEN|>"
PAD = "<PAD>"
SPECIAL_TOKENS = (BOS, START_OF_TURN, END_OF_TURN, USER, CHATBOT, PAD)
ROLE_TOKENS = {"user": USER, "chatbot": CHATBOT}
N_BYTES = 256

_PRETOKENIZE = regex.compile(
    r"\p{N}| ?[\p{L}\p{M}]+| ?[^\s\p{L}\p{M}\p{N}]+|\s+(?!\S)|\s+"
)


class TokenizerError(ValueError):
    pass


def normalize(text: str) -> str:
    """Unicode NFC. Lone surrogates (not encodable as UTF-8) are rejected."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TokenizerError(f"invalid UTF-8 input: {exc}") from None
    try:
        text.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise TokenizerError(f"text is not valid Unicode: {exc}") from None
    return unicodedata.normalize("NFC", text)


def pretokenize(text: str) -> list[str]:
    return _PRETOKENIZE.findall(text)


@lru_cache(maxsize=1)
def _byte_to_char() -> dict[int, str]:
    """Printable stand-in character for every byte (GPT-2 style)."""
    keep = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    mapping = {b: chr(b) for b in keep}
    n = 0
    for b in range(N_BYTES):
        if b not in mapping:
            mapping[b] = chr(N_BYTES + n)
            n += 1
    return mapping


def bytes_to_symbol(b: bytes) -> str:
    m = _byte_to_char()
    return "".join(m[x] for x in b)


@lru_cache(maxsize=1)
def _char_to_byte() -> dict[str, int]:
    return {c: b for b, c in _byte_to_char().items()}


def symbol_to_bytes(s: str) -> bytes:
    inv = _char_to_byte()
    return bytes(inv[c] for c in s)


@dataclass
class TokenizerModel:
    """Immutable after construction. Ids: specials first, then 256 bytes, then merges."""

    merges: list[tuple[bytes, bytes]]
    special_tokens: tuple[str, ...] = SPECIAL_TOKENS
    _tokens: list[bytes | str] = field(init=False, repr=False)
    _ids: dict[bytes, int] = field(init=False, repr=False)
    _special_ids: dict[str, int] = field(init=False, repr=False)
    _ranks: dict[tuple[bytes, bytes], int] = field(init=False, repr=False)

    def __post_init__(self):
        self._tokens = list(self.special_tokens)
        self._special_ids = {s: i for i, s in enumerate(self.special_tokens)}
        self._tokens += [bytes([b]) for b in range(N_BYTES)]
        self._ids = {bytes([b]): len(self.special_tokens) + b for b in range(N_BYTES)}
        self._ranks = {}
        for rank, (a, b) in enumerate(self.merges):
            if a not in self._ids or b not in self._ids:
                raise TokenizerError(f"merge {rank} uses an unknown token")
            merged = a + b
            if merged in self._ids:
                raise TokenizerError(f"merge {rank} produces a duplicate token")
            self._ids[merged] = len(self._tokens)
            self._tokens.append(merged)
            self._ranks[(a, b)] = rank
        self._encode_piece = lru_cache(maxsize=65536)(self._encode_piece_uncached)

    @property
    def vocab_size(self) -> int:
        return len(self._tokens)

    def special_id(self, token: str) -> int:
        return self._special_ids[token]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self._special_ids.values())

    def is_special(self, token_id: int) -> bool:
        return 0 <= token_id < len(self.special_tokens)

    def token(self, token_id: int) -> bytes | str:
        return self._tokens[token_id]

    def _encode_piece_uncached(self, piece: bytes) -> tuple[int, ...]:
        parts = [bytes([b]) for b in piece]
        ranks = self._ranks
        while len(parts) > 1:
            best = None
            best_rank = None
            for i in range(len(parts) - 1):
                r = ranks.get((parts[i], parts[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            pair = (parts[best], parts[best + 1])
            merged: list[bytes] = []
            i = 0
            while i < len(parts):
                if i < len(parts) - 1 and (parts[i], parts[i + 1]) == pair:
                    merged.append(parts[i] + parts[i + 1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        return tuple(self._ids[p] for p in parts)

    def encode(self, text: str) -> list[int]:
        """Token ids for ``text``. Special-token literals are treated as plain text."""
        out: list[int] = []
        for piece in pretokenize(normalize(text)):
            out.extend(self._encode_piece(piece.encode("utf-8")))
        return out

    def decode(self, ids: Iterable[int]) -> str:
        chunks: list[str] = []
        buf = bytearray()
        n = len(self._tokens)
        for i in ids:
            i = int(i)
            if not 0 <= i < n:
                raise TokenizerError(f"token id {i} out of range [0, {n})")
            tok = self._tokens[i]
            if isinstance(tok, str):
                chunks.append(buf.decode("utf-8", errors="replace"))
                buf.clear()
                chunks.append(tok)
            else:
                buf.extend(tok)
        chunks.append(buf.decode("utf-8", errors="replace"))
        return "".join(chunks)

    # serialisation: vocab file "id\ttoken\tis_special", merges file "left right"

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "vocab.tsv", "w", encoding="utf-8", newline="\n") as f:
            for i, tok in enumerate(self._tokens):
                if isinstance(tok, str):
                    f.write(f"{i}\t{tok}\t1\n")
                else:
                    f.write(f"{i}\t{bytes_to_symbol(tok)}\t0\n")
        with open(d / "merges.txt", "w", encoding="utf-8", newline="\n") as f:
            for a, b in self.merges:
                f.write(f"{bytes_to_symbol(a)} {bytes_to_symbol(b)}\n")

    @classmethod
    def load(cls, directory: str | Path) -> TokenizerModel:
        d = Path(directory)
        specials: list[str] = []
        vocab_rows = []
        for line in (d / "vocab.tsv").read_text(encoding="utf-8").splitlines():
            idx, tok, special = line.split("\t")
            vocab_rows.append((int(idx), tok, special == "1"))
            if special == "1":
                specials.append(tok)
        merges = []
        for line in (d / "merges.txt").read_text(encoding="utf-8").splitlines():
            a, b = line.split(" ")
            merges.append((symbol_to_bytes(a), symbol_to_bytes(b)))
        model = cls(merges=merges, special_tokens=tuple(specials))
        for idx, tok, special in vocab_rows:
            expect = model._tokens[idx]
            got = tok if special else symbol_to_bytes(tok)
            if expect != got:
                raise TokenizerError(f"vocab file disagrees with merges at id {idx}")
        if len(vocab_rows) != model.vocab_size:
            raise TokenizerError("vocab file size does not match merges")
        return model


# ---------------------------------------------------------------------------
# training


def balance_corpus(texts_by_language: Mapping[str, Sequence[str]], budget_bytes: int, seed: int) -> list[str]:
    """Up to ``budget_bytes`` of UTF-8 text per language, drawn in seeded random order."""
    out: list[str] = []
    rng = Rng(seed).split("balance")
    for lang in sorted(texts_by_language):
        texts = list(texts_by_language[lang])
        order = rng.split(lang).permutation(len(texts))
        used = 0
        for i in order:
            size = len(texts[i].encode("utf-8"))
            if used + size > budget_bytes and used > 0:
                break
            out.append(texts[i])
            used += size
    return out


def _word_counts(corpus: Iterable[str]) -> Counter:
    counts: Counter = Counter()
    for text in corpus:
        for piece in pretokenize(normalize(text)):
            counts[piece.encode("utf-8")] += 1
    return counts


def _pairs(word: tuple[bytes, ...]) -> Counter:
    return Counter(zip(word, word[1:]))


def _merge_word(word: tuple[bytes, ...], pair: tuple[bytes, bytes]) -> tuple[bytes, ...]:
    out = []
    i = 0
    while i < len(word):
        if i < len(word) - 1 and word[i] == pair[0] and word[i + 1] == pair[1]:
            out.append(word[i] + word[i + 1])
            i += 2
        else:
            out.append(word[i])
            i += 1
    return tuple(out)


def bpe_train(
    corpus: Iterable[str] | Mapping[str, Sequence[str]],
    vocab_size: int,
    seed: int = 0,
    budget_bytes: int | None = None,
    min_frequency: int = 2,
) -> TokenizerModel:
    """Greedy BPE: repeatedly merge the most frequent adjacent pair.

    ``vocab_size`` counts specials and the 256 byte tokens. Ties go to the
    lexicographically smallest pair of byte strings. Training stops early when
    no pair occurs at least ``min_frequency`` times. A mapping corpus
    (language -> texts) is first balanced to ``budget_bytes`` per language.
    """
    base = len(SPECIAL_TOKENS) + N_BYTES
    if vocab_size <= base:
        raise TokenizerError(f"vocab_size must exceed {base} (specials + byte alphabet)")
    if isinstance(corpus, Mapping):
        if budget_bytes is None:
            budget_bytes = min(sum(len(t.encode("utf-8")) for t in v) for v in corpus.values() if v)
        corpus = balance_corpus(corpus, budget_bytes, seed)
    counts = _word_counts(corpus)
    if not counts:
        raise TokenizerError("cannot train a tokenizer on an empty corpus")

    words: list[tuple[bytes, ...]] = []
    freqs: list[int] = []
    for w, c in sorted(counts.items()):
        words.append(tuple(bytes([b]) for b in w))
        freqs.append(c)
    pair_counts: Counter = Counter()
    where: dict[tuple[bytes, bytes], set[int]] = defaultdict(set)
    for idx, (w, c) in enumerate(zip(words, freqs)):
        for p, n in _pairs(w).items():
            pair_counts[p] += n * c
            where[p].add(idx)

    merges: list[tuple[bytes, bytes]] = []
    while base + len(merges) < vocab_size and pair_counts:
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        pair, n = best
        if n < min_frequency:
            break
        merges.append(pair)
        for idx in sorted(where.pop(pair, ())):
            old = words[idx]
            new = _merge_word(old, pair)
            if new == old:
                continue
            c = freqs[idx]
            for p, k in _pairs(old).items():
                pair_counts[p] -= k * c
                if pair_counts[p] <= 0:
                    del pair_counts[p]
                if p != pair:
                    where[p].discard(idx)
            for p, k in _pairs(new).items():
                pair_counts[p] += k * c
                where[p].add(idx)
            words[idx] = new
        pair_counts.pop(pair, None)
    return TokenizerModel(merges=merges)


# ---------------------------------------------------------------------------
# chat format


class ChatFormatError(TokenizerError):
    """Malformed chat token stream."""


class MissingBosError(ChatFormatError):
    pass


class UnterminatedTurnError(ChatFormatError):
    pass


class UnknownRoleError(ChatFormatError):
    pass


class SpecialTokenInContentError(ChatFormatError):
    pass


@dataclass(frozen=True)
class ChatTurn:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLE_TOKENS:
            raise UnknownRoleError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class RenderedChat:
    ids: list[int]
    text: str
    # 1 where the token belongs to the completion body or its END_OF_TURN
    completion_mask: list[int]


def _check_content(content: str, specials: Iterable[str]) -> None:
    for s in specials:
        if s in content:
            raise SpecialTokenInContentError(f"content contains the special token literal {s}")


def render_chat(
    prompt_turns: Sequence[ChatTurn],
    completion: str | None = None,
    model: TokenizerModel | None = None,
) -> RenderedChat:
    """Render turns (and optionally a completion) in the special-token chat format.

    Without a completion the stream ends with the chatbot generation header.
    ``model=None`` renders only the debug text form (ids are empty).
    """
    if not prompt_turns:
        raise ChatFormatError("at least one prompt turn is required")
    for i, turn in enumerate(prompt_turns):
        expected = "user" if i % 2 == 0 else "chatbot"
        if turn.role != expected:
            raise ChatFormatError(f"turn {i} has role {turn.role!r}, expected {expected!r}")
        _check_content(turn.content, SPECIAL_TOKENS)
    if completion is not None:
        _check_content(completion, SPECIAL_TOKENS)
    if prompt_turns[-1].role != "user":
        raise ChatFormatError("the prompt must end with a user turn")

    text_parts = [BOS]
    ids: list[int] = []
    mask: list[int] = []

    def special(tok: str, m: int = 0):
        text_parts.append(tok)
        if model is not None:
            ids.append(model.special_id(tok))
            mask.append(m)

    def content(s: str, m: int = 0):
        s = normalize(s)
        text_parts.append(s)
        if model is not None:
            enc = model.encode(s)
            ids.extend(enc)
            mask.extend([m] * len(enc))

    if model is not None:
        ids.append(model.special_id(BOS))
        mask.append(0)
    for turn in prompt_turns:
        special(START_OF_TURN)
        special(ROLE_TOKENS[turn.role])
        content(turn.content)
        special(END_OF_TURN)
    special(START_OF_TURN)
    special(CHATBOT)
    if completion:
        content(completion, 1)
        special(END_OF_TURN, 1)
    return RenderedChat(ids=ids, text="".join(text_parts), completion_mask=mask)


def parse_chat(ids: Sequence[int], model: TokenizerModel, allow_open: bool = True) -> list[ChatTurn]:
    """Inverse of :func:`render_chat`.

    A trailing ``START_OF_TURN CHATBOT`` generation header is accepted when
    ``allow_open`` and dropped from the result.
    """
    sid = model.special_id
    bos, sot, eot = sid(BOS), sid(START_OF_TURN), sid(END_OF_TURN)
    roles = {sid(tok): role for role, tok in ROLE_TOKENS.items()}
    ids = [int(i) for i in ids]
    if not ids or ids[0] != bos:
        raise MissingBosError("chat stream must start with BOS")
    turns: list[ChatTurn] = []
    i = 1
    n = len(ids)
    while i < n:
        if ids[i] != sot:
            raise ChatFormatError(f"expected START_OF_TURN at position {i}")
        if i + 1 >= n:
            raise UnterminatedTurnError("stream ends after START_OF_TURN")
        role_id = ids[i + 1]
        if role_id not in roles:
            raise UnknownRoleError(f"token {role_id} at position {i + 1} is not a role token")
        j = i + 2
        if j == n and allow_open and roles[role_id] == "chatbot":
            break
        while j < n and ids[j] != eot:
            if model.is_special(ids[j]):
                raise ChatFormatError(f"unexpected special token {model.token(ids[j])} inside a turn")
            j += 1
        if j >= n:
            raise UnterminatedTurnError("turn is missing END_OF_TURN")
        turns.append(ChatTurn(roles[role_id], model.decode(ids[i + 2 : j])))
        i = j + 1
    return turns
