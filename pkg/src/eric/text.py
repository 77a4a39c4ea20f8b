"""Tokenization, entity anonymization and example construction.

Entities arrive as annotated character spans (the synthetic generator knows
its own entities; real corpora must be pre-annotated). Every mention of one
entity is replaced by a placeholder ``<eK>``, numbered by first appearance.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK, SENT, EOS, NONE = "<pad>", "<unk>", "<s>", "<eos>", "<none>"
MAX_ENTITIES = 100
MIN_SENTENCES = 5
MAX_SENTENCES = 15
TERMINAL_PUNCT = (".", "!", "?")
ABBREVIATIONS = frozenset(
    {"Mr.", "Mrs.", "Ms.", "Dr.", "Prof.", "St.", "Jr.", "Sr.", "Mt.", "vs.", "etc.",
     "e.g.", "i.e.", "U.S.", "Inc.", "Co.", "Ltd."}
)

_TOKEN_RE = re.compile(r"<[A-Za-z0-9]+>|\w+|[^\w\s]")
_PLACEHOLDER_RE = re.compile(r"^<e(\d+)>$")
_NO_SPACE_BEFORE = set(".,!?;:)")
_NO_SPACE_AFTER = set("(")


def placeholder(i: int) -> str:
    return f"<e{i}>"


def placeholder_index(token: str) -> int | None:
    m = _PLACEHOLDER_RE.match(token)
    return int(m.group(1)) if m else None


class CapacityError(ValueError):
    pass


class FilteredExample(ValueError):
    """Raised when a document does not meet the sentence-count filter."""


# ---------------------------------------------------------------------------
# vocabulary and tokenizer


def split_tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def join_tokens(tokens: Iterable[str]) -> str:
    out = ""
    prev = None
    for tok in tokens:
        if out and tok not in _NO_SPACE_BEFORE and prev not in _NO_SPACE_AFTER:
            out += " "
        out += tok
        prev = tok
    return out


@dataclass
class Vocabulary:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("vocabulary tokens are not unique")
        for tok in (PAD, UNK, SENT, EOS, NONE, placeholder(MAX_ENTITIES - 1)):
            if tok not in self.token_to_id:
                raise ValueError(f"vocabulary is missing reserved token {tok}")

    @classmethod
    def build(cls, texts: Iterable[str]) -> Vocabulary:
        specials = [PAD, UNK, SENT, EOS, NONE] + [placeholder(i) for i in range(MAX_ENTITIES)]
        words = sorted({t for text in texts for t in split_tokens(text)} - set(specials))
        return cls(specials + words)

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def sent_id(self) -> int:
        return self.token_to_id[SENT]

    @property
    def eos_id(self) -> int:
        return self.token_to_id[EOS]

    @property
    def none_id(self) -> int:
        return self.token_to_id[NONE]

    def placeholder_id(self, i: int) -> int:
        return self.token_to_id[placeholder(i)]

    def is_placeholder(self, token_id: int) -> bool:
        return self.placeholder_id(0) <= token_id <= self.placeholder_id(MAX_ENTITIES - 1)

    # entity classes: 0..99 are placeholders, 100 is <none>
    def entity_class(self, token_id: int) -> int:
        if token_id == self.none_id:
            return MAX_ENTITIES
        if not self.is_placeholder(token_id):
            raise ValueError(f"token id {token_id} is not a placeholder")
        return token_id - self.placeholder_id(0)

    def class_token(self, cls_index: int) -> int:
        return self.none_id if cls_index == MAX_ENTITIES else self.placeholder_id(cls_index)

    def terminal_ids(self) -> set[int]:
        return {self.token_to_id[p] for p in TERMINAL_PUNCT if p in self.token_to_id}

    def tokenize(self, text: str) -> list[int]:
        return [self.token_to_id.get(t, self.unk_id) for t in split_tokens(text)]

    def detokenize(self, ids: Iterable[int]) -> str:
        return join_tokens(self.id_to_token[i] for i in ids)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.id_to_token, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# sentences and entities


def segment_sentences(text: str, abbreviations: frozenset[str] = ABBREVIATIONS) -> list[str]:
    """Split after ``.``/``!``/``?`` followed by whitespace, except after abbreviations."""
    sentences = []
    start = 0
    for m in re.finditer(r"[.!?]+(?=\s)", text):
        end = m.end()
        last_word = text[start:end].split()[-1] if text[start:end].split() else ""
        if last_word in abbreviations:
            continue
        piece = text[start:end].strip()
        if piece:
            sentences.append(piece)
        start = end
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def _contains_word(haystack: str, needle: str) -> bool:
    return re.search(r"(?<!\w)" + re.escape(needle) + r"(?!\w)", haystack) is not None


def anonymize_entities(doc: str, mentions: Sequence[tuple[str, tuple[int, int]]]):
    """Replace annotated mentions with placeholders.

    Returns the anonymized string and the mention sequence: one
    ``(placeholder index, surface)`` pair per occurrence, in text order. A
    mention whose surface is a whole-word substring of another mention's
    surface (or contains one) shares that mention's placeholder.
    """
    surfaces: list[str] = []
    assigned: dict[str, int] = {}
    prev_end = 0
    for surface, (start, end) in mentions:
        if start < prev_end or end <= start:
            raise ValueError("entity spans must be sorted and non-overlapping")
        if doc[start:end] != surface:
            raise ValueError(f"span {start}:{end} does not match surface {surface!r}")
        prev_end = end
        if surface in assigned:
            continue
        for known in surfaces:
            if _contains_word(known, surface) or _contains_word(surface, known):
                assigned[surface] = assigned[known]
                break
        else:
            n_ids = len(set(assigned.values()))
            if n_ids >= MAX_ENTITIES:
                raise CapacityError(f"more than {MAX_ENTITIES} distinct entities")
            assigned[surface] = n_ids
        surfaces.append(surface)

    pieces = []
    sequence = []
    pos = 0
    for surface, (start, end) in mentions:
        idx = assigned[surface]
        pieces.append(doc[pos:start])
        pieces.append(placeholder(idx))
        sequence.append((idx, surface))
        pos = end
    pieces.append(doc[pos:])
    return "".join(pieces), sequence


@dataclass
class AnonymizedExample:
    input_ids: list[int]
    output_ids: list[int]
    sentence_spans: list[tuple[int, int]]
    mentioned_entity: list[int]
    mention_sequence: list[tuple[int, str]]
    gold_states: list[int | None] | None = None

    @property
    def n_sentences(self) -> int:
        return len(self.sentence_spans)

    def sentence_ids(self, n: int) -> list[int]:
        s, e = self.sentence_spans[n]
        return self.output_ids[s:e]

    def to_json(self) -> dict:
        d = asdict(self)
        d["sentence_spans"] = [list(s) for s in self.sentence_spans]
        d["mention_sequence"] = [list(m) for m in self.mention_sequence]
        return d

    @classmethod
    def from_json(cls, d: dict) -> AnonymizedExample:
        return cls(
            input_ids=list(d["input_ids"]),
            output_ids=list(d["output_ids"]),
            sentence_spans=[tuple(s) for s in d["sentence_spans"]],
            mentioned_entity=list(d["mentioned_entity"]),
            mention_sequence=[(int(i), str(s)) for i, s in d["mention_sequence"]],
            gold_states=d.get("gold_states"),
        )


def build_example(x: str, y: str, mentions, vocab: Vocabulary,
                  rng: np.random.Generator, gold_states: Sequence[int | None] | None = None,
                  ) -> AnonymizedExample:
    """Anonymize ``y``, mark sentences with ``<s>`` and pick each sentence's entity.

    ``mentions`` are ``(surface, (start, end))`` spans over ``y``. Raises
    :class:`FilteredExample` when ``y`` has fewer than five sentences.
    """
    anon, sequence = anonymize_entities(y, mentions)
    sentences = segment_sentences(anon)
    if len(sentences) < MIN_SENTENCES:
        raise FilteredExample(f"output has {len(sentences)} sentences (< {MIN_SENTENCES})")
    if len(sentences) > MAX_SENTENCES:
        sentences = sentences[:MAX_SENTENCES]
    if gold_states is not None:
        gold_states = list(gold_states)[: len(sentences)]

    output_ids: list[int] = []
    spans = []
    entities = []
    n_occurrences = 0
    for sent in sentences:
        ids = vocab.tokenize(sent)
        start = len(output_ids)
        output_ids.append(vocab.sent_id)
        output_ids.extend(ids)
        spans.append((start, len(output_ids)))
        present = []
        for t in ids:
            if vocab.is_placeholder(t):
                n_occurrences += 1
                if t not in present:
                    present.append(t)
        if not present:
            entities.append(vocab.none_id)
        elif len(present) == 1:
            entities.append(present[0])
        else:
            entities.append(present[int(rng.integers(len(present)))])
    output_ids.append(vocab.eos_id)
    return AnonymizedExample(
        input_ids=vocab.tokenize(x),
        output_ids=output_ids,
        sentence_spans=spans,
        mentioned_entity=entities,
        mention_sequence=list(sequence[:n_occurrences]),
        gold_states=gold_states,
    )


def build_stage2_target(example: AnonymizedExample, vocab: Vocabulary) -> list[int]:
    """``<eI> mention <eJ> mention ... <eos>`` in mention order."""
    ids: list[int] = []
    for idx, surface in example.mention_sequence:
        ids.append(vocab.placeholder_id(idx))
        ids.extend(vocab.tokenize(surface))
    ids.append(vocab.eos_id)
    return ids


def parse_mention_pairs(ids: Sequence[int], vocab: Vocabulary) -> list[tuple[int, str]]:
    """Inverse of :func:`build_stage2_target`; unpaired tokens are skipped."""
    pairs = []
    current: int | None = None
    words: list[int] = []

    def flush():
        if current is not None and words:
            pairs.append((current, vocab.detokenize(words)))

    for t in ids:
        if t == vocab.eos_id:
            break
        if vocab.is_placeholder(t):
            flush()
            current = t - vocab.placeholder_id(0)
            words = []
        elif t in (vocab.pad_id, vocab.sent_id, vocab.none_id):
            continue
        elif current is not None:
            words.append(t)
    flush()
    return pairs


def restore_mentions(anonymized: str, mentions: Sequence[str | None],
                     name_pool: Sequence[str], rng: np.random.Generator) -> str:
    """Fill each placeholder occurrence with its generated mention.

    ``mentions[i]`` belongs to the i-th placeholder occurrence. A missing
    mention falls back to the last mention generated for that placeholder,
    or else to a name drawn from ``name_pool`` (fixed per placeholder).
    """
    last: dict[str, str] = {}
    drawn: dict[str, str] = {}
    out = []
    occurrence = 0
    for tok in split_tokens(anonymized):
        if placeholder_index(tok) is None:
            out.append(tok)
            continue
        mention = mentions[occurrence] if occurrence < len(mentions) else None
        occurrence += 1
        if not mention:
            if tok in last:
                mention = last[tok]
            else:
                if tok not in drawn:
                    drawn[tok] = str(name_pool[int(rng.integers(len(name_pool)))])
                mention = drawn[tok]
        last[tok] = mention
        out.extend(split_tokens(mention))
    return join_tokens(out)


# ---------------------------------------------------------------------------
# corpus files


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def mentions_from_record(record: dict) -> list[tuple[str, tuple[int, int]]]:
    ents = sorted(record.get("entities", []), key=lambda e: e["start"])
    return [(e["surface"], (int(e["start"]), int(e["end"]))) for e in ents]


def preprocess_records(records: Sequence[dict], vocab: Vocabulary, seed: int,
                       ) -> list[tuple[int, AnonymizedExample]]:
    """(record index, example) for every record that survives filtering."""
    from .rng import make_rng

    rng = make_rng(seed, "preprocess")
    kept = []
    for i, rec in enumerate(records):
        try:
            kept.append((i, build_example(rec["input"], rec["output"], mentions_from_record(rec),
                                          vocab, rng, rec.get("gold_states"))))
        except FilteredExample:
            pass
    if len(kept) < len(records):
        log.info("filtered %d of %d documents with too few sentences", len(records) - len(kept), len(records))
    return kept


def preprocess_corpus(records: Sequence[dict], vocab: Vocabulary, seed: int,
                      ) -> tuple[list[AnonymizedExample], int]:
    """Build examples from corpus records; returns (examples, number filtered)."""
    kept = preprocess_records(records, vocab, seed)
    return [ex for _, ex in kept], len(records) - len(kept)


def vocabulary_texts(records: Sequence[dict]) -> list[str]:
    """Every string the vocabulary must cover: inputs, outputs and surfaces."""
    texts = []
    for rec in records:
        texts.append(rec["input"])
        texts.append(rec["output"])
    return texts
