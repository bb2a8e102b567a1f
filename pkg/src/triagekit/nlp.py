"""Rule-based clinical text pipeline.

Six deterministic stages turn free text into dictionary-coded clinical tags:
sentence splitting, word tokenization, normalization (with clinical
abbreviation expansion), part-of-speech tagging, noun-phrase chunking, and
permutation dictionary matching that yields concept codes (CUIs). A NegEx-style
window pass marks negated tags so "denies chest pain" and "chest pain" become
distinct signals downstream.

All stages are pure functions over immutable inputs; a loaded
:class:`Dictionary` may be shared freely across threads.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, Mapping, Optional, Sequence

# Closed set of clinical term types used by dictionaries and tag corpora.
TERM_TYPES = frozenset({
    "Orientation", "Primary pain onset", "Reason for visit", "Previous illness",
    "Surgeries", "Primary pain quality", "Primary pain location",
    "Level of consciousness", "Affect behavior", "Primary pain location detail",
    "Prior to arrival", "Respiratory status", "Triage treatment",
    "Family history", "Problems", "Menstrual", "Primary pain radiation location",
    "Primary pain radiation location detail", "Primary pain aggravating factors",
    "Primary pain associated symptoms", "Medical devices",
})

DEFAULT_MAX_NP_LEN = 6
DEFAULT_MAX_MATCH_LEN = 4
NEGATION_WINDOW = 4

# Negation triggers mirror the NEG rows of the bundled POS lexicon.
NEGATION_TRIGGERS = frozenset({"no", "not", "denies", "denied", "deny",
                               "without", "negative"})
# Conjunctions that close an open negation scope before the window runs out.
NEGATION_SCOPE_BREAKERS = frozenset({"but", "however", "except", "although",
                                     "aside", "yet"})

# Function words allowed inside multi-word dictionary phrases. Entries
# containing one of these are re-merged into single tokens before chunking,
# since the NP pattern would otherwise break at the preposition.
_PHRASE_FUNCTION_WORDS = frozenset({"of", "in", "on", "to", "for", "with",
                                    "at", "by", "up", "and"})

_STRIP_PUNCT = ".,;:!?\"'()[]{}<>"

_TOKEN_RE = re.compile(r"\d+\.\d+|[A-Za-z0-9]+(?:[-/'][A-Za-z0-9]+)*|[^\sA-Za-z0-9]")
_SENTENCE_END_RE = re.compile(r"[.!?;\n]")
_NUMERIC_RE = re.compile(r"^\d+(?:\.\d+)?$")

POS_TAGS = ("NOUN", "ADJ", "VERB", "NUM", "PREP", "DET", "NEG", "OTHER")


class DictionaryError(ValueError):
    """Raised when a dictionary file is malformed or inconsistent."""


def _data_path(name: str):
    return resources.files("triagekit.data").joinpath(name)


def _read_data_lines(src) -> list[str]:
    """Read non-comment, non-blank lines from a path or package resource."""
    if hasattr(src, "read_text"):
        text = src.read_text(encoding="utf-8")
    else:
        with open(src, "r", encoding="utf-8") as fh:
            text = fh.read()
    lines = []
    for raw in text.splitlines():
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        lines.append(raw)
    return lines


@dataclass(frozen=True)
class DictEntry:
    cui: str
    preferred_term: str


@dataclass(frozen=True)
class Dictionary:
    """Normalized term strings mapped to concept codes, with parent relations."""

    entries: Mapping[str, DictEntry]
    relations: Mapping[str, tuple[str, ...]]
    term_types: Mapping[str, str]
    multiset_index: Mapping[tuple[str, ...], tuple[str, ...]]
    merge_phrases: frozenset[str]
    preferred_terms: Mapping[str, str]

    def has_cui(self, cui: str) -> bool:
        return cui in self.preferred_terms

    def parents(self, cui: str) -> tuple[str, ...]:
        """All transitive parent CUIs, deduplicated, in BFS discovery order."""
        seen: list[str] = []
        frontier = list(self.relations.get(cui, ()))
        while frontier:
            parent = frontier.pop(0)
            if parent in seen:
                continue
            seen.append(parent)
            frontier.extend(self.relations.get(parent, ()))
        return tuple(seen)


@dataclass(frozen=True)
class ClinicalTag:
    """One extracted clinical term.

    ``start``/``end`` are character offsets into the source text. ``token_pos``
    is the sentence-local index of the first matched token, used by negation
    detection; it is not part of the tag identity.
    """

    cui: str
    term_type: str
    negated: bool = False
    start: int = 0
    end: int = 0
    token_pos: int = 0

    def identity(self) -> tuple[str, str, bool]:
        return (self.cui, self.term_type, self.negated)


def normalize_term(term: str, abbreviations: Mapping[str, str] | None = None) -> str:
    """Normalize a multi-word term string to its dictionary key form."""
    tokens = []
    for tok in tokenize(term):
        norm = normalize(tok, abbreviations)
        if norm and any(ch.isalnum() for ch in norm):
            tokens.append(norm)
    return " ".join(tokens)


def load_dictionary(path=None) -> Dictionary:
    """Load a TSV dictionary (columns: cui, preferred_term, synonym, term_type,
    parent_cui). The bundled test dictionary is used when no path is given.
    """
    src = _data_path("dictionary.tsv") if path is None else path
    lines = _read_data_lines(src)

    entries: dict[str, DictEntry] = {}
    relations: dict[str, list[str]] = {}
    term_types: dict[str, str] = {}
    preferred: dict[str, str] = {}

    header_seen = False
    for line in lines:
        cols = line.split("\t")
        if not header_seen:
            header_seen = True
            if cols[0].strip().lower() == "cui":
                continue
        cols += [""] * (5 - len(cols))
        cui, pref, synonym, term_type, parent = (c.strip() for c in cols[:5])
        if not cui or not pref:
            raise DictionaryError(f"dictionary row missing cui/preferred_term: {line!r}")
        if cui in preferred and preferred[cui] != pref:
            raise DictionaryError(f"cui {cui} has conflicting preferred terms")
        preferred[cui] = pref
        if term_type:
            if term_type not in TERM_TYPES:
                raise DictionaryError(f"unknown term type {term_type!r} for {cui}")
            if term_types.get(cui, term_type) != term_type:
                raise DictionaryError(f"cui {cui} has conflicting term types")
            term_types[cui] = term_type
        if parent:
            for p in parent.split(";"):
                p = p.strip()
                if p and p not in relations.setdefault(cui, []):
                    relations[cui].append(p)
        key = normalize_term(synonym if synonym else pref)
        if not key:
            raise DictionaryError(f"empty normalized key for {cui}")
        existing = entries.get(key)
        if existing is not None and existing.cui != cui:
            raise DictionaryError(
                f"term {key!r} maps to both {existing.cui} and {cui}")
        entries[key] = DictEntry(cui, pref)

    for cui in preferred:
        if cui not in term_types:
            raise DictionaryError(f"cui {cui} has no term type")
    for cui, parents in relations.items():
        for p in parents:
            if p not in preferred:
                raise DictionaryError(f"cui {cui} references unknown parent {p}")

    # Reject relation cycles up front so parent closure always terminates.
    state: dict[str, int] = {}

    def visit(node: str, trail: tuple[str, ...]) -> None:
        if state.get(node) == 1:
            raise DictionaryError(f"parent relation cycle at {node}: {' -> '.join(trail)}")
        if state.get(node) == 2:
            return
        state[node] = 1
        for p in relations.get(node, ()):
            visit(p, trail + (p,))
        state[node] = 2

    for cui in preferred:
        visit(cui, (cui,))

    multiset: dict[tuple[str, ...], list[str]] = {}
    merge_phrases = set()
    for key in entries:
        tokens = key.split(" ")
        multiset.setdefault(tuple(sorted(tokens)), []).append(key)
        if len(tokens) > 1 and any(t in _PHRASE_FUNCTION_WORDS for t in tokens):
            merge_phrases.add(key)

    return Dictionary(
        entries=entries,
        relations={c: tuple(ps) for c, ps in relations.items()},
        term_types=term_types,
        multiset_index={k: tuple(sorted(v)) for k, v in multiset.items()},
        merge_phrases=frozenset(merge_phrases),
        preferred_terms=preferred,
    )


def load_abbreviations(path=None) -> dict[str, str]:
    src = _data_path("abbreviations.tsv") if path is None else path
    table: dict[str, str] = {}
    for line in _read_data_lines(src):
        cols = line.split("\t")
        if len(cols) < 2:
            raise DictionaryError(f"abbreviation row needs two columns: {line!r}")
        abbrev, expansion = cols[0].strip().lower(), cols[1].strip().lower()
        table[abbrev] = expansion
    return table


def load_pos_lexicon(path=None) -> dict[str, str]:
    src = _data_path("pos_lexicon.tsv") if path is None else path
    lexicon: dict[str, str] = {}
    for line in _read_data_lines(src):
        cols = line.split("\t")
        if len(cols) < 2 or cols[1].strip() not in POS_TAGS:
            raise DictionaryError(f"bad POS lexicon row: {line!r}")
        lexicon[cols[0].strip().lower()] = cols[1].strip()
    return lexicon


def load_sentence_guards(path=None) -> frozenset[str]:
    src = _data_path("sentence_abbrevs.txt") if path is None else path
    return frozenset(l.strip().lower() for l in _read_data_lines(src))


def split_sentences(text: str, guards: frozenset[str] | None = None) -> list[tuple[int, int]]:
    """Split text into sentence spans on terminators (. ! ? ;) and newlines.

    Spans are (start, end) character offsets, non-overlapping and ordered,
    trimmed of surrounding whitespace. Periods after guard abbreviations or
    inside decimal numbers do not split.
    """
    if guards is None:
        guards = _DEFAULT_GUARDS
    breaks: list[int] = []
    for m in _SENTENCE_END_RE.finditer(text):
        pos = m.start()
        ch = m.group()
        if ch == ".":
            if pos + 1 < len(text) and text[pos - 1:pos].isdigit() and text[pos + 1].isdigit():
                continue  # decimal point
            word = _preceding_word(text, pos)
            if word and (word.lower() in guards or len(word) == 1 and word.isalpha()):
                continue
        breaks.append(pos)
    spans: list[tuple[int, int]] = []
    start = 0
    for pos in breaks + [len(text)]:
        chunk = text[start:pos]
        left = len(chunk) - len(chunk.lstrip())
        right = len(chunk.rstrip())
        if right > left:
            spans.append((start + left, start + right))
        start = pos + 1
    return spans


def _preceding_word(text: str, pos: int) -> str:
    i = pos
    while i > 0 and (text[i - 1].isalpha()):
        i -= 1
    return text[i:pos]


def tokenize(sentence: str) -> list[str]:
    """Split one sentence into word tokens.

    Punctuation becomes separate tokens; hyphenated compounds (x-ray) and
    slash abbreviations (c/o) stay whole; decimals stay whole.
    """
    return [m.group() for m in _TOKEN_RE.finditer(sentence)]


def tokenize_with_spans(sentence: str) -> list[tuple[str, int, int]]:
    return [(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(sentence)]


def normalize(token: str, abbreviations: Mapping[str, str] | None = None) -> str:
    """Lowercase, strip surrounding punctuation, and expand known abbreviations.

    Pure-punctuation tokens are returned unchanged so downstream stages can
    tag and discard them.
    """
    lowered = token.lower().strip(_STRIP_PUNCT)
    if not lowered:
        return token
    if abbreviations:
        return abbreviations.get(lowered, lowered)
    return lowered


def pos_tag(tokens: Sequence[str], lexicon: Mapping[str, str] | None = None) -> list[tuple[str, str]]:
    """Tag normalized tokens with coarse parts of speech.

    Lexicon lookup first, then suffix rules; unknown words default to NOUN
    since triage text is noun-dense.
    """
    if lexicon is None:
        lexicon = _DEFAULT_LEXICON
    tagged = []
    for tok in tokens:
        tagged.append((tok, _tag_one(tok, lexicon)))
    return tagged


def _tag_one(token: str, lexicon: Mapping[str, str]) -> str:
    tag = lexicon.get(token)
    if tag is not None:
        return tag
    if not any(ch.isalnum() for ch in token):
        return "OTHER"
    if _NUMERIC_RE.match(token) or token.isdigit():
        return "NUM"
    if " " in token:
        return "NOUN"  # merged dictionary phrase
    if token.endswith("ly"):
        return "OTHER"
    if token.endswith(("ous", "ful", "ive")):
        return "ADJ"
    return "NOUN"


def chunk_noun_phrases(tagged: Sequence[tuple[str, str]]) -> list[tuple[int, int]]:
    """Maximal (ADJ|NOUN|NUM)* NOUN runs as (start, end) token index spans."""
    spans: list[tuple[int, int]] = []
    i = 0
    n = len(tagged)
    while i < n:
        if tagged[i][1] in ("ADJ", "NOUN", "NUM"):
            j = i
            last_noun = -1
            while j < n and tagged[j][1] in ("ADJ", "NOUN", "NUM"):
                if tagged[j][1] == "NOUN":
                    last_noun = j
                j += 1
            if last_noun >= 0:
                spans.append((i, last_noun + 1))
            i = j
        else:
            i += 1
    return spans


def extract_terms(np_tokens: Sequence[str],
                  dictionary: Dictionary,
                  *,
                  term_type: str | None = None,
                  char_spans: Sequence[tuple[int, int]] | None = None,
                  np_token_offset: int = 0,
                  max_np_len: int = DEFAULT_MAX_NP_LEN,
                  max_match_len: int = DEFAULT_MAX_MATCH_LEN,
                  counters: dict[str, int] | None = None) -> list[ClinicalTag]:
    """Match one noun phrase against the dictionary.

    Every contiguous and non-contiguous token subset of size 1..max_match_len
    is tried in all orderings (equivalently: by sorted-token multiset) against
    the normalized dictionary keys. Overlapping matches are resolved longest
    first, then leftmost; duplicate CUIs are deduplicated. Phrases longer than
    ``max_np_len`` are truncated to their leading tokens and tallied under the
    ``np_truncated`` counter.
    """
    tokens = list(np_tokens)
    if len(tokens) > max_np_len:
        tokens = tokens[:max_np_len]
        if counters is not None:
            counters["np_truncated"] = counters.get("np_truncated", 0) + 1

    candidates: list[tuple[int, int, tuple[int, ...], DictEntry]] = []
    positions = range(len(tokens))
    for size in range(min(len(tokens), max_match_len), 0, -1):
        for combo in itertools.combinations(positions, size):
            key = tuple(sorted(tokens[p] for p in combo))
            for match_key in dictionary.multiset_index.get(key, ()):
                entry = dictionary.entries[match_key]
                candidates.append((-size, combo[0], combo, entry))

    candidates.sort(key=lambda c: (c[0], c[1], c[2], c[3].cui))
    taken: set[int] = set()
    chosen: list[tuple[tuple[int, ...], DictEntry]] = []
    seen_cuis: set[str] = set()
    for _, _, combo, entry in candidates:
        if any(p in taken for p in combo):
            continue
        taken.update(combo)
        if entry.cui in seen_cuis:
            continue
        seen_cuis.add(entry.cui)
        chosen.append((combo, entry))

    tags: list[ClinicalTag] = []
    for combo, entry in chosen:
        if char_spans is not None:
            start = min(char_spans[p][0] for p in combo)
            end = max(char_spans[p][1] for p in combo)
        else:
            start, end = combo[0], combo[-1] + 1
        ttype = term_type or dictionary.term_types[entry.cui]
        tags.append(ClinicalTag(cui=entry.cui, term_type=ttype, negated=False,
                                start=start, end=end,
                                token_pos=np_token_offset + combo[0]))
    return tags


def detect_negation(tags: Sequence[ClinicalTag],
                    sentence_tokens: Sequence[str],
                    *,
                    triggers: frozenset[str] = NEGATION_TRIGGERS,
                    window: int = NEGATION_WINDOW,
                    scope_breakers: frozenset[str] = NEGATION_SCOPE_BREAKERS) -> list[ClinicalTag]:
    """Mark tags negated when a trigger opens a scope covering their first token.

    A trigger's scope runs over the following ``window`` tokens and closes
    early at a scope-breaking conjunction or another trigger.
    """
    negated_positions: set[int] = set()
    for i, tok in enumerate(sentence_tokens):
        if tok not in triggers:
            continue
        for j in range(i + 1, min(i + 1 + window, len(sentence_tokens))):
            word = sentence_tokens[j]
            if word in scope_breakers or word in triggers:
                break
            negated_positions.add(j)
    out = []
    for tag in tags:
        negated = tag.token_pos in negated_positions
        out.append(replace(tag, negated=negated) if negated != tag.negated else tag)
    return out


@dataclass
class Pipeline:
    """The full extraction pipeline with loaded resources and run counters."""

    dictionary: Dictionary
    abbreviations: Mapping[str, str] = field(default_factory=dict)
    pos_lexicon: Mapping[str, str] = field(default_factory=dict)
    sentence_guards: frozenset[str] = frozenset()
    max_np_len: int = DEFAULT_MAX_NP_LEN
    max_match_len: int = DEFAULT_MAX_MATCH_LEN
    counters: dict[str, int] = field(default_factory=dict)

    @classmethod
    def default(cls, dictionary: Dictionary | None = None) -> "Pipeline":
        return cls(
            dictionary=dictionary if dictionary is not None else load_dictionary(),
            abbreviations=load_abbreviations(),
            pos_lexicon=load_pos_lexicon(),
            sentence_guards=load_sentence_guards(),
        )

    def extract(self, text: str, term_type: str | None = None) -> list[ClinicalTag]:
        """Run the full pipeline over one free-text field."""
        tags: list[ClinicalTag] = []
        for s_start, s_end in split_sentences(text, self.sentence_guards):
            sentence = text[s_start:s_end]
            tokens = self._normalized_tokens(sentence, s_start)
            words = [t[0] for t in tokens]
            self.counters["words"] = self.counters.get("words", 0) + sum(
                1 for w in words if any(ch.isalnum() for ch in w))
            tagged = pos_tag(words, self.pos_lexicon)
            sent_tags: list[ClinicalTag] = []
            for np_start, np_end in chunk_noun_phrases(tagged):
                np_tokens = words[np_start:np_end]
                spans = [(tokens[k][1], tokens[k][2]) for k in range(np_start, np_end)]
                sent_tags.extend(extract_terms(
                    np_tokens, self.dictionary,
                    term_type=term_type,
                    char_spans=spans,
                    np_token_offset=np_start,
                    max_np_len=self.max_np_len,
                    max_match_len=self.max_match_len,
                    counters=self.counters,
                ))
            tags.extend(detect_negation(sent_tags, words))
        return tags

    def _normalized_tokens(self, sentence: str, offset: int) -> list[tuple[str, int, int]]:
        """Tokenize, normalize, split multi-word expansions, re-merge phrases."""
        out: list[tuple[str, int, int]] = []
        for raw, start, end in tokenize_with_spans(sentence):
            norm = normalize(raw, self.abbreviations)
            parts = norm.split(" ") if " " in norm else [norm]
            for part in parts:
                out.append((part, offset + start, offset + end))
        return self._merge_phrases(out)

    def _merge_phrases(self, tokens: list[tuple[str, int, int]]) -> list[tuple[str, int, int]]:
        phrases = self.dictionary.merge_phrases
        if not phrases:
            return tokens
        merged: list[tuple[str, int, int]] = []
        i = 0
        n = len(tokens)
        while i < n:
            matched = False
            for k in range(min(4, n - i), 1, -1):
                joined = " ".join(tokens[i + d][0] for d in range(k))
                if joined in phrases:
                    merged.append((joined, tokens[i][1], tokens[i + k - 1][2]))
                    i += k
                    matched = True
                    break
            if not matched:
                merged.append(tokens[i])
                i += 1
        return merged


def _safe_ratio(num: float, den: float) -> float:
    """num/den with the empty-comparison convention: 0/0 counts as perfect."""
    return num / den if den > 0 else 1.0


def tag_metrics(tp: int, fp: int, fn: int) -> tuple[float, float, float, float]:
    """(accuracy, f1, sensitivity, precision) from pooled tag counts.

    accuracy = tp / (tp + fp + fn); f1 is the harmonic mean of sensitivity and
    precision (0 when both are 0).
    """
    sensitivity = _safe_ratio(tp, tp + fn)
    precision = _safe_ratio(tp, tp + fp)
    f1 = (2 * sensitivity * precision / (sensitivity + precision)
          if (sensitivity + precision) > 0 else 0.0)
    accuracy = _safe_ratio(tp, tp + fp + fn)
    return accuracy, f1, sensitivity, precision


@dataclass(frozen=True)
class TypeBreakdown:
    term_type: str
    n_terms: int
    tp: int
    fp: int
    fn: int
    accuracy: float
    f1: float
    sensitivity: float
    precision: float


@dataclass(frozen=True)
class TagEvalResult:
    tp: int
    fp: int
    fn: int
    n_terms: int
    accuracy: float
    f1: float
    sensitivity: float
    precision: float
    accuracy_ci: tuple[float, float]
    f1_ci: tuple[float, float]
    sensitivity_ci: tuple[float, float]
    precision_ci: tuple[float, float]
    per_type: tuple[TypeBreakdown, ...]


TagSet = Iterable[ClinicalTag] | Iterable[tuple[str, str, bool]]


def _as_triples(tags: TagSet) -> frozenset[tuple[str, str, bool]]:
    triples = set()
    for t in tags:
        if isinstance(t, ClinicalTag):
            triples.add(t.identity())
        else:
            cui, term_type, negated = t
            triples.add((cui, term_type, bool(negated)))
    return frozenset(triples)


def evaluate_tags(predicted: Mapping[str, TagSet],
                  reference: Mapping[str, TagSet],
                  *,
                  n_resamples: int = 2000,
                  seed: int = 20) -> TagEvalResult:
    """Score predicted tags against a reference corpus.

    Records are aligned by id (a mismatch is fatal) and tags are compared as
    (cui, term_type, negated) triples pooled over records. Confidence
    intervals come from a percentile bootstrap over records.
    """
    if set(predicted) != set(reference):
        missing = set(reference) ^ set(predicted)
        raise ValueError(f"predicted and reference record ids differ: {sorted(missing)[:5]}")

    record_ids = sorted(reference)
    per_record: list[tuple[int, int, int]] = []
    type_counts: dict[str, list[int]] = {}
    for rid in record_ids:
        pred = _as_triples(predicted[rid])
        ref = _as_triples(reference[rid])
        tp_set = pred & ref
        per_record.append((len(tp_set), len(pred - ref), len(ref - pred)))
        for group, slot in ((tp_set, 0), (pred - ref, 1), (ref - pred, 2)):
            for (_, term_type, _) in group:
                type_counts.setdefault(term_type, [0, 0, 0])[slot] += 1

    tp = sum(r[0] for r in per_record)
    fp = sum(r[1] for r in per_record)
    fn = sum(r[2] for r in per_record)
    accuracy, f1, sensitivity, precision = tag_metrics(tp, fp, fn)

    from . import metrics as _metrics
    import numpy as np

    counts = np.asarray(per_record, dtype=np.int64)

    def pooled(stat_index: int):
        def stat(rows: "np.ndarray") -> float:
            t, p, n = rows.sum(axis=0)
            return tag_metrics(int(t), int(p), int(n))[stat_index]
        return stat

    cis = [_metrics.bootstrap_ci(counts, pooled(i), n_resamples=n_resamples,
                                 seed=seed, clip=(0.0, 1.0))
           for i in range(4)]

    per_type = []
    for term_type in sorted(type_counts):
        t, p, n = type_counts[term_type]
        acc_t, f1_t, sens_t, prec_t = tag_metrics(t, p, n)
        per_type.append(TypeBreakdown(term_type, t + n, t, p, n,
                                      acc_t, f1_t, sens_t, prec_t))

    return TagEvalResult(
        tp=tp, fp=fp, fn=fn, n_terms=tp + fn,
        accuracy=accuracy, f1=f1, sensitivity=sensitivity, precision=precision,
        accuracy_ci=cis[0], f1_ci=cis[1], sensitivity_ci=cis[2], precision_ci=cis[3],
        per_type=tuple(per_type),
    )


_DEFAULT_LEXICON = load_pos_lexicon()
_DEFAULT_GUARDS = load_sentence_guards()
