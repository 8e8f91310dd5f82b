"""Sentence segmentation, polarity-sentence selection, and keyword extraction.

Long reviews are split into sentences; the sentences carrying opinion
words become retrieval queries. Keywords for the editor prompt come from
retrieved excerpts with determiners, conjunctions, and punctuation
removed. All functions are pure.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

DEFAULT_DETERMINERS = frozenset(
    ["a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "no"]
)
DEFAULT_CONJUNCTIONS = frozenset(["and", "or", "but", "nor", "so", "yet", "for"])

# abbreviations that must not end a sentence at the following period
ABBREVIATIONS = frozenset(["mr.", "mrs.", "dr.", "vs.", "e.g.", "i.e.", "etc."])

_SENT_BOUNDARY = re.compile(r"[.!?]+(?=\s)")


def _is_punct_char(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def strip_punctuation(token: str) -> str:
    """Strip leading/trailing Unicode-punctuation characters from a token."""
    start, end = 0, len(token)
    while start < end and _is_punct_char(token[start]):
        start += 1
    while end > start and _is_punct_char(token[end - 1]):
        end -= 1
    return token[start:end]


@dataclass
class StopLists:
    determiners: frozenset[str] = DEFAULT_DETERMINERS
    conjunctions: frozenset[str] = DEFAULT_CONJUNCTIONS

    def __post_init__(self) -> None:
        for name, words in (("determiners", self.determiners), ("conjunctions", self.conjunctions)):
            if any(w != w.lower() for w in words):
                raise ValueError(f"{name} entries must be lowercase")
        if self.determiners & self.conjunctions:
            raise ValueError("determiner and conjunction sets must be disjoint")


@dataclass
class PolarityLexicon:
    positive_words: frozenset[str]
    negative_words: frozenset[str]

    def __post_init__(self) -> None:
        if not self.positive_words or not self.negative_words:
            raise ValueError("lexicon word sets must be non-empty")
        if self.positive_words & self.negative_words:
            raise ValueError("positive and negative word sets must be disjoint")

    @property
    def all_words(self) -> frozenset[str]:
        return self.positive_words | self.negative_words


def load_wordlist(path: str | Path) -> frozenset[str]:
    """One word per line, '#' comments, blank lines ignored."""
    words = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            word = line.split("#", 1)[0].strip().lower()
            if word:
                words.append(word)
    return frozenset(words)


def default_lexicon() -> PolarityLexicon:
    """The packaged opinion-word lexicon (user-replaceable via files)."""
    from importlib.resources import files

    base = files("cfgen").joinpath("data/lexicon")
    return PolarityLexicon(
        positive_words=_parse_wordlist(base.joinpath("positive.txt").read_text(encoding="utf-8")),
        negative_words=_parse_wordlist(base.joinpath("negative.txt").read_text(encoding="utf-8")),
    )


def _parse_wordlist(text: str) -> frozenset[str]:
    words = []
    for line in text.splitlines():
        word = line.split("#", 1)[0].strip().lower()
        if word:
            words.append(word)
    return frozenset(words)


def split_sentences(text: str) -> list[str]:
    """Split on sentence-final ., !, ? followed by whitespace.

    A guard list of common abbreviations suppresses false boundaries; the
    trailing fragment is always kept. Joining the output with single
    spaces reproduces the input's non-whitespace character sequence.
    """
    sentences: list[str] = []
    start = 0
    for match in _SENT_BOUNDARY.finditer(text):
        end = match.end()
        prefix = text[start:end]
        trailing = prefix.rsplit(None, 1)[-1] if prefix.strip() else ""
        if trailing.lower() in ABBREVIATIONS:
            continue
        sentence = prefix.strip()
        if sentence:
            sentences.append(sentence)
        start = end
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def _polarity_hits(sentence: str, lexicon: PolarityLexicon) -> int:
    count = 0
    for token in sentence.split():
        if strip_punctuation(token).lower() in lexicon.all_words:
            count += 1
    return count


def select_polarity_sentences(
    review: str,
    lexicon: PolarityLexicon,
    min_hits: int = 1,
    max_sentences: int = 4,
) -> list[str]:
    """Sentences with the most opinion-word hits, in document order.

    The top ``max_sentences`` sentences with at least ``min_hits``
    lexicon hits are returned, ordered as they appear in the review.
    Ranking ties prefer the earlier sentence. Empty when nothing
    qualifies.
    """
    sentences = split_sentences(review)
    hits = [(_polarity_hits(s, lexicon), i) for i, s in enumerate(sentences)]
    qualified = [(h, i) for h, i in hits if h >= min_hits]
    qualified.sort(key=lambda pair: (-pair[0], pair[1]))
    chosen = sorted(i for _, i in qualified[:max_sentences])
    return [sentences[i] for i in chosen]


def extract_keywords(
    excerpts: Iterable[str],
    stops: StopLists | None = None,
    max_keywords: int = 12,
) -> list[str]:
    """Keyword list for the editor prompt, drawn from retrieved excerpts.

    Tokens are whitespace-split, stripped of surrounding punctuation, and
    dropped when they are determiners, conjunctions, or become empty.
    Order is preserved across excerpts; duplicates are removed
    case-insensitively keeping the first surface form; the list is capped
    at ``max_keywords``.
    """
    excerpts = list(excerpts)
    if not excerpts:
        raise ValueError("excerpts must be non-empty")
    stops = stops or StopLists()
    drop = stops.determiners | stops.conjunctions
    keywords: list[str] = []
    seen: set[str] = set()
    for excerpt in excerpts:
        for token in excerpt.split():
            word = strip_punctuation(token)
            if not word or word.lower() in drop:
                continue
            if word.lower() in seen:
                continue
            seen.add(word.lower())
            keywords.append(word)
            if len(keywords) >= max_keywords:
                return keywords
    return keywords
