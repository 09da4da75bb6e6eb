"""Subtitle word streams: parsing, fallback part-of-speech tagging, noun/verb extraction."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from .errors import BadTag, IoFailure, SchemaError


class Pos(enum.Enum):
    NOUN = "noun"
    VERB = "verb"
    OTHER = "other"


@dataclass(frozen=True)
class SubtitleWord:
    token: str
    pos: Pos
    start_s: Optional[float] = None
    end_s: Optional[float] = None

    def __post_init__(self):
        if not self.token or any(ch.isspace() for ch in self.token):
            raise SchemaError(f"token must be non-empty without whitespace: {self.token!r}")
        if self.start_s is not None and self.start_s < 0:
            raise SchemaError(f"negative start_s for {self.token!r}")
        if (self.start_s is not None and self.end_s is not None
                and self.end_s < self.start_s):
            raise SchemaError(f"end_s < start_s for {self.token!r}")


@dataclass(frozen=True)
class WordCandidates:
    nouns: tuple[str, ...]
    verbs: tuple[str, ...]

    @property
    def empty(self) -> bool:
        return not self.nouns and not self.verbs


@dataclass(frozen=True)
class Lexicon:
    nouns: frozenset[str]
    verbs: frozenset[str]

    @classmethod
    def from_dict(cls, doc) -> "Lexicon":
        if not isinstance(doc, dict):
            raise SchemaError("lexicon must be an object with 'nouns' and 'verbs'")
        lists = []
        for key in ("nouns", "verbs"):
            items = doc.get(key, [])
            if not isinstance(items, list) or not all(isinstance(t, str) for t in items):
                raise SchemaError(f"lexicon field {key!r} must be a list of strings")
            lists.append(frozenset(t.lower() for t in items))
        return cls(*lists)


def load_lexicon(path) -> Lexicon:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    return Lexicon.from_dict(doc)


def _number(entry: dict, key: str, i: int) -> Optional[float]:
    if key not in entry or entry[key] is None:
        return None
    val = entry[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise SchemaError(f"entry {i}: {key!r} must be a number")
    return float(val)


def parse_subtitles(document) -> list[SubtitleWord]:
    """Parse the pre-tagged subtitle JSON (a string or the already-decoded list)."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError(str(exc)) from exc
    if not isinstance(document, list):
        raise SchemaError("subtitle document must be a JSON array")
    words = []
    for i, entry in enumerate(document):
        if not isinstance(entry, dict):
            raise SchemaError(f"entry {i} is not an object")
        token, pos = entry.get("token"), entry.get("pos")
        if not isinstance(token, str):
            raise SchemaError(f"entry {i}: 'token' must be a string")
        if not isinstance(pos, str):
            raise SchemaError(f"entry {i}: 'pos' must be a string")
        try:
            tag = Pos(pos.lower())
        except ValueError:
            raise BadTag(f"entry {i}: unknown pos {pos!r}") from None
        words.append(SubtitleWord(token.lower(), tag,
                                  _number(entry, "start_s", i), _number(entry, "end_s", i)))
    return words


def serialize_subtitles(words: Iterable[SubtitleWord]) -> str:
    out = []
    for w in words:
        entry = {"token": w.token, "pos": w.pos.value}
        if w.start_s is not None:
            entry["start_s"] = w.start_s
        if w.end_s is not None:
            entry["end_s"] = w.end_s
        out.append(entry)
    return json.dumps(out)


def load_subtitles(path, lexicon: Optional[Lexicon] = None) -> list[SubtitleWord]:
    """Read a subtitle file.

    ``.json`` files follow the pre-tagged schema. Anything else is treated as
    plain whitespace-separated text and tagged with `lexicon`.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    if path.suffix.lower() == ".json":
        return parse_subtitles(text)
    if lexicon is None:
        raise SchemaError(f"{path}: untagged subtitles need a lexicon")
    return tag_pos_fallback(text.split(), lexicon)


def tag_pos_fallback(tokens: Iterable[str], lexicon: Lexicon) -> list[SubtitleWord]:
    # noun wins when a token is listed under both tags
    words = []
    for tok in tokens:
        tok = tok.lower()
        if tok in lexicon.nouns:
            pos = Pos.NOUN
        elif tok in lexicon.verbs:
            pos = Pos.VERB
        else:
            pos = Pos.OTHER
        words.append(SubtitleWord(tok, pos))
    return words


def extract_candidates(words: Iterable[SubtitleWord],
                       stoplist: Optional[Iterable[str]] = None) -> WordCandidates:
    """Unique nouns and verbs in first-occurrence order; Other tokens are dropped."""
    stop = frozenset(stoplist or ())
    nouns: dict[str, None] = {}
    verbs: dict[str, None] = {}
    for w in words:
        if w.token in stop:
            continue
        if w.pos is Pos.NOUN:
            nouns.setdefault(w.token)
        elif w.pos is Pos.VERB:
            verbs.setdefault(w.token)
    return WordCandidates(tuple(nouns), tuple(verbs))
