"""Entity corpus, a seeded hashing text encoder, and prompt-ensembled labels.

The text encoder is a stand-in for a frozen pretrained one: each lowercase
word is hashed (with the seed) to a fixed pseudo-random unit vector, a text
is the normalised mean over its distinct words. Anything with the same
``text -> vector`` signature can replace ``encode_text``.
"""
import hashlib
import json
import re
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import IntegrityError, ParseError, StaleCacheError, ValidationError

CATEGORIES = ("body", "object", "scene", "motion")

DEFAULT_BODY_PARTS = (
    ("head", "the head of a person"),
    ("hands", "the hands of a person"),
    ("arms", "the arms of a person"),
    ("legs", "the legs of a person"),
    ("feet", "the feet of a person"),
    ("torso", "the torso of a person"),
)

DEFAULT_TEMPLATES = (
    "a video of {}.",
    "a clip showing {}.",
    "{}",
    "footage of {}.",
)

_WORD = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class EntityRecord:
    unit: str
    description: str
    category: str

    def __post_init__(self):
        if not self.unit or not self.unit.strip():
            raise ValidationError("entity unit must be non-empty")
        if self.category not in CATEGORIES:
            raise ValidationError(f"unknown category {self.category!r}; expected one of {CATEGORIES}")

    @property
    def text(self):
        return f"{self.unit} {self.description}".strip()

    def to_json(self):
        return {"unit": self.unit, "description": self.description, "category": self.category}


class Corpus:
    def __init__(self, entities):
        entities = list(entities)
        if not entities:
            raise ValidationError("corpus must contain at least one entity")
        seen = set()
        for e in entities:
            key = (e.unit, e.description)
            if key in seen:
                raise ValidationError(f"duplicate entity {e.unit!r}")
            seen.add(key)
        self.entities = entities

    @property
    def K(self):
        return len(self.entities)

    def __len__(self):
        return self.K

    def __iter__(self):
        return iter(self.entities)

    def __getitem__(self, i):
        return self.entities[i]

    def __eq__(self, other):
        return isinstance(other, Corpus) and self.entities == other.entities

    def units(self):
        return [e.unit for e in self.entities]

    def index_of(self, unit):
        for i, e in enumerate(self.entities):
            if e.unit == unit:
                return i
        raise KeyError(unit)

    def to_jsonl(self):
        return "".join(json.dumps(e.to_json(), sort_keys=True) + "\n" for e in self.entities)

    def save(self, path):
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_records(cls, records):
        return cls(EntityRecord(r["unit"], r.get("description", ""), r["category"]) for r in records)


def _parse_record(obj, line):
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", line)
    for key in ("unit", "description", "category"):
        if key not in obj:
            raise ParseError(f"missing field {key!r}", line)
        if not isinstance(obj[key], str):
            raise ParseError(f"field {key!r} must be a string", line)
    try:
        return EntityRecord(obj["unit"], obj["description"], obj["category"])
    except ValidationError as exc:
        raise ParseError(str(exc), line) from None


def load_corpus(path):
    """Read a JSON-lines corpus file, preserving order."""
    entities = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            entities.append(_parse_record(obj, lineno))
    return Corpus(entities)


def tokenize(text):
    return _WORD.findall(text.lower())


def load_lexicon(path):
    with open(path, encoding="utf-8") as fh:
        lex = json.load(fh)
    if not isinstance(lex, dict):
        raise ValidationError("lexicon must be a JSON object")
    for surface, entry in lex.items():
        if not isinstance(entry, dict) or "category" not in entry:
            raise ValidationError(f"lexicon entry {surface!r} needs description and category")
        if entry["category"] not in CATEGORIES:
            raise ValidationError(f"lexicon entry {surface!r} has unknown category {entry['category']!r}")
    return lex


def build_corpus(labels, lexicon, body_parts=DEFAULT_BODY_PARTS):
    """Look up every word and adjacent word pair of each label in the lexicon.

    ``lexicon`` is a mapping or a path to a lexicon file. Entities are kept
    in order of first occurrence, then the default body parts are appended.
    """
    if not isinstance(lexicon, dict):
        lexicon = load_lexicon(lexicon)
    lex = {k.lower(): v for k, v in lexicon.items()}
    entities, seen = [], set()

    def add(unit, description, category):
        key = (unit, description)
        if key not in seen:
            seen.add(key)
            entities.append(EntityRecord(unit, description, category))

    for label in labels:
        words = tokenize(label)
        for i, w in enumerate(words):
            for surface in (w, " ".join(words[i:i + 2]) if i + 1 < len(words) else None):
                if surface and surface in lex:
                    entry = lex[surface]
                    add(surface, entry.get("description", ""), entry["category"])
    for unit, description in body_parts:
        add(unit, description, "body")
    if not entities:
        raise ValidationError("corpus build produced no entities")
    return Corpus(entities)


def filter_by_category(corpus, categories):
    categories = set(categories)
    unknown = categories - set(CATEGORIES)
    if unknown:
        raise ValidationError(f"unknown categories {sorted(unknown)}")
    kept = [e for e in corpus if e.category in categories]
    if not kept:
        raise ValidationError(f"no entities left after filtering to {sorted(categories)}")
    return Corpus(kept)


# -- text encoder ---------------------------------------------------------
@lru_cache(maxsize=65536)
def _word_vector(word, seed, d):
    digest = hashlib.blake2b(f"{seed}\x00{word}".encode(), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    v.setflags(write=False)
    return v


def encode_text(text, seed, d):
    """Unit vector for ``text``: normalised mean of its distinct words' vectors."""
    words = sorted(set(tokenize(text)))
    if not words:
        raise ValidationError(f"cannot encode empty text {text!r}")
    v = np.mean([_word_vector(w, seed, d) for w in words], axis=0)
    return v / np.linalg.norm(v)


@dataclass
class TextEmbeddingMatrix:
    S: np.ndarray           # (K, d) unit rows in corpus order
    source_hash: bytes      # 32 bytes

    @property
    def K(self):
        return self.S.shape[0]

    @property
    def d(self):
        return self.S.shape[1]


def corpus_hash(corpus, seed, d):
    h = hashlib.sha256()
    h.update(corpus.to_jsonl().encode("utf-8"))
    h.update(f"\x00seed={seed}\x00d={d}".encode())
    return h.digest()


_CACHE_MAGIC = b"ALTE"
_CACHE_HEADER = struct.Struct("<4sIII32s")


def save_embeddings(emb, path):
    S = np.ascontiguousarray(emb.S, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(_CACHE_MAGIC, 1, emb.K, emb.d, emb.source_hash))
        fh.write(S.tobytes())


def load_embeddings(path):
    with open(path, "rb") as fh:
        head = fh.read(_CACHE_HEADER.size)
        if len(head) != _CACHE_HEADER.size:
            raise IntegrityError(f"{path}: truncated embedding cache header")
        magic, version, K, d, digest = _CACHE_HEADER.unpack(head)
        if magic != _CACHE_MAGIC or version != 1:
            raise IntegrityError(f"{path}: not an ALTE v1 file")
        body = fh.read()
    if len(body) != 4 * K * d:
        raise IntegrityError(f"{path}: expected {K}x{d} floats, got {len(body)} bytes")
    S = np.frombuffer(body, dtype="<f4").reshape(K, d).astype(np.float32)
    return TextEmbeddingMatrix(S=S, source_hash=digest)


def embed_entities(corpus, seed, d, cache_path=None):
    """Embed ``unit + description`` of every entity; optionally via an on-disk cache.

    A cache whose hash does not match the corpus, seed and dimension raises
    ``StaleCacheError``. Rows are stored as 32-bit floats.
    """
    digest = corpus_hash(corpus, seed, d)
    if cache_path is not None and Path(cache_path).exists():
        cached = load_embeddings(cache_path)
        if cached.source_hash != digest:
            raise StaleCacheError(f"{cache_path}: cache was built from a different corpus/seed")
        return cached
    S = np.stack([encode_text(e.text, seed, d) for e in corpus]).astype(np.float32)
    emb = TextEmbeddingMatrix(S=S, source_hash=digest)
    if cache_path is not None:
        save_embeddings(emb, cache_path)
    return emb


@dataclass
class PromptTemplateSet:
    templates: tuple

    def __post_init__(self):
        self.templates = tuple(self.templates)
        if not self.templates:
            raise ValidationError("need at least one prompt template")
        for t in self.templates:
            if t.count("{}") != 1:
                raise ValidationError(f"template {t!r} must contain exactly one '{{}}' placeholder")


@dataclass
class ClassEmbeddings:
    C: np.ndarray           # (I, d) unit rows
    labels: list

    def index(self, label):
        try:
            return self.labels.index(label)
        except ValueError:
            raise ValidationError(f"unknown label {label!r}") from None


def embed_action_labels(labels, templates, seed, d):
    """Mean over templates of each filled prompt's encoding, re-normalised."""
    if not isinstance(templates, PromptTemplateSet):
        templates = PromptTemplateSet(templates)
    rows = []
    for label in labels:
        v = np.mean([encode_text(t.format(label), seed, d) for t in templates.templates], axis=0)
        rows.append(v / np.linalg.norm(v))
    return ClassEmbeddings(C=np.stack(rows), labels=list(labels))
