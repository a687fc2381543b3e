"""Concept bank ingestion, learnable concept slots and the frozen text encoder.

A bank file lists, per class, a bag-level class prompt and literature-derived
expert concepts (each with a source for traceability), plus the number of
purely learnable data-driven concepts. Each concept is embedded through a
frozen encoder: mean-pooled token vectors (learnable context tokens followed
by fixed token-table rows) projected to the shared embedding space and
L2-normalized.

Concepts and class prompts may instead carry a precomputed ``embedding``
(for users with real encoder outputs); those are refined by a learnable
additive delta in embedding space.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffkernel as dk
from .errors import DegenerateInputError, ParseError, ValidationError

DEFAULT_VOCAB = 4096
DEFAULT_TOKEN_DIM = 64
DEFAULT_CONTEXT_LENGTH = 16
CONTEXT_INIT_STD = 0.02

_WORD = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class Source:
    title: str
    locator: str
    quote: str | None = None

    def to_json(self) -> dict:
        out = {"title": self.title, "locator": self.locator}
        if self.quote is not None:
            out["quote"] = self.quote
        return out


@dataclass(frozen=True)
class ExpertConcept:
    class_name: str
    text: str
    source: Source
    embedding: tuple[float, ...] | None = None


@dataclass(frozen=True)
class ClassEntry:
    name: str
    class_prompt: str
    expert_concepts: tuple[ExpertConcept, ...]
    n_data_driven: int
    prompt_embedding: tuple[float, ...] | None = None

    @property
    def m(self) -> int:
        return len(self.expert_concepts) + self.n_data_driven

    def concept_label(self, index: int) -> str:
        """Human-readable name of concept row ``index`` (expert rows first)."""
        if index < len(self.expert_concepts):
            return self.expert_concepts[index].text
        if index < self.m:
            return f"data-driven concept {index - len(self.expert_concepts)}"
        raise IndexError(f"class {self.name!r} has {self.m} concepts, asked for {index}")


@dataclass(frozen=True)
class ConceptBank:
    task: str
    d: int
    classes: tuple[ClassEntry, ...]

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    @property
    def K(self) -> int:
        return len(self.classes)

    def to_json(self) -> dict:
        classes = []
        for c in self.classes:
            entry = {
                "name": c.name,
                "class_prompt": c.class_prompt,
                "expert_concepts": [],
                "n_data_driven": c.n_data_driven,
            }
            if c.prompt_embedding is not None:
                entry["class_prompt_embedding"] = list(c.prompt_embedding)
            for e in c.expert_concepts:
                item = {"text": e.text, "source": e.source.to_json()}
                if e.embedding is not None:
                    item["embedding"] = list(e.embedding)
                entry["expert_concepts"].append(item)
            classes.append(entry)
        return {"task": self.task, "d": self.d, "classes": classes}


def _require(obj: dict, key: str, where: str, kind=None):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"missing field {where}.{key}")
    val = obj[key]
    if kind is not None and not isinstance(val, kind):
        raise ParseError(f"field {where}.{key} has wrong type {type(val).__name__}")
    return val


def _embedding(raw, d: int, where: str) -> tuple[float, ...] | None:
    if raw is None:
        return None
    if not isinstance(raw, list) or len(raw) != d or not all(isinstance(x, (int, float)) for x in raw):
        raise ParseError(f"field {where} must be a list of {d} numbers")
    if not any(raw):
        raise ValidationError(f"{where} is an all-zero vector")
    return tuple(float(x) for x in raw)


def parse_bank(doc: dict, n_data_driven: int | None = None,
               expert_concepts_per_class: int | None = None) -> ConceptBank:
    """Validate a decoded bank document. ``n_data_driven`` overrides the file's counts."""
    task = _require(doc, "task", "bank", str)
    d = _require(doc, "d", "bank", int)
    if d < 1:
        raise ValidationError(f"embedding dim d must be >= 1, got {d}")
    raw_classes = _require(doc, "classes", "bank", list)
    names = []
    for i, rc in enumerate(raw_classes):
        names.append(_require(rc, "name", f"classes[{i}]", str))
    if len(names) < 2:
        raise ValidationError(f"need at least 2 classes, got {len(names)}")
    if len(set(names)) != len(names):
        raise ValidationError(f"class names are not unique: {names}")

    classes = []
    for i, rc in enumerate(raw_classes):
        where = f"classes[{i}]"
        name = names[i]
        prompt = _require(rc, "class_prompt", where, str)
        raw_experts = _require(rc, "expert_concepts", where, list)
        ndd = _require(rc, "n_data_driven", where, int)
        if n_data_driven is not None:
            ndd = n_data_driven
        if ndd < 0:
            raise ValidationError(f"{where}.n_data_driven must be >= 0")
        experts = []
        for j, re_ in enumerate(raw_experts):
            w = f"{where}.expert_concepts[{j}]"
            text = _require(re_, "text", w, str)
            if not text.strip():
                raise ValidationError(f"{w}.text is empty")
            owner = re_.get("class", name)
            if owner not in names:
                raise ValidationError(f"{w} references unknown class {owner!r}")
            if owner != name:
                raise ValidationError(f"{w} declares class {owner!r} but is listed under {name!r}")
            src = _require(re_, "source", w, dict)
            title = _require(src, "title", f"{w}.source", str)
            if not title.strip():
                raise ValidationError(f"{w}.source.title is empty")
            locator = _require(src, "locator", f"{w}.source", str)
            quote = src.get("quote")
            if quote is not None and not isinstance(quote, str):
                raise ParseError(f"field {w}.source.quote has wrong type")
            emb = _embedding(re_.get("embedding"), d, f"{w}.embedding")
            experts.append(ExpertConcept(name, text, Source(title, locator, quote), emb))
        if expert_concepts_per_class is not None and len(experts) != expert_concepts_per_class:
            raise ValidationError(
                f"class {name!r} has {len(experts)} expert concepts, expected {expert_concepts_per_class}")
        entry = ClassEntry(name, prompt, tuple(experts), ndd,
                           _embedding(rc.get("class_prompt_embedding"), d, f"{where}.class_prompt_embedding"))
        if entry.m < 1:
            raise ValidationError(f"class {name!r} has no concepts (no expert concepts and n_data_driven=0)")
        classes.append(entry)
    return ConceptBank(task, d, tuple(classes))


def load_bank(path, n_data_driven: int | None = None,
              expert_concepts_per_class: int | None = None) -> ConceptBank:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    return parse_bank(doc, n_data_driven, expert_concepts_per_class)


def save_bank(bank: ConceptBank, path) -> None:
    Path(path).write_text(json.dumps(bank.to_json(), indent=2) + "\n", encoding="utf-8")


def tokenize(text: str, vocab_size: int = DEFAULT_VOCAB) -> list[int]:
    """Lowercase, split on non-alphanumerics, hash each word into ``[0, vocab_size)``."""
    ids = []
    for word in _WORD.findall(text.lower()):
        digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
        ids.append(int.from_bytes(digest, "little") % vocab_size)
    return ids


class FrozenEncoder:
    """Seeded fixed token table + linear projection; never trained."""

    def __init__(self, dim: int, vocab_size: int = DEFAULT_VOCAB,
                 token_dim: int = DEFAULT_TOKEN_DIM, seed: int = 0):
        self.dim = dim
        self.vocab_size = vocab_size
        self.token_dim = token_dim
        self.seed = seed
        rng = np.random.default_rng([seed, 0x7E47])
        self.table = rng.standard_normal((vocab_size, token_dim))
        self.projection = rng.standard_normal((token_dim, dim)) / np.sqrt(token_dim)
        self.table.setflags(write=False)
        self.projection.setflags(write=False)

    def spec(self) -> dict:
        return {"dim": self.dim, "vocab_size": self.vocab_size, "token_dim": self.token_dim, "seed": self.seed}

    def token_rows(self, ids: list[int]) -> np.ndarray:
        return self.table[np.asarray(ids, dtype=np.int64)]


def encode_concept(token_ids: list[int], context, enc: FrozenEncoder) -> dk.Matrix:
    """Embed fixed token ids plus learnable context tokens into a unit 1 x d row."""
    parts = []
    if context is not None and dk.as_matrix(context).rows > 0:
        parts.append(context)
    if token_ids:
        parts.append(dk.Matrix(enc.token_rows(token_ids)))
    if not parts:
        raise DegenerateInputError("concept has no tokens (neither fixed nor learnable)")
    pooled = dk.mean_rows(dk.vstack(parts) if len(parts) > 1 else parts[0])
    return dk.l2_normalize_rows(dk.matmul(pooled, enc.projection))


def encode_precomputed(embedding, delta) -> dk.Matrix:
    return dk.l2_normalize_rows(dk.add(dk.Matrix(np.asarray(embedding)), delta))


# -- learnable tensors ------------------------------------------------------

def expert_ctx_name(k: int) -> str:
    return f"class{k}.expert_context"


def prompt_ctx_name(k: int) -> str:
    return f"class{k}.prompt_context"


def prompt_delta_name(k: int) -> str:
    return f"class{k}.prompt_delta"


def expert_delta_name(k: int, i: int) -> str:
    return f"class{k}.expert{i}.delta"


def data_driven_name(k: int, j: int) -> str:
    return f"class{k}.data_driven{j}"


@dataclass(frozen=True)
class TokenConfig:
    context_length: int = DEFAULT_CONTEXT_LENGTH
    data_driven_length: int = DEFAULT_CONTEXT_LENGTH
    init_std: float = CONTEXT_INIT_STD


def init_concept_tensors(bank: ConceptBank, enc: FrozenEncoder, cfg: TokenConfig,
                         rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh learnable tensors for every class, in a fixed deterministic order."""
    tensors: dict[str, np.ndarray] = {}
    dt = enc.token_dim
    for k, c in enumerate(bank.classes):
        if any(e.embedding is None for e in c.expert_concepts):
            tensors[expert_ctx_name(k)] = rng.normal(0.0, cfg.init_std, (cfg.context_length, dt))
        for i, e in enumerate(c.expert_concepts):
            if e.embedding is not None:
                tensors[expert_delta_name(k, i)] = np.zeros((1, bank.d))
        if c.prompt_embedding is None:
            tensors[prompt_ctx_name(k)] = rng.normal(0.0, cfg.init_std, (cfg.context_length, dt))
        else:
            tensors[prompt_delta_name(k)] = np.zeros((1, bank.d))
        for j in range(c.n_data_driven):
            tensors[data_driven_name(k, j)] = rng.normal(0.0, cfg.init_std, (cfg.data_driven_length, dt))
    return tensors


@dataclass
class ClassEmbeddings:
    concepts: dk.Matrix  # m x d, expert rows first
    prompt: dk.Matrix    # 1 x d
    concept_rows: list[dk.Matrix] = field(default_factory=list)


def embed_bank(bank: ConceptBank, enc: FrozenEncoder, tensors: dict) -> list[ClassEmbeddings]:
    """Concept and prompt embeddings per class.

    ``tensors`` maps learnable tensor names to ``Matrix`` leaves (tracked
    when training) or plain arrays (inference).
    """
    if enc.dim != bank.d:
        raise ValidationError(f"encoder dim {enc.dim} != bank dim {bank.d}")
    out = []
    for k, c in enumerate(bank.classes):
        rows = []
        for i, e in enumerate(c.expert_concepts):
            if e.embedding is not None:
                rows.append(encode_precomputed(e.embedding, tensors[expert_delta_name(k, i)]))
            else:
                rows.append(encode_concept(tokenize(e.text, enc.vocab_size), tensors[expert_ctx_name(k)], enc))
        for j in range(c.n_data_driven):
            rows.append(encode_concept([], tensors[data_driven_name(k, j)], enc))
        if c.prompt_embedding is not None:
            prompt = encode_precomputed(c.prompt_embedding, tensors[prompt_delta_name(k)])
        else:
            prompt = encode_concept(tokenize(c.class_prompt, enc.vocab_size), tensors[prompt_ctx_name(k)], enc)
        concepts = dk.vstack(rows) if len(rows) > 1 else rows[0]
        out.append(ClassEmbeddings(concepts, prompt, rows))
    return out
