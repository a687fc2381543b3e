"""A trained (or freshly initialized) model and its checkpoint file.

Checkpoint layout::

    b"CPK1"
    u32 header length
    UTF-8 JSON header (dims, seeds, hyperparameters, bank, concept order,
                       tensor names and shapes)
    little-endian f32 blobs, one per tensor, in header order
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import aggregator as agg
from . import diffkernel as dk
from .conceptbank import ConceptBank, FrozenEncoder, TokenConfig, embed_bank, init_concept_tensors, parse_bank
from .dataio import SlideBag
from .errors import ParseError

CKPT_MAGIC = b"CPK1"
CKPT_VERSION = 1


@dataclass
class Model:
    bank: ConceptBank
    encoder: FrozenEncoder
    config: agg.ModelConfig
    tokens: TokenConfig
    tensors: dict[str, np.ndarray]
    seed: int = 0
    extra: dict | None = None

    @classmethod
    def initialize(cls, bank: ConceptBank, config: agg.ModelConfig, tokens: TokenConfig,
                   seed: int, encoder: FrozenEncoder | None = None, rng: np.random.Generator | None = None):
        encoder = encoder or FrozenEncoder(bank.d, seed=seed)
        rng = rng if rng is not None else np.random.default_rng(seed)
        tensors = init_concept_tensors(bank, encoder, tokens, rng)
        tensors.update(agg.init_adapter_tensors(bank.d, config.hidden(bank.d), rng))
        return cls(bank, encoder, config, tokens, tensors, seed)

    def embed(self, tensors: dict | None = None):
        return embed_bank(self.bank, self.encoder, self.tensors if tensors is None else tensors)

    def forward(self, Z, tensors: dict | None = None, embeddings=None) -> agg.ForwardOutput:
        tensors = self.tensors if tensors is None else tensors
        embeddings = embeddings if embeddings is not None else self.embed(tensors)
        return agg.forward(Z, embeddings, tensors, self.config)

    def predict(self, bag: SlideBag, normalize: bool = True) -> agg.ForwardOutput:
        return self.forward(bag.features(normalize))

    def predict_many(self, bags, normalize: bool = True) -> np.ndarray:
        embeddings = self.embed()
        return np.array([self.forward(b.features(normalize), embeddings=embeddings).probabilities for b in bags])

    def concept_order(self) -> list[list[str]]:
        return [[c.concept_label(i) for i in range(c.m)] for c in self.bank.classes]

    # -- persistence --------------------------------------------------------

    def header(self) -> dict:
        return {
            "format": "conceptmil-checkpoint",
            "version": CKPT_VERSION,
            "dims": {"d": self.bank.d, "classes": self.bank.K,
                     "adapter_hidden": self.config.hidden(self.bank.d)},
            "seed": self.seed,
            "encoder": self.encoder.spec(),
            "model": self.config.to_dict(),
            "tokens": asdict(self.tokens),
            "bank": self.bank.to_json(),
            "concept_order": self.concept_order(),
            "tensors": [{"name": k, "shape": list(v.shape)} for k, v in self.tensors.items()],
            "extra": self.extra or {},
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        blobs = [np.ascontiguousarray(v, dtype="<f4").tobytes() for v in self.tensors.values()]
        return CKPT_MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes, where: str = "<bytes>") -> "Model":
        if len(buf) < 8 or buf[:4] != CKPT_MAGIC:
            raise ParseError(f"{where}: not a checkpoint (bad magic)")
        (hlen,) = struct.unpack_from("<I", buf, 4)
        if 8 + hlen > len(buf):
            raise ParseError(f"{where}: truncated header")
        try:
            head = json.loads(buf[8:8 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"{where}: corrupt header ({exc})") from exc
        if head.get("version") != CKPT_VERSION:
            raise ParseError(f"{where}: unsupported checkpoint version {head.get('version')}")
        pos = 8 + hlen
        tensors = {}
        for t in head["tensors"]:
            shape = tuple(t["shape"])
            count = int(np.prod(shape))
            if pos + 4 * count > len(buf):
                raise ParseError(f"{where}: truncated tensor {t['name']}")
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
            tensors[t["name"]] = arr.astype(np.float64)
            pos += 4 * count
        if pos != len(buf):
            raise ParseError(f"{where}: {len(buf) - pos} trailing bytes")
        bank = parse_bank(head["bank"])
        enc = head["encoder"]
        encoder = FrozenEncoder(enc["dim"], enc["vocab_size"], enc["token_dim"], enc["seed"])
        return cls(bank, encoder, agg.ModelConfig(**head["model"]), TokenConfig(**head["tokens"]),
                   tensors, head["seed"], head.get("extra") or None)

    @classmethod
    def load(cls, path) -> "Model":
        path = Path(path)
        return cls.from_bytes(path.read_bytes(), str(path))


def tracked_tensors(tape: dk.Tape, tensors: dict[str, np.ndarray]) -> dict[str, dk.Matrix]:
    return {name: tape.param(arr, name) for name, arr in tensors.items()}
