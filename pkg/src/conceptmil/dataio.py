"""Slide bag files, manifests and the planted-concept synthetic dataset.

Bag file layout (little-endian)::

    b"CPB1"
    u32 n, u32 d, u32 label
    u16 len + UTF-8 slide_id
    u16 len + UTF-8 patient_id
    n*d f32 embeddings, row-major
    n*2 u32 coords (grid_x, grid_y)
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

BAG_MAGIC = b"CPB1"
_HEAD = struct.Struct("<4sIII")


@dataclass
class SlideBag:
    slide_id: str
    patient_id: str
    label: int
    embeddings: np.ndarray  # n x d float32
    coords: np.ndarray      # n x 2 uint32

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        self.coords = np.asarray(self.coords, dtype=np.uint32).reshape(-1, 2)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ValidationError(f"bag {self.slide_id!r} needs an n x d embedding matrix with n >= 1")
        if self.coords.shape[0] != self.embeddings.shape[0]:
            raise ValidationError(
                f"bag {self.slide_id!r}: {self.coords.shape[0]} coords for {self.embeddings.shape[0]} patches")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValidationError(f"bag {self.slide_id!r} has non-finite embeddings")
        if self.label < 0:
            raise ValidationError(f"bag {self.slide_id!r} has negative label")

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    def features(self, normalize: bool = True) -> np.ndarray:
        """Embeddings as float64, L2-normalized per row unless disabled."""
        z = self.embeddings.astype(np.float64)
        if normalize:
            norms = np.linalg.norm(z, axis=1, keepdims=True)
            if np.any(norms == 0):
                raise ValidationError(f"bag {self.slide_id!r} has an all-zero patch embedding")
            z = z / norms
        return z

    def permuted(self, order) -> "SlideBag":
        order = np.asarray(order)
        return SlideBag(self.slide_id, self.patient_id, self.label, self.embeddings[order], self.coords[order])


def encode_bag(bag: SlideBag) -> bytes:
    sid = bag.slide_id.encode("utf-8")
    pid = bag.patient_id.encode("utf-8")
    if len(sid) > 0xFFFF or len(pid) > 0xFFFF:
        raise ValidationError("slide/patient id longer than 65535 bytes")
    parts = [
        _HEAD.pack(BAG_MAGIC, bag.n, bag.d, bag.label),
        struct.pack("<H", len(sid)), sid,
        struct.pack("<H", len(pid)), pid,
        bag.embeddings.astype("<f4").tobytes(),
        bag.coords.astype("<u4").tobytes(),
    ]
    return b"".join(parts)


def decode_bag(buf: bytes, where: str = "<bytes>") -> SlideBag:
    def need(pos, k, what):
        if pos + k > len(buf):
            raise ParseError(f"{where}: truncated while reading {what}")

    need(0, _HEAD.size, "header")
    magic, n, d, label = _HEAD.unpack_from(buf, 0)
    if magic != BAG_MAGIC:
        raise ParseError(f"{where}: bad magic {magic!r}")
    if n < 1 or d < 1:
        raise ParseError(f"{where}: invalid dims n={n} d={d}")
    pos = _HEAD.size
    ids = []
    for what in ("slide_id", "patient_id"):
        need(pos, 2, what)
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(pos, ln, what)
        ids.append(buf[pos:pos + ln].decode("utf-8"))
        pos += ln
    need(pos, 4 * n * d, "embeddings")
    emb = np.frombuffer(buf, dtype="<f4", count=n * d, offset=pos).reshape(n, d)
    pos += 4 * n * d
    need(pos, 8 * n, "coords")
    coords = np.frombuffer(buf, dtype="<u4", count=2 * n, offset=pos).reshape(n, 2)
    pos += 8 * n
    if pos != len(buf):
        raise ParseError(f"{where}: {len(buf) - pos} trailing bytes")
    return SlideBag(ids[0], ids[1], label, emb.astype(np.float32), coords.astype(np.uint32))


def write_bag(bag: SlideBag, path) -> None:
    Path(path).write_bytes(encode_bag(bag))


def read_bag(path) -> SlideBag:
    path = Path(path)
    return decode_bag(path.read_bytes(), str(path))


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    slide_id: str
    patient_id: str
    label: int


@dataclass
class Manifest:
    classes: list[str]
    slides: list[ManifestEntry]
    root: Path = Path(".")

    def __post_init__(self):
        ids = [s.slide_id for s in self.slides]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate slide ids in manifest")
        for s in self.slides:
            if not 0 <= s.label < len(self.classes):
                raise ValidationError(f"slide {s.slide_id!r} label {s.label} outside {len(self.classes)} classes")

    def bag_path(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def load_bags(self) -> list[SlideBag]:
        bags = []
        for entry in self.slides:
            bag = read_bag(self.bag_path(entry))
            if (bag.slide_id, bag.patient_id, bag.label) != (entry.slide_id, entry.patient_id, entry.label):
                raise ValidationError(f"bag file {entry.path} disagrees with its manifest entry")
            bags.append(bag)
        return bags

    def to_json(self) -> dict:
        return {"classes": list(self.classes), "slides": [asdict(s) for s in self.slides]}


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        slides = [ManifestEntry(str(s["path"]), str(s["slide_id"]), str(s["patient_id"]), int(s["label"]))
                  for s in doc["slides"]]
        classes = [str(c) for c in doc["classes"]]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: malformed manifest ({exc!r})") from exc
    return Manifest(classes, slides, path.parent)


def save_manifest(manifest: Manifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2) + "\n", encoding="utf-8")


# -- synthetic planted-concept data ---------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Planted-concept dataset parameters.

    Each class owns ``factors`` unit directions. A class-c bag holds
    ``ceil(rho * n)`` signal patches (a planted direction of class c plus
    Gaussian noise of std ``sigma`` per coordinate, renormalized) and
    isotropic noise patches otherwise. ``factor_mode`` chooses how signal
    patches pick directions: ``round_robin`` cycles through all of the
    class's factors, ``per_bag`` uses a single factor drawn per bag.
    """

    classes: int = 2
    d: int = 64
    factors: int = 2
    bags_per_class: int = 40
    n_min: int = 20
    n_max: int = 60
    rho: float = 0.3
    sigma: float = 0.2
    slides_per_patient: int = 1
    factor_mode: str = "round_robin"
    expert_factors: int = 1
    n_data_driven: int = 4

    def __post_init__(self):
        if self.classes < 2 or self.d < 1 or self.factors < 1 or self.bags_per_class < 1:
            raise ValidationError("synth spec needs classes >= 2, d >= 1, factors >= 1, bags_per_class >= 1")
        if not 1 <= self.n_min <= self.n_max:
            raise ValidationError("synth spec needs 1 <= n_min <= n_max")
        if not 0.0 < self.rho <= 1.0:
            raise ValidationError("rho must lie in (0, 1]")
        if self.rho * self.n_min < 1:
            raise ValidationError("rho * n_min must be >= 1")
        if self.sigma < 0:
            raise ValidationError("sigma must be >= 0")
        if self.slides_per_patient < 1:
            raise ValidationError("slides_per_patient must be >= 1")
        if self.factor_mode not in ("round_robin", "per_bag"):
            raise ValidationError("factor_mode must be 'round_robin' or 'per_bag'")
        if not 0 <= self.expert_factors <= self.factors:
            raise ValidationError("expert_factors must lie in [0, factors]")
        if self.n_data_driven < 0:
            raise ValidationError("n_data_driven must be >= 0")


def planted_directions(spec: SynthSpec, seed: int) -> np.ndarray:
    """classes x factors x d array of unit planted directions."""
    rng = np.random.default_rng([seed, 0xD1])
    dirs = rng.standard_normal((spec.classes, spec.factors, spec.d))
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@dataclass
class SynthBag:
    bag: SlideBag
    signal_mask: np.ndarray   # n bools
    factor_index: np.ndarray  # n ints, -1 for noise patches


def synth_bags(spec: SynthSpec, seed: int) -> tuple[list[SynthBag], np.ndarray]:
    dirs = planted_directions(spec, seed)
    rng = np.random.default_rng([seed, 0xBA6])
    out = []
    for c in range(spec.classes):
        for b in range(spec.bags_per_class):
            n = int(rng.integers(spec.n_min, spec.n_max + 1))
            n_sig = math.ceil(spec.rho * n)
            if spec.factor_mode == "round_robin":
                fidx = np.arange(n_sig) % spec.factors
            else:
                fidx = np.full(n_sig, int(rng.integers(spec.factors)))
            sig = dirs[c, fidx] + spec.sigma * rng.standard_normal((n_sig, spec.d))
            noise = rng.standard_normal((n - n_sig, spec.d))
            z = np.vstack([_unit_rows(sig), _unit_rows(noise)]) if n > n_sig else _unit_rows(sig)
            is_signal = np.arange(n) < n_sig
            factor_index = np.concatenate([fidx, np.full(n - n_sig, -1)])
            order = rng.permutation(n)
            side = math.ceil(math.sqrt(n))
            coords = np.stack([np.arange(n) % side, np.arange(n) // side], axis=1)
            idx = c * spec.bags_per_class + b
            bag = SlideBag(
                slide_id=f"synth-{c}-{b:03d}",
                patient_id=f"patient-{idx // spec.slides_per_patient:03d}",
                label=c,
                embeddings=z[order],
                coords=coords,
            )
            out.append(SynthBag(bag, is_signal[order], factor_index[order]))
    return out, dirs


def synth_bank(spec: SynthSpec, dirs: np.ndarray) -> dict:
    """Bank document whose expert concepts are the first ``expert_factors`` planted directions.

    Class prompts carry the normalized mean of all of the class's directions.
    """
    classes = []
    for c in range(spec.classes):
        prompt = dirs[c].mean(axis=0)
        prompt = prompt / np.linalg.norm(prompt)
        classes.append({
            "name": f"class_{c}",
            "class_prompt": f"slide of synthetic class {c}",
            "class_prompt_embedding": [float(x) for x in prompt],
            "expert_concepts": [
                {
                    "text": f"planted factor {f} of class {c}",
                    "source": {"title": "synthetic planted-concept generator", "locator": f"factor:{c}:{f}"},
                    "embedding": [float(x) for x in dirs[c, f]],
                }
                for f in range(spec.expert_factors)
            ],
            "n_data_driven": spec.n_data_driven,
        })
    return {"task": "synthetic planted concepts", "d": spec.d, "classes": classes}


def synth_generate(spec: SynthSpec, seed: int, out_dir) -> Manifest:
    """Write bags, ``manifest.json``, ``bank.json`` and ``directions.npy`` into ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "bags").mkdir(parents=True, exist_ok=True)
    bags, dirs = synth_bags(spec, seed)
    entries = []
    for sb in bags:
        rel = f"bags/{sb.bag.slide_id}.cpb"
        write_bag(sb.bag, out_dir / rel)
        entries.append(ManifestEntry(rel, sb.bag.slide_id, sb.bag.patient_id, sb.bag.label))
    manifest = Manifest([f"class_{c}" for c in range(spec.classes)], entries, out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    (out_dir / "bank.json").write_text(json.dumps(synth_bank(spec, dirs), indent=2) + "\n", encoding="utf-8")
    np.save(out_dir / "directions.npy", dirs.astype("<f8"))
    return manifest
