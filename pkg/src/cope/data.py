"""Three-domain product corpora.

A corpus holds samples from three media domains: product pages (P, one
frame plus title tokens), short videos (V, multi-frame) and live streams
(L, multi-frame with distractor frames mixed in).  Synthetic corpora are
rendered deterministically from integer keys so a manifest can either
inline the render recipe or point at a raw tensor file.

File formats
------------
Manifest: JSONL, UTF-8, one object per sample with fields
    {sample_id, product_id, category_id, domain, frames_ref,
     text_tokens?, gen_seed?}
sorted by sample_id; unknown fields are rejected.

Tensor file ("CPTF"): magic ``CPTF``, u16 version=1, u16 reserved=0,
u32 T, u32 H, u32 W, u32 C, then T*H*W*C float32 little-endian row-major.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ManifestError, ShapeError


class Domain(str, Enum):
    """Media domain of a sample: product page, short video, live stream."""

    P = "P"
    V = "V"
    L = "L"


DOMAINS = (Domain.P, Domain.V, Domain.L)

# Render amplitudes: product pattern signal, per-sample smooth gradient
# nuisance, and the scale multiplying cfg.noise_level.  The nuisance keeps
# raw-pixel (and untrained-feature) similarity a weak product cue while the
# pattern remains perfectly discriminative for a trained model.
_PATTERN_AMP = 0.30
_GRADIENT_AMP = 0.05
_NOISE_AMP = 0.15
_PRODUCT_BIAS_AMP = 0.06
_PATTERN_GRID = 4

_TENSOR_MAGIC = b"CPTF"
_TENSOR_HEADER = struct.Struct("<4sHHIIII")

_MANIFEST_FIELDS = {
    "sample_id",
    "product_id",
    "category_id",
    "domain",
    "frames_ref",
    "text_tokens",
    "gen_seed",
}


@dataclass(frozen=True)
class RenderRef:
    """Inline recipe regenerating a synthetic sample's frames exactly."""

    product_key: int
    sample_key: int
    frames: int
    height: int
    width: int
    noise_level: float
    distractor_fraction: float

    def encode(self) -> str:
        return (
            f"synth:v1:p={self.product_key}:s={self.sample_key}"
            f":t={self.frames}:h={self.height}:w={self.width}"
            f":n={self.noise_level!r}:d={self.distractor_fraction!r}"
        )

    @classmethod
    def decode(cls, ref: str) -> "RenderRef":
        parts = ref.split(":")
        if len(parts) != 9 or parts[0] != "synth" or parts[1] != "v1":
            raise ManifestError(f"unrecognized synthetic frames_ref: {ref!r}")
        kv = dict(p.split("=", 1) for p in parts[2:])
        return cls(
            product_key=int(kv["p"]),
            sample_key=int(kv["s"]),
            frames=int(kv["t"]),
            height=int(kv["h"]),
            width=int(kv["w"]),
            noise_level=float(kv["n"]),
            distractor_fraction=float(kv["d"]),
        )


def _pattern_image(key: int, height: int, width: int) -> np.ndarray:
    """Tile a product-specific color grid up to full resolution."""
    rng = np.random.default_rng(np.random.SeedSequence([key, 1]))
    grid = rng.uniform(-1.0, 1.0, size=(_PATTERN_GRID, _PATTERN_GRID, 3))
    ry = height // _PATTERN_GRID
    rx = width // _PATTERN_GRID
    return np.kron(grid, np.ones((ry, rx, 1)))


def render_frames(ref: RenderRef) -> np.ndarray:
    """Render the frame stack for one sample; pure function of ``ref``."""
    h, w, t = ref.height, ref.width, ref.frames
    pattern = _pattern_image(ref.product_key, h, w)
    bias_rng = np.random.default_rng(np.random.SeedSequence([ref.product_key, 5]))
    product_bias = _PRODUCT_BIAS_AMP * bias_rng.uniform(-1.0, 1.0, size=3)
    rng = np.random.default_rng(np.random.SeedSequence([ref.sample_key, 2]))
    ys = np.linspace(-1.0, 1.0, h)[:, None, None]
    xs = np.linspace(-1.0, 1.0, w)[None, :, None]
    frames = np.empty((t, h, w, 3), dtype=np.float64)
    for i in range(t):
        base = pattern
        if ref.distractor_fraction > 0 and rng.random() < ref.distractor_fraction:
            distractor_key = int(rng.integers(0, 2**62))
            base = _pattern_image(distractor_key, h, w)
        # jitter in whole pattern cells: shifts permute the tiling rather
        # than blending cell boundaries, so the cell multiset is invariant
        dy = int(rng.integers(0, _PATTERN_GRID)) * (h // _PATTERN_GRID)
        dx = int(rng.integers(0, _PATTERN_GRID)) * (w // _PATTERN_GRID)
        shifted = np.roll(base, (dy, dx), axis=(0, 1))
        coef = rng.uniform(-1.0, 1.0, size=(3, 3))
        gradient = coef[0] + coef[1] * ys + coef[2] * xs
        img = 0.5 + product_bias + _PATTERN_AMP * shifted + _GRADIENT_AMP * gradient
        if ref.noise_level > 0:
            noise = rng.uniform(-1.0, 1.0, size=(h, w, 3))
            img = img + _NOISE_AMP * ref.noise_level * noise
        frames[i] = np.clip(img, 0.0, 1.0)
    return frames.astype(np.float32)


@dataclass(eq=False)
class Sample:
    """One media item with its product/category labels and raw frames."""

    sample_id: str
    product_id: str
    category_id: int
    domain: Domain
    frames: np.ndarray
    text_tokens: Optional[list[int]] = None
    gen_seed: Optional[int] = None
    frames_ref: Optional[str] = None

    def __post_init__(self) -> None:
        if self.frames.ndim != 4 or self.frames.shape[3] != 3:
            raise ShapeError(
                f"sample {self.sample_id}: frames must be T,H,W,3, "
                f"got {self.frames.shape}"
            )
        if self.frames.shape[0] < 1:
            raise ShapeError(f"sample {self.sample_id}: needs at least one frame")
        if self.domain is Domain.P and self.frames.shape[0] != 1:
            raise ShapeError(
                f"sample {self.sample_id}: product pages carry exactly one frame"
            )
        if (self.text_tokens is not None) != (self.domain is Domain.P):
            raise ManifestError(
                f"sample {self.sample_id}: text_tokens present iff domain is P"
            )
        if self.category_id < 0:
            raise ManifestError(f"sample {self.sample_id}: negative category_id")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.product_id == other.product_id
            and self.category_id == other.category_id
            and self.domain == other.domain
            and self.text_tokens == other.text_tokens
            and self.gen_seed == other.gen_seed
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
        )


@dataclass(eq=False)
class Corpus:
    """A list of samples plus product/category indices."""

    samples: list[Sample]
    products: dict[str, dict[Domain, list[Sample]]] = field(init=False)
    categories: dict[int, list[str]] = field(init=False)

    def __post_init__(self) -> None:
        self.samples = sorted(self.samples, key=lambda s: s.sample_id)
        seen: set[str] = set()
        self.products = {}
        by_category: dict[int, set[str]] = {}
        for s in self.samples:
            if s.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {s.sample_id!r}")
            seen.add(s.sample_id)
            per_domain = self.products.setdefault(
                s.product_id, {d: [] for d in DOMAINS}
            )
            per_domain[s.domain].append(s)
            by_category.setdefault(s.category_id, set()).add(s.product_id)
        self.categories = {c: sorted(p) for c, p in sorted(by_category.items())}

    @property
    def complete_triples(self) -> bool:
        return all(
            all(per_domain[d] for d in DOMAINS)
            for per_domain in self.products.values()
        )

    @property
    def product_ids(self) -> list[str]:
        return sorted(self.products)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return self.samples == other.samples

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class GenConfig:
    """Knobs for the synthetic corpus generator."""

    n_products: int
    n_categories: int
    pages_per_product: int = 2
    videos_per_product: int = 2
    lives_per_product: int = 2
    video_frames: int = 8
    live_frames: int = 8
    image_size: int = 32
    vocab_size: int = 200
    text_len: int = 16
    noise_level: float = 0.1
    distractor_fraction: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        positive = [
            "n_products",
            "n_categories",
            "pages_per_product",
            "videos_per_product",
            "lives_per_product",
            "video_frames",
            "live_frames",
            "image_size",
            "vocab_size",
            "text_len",
        ]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ConfigError(f"noise_level must be in [0,1], got {self.noise_level}")
        if not 0.0 <= self.distractor_fraction <= 1.0:
            raise ConfigError(
                f"distractor_fraction must be in [0,1], got {self.distractor_fraction}"
            )
        # Token layout below needs room for pad + stopwords + product tokens.
        if self.vocab_size < 32:
            raise ConfigError(f"vocab_size must be >= 32, got {self.vocab_size}")


def _key(*entropy: int) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1, np.uint64)[0])


def product_title_tokens(product_key: int, vocab_size: int, count: int = 8) -> list[int]:
    """Token ids a product's titles draw from (ids above the stopword range)."""
    stop_end = 1 + vocab_size // 10
    rng = np.random.default_rng(np.random.SeedSequence([product_key, 3]))
    return sorted(
        int(t) for t in rng.choice(np.arange(stop_end, vocab_size), count, replace=False)
    )


def _title(sample_key: int, product_key: int, cfg: GenConfig) -> list[int]:
    stop_end = 1 + cfg.vocab_size // 10
    vocab = product_title_tokens(product_key, cfg.vocab_size)
    rng = np.random.default_rng(np.random.SeedSequence([sample_key, 4]))
    tokens = []
    for _ in range(cfg.text_len):
        if rng.random() < 0.3:
            tokens.append(int(rng.integers(1, stop_end)))
        else:
            tokens.append(int(rng.choice(vocab)))
    return tokens


def generate_synthetic_corpus(cfg: GenConfig) -> Corpus:
    """Deterministically generate a complete-triples three-domain corpus."""
    cfg.validate()
    per_domain = {
        Domain.P: (cfg.pages_per_product, 1, 0.0),
        Domain.V: (cfg.videos_per_product, cfg.video_frames, 0.0),
        Domain.L: (cfg.lives_per_product, cfg.live_frames, cfg.distractor_fraction),
    }
    samples = []
    for i in range(cfg.n_products):
        product_id = f"p{i:05d}"
        category_id = i % cfg.n_categories
        product_key = _key(cfg.seed, 11, i)
        for d_idx, domain in enumerate(DOMAINS):
            count, frames, distractor = per_domain[domain]
            for j in range(count):
                sample_key = _key(cfg.seed, 13, i, d_idx, j)
                ref = RenderRef(
                    product_key=product_key,
                    sample_key=sample_key,
                    frames=frames,
                    height=cfg.image_size,
                    width=cfg.image_size,
                    noise_level=cfg.noise_level,
                    distractor_fraction=distractor,
                )
                tokens = (
                    _title(sample_key, product_key, cfg)
                    if domain is Domain.P
                    else None
                )
                samples.append(
                    Sample(
                        sample_id=f"{product_id}-{domain.value}-{j:03d}",
                        product_id=product_id,
                        category_id=category_id,
                        domain=domain,
                        frames=render_frames(ref),
                        text_tokens=tokens,
                        gen_seed=sample_key,
                        frames_ref=ref.encode(),
                    )
                )
    return Corpus(samples)


def split_corpus(corpus: Corpus, holdout_per_domain: int = 1) -> tuple[Corpus, Corpus]:
    """Split into train/holdout, taking the last samples per product+domain.

    Both halves stay complete-triples; raises if a product lacks enough
    samples in some domain to leave at least one on each side.
    """
    train, held = [], []
    for product_id in corpus.product_ids:
        for domain in DOMAINS:
            group = sorted(
                corpus.products[product_id][domain], key=lambda s: s.sample_id
            )
            if len(group) <= holdout_per_domain:
                raise ConfigError(
                    f"product {product_id} has only {len(group)} {domain.value} "
                    f"samples; cannot hold out {holdout_per_domain}"
                )
            train.extend(group[:-holdout_per_domain])
            held.extend(group[-holdout_per_domain:])
    return Corpus(train), Corpus(held)


# ---------------------------------------------------------------------------
# Tensor file I/O


def write_tensor_file(frames: np.ndarray, path: Path) -> None:
    if frames.ndim != 4:
        raise ShapeError(f"tensor file stores T,H,W,C arrays, got {frames.shape}")
    t, h, w, c = frames.shape
    with open(path, "wb") as f:
        f.write(_TENSOR_HEADER.pack(_TENSOR_MAGIC, 1, 0, t, h, w, c))
        f.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_tensor_file(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(_TENSOR_HEADER.size)
        if len(header) < _TENSOR_HEADER.size:
            raise ManifestError(f"{path}: truncated tensor header")
        magic, version, _, t, h, w, c = _TENSOR_HEADER.unpack(header)
        if magic != _TENSOR_MAGIC:
            raise ManifestError(f"{path}: bad magic {magic!r}")
        if version != 1:
            raise ManifestError(f"{path}: unsupported version {version}")
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != t * h * w * c:
        raise ManifestError(f"{path}: payload size mismatch")
    return data.reshape(t, h, w, c).copy()


# ---------------------------------------------------------------------------
# Manifest I/O


def save_manifest(corpus: Corpus, path: Path) -> None:
    """Write the corpus as sorted JSONL; external frames go to a sibling dir."""
    path = Path(path)
    frames_dir = path.parent / (path.stem + "_frames")
    lines = []
    for s in corpus.samples:  # already sample_id ascending
        ref = s.frames_ref
        if ref is None:
            frames_dir.mkdir(parents=True, exist_ok=True)
            rel = f"{frames_dir.name}/{s.sample_id}.cptf"
            write_tensor_file(s.frames, path.parent / rel)
            ref = rel
        obj = {
            "sample_id": s.sample_id,
            "product_id": s.product_id,
            "category_id": s.category_id,
            "domain": s.domain.value,
            "frames_ref": ref,
        }
        if s.text_tokens is not None:
            obj["text_tokens"] = s.text_tokens
        if s.gen_seed is not None:
            obj["gen_seed"] = s.gen_seed
        lines.append(json.dumps(obj, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_line(obj: dict, line_no: int, base_dir: Path) -> Sample:
    unknown = set(obj) - _MANIFEST_FIELDS
    if unknown:
        raise ManifestError(f"line {line_no}: unknown fields {sorted(unknown)}")
    missing = {"sample_id", "product_id", "category_id", "domain", "frames_ref"} - set(obj)
    if missing:
        raise ManifestError(f"line {line_no}: missing fields {sorted(missing)}")
    try:
        domain = Domain(obj["domain"])
    except ValueError:
        raise ManifestError(
            f"line {line_no}: domain must be one of P/V/L, got {obj['domain']!r}"
        ) from None
    ref = obj["frames_ref"]
    if ref.startswith("synth:"):
        frames = render_frames(RenderRef.decode(ref))
    else:
        frames = read_tensor_file(base_dir / ref)
    return Sample(
        sample_id=obj["sample_id"],
        product_id=obj["product_id"],
        category_id=obj["category_id"],
        domain=domain,
        frames=frames,
        text_tokens=obj.get("text_tokens"),
        gen_seed=obj.get("gen_seed"),
        frames_ref=ref,
    )


def load_manifest(path: Path) -> Corpus:
    path = Path(path)
    samples = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"line {line_no}: invalid JSON: {e}") from None
            sample = _parse_line(obj, line_no, path.parent)
            if sample.sample_id in seen:
                raise ManifestError(
                    f"line {line_no}: duplicate sample_id {sample.sample_id!r}"
                )
            seen.add(sample.sample_id)
            samples.append(sample)
    return Corpus(samples)


# ---------------------------------------------------------------------------
# Patchification


def patchify(frame: np.ndarray, patch_size: int) -> np.ndarray:
    """Split H,W,C into row-major non-overlapping patches of p*p*C values."""
    if frame.ndim != 3:
        raise ShapeError(f"expected H,W,C frame, got shape {frame.shape}")
    h, w, c = frame.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(
            f"frame {h}x{w} not divisible by patch size {patch_size}"
        )
    gh, gw = h // patch_size, w // patch_size
    patches = frame.reshape(gh, patch_size, gw, patch_size, c)
    return patches.transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch_size * patch_size * c)


def unpatchify(patches: np.ndarray, height: int, width: int, patch_size: int) -> np.ndarray:
    """Exact inverse of :func:`patchify`."""
    gh, gw = height // patch_size, width // patch_size
    m, flat = patches.shape
    c = flat // (patch_size * patch_size)
    if m != gh * gw or flat != patch_size * patch_size * c:
        raise ShapeError(f"patch array {patches.shape} inconsistent with target shape")
    frame = patches.reshape(gh, gw, patch_size, patch_size, c)
    return frame.transpose(0, 2, 1, 3, 4).reshape(height, width, c)
