"""Synthetic fine-grained images with known parts, boxes and background bias.

Each class is a 2x2 arrangement of small part glyphs on a gray plate (the
object). Only the glyph layout carries the class. The rest of the image is
a gray striped background texture whose angle and period encode its id. In the training split the texture
agrees with the class with probability ``bias_strength`` and is uniform at
random otherwise; the test split is always uniform, so a model that learns
the background shortcut loses accuracy at test time.

Every sample draws from its own generator seeded by (seed, split, index),
so samples can be generated in any order or in parallel with identical
results.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .tensor.serialize import FormatError, decode_array, encode_array

NUM_GLYPHS = 6
GLYPH_SIZE = 5
SLOT = 7
OBJECT_SIZE = 2 * SLOT
NOISE_SIGMA = 0.04
TEXTURE_LEVEL = 0.9
STRIPE_CONTRAST = 0.15

_SPLIT_TAGS = {"train": 0, "test": 1, "retrieval": 2}


@dataclasses.dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 20
    samples_per_class: int = 100
    test_per_class: int | None = None
    image_size: int = 32
    bias_strength: float = 0.0
    num_identities: int = 0
    views_per_identity: int = 4
    retrieval_train_fraction: float = 0.5
    backbone_depth: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        if self.test_per_class is not None and self.test_per_class < 1:
            raise ValueError("test_per_class must be positive")
        if not 0.0 <= self.bias_strength <= 1.0:
            raise ValueError(f"bias_strength must lie in [0, 1], got {self.bias_strength}")
        if self.image_size < OBJECT_SIZE:
            raise ValueError(f"image_size must be at least {OBJECT_SIZE}")
        div = 2 ** self.backbone_depth
        if self.image_size % div:
            raise ValueError(f"image_size {self.image_size} must be divisible by {div} (backbone depth {self.backbone_depth})")
        if self.num_identities and (self.num_identities < 4 or self.views_per_identity < 2):
            raise ValueError("retrieval mode needs num_identities >= 4 and views_per_identity >= 2")
        if not 0.0 < self.retrieval_train_fraction < 1.0:
            raise ValueError("retrieval_train_fraction must be in (0, 1)")

    @property
    def test_count(self) -> int:
        return self.samples_per_class if self.test_per_class is None else self.test_per_class

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class SyntheticSample:
    image: np.ndarray  # (3, S, S) float64 in [0, 1]
    class_label: int
    object_bbox: tuple[int, int, int, int]  # x0, y0, x1, y1, half-open pixel ranges
    part_centers: list[tuple[float, float]]
    background_id: int
    identity_label: int | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, SyntheticSample):
            return NotImplemented
        return (
            self.image.shape == other.image.shape
            and self.image.tobytes() == other.image.tobytes()
            and self.class_label == other.class_label
            and tuple(self.object_bbox) == tuple(other.object_bbox)
            and [tuple(p) for p in self.part_centers] == [tuple(p) for p in other.part_centers]
            and self.background_id == other.background_id
            and self.identity_label == other.identity_label
        )


def _glyph(kind: int) -> np.ndarray:
    g = np.zeros((GLYPH_SIZE, GLYPH_SIZE))
    if kind == 0:  # filled square
        g[:] = 1
    elif kind == 1:  # plus
        g[2, :] = 1
        g[:, 2] = 1
    elif kind == 2:  # x
        idx = np.arange(GLYPH_SIZE)
        g[idx, idx] = 1
        g[idx, GLYPH_SIZE - 1 - idx] = 1
    elif kind == 3:  # ring
        g[[0, -1], :] = 1
        g[:, [0, -1]] = 1
    elif kind == 4:  # horizontal bars
        g[[0, 2, 4], :] = 1
    elif kind == 5:  # vertical bars
        g[:, [0, 2, 4]] = 1
    else:
        raise ValueError(f"unknown glyph {kind}")
    return g


GLYPHS = np.stack([_glyph(k) for k in range(NUM_GLYPHS)])
# one ink per glyph kind
GLYPH_INKS = np.array(
    [[0.8, 0.1, 0.1], [0.1, 0.6, 0.1], [0.1, 0.2, 0.8], [0.8, 0.7, 0.1], [0.6, 0.1, 0.7], [0.05, 0.05, 0.05]]
)
COLOR_GLYPHS = True


def class_codes(num_codes: int, seed: int = 0) -> np.ndarray:
    """Distinct 4-glyph layouts, pairwise differing in at least two slots."""
    rng = np.random.default_rng([int(seed), 7919])
    codes: list[np.ndarray] = []
    attempts = 0
    while len(codes) < num_codes:
        attempts += 1
        if attempts > 200_000:
            raise ValueError(f"cannot build {num_codes} distinct glyph layouts")
        c = rng.integers(0, NUM_GLYPHS, size=4)
        if all((c != o).sum() >= 2 for o in codes):
            codes.append(c)
    return np.stack(codes)


def texture(texture_id: int, size: int) -> np.ndarray:
    """Gray stripes whose angle and period depend on the id.

    The stripes carry no color, so color stays a property of the glyphs.
    """
    angle = np.pi * ((texture_id * 0.618034) % 1.0)
    period = 3.0 + (texture_id % 4)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = (np.cos(angle) * xx + np.sin(angle) * yy) * (2 * np.pi / period)
    stripes = 0.5 + 0.5 * np.sin(phase)
    shade = 1.0 - STRIPE_CONTRAST + STRIPE_CONTRAST * stripes
    return np.repeat((TEXTURE_LEVEL * shade)[None], 3, axis=0)


def render(
    code: Sequence[int],
    background_id: int,
    size: int,
    rng: np.random.Generator,
    glyph_color: np.ndarray | None = None,
) -> tuple[np.ndarray, tuple[int, int, int, int], list[tuple[float, float]]]:
    img = texture(background_id, size)
    x0 = int(rng.integers(0, size - OBJECT_SIZE + 1))
    y0 = int(rng.integers(0, size - OBJECT_SIZE + 1))
    plate = 0.5 + rng.uniform(-0.05, 0.05)
    img[:, y0 : y0 + OBJECT_SIZE, x0 : x0 + OBJECT_SIZE] = plate
    centers = []
    off = (SLOT - GLYPH_SIZE) // 2
    for slot, kind in enumerate(code):
        sy = y0 + (slot // 2) * SLOT + off
        sx = x0 + (slot % 2) * SLOT + off
        mask = GLYPHS[kind] > 0
        region = img[:, sy : sy + GLYPH_SIZE, sx : sx + GLYPH_SIZE]
        if glyph_color is not None:
            ink = glyph_color
        else:
            ink = GLYPH_INKS[kind] if COLOR_GLYPHS else GLYPH_INKS[-1]
        region[:, mask] = ink[:, None]
        centers.append((sx + GLYPH_SIZE / 2.0, sy + GLYPH_SIZE / 2.0))
    img = img + rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    return img, (x0, y0, x0 + OBJECT_SIZE, y0 + OBJECT_SIZE), centers


def _sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), _SPLIT_TAGS[split], int(index)])


def _classification_sample(spec: DatasetSpec, codes: np.ndarray, split: str, index: int, label: int) -> SyntheticSample:
    rng = _sample_rng(spec.seed, split, index)
    k = spec.num_classes
    biased = split == "train" and rng.random() < spec.bias_strength
    bg = label if biased else int(rng.integers(0, k))
    img, bbox, centers = render(codes[label], bg, spec.image_size, rng)
    return SyntheticSample(img, label, bbox, centers, bg)


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def generate_dataset(spec: DatasetSpec, threads: int = 1) -> tuple[list[SyntheticSample], list[SyntheticSample]]:
    """Balanced train/test splits; labels cycle so every class is equally represented."""
    spec.validate()
    codes = class_codes(spec.num_classes, spec.seed)
    k = spec.num_classes
    n_train = k * spec.samples_per_class
    n_test = k * spec.test_count
    train = _map(lambda i: _classification_sample(spec, codes, "train", i, i % k), range(n_train), threads)
    test = _map(lambda i: _classification_sample(spec, codes, "test", i, i % k), range(n_test), threads)
    return train, test


def make_retrieval_split(
    spec: DatasetSpec, threads: int = 1
) -> tuple[list[SyntheticSample], list[SyntheticSample], list[SyntheticSample]]:
    """(train, query, gallery) with disjoint train/test identities.

    Each identity has its own glyph layout and ink color; views jitter the
    position, plate brightness, ink color and background. The first view of
    each test identity is its query, the remaining views form the gallery.
    """
    spec.validate()
    if spec.num_identities < 4 or spec.views_per_identity < 2:
        raise ValueError("retrieval split needs num_identities >= 4 and views_per_identity >= 2")
    n_id, views = spec.num_identities, spec.views_per_identity
    codes = class_codes(n_id, spec.seed + 1)
    id_rng = np.random.default_rng([int(spec.seed), 104729])
    inks = id_rng.uniform(0.0, 0.6, size=(n_id, 3))
    order = id_rng.permutation(n_id)
    n_train = min(max(round(n_id * spec.retrieval_train_fraction), 2), n_id - 2)
    train_ids = {int(i) for i in order[:n_train]}
    num_bg = max(spec.num_classes, 2)

    def make(flat: int) -> SyntheticSample:
        ident = flat // views
        rng = _sample_rng(spec.seed, "retrieval", flat)
        bg = int(rng.integers(0, num_bg))
        ink = np.clip(inks[ident] + rng.normal(0.0, 0.03, size=3), 0.0, 1.0)
        img, bbox, centers = render(codes[ident], bg, spec.image_size, rng, glyph_color=ink)
        return SyntheticSample(img, ident, bbox, centers, bg, identity_label=ident)

    samples = _map(make, range(n_id * views), threads)
    train, query, gallery = [], [], []
    for s in samples:
        ident = s.identity_label
        if ident in train_ids:
            train.append(s)
        elif len(query) == 0 or query[-1].identity_label != ident:
            query.append(s)
        else:
            gallery.append(s)
    return train, query, gallery


def stack_images(samples: Sequence[SyntheticSample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


# ---------------------------------------------------------------- file format

DATASET_MAGIC = b"CALD"
DATASET_VERSION = 1
_RECORD = struct.Struct("<8q")


def _encode_sample(s: SyntheticSample) -> bytes:
    ident = -1 if s.identity_label is None else int(s.identity_label)
    head = _RECORD.pack(int(s.class_label), ident, *map(int, s.object_bbox), int(s.background_id), len(s.part_centers))
    parts = np.asarray(s.part_centers, dtype="<f8").reshape(-1).tobytes()
    return head + parts + encode_array(s.image)


def dataset_to_bytes(samples: Sequence[SyntheticSample], manifest: dict | None = None) -> bytes:
    meta = dict(manifest or {})
    meta["count"] = len(samples)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(DATASET_MAGIC)
    out.write(struct.pack("<BQ", DATASET_VERSION, len(meta_bytes)))
    out.write(meta_bytes)
    for s in samples:
        out.write(_encode_sample(s))
    return out.getvalue()


def dataset_from_bytes(buf: bytes) -> tuple[list[SyntheticSample], dict]:
    if len(buf) < 13:
        raise FormatError("truncated dataset header", 0)
    if buf[:4] != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {bytes(buf[:4])!r}", 0)
    version, meta_len = struct.unpack_from("<BQ", buf, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    pos = 13
    if pos + meta_len > len(buf):
        raise FormatError("truncated manifest", pos)
    try:
        meta = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt manifest: {e}", pos) from None
    pos += meta_len
    count = meta.get("count")
    if not isinstance(count, int) or count < 0:
        raise FormatError("manifest lacks a valid sample count", 13)
    samples = []
    for i in range(count):
        if pos + _RECORD.size > len(buf):
            raise FormatError(f"truncated record header for sample {i}", pos)
        label, ident, x0, y0, x1, y1, bg, n_parts = _RECORD.unpack_from(buf, pos)
        pos += _RECORD.size
        if n_parts < 0 or pos + 16 * n_parts > len(buf):
            raise FormatError(f"truncated part list for sample {i}", pos)
        parts = np.frombuffer(buf, dtype="<f8", count=2 * n_parts, offset=pos).reshape(n_parts, 2)
        pos += 16 * n_parts
        image, pos = decode_array(buf, pos)
        samples.append(
            SyntheticSample(
                image,
                int(label),
                (int(x0), int(y0), int(x1), int(y1)),
                [(float(a), float(b)) for a, b in parts],
                int(bg),
                None if ident < 0 else int(ident),
            )
        )
    if pos != len(buf):
        raise FormatError("trailing bytes after last sample", pos)
    return samples, meta


def save_dataset(samples: Sequence[SyntheticSample], path, manifest: dict | None = None) -> None:
    Path(path).write_bytes(dataset_to_bytes(samples, manifest))


def load_dataset(path) -> list[SyntheticSample]:
    return dataset_from_bytes(Path(path).read_bytes())[0]


def load_dataset_with_manifest(path) -> tuple[list[SyntheticSample], dict]:
    return dataset_from_bytes(Path(path).read_bytes())
