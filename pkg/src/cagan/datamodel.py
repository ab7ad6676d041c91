"""Images, composition masks, samples and manifests.

Arrays here are channel-last numpy arrays:

* images are ``(H, W, d)`` float32 in ``[-1, 1]`` (photos d=3, sketches d=1);
* mask sets are ``(H, W, C)`` float32 probabilities, one channel per facial
  component in :data:`COMPONENTS` order, summing to one at every pixel.

On disk, images are 8-bit PNGs and a mask set is one 8-bit grayscale PNG per
component, ``<prefix>.c<k>.png`` with probability ``value / 255``.
"""
from __future__ import annotations

import errno
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError, MaskFileMissing, MaskShapeError, PadError, ShapeError, SplitError

log = logging.getLogger(__name__)

COMPONENTS = ("eyes", "eyebrows", "nose", "lips", "inner_mouth", "skin", "hair", "background")
NUM_COMPONENTS = len(COMPONENTS)
BACKGROUND = COMPONENTS.index("background")
MASK_SUM_TOL = 1e-4

# per-source training counts for the standard CUFS / CUFSF partitions
CUFS_TRAIN_COUNTS = {"cuhk_student": 88, "ar": 80, "xm2vts": 100}
CUFSF_TRAIN_COUNTS = {"cufsf": 250}
SOURCE_ALIASES = {"cuhk": "cuhk_student", "cuhk-student": "cuhk_student", "xm2vts": "xm2vts", "ar": "ar"}


# ---------------------------------------------------------------------------
# image and mask IO
# ---------------------------------------------------------------------------


def to_unit_range(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def read_png(path, channels: int) -> np.ndarray:
    """Read an 8-bit PNG as a ``(H, W, channels)`` uint8 array."""
    mode = {1: "L", 3: "RGB"}[channels]
    with Image.open(path) as im:
        arr = np.asarray(im.convert(mode))
    return arr.reshape(arr.shape[0], arr.shape[1], channels)


def write_png(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise TypeError("write_png expects uint8 data")
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path, channels: int) -> np.ndarray:
    return to_unit_range(read_png(path, channels))


def save_image(path, img: np.ndarray) -> None:
    write_png(path, to_uint8(img))


def mask_paths(prefix, components: int = NUM_COMPONENTS) -> list[Path]:
    return [Path(f"{prefix}.c{k}.png") for k in range(components)]


def read_mask_pngs(prefix, components: int = NUM_COMPONENTS) -> np.ndarray:
    """Stack the raw 8-bit mask files into an ``(H, W, C)`` uint8 array."""
    planes = []
    for p in mask_paths(prefix, components):
        if not p.is_file():
            raise MaskFileMissing(errno.ENOENT, "missing mask file", str(p))
        with Image.open(p) as im:
            planes.append(np.asarray(im.convert("L")))
    shapes = {pl.shape for pl in planes}
    if len(shapes) != 1:
        raise MaskShapeError(f"mask files for {prefix} have differing shapes {sorted(shapes)}")
    return np.stack(planes, axis=-1)


def write_mask_pngs(prefix, raw: np.ndarray) -> None:
    for k, p in enumerate(mask_paths(prefix, raw.shape[-1])):
        write_png(p, np.ascontiguousarray(raw[:, :, k]))


def renormalize_masks(raw: np.ndarray) -> tuple[np.ndarray, int]:
    """Map raw mask values to per-pixel probabilities.

    Integer input is read as ``value / 255``. Pixels whose channels are all
    zero become uniform ``1/C``. Returns ``(masks, n_filled)`` where
    ``n_filled`` counts those pixels.
    """
    raw = np.asarray(raw)
    probs = raw.astype(np.float64)
    if np.issubdtype(raw.dtype, np.integer):
        probs /= 255.0
    total = probs.sum(axis=-1, keepdims=True)
    empty = total[..., 0] <= 0
    n_filled = int(empty.sum())
    probs[empty] = 1.0
    total = probs.sum(axis=-1, keepdims=True)
    return (probs / total).astype(np.float32), n_filled


def load_mask_set(prefix, components: int = NUM_COMPONENTS) -> np.ndarray:
    masks, n_filled = renormalize_masks(read_mask_pngs(prefix, components))
    if n_filled:
        log.warning("mask set %s: %d all-zero pixels filled with uniform probabilities", prefix, n_filled)
    return masks


def save_mask_set(prefix, masks: np.ndarray) -> None:
    raw = np.clip(np.rint(np.asarray(masks, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    write_mask_pngs(prefix, raw)


def check_mask_set(masks: np.ndarray, tol: float = MASK_SUM_TOL) -> None:
    if masks.ndim != 3:
        raise ShapeError(f"mask set must be (H, W, C), got {masks.shape}")
    if masks.min() < 0 or masks.max() > 1:
        raise DataError("mask probabilities must lie in [0, 1]")
    err = np.abs(masks.sum(axis=-1) - 1.0).max()
    if err > tol:
        raise DataError(f"mask channels do not sum to one (max error {err:.2e})")


def binarize(masks: np.ndarray) -> np.ndarray:
    """One-hot argmax per pixel; ties go to the lowest component index."""
    idx = np.argmax(masks, axis=-1)
    out = np.zeros_like(masks)
    np.put_along_axis(out, idx[..., None], 1, axis=-1)
    return out


def component_mass(masks: np.ndarray, c: int) -> float:
    if not 0 <= c < masks.shape[-1]:
        raise IndexError(f"component {c} out of range for {masks.shape[-1]} components")
    return float(masks[..., c].sum(dtype=np.float64))


# ---------------------------------------------------------------------------
# padding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PadRecord:
    """Placement of an original ``height x width`` image inside a padded canvas."""

    top: int
    left: int
    height: int
    width: int

    def crop(self, arr: np.ndarray) -> np.ndarray:
        return arr[self.top : self.top + self.height, self.left : self.left + self.width]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PadRecord":
        return cls(int(d["top"]), int(d["left"]), int(d["height"]), int(d["width"]))


def pad_value(arr: np.ndarray, kind: str) -> np.ndarray:
    """Fill vector for one padded pixel: black for images, pure background for masks."""
    channels = arr.shape[-1]
    integer = np.issubdtype(arr.dtype, np.integer)
    if kind == "image":
        return np.full(channels, 0 if integer else -1, dtype=arr.dtype)
    if kind == "mask":
        fill = np.zeros(channels, dtype=arr.dtype)
        fill[BACKGROUND if channels > BACKGROUND else channels - 1] = 255 if integer else 1
        return fill
    raise ValueError(f"unknown kind {kind!r}")


def zero_pad(arr: np.ndarray, target_h: int, target_w: int, kind: str = "image") -> tuple[np.ndarray, PadRecord]:
    """Center ``arr`` on a ``target_h x target_w`` canvas.

    The odd remainder of the padding goes to the bottom/right.
    """
    h, w = arr.shape[:2]
    if target_h < h or target_w < w:
        raise PadError(f"cannot pad {h}x{w} to smaller target {target_h}x{target_w}")
    top = (target_h - h) // 2
    left = (target_w - w) // 2
    out = np.empty((target_h, target_w) + arr.shape[2:], dtype=arr.dtype)
    out[...] = pad_value(arr, kind)
    out[top : top + h, left : left + w] = arr
    return out, PadRecord(top, left, h, w)


# ---------------------------------------------------------------------------
# samples and manifests
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    id: str
    photo: np.ndarray
    sketch: np.ndarray
    masks: np.ndarray
    split: str = "train"

    def __post_init__(self):
        shapes = {self.photo.shape[:2], self.sketch.shape[:2], self.masks.shape[:2]}
        if len(shapes) != 1:
            raise ShapeError(f"sample {self.id}: photo, sketch and masks differ in size {sorted(shapes)}")
        if self.split not in ("train", "test"):
            raise DataError(f"sample {self.id}: unknown split {self.split!r}")

    @property
    def size(self) -> tuple[int, int]:
        return self.photo.shape[:2]


@dataclass
class ManifestEntry:
    id: str
    photo: str
    sketch: str
    mask_prefix: str
    split: str = "train"
    source: str | None = None
    pad: dict | None = None

    def to_json(self) -> dict:
        d = {"id": self.id, "photo": self.photo, "sketch": self.sketch, "mask_prefix": self.mask_prefix,
             "split": self.split}
        if self.source is not None:
            d["source"] = self.source
        if self.pad is not None:
            d["pad"] = self.pad
        return d


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate manifest ids: {dupes[:5]}")

    def __len__(self):
        return len(self.entries)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def with_split(self, split: str) -> "Manifest":
        return Manifest([e for e in self.entries if e.split == split], self.root)

    def ids(self, split: str | None = None) -> list[str]:
        return [e.id for e in self.entries if split is None or e.split == split]


def read_manifest(path) -> Manifest:
    path = Path(path)
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                entries.append(
                    ManifestEntry(
                        id=str(obj["id"]), photo=obj["photo"], sketch=obj["sketch"],
                        mask_prefix=obj["mask_prefix"], split=obj.get("split", "train"),
                        source=obj.get("source"), pad=obj.get("pad"),
                    )
                )
            except (KeyError, json.JSONDecodeError) as exc:
                raise DataError(f"{path}:{lineno}: bad manifest line ({exc})") from exc
    return Manifest(entries, path.parent)


def write_manifest(path, manifest: Manifest) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for e in manifest.entries:
            fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")


def check_manifest_files(manifest: Manifest) -> None:
    for e in manifest.entries:
        for p in [manifest.resolve(e.photo), manifest.resolve(e.sketch), *mask_paths(manifest.resolve(e.mask_prefix))]:
            if not p.is_file():
                raise FileNotFoundError(f"manifest entry {e.id}: missing file {p}")


def load_sample(manifest: Manifest, entry: ManifestEntry) -> Sample:
    return Sample(
        id=entry.id,
        photo=load_image(manifest.resolve(entry.photo), 3),
        sketch=load_image(manifest.resolve(entry.sketch), 1),
        masks=load_mask_set(manifest.resolve(entry.mask_prefix)),
        split=entry.split,
    )


def load_samples(manifest: Manifest, split: str | None = None) -> list[Sample]:
    check_manifest_files(manifest)
    return [load_sample(manifest, e) for e in manifest.entries if split is None or e.split == split]


def _normalize_source(source):
    if source is None:
        return None
    s = str(source).strip().lower()
    return SOURCE_ALIASES.get(s, s)


def parse_scheme(scheme) -> tuple[str, float | None]:
    if isinstance(scheme, (int, float)):
        return "ratio", float(scheme)
    if isinstance(scheme, tuple):
        return scheme[0], float(scheme[1])
    s = str(scheme).lower()
    if s in ("cufs", "cufsf"):
        return s, None
    if s.startswith("ratio"):
        _, _, r = s.partition(":")
        return "ratio", float(r)
    raise SplitError(f"unknown split scheme {scheme!r}")


def split_manifest(manifest: Manifest, scheme="ratio:0.8", seed: int = 0) -> Manifest:
    """Assign train/test splits deterministically.

    ``scheme`` is ``"cufs"``, ``"cufsf"`` (per-source training counts, rest
    test) or ``"ratio:<r>"`` / a float (``floor(r * N)`` training entries).
    """
    kind, ratio = parse_scheme(scheme)
    rng = np.random.default_rng(seed)
    n = len(manifest.entries)
    train: set[int] = set()
    if kind == "ratio":
        if not 0.0 <= ratio <= 1.0:
            raise SplitError(f"ratio must lie in [0, 1], got {ratio}")
        k = math.floor(ratio * n + 1e-9)
        train = set(rng.permutation(n)[:k].tolist())
    else:
        counts = CUFS_TRAIN_COUNTS if kind == "cufs" else CUFSF_TRAIN_COUNTS
        sources = [_normalize_source(e.source) for e in manifest.entries]
        if any(s is None for s in sources):
            raise SplitError(f"scheme {kind} needs a source tag on every entry")
        for src, k in counts.items():
            idx = np.array([i for i, s in enumerate(sources) if s == src])
            if len(idx) < k:
                raise SplitError(f"scheme {kind}: need {k} '{src}' entries for training, found {len(idx)}")
            train.update(idx[rng.permutation(len(idx))[:k]].tolist())
    entries = [replace(e, split="train" if i in train else "test") for i, e in enumerate(manifest.entries)]
    return Manifest(entries, manifest.root)


# ---------------------------------------------------------------------------
# procedural fixtures
# ---------------------------------------------------------------------------

FIXTURE_SIZES = (32, 64, 128)


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _face_geometry(rng, size):
    """Draw face parameters in unit coordinates."""
    px = 1.0 / size
    g = {}
    g["cx"] = 0.5 + rng.uniform(-0.03, 0.03)
    g["cy"] = 0.55 + rng.uniform(-0.03, 0.03)
    g["face_rx"] = rng.uniform(0.22, 0.28)
    g["face_ry"] = rng.uniform(0.29, 0.34)
    g["hair_grow"] = rng.uniform(0.04, 0.09)
    g["hair_drop"] = rng.uniform(-0.05, 0.08)
    g["eye_dx"] = rng.uniform(0.09, 0.12)
    g["eye_dy"] = rng.uniform(-0.10, -0.06)
    g["eye_rx"] = max(rng.uniform(0.035, 0.05), 1.2 * px)
    g["eye_ry"] = max(rng.uniform(0.018, 0.028), 1.0 * px)
    g["brow_gap"] = rng.uniform(0.05, 0.07)
    g["brow_rx"] = max(rng.uniform(0.045, 0.06), 1.2 * px)
    g["brow_ry"] = max(rng.uniform(0.010, 0.016), 0.8 * px)
    g["nose_dy"] = rng.uniform(0.02, 0.06)
    g["nose_rx"] = max(rng.uniform(0.025, 0.035), 1.0 * px)
    g["nose_ry"] = max(rng.uniform(0.045, 0.07), 1.0 * px)
    g["mouth_dy"] = rng.uniform(0.13, 0.17)
    g["lip_rx"] = max(rng.uniform(0.07, 0.10), 1.5 * px)
    g["lip_ry"] = max(rng.uniform(0.03, 0.045), 1.2 * px)
    g["open"] = rng.uniform(0.3, 0.6)
    return g


def _paint_labels(g, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = (yy + 0.5) / size
    xx = (xx + 0.5) / size
    cx, cy = g["cx"], g["cy"]
    labels = np.full((size, size), COMPONENTS.index("background"), dtype=np.int64)

    def paint(region, name):
        labels[region] = COMPONENTS.index(name)

    hair = _ellipse(yy, xx, cy - 0.04, cx, g["face_ry"] + g["hair_grow"], g["face_rx"] + g["hair_grow"])
    paint(hair & (yy < cy + g["hair_drop"]), "hair")
    paint(_ellipse(yy, xx, cy, cx, g["face_ry"], g["face_rx"]), "skin")
    paint(_ellipse(yy, xx, cy + g["nose_dy"], cx, g["nose_ry"], g["nose_rx"]), "nose")
    ey = cy + g["eye_dy"]
    for side in (-1, 1):
        ex = cx + side * g["eye_dx"]
        paint(_ellipse(yy, xx, ey, ex, g["eye_ry"], g["eye_rx"]), "eyes")
        paint(_ellipse(yy, xx, ey - g["brow_gap"], ex, g["brow_ry"], g["brow_rx"]), "eyebrows")
    my = cy + g["mouth_dy"]
    paint(_ellipse(yy, xx, my, cx, g["lip_ry"], g["lip_rx"]), "lips")
    paint(_ellipse(yy, xx, my, cx, g["lip_ry"] * g["open"], g["lip_rx"] * 0.75), "inner_mouth")
    return labels, yy, xx


def _render_photo(rng, labels, xx, g):
    palette = np.empty((NUM_COMPONENTS, 3))
    skin = rng.uniform([0.55, 0.35, 0.25], [0.95, 0.75, 0.6])
    hair = rng.uniform([0.05, 0.03, 0.02], [0.45, 0.35, 0.25])
    palette[COMPONENTS.index("eyes")] = rng.uniform(0.05, 0.35, 3)
    palette[COMPONENTS.index("eyebrows")] = hair * 0.8
    palette[COMPONENTS.index("nose")] = skin * 0.85
    palette[COMPONENTS.index("lips")] = rng.uniform([0.55, 0.1, 0.1], [0.85, 0.35, 0.35])
    palette[COMPONENTS.index("inner_mouth")] = [0.2, 0.02, 0.04]
    palette[COMPONENTS.index("skin")] = skin
    palette[COMPONENTS.index("hair")] = hair
    palette[BACKGROUND] = rng.uniform(0.2, 0.9, 3)
    rgb = palette[labels]
    # directional lighting on face regions only
    light = 1.0 + rng.uniform(-0.25, 0.25) * (xx - g["cx"]) * 2.0
    face = (labels != BACKGROUND) & (labels != COMPONENTS.index("hair"))
    rgb[face] *= light[face][:, None]
    rgb = np.clip(rgb, 0.0, 1.0)
    return (rgb * 2.0 - 1.0).astype(np.float32)


def _render_sketch(labels, yy, xx):
    tone = np.ones(NUM_COMPONENTS)
    tone[COMPONENTS.index("eyes")] = -0.8
    tone[COMPONENTS.index("eyebrows")] = -0.6
    tone[COMPONENTS.index("nose")] = 0.6
    tone[COMPONENTS.index("lips")] = 0.0
    tone[COMPONENTS.index("inner_mouth")] = -0.9
    tone[COMPONENTS.index("skin")] = 0.9
    tone[COMPONENTS.index("hair")] = -0.3
    sk = tone[labels]
    hair = labels == COMPONENTS.index("hair")
    size = labels.shape[0]
    # pencil strokes in the hair
    sk[hair] += 0.35 * np.sin(2 * np.pi * (xx[hair] + 0.4 * yy[hair]) * size / 6.0)
    edge = np.zeros_like(labels, dtype=bool)
    edge[:-1] |= labels[:-1] != labels[1:]
    edge[1:] |= labels[1:] != labels[:-1]
    edge[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    edge[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    sk[edge] = np.minimum(sk[edge], -0.7)
    return np.clip(sk, -1.0, 1.0).astype(np.float32)[:, :, None]


def generate_procedural_sample(seed: int, size: int = 64, soft: bool = True, split: str = "train") -> Sample:
    """Deterministic synthetic face with photo, sketch and consistent masks."""
    if size not in FIXTURE_SIZES:
        raise ConfigError(f"fixture size must be one of {FIXTURE_SIZES}, got {size}")
    rng = np.random.default_rng([seed, size])
    g = _face_geometry(rng, size)
    labels, yy, xx = _paint_labels(g, size)
    photo = _render_photo(rng, labels, xx, g)
    sketch = _render_sketch(labels, yy, xx)
    masks = np.eye(NUM_COMPONENTS, dtype=np.float64)[labels]
    if soft:
        masks = ndimage.gaussian_filter(masks, sigma=(0.6 * size / 64, 0.6 * size / 64, 0), mode="nearest")
        masks, _ = renormalize_masks(masks)
    return Sample(id=f"face{seed:05d}", photo=photo, sketch=sketch, masks=masks.astype(np.float32), split=split)


def generate_procedural_set(n: int, size: int = 64, seed: int = 0, soft: bool = True) -> list[Sample]:
    return [generate_procedural_sample(seed * 100_003 + i, size, soft) for i in range(n)]


def write_fixture_dataset(out_dir, n: int, size: int = 64, seed: int = 0, train_ratio: float = 1.0) -> Manifest:
    """Write a procedural dataset (PNGs plus ``manifest.jsonl``) to ``out_dir``."""
    out = Path(out_dir)
    entries = []
    for s in generate_procedural_set(n, size, seed):
        photo, sketch, prefix = f"photos/{s.id}.png", f"sketches/{s.id}.png", f"masks/{s.id}"
        save_image(out / photo, s.photo)
        save_image(out / sketch, s.sketch)
        save_mask_set(out / prefix, s.masks)
        entries.append(ManifestEntry(s.id, photo, sketch, prefix, "train", source="procedural"))
    manifest = split_manifest(Manifest(entries, out), train_ratio, seed)
    write_manifest(out / "manifest.jsonl", manifest)
    return manifest

