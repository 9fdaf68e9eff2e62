"""Image IO, YCbCr conversion, dataset manifests and the synthetic phantom generator."""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import (
    ChannelMismatch,
    ColorspaceMismatch,
    CorruptImage,
    MissingFile,
    ParseError,
)

MIN_SIZE = 8


class Modality(str, enum.Enum):
    MRI = "MRI"
    CT = "CT"
    PET = "PET"
    SPECT = "SPECT"
    FUSED = "FUSED"
    SYNTH = "SYNTH"


class ColorSpace(str, enum.Enum):
    GRAY = "GRAY"
    RGB = "RGB"
    YCBCR = "YCBCR"


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    TEST = "TEST"


@dataclass(frozen=True)
class ImageTensor:
    """H x W x C float64 image in [0, 1] with modality and color-space tags."""

    pixels: np.ndarray
    modality: Modality = Modality.SYNTH
    colorspace: ColorSpace = ColorSpace.GRAY

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise ChannelMismatch(f"expected H x W x C pixels, got shape {px.shape}")
        want = 1 if self.colorspace == ColorSpace.GRAY else 3
        if px.shape[2] != want:
            raise ChannelMismatch(
                f"{self.colorspace.value} image needs {want} channel(s), got {px.shape[2]}"
            )
        if px.shape[0] < MIN_SIZE or px.shape[1] < MIN_SIZE:
            raise ValueError(f"image must be at least {MIN_SIZE}x{MIN_SIZE}, got {px.shape[:2]}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def luminance(self) -> np.ndarray:
        """H x W luminance plane (the Y channel for color images)."""
        if self.colorspace == ColorSpace.GRAY:
            return self.pixels[:, :, 0]
        if self.colorspace == ColorSpace.YCBCR:
            return self.pixels[:, :, 0]
        return rgb_to_ycbcr(self).pixels[:, :, 0]


def gray_image(plane, modality=Modality.SYNTH) -> ImageTensor:
    return ImageTensor(np.clip(np.asarray(plane, dtype=np.float64), 0.0, 1.0), modality, ColorSpace.GRAY)


# --------------------------------------------------------------------------
# PNG IO


def load_image(path, expected_colorspace=ColorSpace.GRAY, modality=Modality.SYNTH) -> ImageTensor:
    """Read an 8-bit PNG as values in [0, 1].

    ``expected_colorspace=None`` accepts whatever channel count the file has.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            raw = np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptImage(f"cannot decode {path}: {exc}") from exc
    if mode == "L":
        found = ColorSpace.GRAY
    elif mode == "RGB":
        found = ColorSpace.RGB
    else:
        raise ChannelMismatch(f"{path}: unsupported PNG mode {mode!r}; need 8-bit L or RGB")
    if expected_colorspace is None:
        expected_colorspace = found
    expected_colorspace = ColorSpace(expected_colorspace)
    want_gray = expected_colorspace == ColorSpace.GRAY
    if want_gray != (found == ColorSpace.GRAY):
        raise ChannelMismatch(
            f"{path}: file has {1 if found == ColorSpace.GRAY else 3} channel(s), "
            f"expected {expected_colorspace.value}"
        )
    px = np.clip(raw.astype(np.float64) / 255.0, 0.0, 1.0)
    img = ImageTensor(px, modality, found)
    if expected_colorspace == ColorSpace.YCBCR:
        img = rgb_to_ycbcr(img)
    return img


def to_uint8(img: ImageTensor) -> np.ndarray:
    if img.colorspace == ColorSpace.YCBCR:
        img = ycbcr_to_rgb(img)
    u = np.round(np.clip(img.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    return u[:, :, 0] if u.shape[2] == 1 else u


def save_image(img: ImageTensor, path) -> None:
    """Write an 8-bit PNG; YCbCr images are converted to RGB first."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    u = to_uint8(img)
    Image.fromarray(u, mode="L" if u.ndim == 2 else "RGB").save(path, format="PNG")


# --------------------------------------------------------------------------
# BT.601 full-range color conversion

_KR, _KG, _KB = 0.299, 0.587, 0.114
_RGB_TO_YCBCR = np.array(
    [
        [_KR, _KG, _KB],
        [-_KR / (2 * (1 - _KB)), -_KG / (2 * (1 - _KB)), 0.5],
        [0.5, -_KG / (2 * (1 - _KR)), -_KB / (2 * (1 - _KR))],
    ]
)
_YCBCR_TO_RGB = np.linalg.inv(_RGB_TO_YCBCR)
_OFFSET = np.array([0.0, 0.5, 0.5])


def rgb_to_ycbcr_array(rgb: np.ndarray) -> np.ndarray:
    return rgb @ _RGB_TO_YCBCR.T + _OFFSET


def ycbcr_to_rgb_array(ycc: np.ndarray) -> np.ndarray:
    return (ycc - _OFFSET) @ _YCBCR_TO_RGB.T


def rgb_to_ycbcr(img: ImageTensor) -> ImageTensor:
    if img.colorspace != ColorSpace.RGB:
        raise ColorspaceMismatch(f"expected RGB input, got {img.colorspace.value}")
    ycc = np.clip(rgb_to_ycbcr_array(img.pixels), 0.0, 1.0)
    return ImageTensor(ycc, img.modality, ColorSpace.YCBCR)


def ycbcr_to_rgb(img: ImageTensor) -> ImageTensor:
    if img.colorspace != ColorSpace.YCBCR:
        raise ColorspaceMismatch(f"expected YCBCR input, got {img.colorspace.value}")
    rgb = np.clip(ycbcr_to_rgb_array(img.pixels), 0.0, 1.0)
    return ImageTensor(rgb, img.modality, ColorSpace.RGB)


# --------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image1_path: str
    image2_path: str
    text1: str
    text2: str
    modality1: Modality
    modality2: Modality


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple = ()
    split: Split = Split.TRAIN
    # directory that relative image paths resolve against
    root: Path = field(default=Path("."), compare=False)

    def __len__(self):
        return len(self.entries)

    def resolve(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


_ENTRY_FIELDS = ("id", "image1_path", "image2_path", "text1", "text2", "modality1", "modality2")


def manifest_load(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object")
    unknown = set(doc) - {"split", "entries"}
    if unknown:
        raise ParseError(f"{path}: unknown top-level field(s) {sorted(unknown)}")
    try:
        split = Split(doc.get("split", "TRAIN"))
    except ValueError:
        raise ParseError(f"{path}: field 'split': invalid value {doc.get('split')!r}") from None
    raw_entries = doc.get("entries", [])
    if not isinstance(raw_entries, list):
        raise ParseError(f"{path}: field 'entries' must be a list")
    entries = []
    for k, raw in enumerate(raw_entries):
        if not isinstance(raw, dict):
            raise ParseError(f"{path}: entries[{k}] must be an object")
        missing = [f for f in _ENTRY_FIELDS if f not in raw]
        if missing:
            raise ParseError(f"{path}: entries[{k}]: missing field(s) {missing}")
        extra = set(raw) - set(_ENTRY_FIELDS)
        if extra:
            raise ParseError(f"{path}: entries[{k}]: unknown field(s) {sorted(extra)}")
        for f in _ENTRY_FIELDS[:5]:
            if not isinstance(raw[f], str):
                raise ParseError(f"{path}: entries[{k}].{f}: expected a string")
        try:
            m1, m2 = Modality(raw["modality1"]), Modality(raw["modality2"])
        except ValueError as exc:
            raise ParseError(f"{path}: entries[{k}]: {exc}") from None
        entries.append(
            ManifestEntry(raw["id"], raw["image1_path"], raw["image2_path"], raw["text1"], raw["text2"], m1, m2)
        )
    return DatasetManifest(tuple(entries), split, path.parent)


def manifest_save(m: DatasetManifest, path) -> None:
    path = Path(path)
    doc = {
        "split": m.split.value,
        "entries": [
            {
                "id": e.id,
                "image1_path": e.image1_path,
                "image2_path": e.image2_path,
                "text1": e.text1,
                "text2": e.text2,
                "modality1": e.modality1.value,
                "modality2": e.modality2.value,
            }
            for e in m.entries
        ],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def manifest_validate(m: DatasetManifest) -> list[str]:
    """Return a list of human-readable invariant violations (empty when valid)."""
    problems = []
    seen = set()
    for e in m.entries:
        if e.id in seen:
            problems.append(f"duplicate id={e.id}")
        seen.add(e.id)
        if not e.text1.strip():
            problems.append(f"empty text1 for id={e.id}")
        if not e.text2.strip():
            problems.append(f"empty text2 for id={e.id}")
        for rel in (e.image1_path, e.image2_path):
            p = m.resolve(rel)
            if not p.is_file():
                problems.append(f"missing file {p} for id={e.id}")
    return problems


# --------------------------------------------------------------------------
# Synthetic phantoms


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    size: tuple = (64, 64)
    lesion_count: int = 2
    lesion_radius_range: tuple = (4, 8)
    background_texture_scale: float = 0.05

    def __post_init__(self):
        h, w = self.size
        rmin, rmax = self.lesion_radius_range
        if h < MIN_SIZE or w < MIN_SIZE:
            raise ValueError(f"phantom size must be at least {MIN_SIZE}x{MIN_SIZE}")
        if self.lesion_count < 0:
            raise ValueError("lesion_count must be >= 0")
        if not (1 <= rmin <= rmax):
            raise ValueError("lesion_radius_range must satisfy 1 <= min <= max")
        if 2 * rmax + 2 >= min(h, w):
            raise ValueError("lesion radius too large for the phantom size")
        if self.lesion_count * np.pi * (rmax + 1) ** 2 > 0.5 * h * w:
            raise ValueError("too many lesions to place disjointly")
        if not self.background_texture_scale > 0:
            raise ValueError("background_texture_scale must be > 0")


@dataclass(frozen=True)
class Lesion:
    center: tuple
    radius: int
    mask: np.ndarray


def _smooth_noise(rng, shape, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    sd = n.std()
    return n / sd if sd > 0 else n


def _place_lesions(spec: PhantomSpec, rng) -> list[Lesion]:
    h, w = spec.size
    rmin, rmax = spec.lesion_radius_range
    yy, xx = np.mgrid[0:h, 0:w]
    lesions = []
    for _ in range(spec.lesion_count):
        for _attempt in range(10_000):
            r = int(rng.integers(rmin, rmax + 1))
            cy = int(rng.integers(r + 1, h - r - 1))
            cx = int(rng.integers(r + 1, w - r - 1))
            # one pixel of clearance keeps masks from touching
            if all(np.hypot(cy - o.center[0], cx - o.center[1]) > r + o.radius + 2 for o in lesions):
                break
        else:
            raise ValueError("could not place lesions disjointly; reduce lesion_count or radius")
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        mask.setflags(write=False)
        lesions.append(Lesion((cy, cx), r, mask))
    return lesions


def phantom_lesions(spec: PhantomSpec) -> list[Lesion]:
    """The lesion layout used by :func:`phantom_generate` for the same spec."""
    return _place_lesions(spec, np.random.default_rng(spec.seed))


def _quadrant(center, size):
    cy, cx = center
    h, w = size
    vert = "upper" if cy < h / 2 else "lower"
    horiz = "left" if cx < w / 2 else "right"
    return f"{vert} {horiz}"


def _describe(lesions, size):
    n = len(lesions)
    if n == 0:
        return (
            "MRI slice with preserved gray-white matter differentiation and no focal lesion.",
            "Functional scan with uniform radiotracer uptake and no focal lesion.",
        )
    quads = sorted({_quadrant(les.center, size) for les in lesions})
    where = " and ".join(quads) + (" quadrants" if len(quads) > 1 else " quadrant")
    noun = "focal lesion" if n == 1 else "focal lesions"
    return (
        f"MRI slice showing {n} {noun} with hypointense rim in the {where}.",
        f"Functional scan showing {n} region{'s' if n > 1 else ''} of increased radiotracer uptake in the {where}.",
    )


def phantom_generate(spec: PhantomSpec):
    """Build a registered structural/functional phantom pair with descriptions.

    Returns ``(structural, functional, text1, text2)``. The structural image is
    grayscale, the functional one RGB. Output is a pure function of ``spec``.
    """
    rng = np.random.default_rng(spec.seed)
    lesions = _place_lesions(spec, rng)
    h, w = spec.size
    scale = spec.background_texture_scale
    yy, xx = np.mgrid[0:h, 0:w]

    # head-like ellipse with soft edge
    ry, rx = 0.42 * h, 0.38 * w
    ell = ((yy - (h - 1) / 2) / ry) ** 2 + ((xx - (w - 1) / 2) / rx) ** 2
    head = 1.0 / (1.0 + np.exp((ell - 1.0) * 12.0))
    structural = 0.08 + 0.5 * head + scale * _smooth_noise(rng, (h, w), 1.0) * head
    for les in lesions:
        d = np.hypot(yy - les.center[0], xx - les.center[1])
        rim = np.exp(-((d - les.radius) ** 2) / 1.5)
        structural = structural - 0.35 * rim + 0.15 * les.mask
    structural = np.clip(structural, 0.0, 1.0)

    base = np.array([0.12, 0.05, 0.18])
    texture = 0.25 * scale * _smooth_noise(rng, (h, w), 3.0)
    functional = base[None, None, :] + texture[:, :, None]
    hot = np.array([0.85, 0.55, -0.1])
    for les in lesions:
        d2 = (yy - les.center[0]) ** 2 + (xx - les.center[1]) ** 2
        blob = np.exp(-d2 / (2.0 * (0.8 * les.radius) ** 2))
        functional = functional + blob[:, :, None] * hot[None, None, :]
    functional = np.clip(functional, 0.0, 1.0)

    text1, text2 = _describe(lesions, spec.size)
    return (
        ImageTensor(structural, Modality.MRI, ColorSpace.GRAY),
        ImageTensor(functional, Modality.PET, ColorSpace.RGB),
        text1,
        text2,
    )


def write_phantom_set(out_dir, count, seed, size=(64, 64), split=Split.TRAIN) -> DatasetManifest:
    """Generate ``count`` phantom pairs as PNGs plus ``manifest.json`` in ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"cannot write to {out_dir}")
    rng = np.random.default_rng(seed)
    entries = []
    for k in range(count):
        spec = PhantomSpec(
            seed=int(rng.integers(2**31)),
            size=tuple(size),
            lesion_count=int(rng.integers(0, 4)),
            lesion_radius_range=(max(1, min(size) // 16), max(1, min(size) // 8)),
        )
        s, f, t1, t2 = phantom_generate(spec)
        pid = f"phantom_{k:04d}"
        save_image(s, out_dir / f"{pid}_mri.png")
        save_image(f, out_dir / f"{pid}_pet.png")
        entries.append(ManifestEntry(pid, f"{pid}_mri.png", f"{pid}_pet.png", t1, t2, Modality.MRI, Modality.PET))
    manifest = DatasetManifest(tuple(entries), Split(split), out_dir)
    manifest_save(manifest, out_dir / "manifest.json")
    return manifest
