"""Synthetic radiograph generation, augmentation, raster I/O, and manifests.

The generator stands in for the unavailable clinical dataset: it renders a
bright implant silhouette (tapered stem plus cup) over a noisy bone-textured
background. Images of the positive class additionally carry a darker band of
configurable width hugging the implant boundary - the lucent-line appearance
that marks a loose implant - and the band's ground-truth mask is kept so that
saliency localisation can be scored, something impossible with real x-rays.

Images travel as binary PGM (P5, 8-bit); datasets are indexed by a strict
``path,label,id`` CSV manifest.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .rng import substream

LABEL_LOOSE = "loose"
LABEL_WELL_FIXED = "well_fixed"
LABELS = (LABEL_LOOSE, LABEL_WELL_FIXED)


class PgmFormatError(ValueError):
    """Malformed PGM/PPM file."""


class ManifestError(ValueError):
    """Malformed manifest row; message names the line."""


@dataclass
class SampleImage:
    pixels: np.ndarray                      # H x W float32 in [0, 1]
    label: str                              # "loose" | "well_fixed"
    id: str
    lucency_mask: np.ndarray | None = None  # H x W bool, synthetic loose only

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ValueError("SampleImage: pixels must be 2-d")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("SampleImage: pixels must lie in [0, 1]")
        if self.label not in LABELS:
            raise ValueError(f"SampleImage: unknown label {self.label!r}")
        if self.lucency_mask is not None:
            self.lucency_mask = np.ascontiguousarray(self.lucency_mask, dtype=bool)
            if self.lucency_mask.shape != self.pixels.shape:
                raise ValueError("SampleImage: mask shape differs from pixels")


@dataclass(frozen=True)
class AugmentParams:
    """Symmetric-about-identity jitter magnitudes (zero = identity)."""
    rotation_deg: float = 5.0     # rotation in [-r, r] degrees
    scale_delta: float = 0.1      # scale in [1-d, 1+d]
    translate_frac: float = 0.05  # shift in [-f, f] * size pixels per axis
    intensity: float = 0.05       # additive jitter in [-i, i]

    def __post_init__(self):
        for name in ("rotation_deg", "scale_delta", "translate_frac", "intensity"):
            if getattr(self, name) < 0:
                raise ValueError(f"AugmentParams: {name} must be >= 0")
        if self.scale_delta >= 1.0:
            raise ValueError("AugmentParams: scale_delta must leave scale positive")


IDENTITY_AUGMENT = AugmentParams(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SynthParams:
    size: int = 64
    n_loose: int = 100
    n_well_fixed: int = 100
    seed: int = 0
    stem_len_frac: tuple[float, float] = (0.38, 0.50)
    stem_width_frac: tuple[float, float] = (0.11, 0.16)
    stem_taper: tuple[float, float] = (0.45, 0.75)     # tip/top width ratio
    stem_angle_deg: tuple[float, float] = (-8.0, 8.0)
    cup_radius_frac: tuple[float, float] = (0.10, 0.14)
    noise_scale: float = 2.5       # texture correlation length, px
    noise_amp: float = 0.06
    lucency_width: tuple[int, int] = (2, 4)            # px, loose class only
    lucency_contrast: float = 0.25

    def __post_init__(self):
        if self.size < 32:
            raise ValueError("SynthParams: size must be >= 32")
        if self.lucency_width[0] < 1 or self.lucency_width[1] < self.lucency_width[0]:
            raise ValueError("SynthParams: loose-class lucency width must be > 0")
        if not 0.0 < self.lucency_contrast < 1.0:
            raise ValueError("SynthParams: lucency_contrast must be in (0, 1)")


def _bone_texture(rng: np.random.Generator, size: int, scale: float,
                  amp: float) -> np.ndarray:
    """Smoothed noise over a gentle vertical shading gradient."""
    noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), scale)
    spread = noise.std() or 1.0
    shade = np.linspace(-0.03, 0.03, size)[:, None]
    return 0.45 + shade + amp * noise / spread


def _implant_mask(rng: np.random.Generator, params: SynthParams
                  ) -> np.ndarray | None:
    """Stem + cup silhouette; None when the geometry exits the frame."""
    s = params.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)

    cup_r = s * rng.uniform(*params.cup_radius_frac)
    cup_cx = s * (0.5 + rng.uniform(-0.04, 0.04))
    cup_cy = s * (0.32 + rng.uniform(-0.02, 0.02))
    cup = (xx - cup_cx) ** 2 + (yy - cup_cy) ** 2 <= cup_r ** 2

    length = s * rng.uniform(*params.stem_len_frac)
    top_w = s * rng.uniform(*params.stem_width_frac)
    tip_w = top_w * rng.uniform(*params.stem_taper)
    angle = np.deg2rad(rng.uniform(*params.stem_angle_deg))
    # stem axis points downward from the cup centre, tilted by `angle`
    ax, ay = np.sin(angle), np.cos(angle)
    u = (xx - cup_cx) * ax + (yy - cup_cy) * ay          # along the axis
    v = -(xx - cup_cx) * ay + (yy - cup_cy) * ax         # across the axis
    half_w = (top_w + (tip_w - top_w) * np.clip(u / length, 0.0, 1.0)) / 2.0
    stem = (u >= 0) & (u <= length) & (np.abs(v) <= half_w)

    implant = cup | stem
    margin = 2 * params.lucency_width[1] + 1
    border = np.zeros((s, s), dtype=bool)
    border[:margin, :] = border[-margin:, :] = True
    border[:, :margin] = border[:, -margin:] = True
    if (implant & border).any():
        return None
    return implant


def _render(rng: np.random.Generator, params: SynthParams, loose: bool,
            sample_id: str) -> SampleImage:
    for _ in range(10):
        geometry_rng = np.random.default_rng(rng.integers(2 ** 63))
        implant = _implant_mask(geometry_rng, params)
        if implant is not None:
            break
    else:
        raise RuntimeError(f"{sample_id}: implant geometry left the frame "
                           "10 times in a row; narrow the geometry ranges")

    img = _bone_texture(geometry_rng, params.size, params.noise_scale,
                        params.noise_amp)
    # soft-edged bright metal silhouette, then the lucent band carved on top
    # so the edge blur cannot wash the band's contrast out
    soft = ndimage.gaussian_filter(implant.astype(np.float64), 0.7)
    img = img * (1.0 - soft) + 0.92 * soft
    mask = None
    if loose:
        width = int(geometry_rng.integers(params.lucency_width[0],
                                          params.lucency_width[1] + 1))
        dist = ndimage.distance_transform_edt(~implant)
        mask = (dist > 0) & (dist <= width)
        img[mask] -= params.lucency_contrast
    pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
    return SampleImage(pixels, LABEL_LOOSE if loose else LABEL_WELL_FIXED,
                       sample_id, mask)


def generate_dataset(params: SynthParams) -> list[SampleImage]:
    """Deterministic synthetic dataset: n_loose + n_well_fixed images."""
    if params.n_loose < 1 or params.n_well_fixed < 1:
        raise ValueError("generate_dataset: per-class counts must be >= 1")
    samples = []
    for i in range(params.n_loose):
        rng = substream(params.seed, "synth", LABEL_LOOSE, str(i))
        samples.append(_render(rng, params, True, f"loose_{i:04d}"))
    for i in range(params.n_well_fixed):
        rng = substream(params.seed, "synth", LABEL_WELL_FIXED, str(i))
        samples.append(_render(rng, params, False, f"wf_{i:04d}"))
    return samples


def generate_pretext_dataset(n_images: int, size: int, seed: int,
                             band_contrast: float = 0.25
                             ) -> tuple[np.ndarray, np.ndarray]:
    """Band-presence pretext images: (X [n,1,size,size] float32, y [n] 0/1).

    Half the images carry a randomly placed dark band (random angle, length,
    width) over a bone-textured background; the task is class-label
    independent of loosening but exercises the same low-level cue.
    """
    if n_images < 2:
        raise ValueError("generate_pretext_dataset: need at least 2 images")
    x = np.empty((n_images, 1, size, size), dtype=np.float32)
    y = np.empty(n_images, dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for i in range(n_images):
        rng = substream(seed, "pretext", str(i))
        img = _bone_texture(rng, size, 2.5, 0.06)
        label = float(rng.random() < 0.5)
        if label:
            cx = rng.uniform(0.25, 0.75) * size
            cy = rng.uniform(0.25, 0.75) * size
            angle = rng.uniform(0.0, np.pi)
            half_len = rng.uniform(0.15, 0.35) * size
            half_w = rng.uniform(1.0, 2.0)
            ax, ay = np.cos(angle), np.sin(angle)
            u = (xx - cx) * ax + (yy - cy) * ay
            v = -(xx - cx) * ay + (yy - cy) * ax
            band = (np.abs(u) <= half_len) & (np.abs(v) <= half_w)
            img[band] -= band_contrast
        x[i, 0] = np.clip(img, 0.0, 1.0)
        y[i] = label
    return x, y


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def affine_resample(pixels: np.ndarray, rotation_deg: float, scale: float,
                    tx: float, ty: float) -> np.ndarray:
    """Rotate/scale about the centre then translate, bilinear, edge-clamped.

    Exact for pure integer translations and for the identity transform.
    """
    src = np.asarray(pixels, dtype=np.float64)
    h, w = src.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    x0 = xx - cx - tx
    y0 = yy - cy - ty
    th = np.deg2rad(rotation_deg)
    c, s = np.cos(th), np.sin(th)
    u = (c * x0 + s * y0) / scale + cx
    v = (-s * x0 + c * y0) / scale + cy

    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = u - u0
    fv = v - v0
    iu0 = np.clip(u0.astype(np.int64), 0, w - 1)
    iu1 = np.clip(u0.astype(np.int64) + 1, 0, w - 1)
    iv0 = np.clip(v0.astype(np.int64), 0, h - 1)
    iv1 = np.clip(v0.astype(np.int64) + 1, 0, h - 1)
    top = (1.0 - fu) * src[iv0, iu0] + fu * src[iv0, iu1]
    bottom = (1.0 - fu) * src[iv1, iu0] + fu * src[iv1, iu1]
    out = (1.0 - fv) * top + fv * bottom
    return out.astype(pixels.dtype if isinstance(pixels, np.ndarray) else np.float32)


def augment(image: SampleImage, params: AugmentParams,
            rng: np.random.Generator) -> SampleImage:
    """Random rotation -> scale -> translation, then intensity jitter.

    Label and id pass through untouched; the lucency mask receives the same
    geometric transform.
    """
    size = image.pixels.shape[1]
    rot = rng.uniform(-params.rotation_deg, params.rotation_deg)
    scale = rng.uniform(1.0 - params.scale_delta, 1.0 + params.scale_delta)
    tx = rng.uniform(-params.translate_frac, params.translate_frac) * size
    ty = rng.uniform(-params.translate_frac, params.translate_frac) * size
    jitter = rng.uniform(-params.intensity, params.intensity)

    pixels = affine_resample(image.pixels, rot, scale, tx, ty)
    pixels = np.clip(pixels + np.float32(jitter), 0.0, 1.0).astype(np.float32)
    mask = None
    if image.lucency_mask is not None:
        warped = affine_resample(image.lucency_mask.astype(np.float64),
                                 rot, scale, tx, ty)
        mask = warped >= 0.5
    return SampleImage(pixels, image.label, image.id, mask)


# ---------------------------------------------------------------------------
# PGM / PPM codecs (binary, 8-bit)
# ---------------------------------------------------------------------------

def _quantize(values: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(values, dtype=np.float64) * 255.0).astype(np.uint8)


def save_pgm(path, pixels: np.ndarray) -> None:
    """Binary PGM (P5), round-to-nearest 8-bit quantisation of [0,1] floats."""
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ValueError("save_pgm: expected a 2-d array")
    if not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > 1:
        raise ValueError("save_pgm: pixels must be finite and in [0, 1]")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(_quantize(arr).tobytes())


def save_ppm(path, rgb: np.ndarray) -> None:
    """Binary PPM (P6) from an H x W x 3 float array in [0,1]."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("save_ppm: expected an H x W x 3 array")
    if not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > 1:
        raise ValueError("save_ppm: values must be finite and in [0, 1]")
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(_quantize(arr).tobytes())


def _parse_netpbm(raw: bytes, magic: bytes, channels: int, path) -> np.ndarray:
    if raw[:2] != magic:
        raise PgmFormatError(f"{path}: bad magic {raw[:2]!r}, expected {magic!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(raw):
            raise PgmFormatError(f"{path}: header ended before width/height/maxval")
        ch = raw[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            nl = raw.find(b"\n", pos)
            pos = len(raw) if nl < 0 else nl + 1
        elif ch.isdigit():
            end = pos
            while end < len(raw) and raw[end:end + 1].isdigit():
                end += 1
            fields.append(int(raw[pos:end]))
            pos = end
        else:
            raise PgmFormatError(f"{path}: unexpected header byte {ch!r}")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PgmFormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise PgmFormatError(f"{path}: unsupported maxval {maxval}, expected 255")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise PgmFormatError(f"{path}: missing whitespace after maxval")
    pos += 1
    payload = raw[pos:]
    expected = width * height * channels
    if len(payload) != expected:
        raise PgmFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    shape = (height, width) if channels == 1 else (height, width, channels)
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape)


def load_pgm(path) -> np.ndarray:
    """Load a binary PGM as float32 in [0,1] (value / 255)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return (_parse_netpbm(raw, b"P5", 1, path).astype(np.float32) / 255.0)


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    return (_parse_netpbm(raw, b"P6", 3, path).astype(np.float32) / 255.0)


# ---------------------------------------------------------------------------
# manifests and dataset folders
# ---------------------------------------------------------------------------

MANIFEST_HEADER = "path,label,id"


def write_manifest(records: list[tuple[str, str, str]], path) -> None:
    """CSV of (image path, label, id) rows under a fixed header."""
    seen = set()
    for rec_path, label, _ in records:
        if label not in LABELS:
            raise ManifestError(f"write_manifest: unknown label {label!r}")
        if rec_path in seen:
            raise ManifestError(f"write_manifest: duplicate path {rec_path!r}")
        seen.add(rec_path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        for rec in records:
            fh.write(",".join(rec) + "\n")


def read_manifest(path) -> list[tuple[str, str, str]]:
    """Strict parse of a manifest; errors name the offending line."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ManifestError(f"{path}: line 1: header must be {MANIFEST_HEADER!r}")
    records = []
    seen = set()
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 3:
            raise ManifestError(f"{path}: line {n}: expected 3 comma-separated "
                                f"fields, got {len(parts)}")
        rec_path, label, sample_id = parts
        if label not in LABELS:
            raise ManifestError(f"{path}: line {n}: unknown label {label!r}")
        if rec_path in seen:
            raise ManifestError(f"{path}: line {n}: duplicate path {rec_path!r}")
        seen.add(rec_path)
        records.append((rec_path, label, sample_id))
    return records


def mask_path_for(image_path: str) -> str:
    stem, dot, ext = image_path.rpartition(".")
    return f"{stem}_mask{dot}{ext}" if dot else image_path + "_mask"


def save_dataset(samples: list[SampleImage], directory) -> Path:
    """Write PGM images (plus masks for loose samples) and the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for sample in samples:
        name = f"{sample.id}.pgm"
        save_pgm(directory / name, sample.pixels)
        if sample.lucency_mask is not None:
            save_pgm(directory / mask_path_for(name),
                     sample.lucency_mask.astype(np.float64))
        records.append((name, sample.label, sample.id))
    manifest = directory / "manifest.csv"
    write_manifest(records, manifest)
    return manifest


def load_dataset(manifest_path) -> list[SampleImage]:
    """Read a manifest and its images; masks are picked up by naming convention."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    samples = []
    for rec_path, label, sample_id in read_manifest(manifest_path):
        pixels = load_pgm(base / rec_path)
        mask_file = base / mask_path_for(rec_path)
        mask = None
        if mask_file.exists():
            mask = load_pgm(mask_file) >= 0.5
        samples.append(SampleImage(pixels, label, sample_id, mask))
    return samples
