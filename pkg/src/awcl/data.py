"""Dataset manifests, frame ingestion, preprocessing and the synthetic scan generator.

Manifest format (tab separated, one frame per line)::

    #taxonomy=<path relative to the manifest>
    <image path>  <scan id>  <frame index>  <fine name or ->  <coarse name or ->  [<mask path>]

The optional sixth column carries a per-pixel label mask for segmentation
manifests.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, ManifestError, TaxonomyError
from .taxonomy import Taxonomy, load_taxonomy, synthetic_taxonomy

TARGET_SIZE = (224, 288)
DEFAULT_STRIDE = 8
MANIFEST_NAME = "manifest.tsv"
TAXONOMY_NAME = "taxonomy.tsv"


@dataclass
class ManifestEntry:
    path: str
    scan_id: str
    frame_index: int
    fine_label: Optional[int] = None
    coarse_label: Optional[int] = None
    mask_path: Optional[str] = None
    # whether the coarse name was written explicitly (kept for lossless round trips)
    coarse_given: bool = field(default=True, repr=False, compare=False)

    @property
    def labeled(self) -> bool:
        return self.fine_label is not None or self.coarse_label is not None


@dataclass
class Frame:
    image: np.ndarray
    scan_id: str
    frame_index: int
    fine_label: Optional[int] = None
    _coarse_label: Optional[int] = None
    taxonomy: Optional[Taxonomy] = field(default=None, repr=False)

    @property
    def coarse_label(self) -> Optional[int]:
        if self._coarse_label is None and self.fine_label is not None and self.taxonomy is not None:
            return self.taxonomy.coarsen(self.fine_label)
        return self._coarse_label


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    taxonomy_ref: str
    taxonomy: Taxonomy
    root: Path = Path(".")

    def __len__(self):
        return len(self.entries)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def load_images(self) -> np.ndarray:
        """All images stacked as float32 in [0, 1]; shape (n, H, W)."""
        if not self.entries:
            return np.zeros((0, 0, 0), np.float32)
        return np.stack([load_image(self.resolve(e.path)) for e in self.entries])

    def load_masks(self) -> np.ndarray:
        missing = [e.path for e in self.entries if e.mask_path is None]
        if missing:
            raise ManifestError(f"{len(missing)} entries lack a mask column, e.g. {missing[0]}")
        return np.stack([np.asarray(Image.open(self.resolve(e.mask_path)), dtype=np.int64)
                         for e in self.entries])

    def frame(self, i: int) -> Frame:
        e = self.entries[i]
        return Frame(load_image(self.resolve(e.path)), e.scan_id, e.frame_index,
                     e.fine_label, e.coarse_label, self.taxonomy)

    def fine_labels(self) -> np.ndarray:
        return np.array([-1 if e.fine_label is None else e.fine_label for e in self.entries])

    def coarse_labels(self) -> np.ndarray:
        return np.array([-1 if e.coarse_label is None else e.coarse_label for e in self.entries])

    def scan_ids(self) -> list[str]:
        return [e.scan_id for e in self.entries]

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return replace(self, entries=[self.entries[i] for i in indices])


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return arr / 255.0


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


# -- manifest I/O ------------------------------------------------------------

def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("#taxonomy="):
        raise ManifestError(f"{path}: first line must be '#taxonomy=<path>'")
    taxonomy_ref = lines[0][len("#taxonomy="):].strip()
    if not taxonomy_ref:
        raise ManifestError(f"{path}: empty taxonomy reference")
    taxonomy = load_taxonomy(path.parent / taxonomy_ref)

    entries = []
    last_index: dict[str, int] = {}
    for lineno, raw in enumerate(lines[1:], 2):
        if not raw.strip() or raw.startswith("#"):
            continue
        parts = raw.split("\t")
        if len(parts) not in (5, 6):
            raise ManifestError(f"{path}:{lineno}: expected 5 or 6 tab-separated fields, got {len(parts)}")
        rel, scan_id, idx, fine_name, coarse_name = parts[:5]
        try:
            frame_index = int(idx)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: frame index {idx!r} is not an integer") from None
        if frame_index < 0:
            raise ManifestError(f"{path}:{lineno}: negative frame index")
        if not rel or not scan_id:
            raise ManifestError(f"{path}:{lineno}: empty path or scan id")
        if scan_id in last_index and frame_index <= last_index[scan_id]:
            raise ManifestError(f"{path}:{lineno}: frame indices of scan {scan_id!r} must increase")
        last_index[scan_id] = frame_index

        fine = None if fine_name == "-" else taxonomy.fine_id(fine_name)
        coarse = None if coarse_name == "-" else taxonomy.coarse_id(coarse_name)
        coarse_given = coarse is not None
        if fine is not None:
            implied = taxonomy.coarsen(fine)
            if coarse is not None and coarse != implied:
                raise TaxonomyError(
                    f"{path}:{lineno}: {fine_name!r} belongs to "
                    f"{taxonomy.coarse_name(implied)!r}, not {coarse_name!r}")
            coarse = implied
        mask = parts[5] if len(parts) == 6 and parts[5] not in ("", "-") else None
        entries.append(ManifestEntry(rel, scan_id, frame_index, fine, coarse, mask, coarse_given))
    return DatasetManifest(entries, taxonomy_ref, taxonomy, path.parent)


def manifest_text(manifest: DatasetManifest) -> str:
    t = manifest.taxonomy
    out = [f"#taxonomy={manifest.taxonomy_ref}"]
    for e in manifest.entries:
        fine = "-" if e.fine_label is None else t.fine_name(e.fine_label)
        coarse = "-" if e.coarse_label is None or not e.coarse_given else t.coarse_name(e.coarse_label)
        row = [e.path, e.scan_id, str(e.frame_index), fine, coarse]
        if e.mask_path is not None:
            row.append(e.mask_path)
        out.append("\t".join(row))
    return "\n".join(out) + "\n"


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(manifest_text(manifest))


# -- ingestion and preprocessing ----------------------------------------------

def subsample_video(frames: Sequence, stride: int = DEFAULT_STRIDE) -> list:
    """Keep frames 0, stride, 2*stride, ... in order."""
    if isinstance(stride, bool) or not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"stride must be an integer >= 1, got {stride!r}")
    return list(frames)[::stride]


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling with half-pixel centres (no antialiasing)."""
    image = np.asarray(image, dtype=np.float64)
    in_h, in_w = image.shape
    out_h, out_w = size

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = axis(in_h, out_h)
    x0, x1, wx = axis(in_w, out_w)
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bot = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]


def preprocess(raw_image: np.ndarray, crop_box: Optional[tuple[int, int, int, int]] = None,
               size: tuple[int, int] = TARGET_SIZE) -> np.ndarray:
    """Crop ``(top, left, bottom, right)`` (exclusive ends), resize, scale to [0, 1].

    Integer inputs are taken as 8-bit; float inputs are assumed to be in [0, 1].
    """
    raw = np.asarray(raw_image)
    if raw.ndim == 3:
        raw = raw.mean(axis=2)
    if raw.ndim != 2:
        raise ValueError(f"expected a 2-D (or H x W x C) image, got shape {raw.shape}")
    h, w = raw.shape
    top, left, bottom, right = crop_box if crop_box is not None else (0, 0, h, w)
    if not (0 <= top < bottom <= h and 0 <= left < right <= w):
        raise ValueError(f"crop box {crop_box} outside image bounds {(h, w)}")
    region = raw[top:bottom, left:right]
    if np.issubdtype(region.dtype, np.integer):
        region = region.astype(np.float64) / 255.0
    out = resize_bilinear(region, size)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# -- synthetic data ----------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_scans: int = 20
    frames_per_scan: int = 200
    n_fine_classes: int = 8
    fine_per_coarse: int = 2
    label_fraction: float = 0.5
    image_size: tuple[int, int] = (32, 32)
    seed: int = 0
    noise_sigma: float = 0.05
    # mean length of single-class segments within a scan
    segment_length: int = 25
    # amplitude of the class-independent clutter grating relative to the class signal
    clutter: float = 0.8
    sibling_spread: float = 0.35

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.validate()

    def validate(self) -> None:
        for name in ("n_scans", "frames_per_scan", "n_fine_classes", "fine_per_coarse", "segment_length"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ConfigError(f"synthetic.{name} must be a positive integer, got {v!r}")
        if not 0.0 <= self.label_fraction <= 1.0:
            raise ConfigError(f"synthetic.label_fraction must be in [0, 1], got {self.label_fraction}")
        if self.n_fine_classes % self.fine_per_coarse:
            raise ConfigError("synthetic.n_fine_classes must be divisible by synthetic.fine_per_coarse")
        if len(self.image_size) != 2 or min(self.image_size) < 4:
            raise ConfigError(f"synthetic.image_size must be two sizes >= 4, got {self.image_size}")
        if self.noise_sigma < 0 or self.clutter < 0:
            raise ConfigError("synthetic.noise_sigma and synthetic.clutter must be nonnegative")
        if not 0 < self.sibling_spread < 1:
            raise ConfigError("synthetic.sibling_spread must be in (0, 1)")


def labels_per_scan(n_scans: int, frames_per_scan: int, fraction: float) -> list[int]:
    """Floor per scan, then hand the remainder of the global floor to the earliest scans."""
    total = math.floor(fraction * n_scans * frames_per_scan + 1e-9)
    per = math.floor(fraction * frames_per_scan + 1e-9)
    counts = [per] * n_scans
    for k in range(total - per * n_scans):
        counts[k] += 1
    return counts


def class_texture_params(n_fine: int, fine_per_coarse: int, sibling_spread: float = 0.35):
    """(orientation, frequency) per fine class.

    Class patterns are plaids of the gratings at ``theta`` and ``pi - theta``,
    so class identity survives a horizontal flip. Coarse groups are spread
    evenly over (0, pi/2) and alternate between two frequency bands. Children
    of one group sit ``sibling_spread`` of the inter-group gap apart, with a
    slight frequency step, so siblings are closer to each other than to any
    other group.
    """
    n_coarse = n_fine // fine_per_coarse
    gap = (math.pi / 2) / n_coarse
    params = []
    for c in range(n_coarse):
        base_theta = gap * (c + 0.5)
        base_freq = 0.11 if c % 2 == 0 else 0.19
        for j in range(fine_per_coarse):
            rel = j - (fine_per_coarse - 1) / 2
            params.append((base_theta + rel * sibling_spread * gap, base_freq * (1.0 + 0.08 * rel)))
    return params


def _grating(size, theta, freq, phase, center):
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # frequencies are in cycles per pixel at a 32-pixel short side
    scale = min(h, w) / 32.0
    u = (xx - center[1]) * math.cos(theta) + (yy - center[0]) * math.sin(theta)
    return np.sin(2 * math.pi * freq / scale * u + phase)


def render_texture(rng: np.random.Generator, size, theta, freq, phase, center, contrast, gain, sigma,
                   clutter=None):
    """One frame: windowed class grating + optional clutter grating + Gaussian noise."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    r2 = (xx - center[1]) ** 2 + (yy - center[0]) ** 2
    envelope = np.exp(-r2 / (2 * (0.35 * min(h, w)) ** 2))
    plaid = 0.5 * (_grating(size, theta, freq, phase, center) + _grating(size, math.pi - theta, freq, phase, center))
    img = gain + 0.4 * contrast * plaid * envelope
    if clutter is not None:
        c_theta, c_freq, c_phase, c_amp = clutter
        img = img + 0.4 * c_amp * _grating(size, c_theta, c_freq, c_phase, (h / 2, w / 2))
    img = img + rng.normal(0.0, sigma, size=(h, w))
    return np.clip(img, 0.0, 1.0)


def render_synthetic(spec: SyntheticSpec):
    """Generate ``(images, entries, taxonomy)`` in memory (deterministic in ``spec.seed``)."""
    spec.validate()
    taxonomy = synthetic_taxonomy(spec.n_fine_classes, spec.fine_per_coarse)
    params = class_texture_params(spec.n_fine_classes, spec.fine_per_coarse, spec.sibling_spread)
    rng = np.random.default_rng(spec.seed)
    h, w = spec.image_size
    counts = labels_per_scan(spec.n_scans, spec.frames_per_scan, spec.label_fraction)

    images = np.empty((spec.n_scans * spec.frames_per_scan, h, w), np.float32)
    entries = []
    n = 0
    for s in range(spec.n_scans):
        scan_id = f"scan{s:04d}"
        gain = rng.uniform(0.35, 0.65)
        classes = np.empty(spec.frames_per_scan, np.int64)
        t = 0
        prev = -1
        while t < spec.frames_per_scan:
            length = int(rng.integers(spec.segment_length // 2 + 1, 3 * spec.segment_length // 2 + 2))
            choices = [c for c in range(spec.n_fine_classes) if c != prev] or [prev]
            cls = int(rng.choice(choices))
            classes[t:t + length] = cls
            prev = cls
            t += length
        labeled = np.zeros(spec.frames_per_scan, bool)
        labeled[rng.choice(spec.frames_per_scan, size=counts[s], replace=False)] = True
        phase = rng.uniform(0, 2 * math.pi)
        center = np.array([h / 2, w / 2]) + rng.normal(0, 0.1 * min(h, w), 2)
        for f in range(spec.frames_per_scan):
            cls = int(classes[f])
            theta, freq = params[cls]
            # slow within-scan drift of nuisance parameters
            phase += rng.normal(0.6, 0.2)
            center = np.clip(center + rng.normal(0, 0.5, 2), [0.25 * h, 0.25 * w], [0.75 * h, 0.75 * w])
            theta_j = theta + rng.normal(0, 0.05)
            freq_j = freq * math.exp(rng.normal(0, 0.04))
            contrast = rng.uniform(0.6, 1.0)
            clutter = (rng.uniform(0, math.pi), rng.uniform(0.08, 0.22), rng.uniform(0, 2 * math.pi),
                       spec.clutter * rng.uniform(0.5, 1.0))
            images[n] = render_texture(rng, (h, w), theta_j, freq_j, phase, center, contrast,
                                       gain, spec.noise_sigma, clutter)
            fine = cls if labeled[f] else None
            entries.append(ManifestEntry(
                path=f"images/{scan_id}_{f:05d}.png", scan_id=scan_id, frame_index=f,
                fine_label=fine, coarse_label=None if fine is None else taxonomy.coarsen(fine)))
            n += 1
    return images, entries, taxonomy


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write images, taxonomy and manifest under ``out_dir``; return the manifest."""
    images, entries, taxonomy = render_synthetic(spec)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    taxonomy.save(out / TAXONOMY_NAME)
    for img, e in zip(images, entries):
        save_image(out / e.path, img)
    manifest = DatasetManifest(entries, TAXONOMY_NAME, taxonomy, out)
    write_manifest(manifest, out / MANIFEST_NAME)
    return manifest


def default_data_root() -> Path:
    return Path(os.environ.get("AWCL_DATA_ROOT", "."))
