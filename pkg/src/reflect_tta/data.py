"""Synthetic ring/disc scenes, simulated scanner shift, PGM and manifest I/O."""

from __future__ import annotations

import json
import os
import re
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import FormatError, GenError

FAMILIES = ("disc", "ellipse", "crescent", "ring")
SPLITS = ("train", "val", "test")


@dataclass
class SceneSpec:
    """Nested structures drawn from the outside in.

    ``families[c-1]`` is the shape of class ``c``.  A ring consumes
    ``thickness`` pixels of the current radius and hands the remaining inner
    radius to the next class; filled shapes shrink it by ``inner_scale``.
    """

    size: int = 64
    k_classes: int = 3
    families: tuple = ("ring", "disc")
    radius_range: tuple = (11.0, 19.0)
    thickness_range: tuple = (3.0, 6.0)
    inner_scale_range: tuple = (0.45, 0.65)
    aspect_range: tuple = (0.75, 1.0)
    center_jitter: float = 8.0
    intensities: tuple = (0.2, 0.45, 0.8)
    texture_noise: float = 0.03
    blur_sigma: float = 0.6

    def __post_init__(self):
        self.families = tuple(self.families)
        self.intensities = tuple(self.intensities)
        if len(self.families) != self.k_classes - 1:
            raise ValueError(f"need {self.k_classes - 1} shape families, got {len(self.families)}")
        if len(self.intensities) != self.k_classes:
            raise ValueError(f"need {self.k_classes} class intensities")
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown shape families {sorted(unknown)}")
        if self.radius_range[1] + self.center_jitter >= self.size / 2:
            raise ValueError("shapes would not fit inside the canvas")


@dataclass
class DomainShiftSpec:
    gamma_range: tuple = (1.0, 1.0)
    bias_amplitude: float = 0.0
    contrast_range: tuple = (1.0, 1.0)
    noise_sigma: float = 0.0
    speckle: bool = False

    @classmethod
    def benchmark(cls):
        """Shift used by the test split of the adaptation benchmark."""
        return cls(gamma_range=(1.6, 2.2), bias_amplitude=0.25, contrast_range=(0.6, 0.8), noise_sigma=0.04)

    def is_identity(self):
        return (self.gamma_range == (1.0, 1.0) and self.bias_amplitude == 0 and self.contrast_range == (1.0, 1.0)
                and self.noise_sigma == 0 and not self.speckle)


def _rng(seed, *stream):
    return np.random.default_rng([int(seed), *stream])


def _ellipse(yy, xx, cy, cx, radius, aspect, angle):
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / radius) ** 2 + (v / (radius * aspect)) ** 2 <= 1.0


def _draw(spec, rng):
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    label = np.zeros((n, n), dtype=np.uint8)
    cy, cx = (n - 1) / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter, size=2)
    radius = rng.uniform(*spec.radius_range)
    aspect = rng.uniform(*spec.aspect_range)
    angle = rng.uniform(0, np.pi)
    for cls, family in enumerate(spec.families, start=1):
        if radius < 1.0:
            break
        outer = _ellipse(yy, xx, cy, cx, radius, aspect if family != "disc" else 1.0, angle)
        if family == "ring":
            inner_r = radius - rng.uniform(*spec.thickness_range)
            inner = _ellipse(yy, xx, cy, cx, inner_r, aspect, angle) if inner_r > 0 else np.zeros_like(outer)
            region = outer & ~inner
            next_r = inner_r
        elif family == "crescent":
            shift = radius * rng.uniform(0.3, 0.5)
            bite = _ellipse(yy, xx, cy + shift * np.sin(angle), cx + shift * np.cos(angle), radius * 0.9, aspect, angle)
            region = outer & ~bite
            next_r = radius * rng.uniform(*spec.inner_scale_range)
        else:
            region = outer
            next_r = radius * rng.uniform(*spec.inner_scale_range)
        label[region] = cls
        radius = next_r
    return label


def render(label, spec, rng):
    """Image in [0,1] for a label map: class intensity + smooth texture + blur."""
    base = np.asarray(spec.intensities)[label]
    if spec.texture_noise > 0:
        texture = ndimage.gaussian_filter(rng.standard_normal(label.shape), 1.0)
        texture /= texture.std() + 1e-12
        base = base + spec.texture_noise * texture
    if spec.blur_sigma > 0:
        base = ndimage.gaussian_filter(base, spec.blur_sigma, mode="nearest")
    return np.clip(base, 0.0, 1.0)


def generate_scene(spec, seed):
    """Deterministic (image, label) for ``seed``; every class is present or GenError."""
    for attempt in range(10):
        rng = _rng(seed, attempt)
        label = _draw(spec, rng)
        if np.unique(label).size == spec.k_classes:
            return render(label, spec, rng), label
    raise GenError(f"scene seed {seed}: not every class present after 10 attempts")


def _bias_field(shape, rng):
    # low-order polynomial in normalised coordinates, rescaled to [-1, 1]
    h, w = shape
    y, x = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    terms = np.stack([x, y, x * y, x * x, y * y])
    field = np.tensordot(rng.uniform(-1, 1, size=len(terms)), terms, axes=1)
    return field / (np.abs(field).max() + 1e-12)


def apply_domain_shift(image, spec, seed):
    """gamma -> multiplicative bias field -> contrast about 0.5 -> noise -> clip to [0,1]."""
    image = np.asarray(image, dtype=float)
    if spec.is_identity():
        return image.copy()
    rng = _rng(seed, 0xD5)
    out = image ** rng.uniform(*spec.gamma_range)
    if spec.bias_amplitude:
        out = out * (1.0 + spec.bias_amplitude * _bias_field(out.shape, rng))
    if spec.contrast_range != (1.0, 1.0):
        out = 0.5 + rng.uniform(*spec.contrast_range) * (out - 0.5)
    if spec.speckle:
        out = out * (1.0 + 0.1 * rng.standard_normal(out.shape))
    if spec.noise_sigma:
        out = out + spec.noise_sigma * rng.standard_normal(out.shape)
    return np.clip(out, 0.0, 1.0)


@dataclass
class Sample:
    image: np.ndarray
    label: np.ndarray
    id: str = ""
    domain: str = "source"
    source_image: np.ndarray = field(default=None, repr=False)

    def __iter__(self):
        return iter((self.image, self.label))

    def __getitem__(self, i):
        return (self.image, self.label)[i]

    def __len__(self):
        return 2


def split_seed(base_seed, split, index):
    return int(np.random.SeedSequence([int(base_seed), SPLITS.index(split), int(index)]).generate_state(1)[0])


def make_split(spec, count, seed, split="train", shift=None):
    """In-memory samples; shifted splits keep the unshifted image in ``source_image``."""
    samples = []
    for i in range(count):
        s = split_seed(seed, split, i)
        image, label = generate_scene(spec, s)
        if shift is not None:
            shifted = apply_domain_shift(image, shift, s)
            samples.append(Sample(shifted, label, f"{split}_{i:04d}", "shifted", image))
        else:
            samples.append(Sample(image, label, f"{split}_{i:04d}", "source", image))
    return samples


# -- PGM -----------------------------------------------------------------

_PGM_HEADER = re.compile(rb"\A(P\d)\s+(?:#.*?\n\s*)*(\d+)\s+(?:#.*?\n\s*)*(\d+)\s+(?:#.*?\n\s*)*(\d+)\s")


def _atomic_write(path, blob):
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def encode_pgm(values):
    values = np.asarray(values, dtype=np.uint8)
    h, w = values.shape
    return b"P5\n%d %d\n255\n" % (w, h) + values.tobytes()


def decode_pgm(blob):
    m = _PGM_HEADER.match(blob)
    if not m:
        raise FormatError("malformed PGM header")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if magic != b"P5":
        raise FormatError(f"expected binary greyscale P5, got {magic.decode()}")
    if maxval != 255:
        raise FormatError(f"only 8-bit PGM supported (maxval {maxval})")
    body = blob[m.end():]
    if len(body) != w * h:
        raise FormatError(f"PGM payload has {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def save_image(path, image):
    """Store a [0,1] image as 8-bit P5 (round to nearest of 256 levels)."""
    _atomic_write(path, encode_pgm(np.round(np.clip(image, 0.0, 1.0) * 255.0)))


def load_image(path):
    with open(path, "rb") as fh:
        return decode_pgm(fh.read()).astype(np.float32) / 255.0


def save_label(path, label):
    label = np.asarray(label)
    if label.min() < 0 or label.max() > 255:
        raise FormatError("labels must fit in 8 bits")
    _atomic_write(path, encode_pgm(label))


def load_label(path):
    with open(path, "rb") as fh:
        return decode_pgm(fh.read()).astype(np.int64)


# -- manifests -----------------------------------------------------------

def build_manifest(root, counts=(200, 50, 100), seed=0, scene=None, shift=None, shifted_splits=("test",)):
    """Generate and write every split; returns the manifest as a list of split objects.

    Layout: ``root/<split>/<id>.pgm`` (image) and ``root/<split>/<id>_label.pgm``;
    ``root/manifest.json`` holds ``[{"split": ..., "items": [{"image", "label", "domain"}]}]``.
    """
    scene = scene or SceneSpec()
    shift = shift or DomainShiftSpec.benchmark()
    os.makedirs(root, exist_ok=True)
    manifest = []
    for split, count in zip(SPLITS, counts):
        os.makedirs(os.path.join(root, split), exist_ok=True)
        samples = make_split(scene, count, seed, split, shift if split in shifted_splits else None)
        items = []
        for s in samples:
            image_rel = f"{split}/{s.id}.pgm"
            label_rel = f"{split}/{s.id}_label.pgm"
            save_image(os.path.join(root, image_rel), s.image)
            save_label(os.path.join(root, label_rel), s.label)
            items.append({"image": image_rel, "label": label_rel, "domain": s.domain})
        manifest.append({"split": split, "items": items})
    _atomic_write(os.path.join(root, "manifest.json"), json.dumps(manifest, indent=1).encode())
    return manifest


def read_manifest(root):
    path = os.path.join(root, "manifest.json")
    with open(path) as fh:
        manifest = json.load(fh)
    seen = set()
    for entry in manifest:
        for item in entry["items"]:
            if item["image"] in seen:
                raise FormatError(f"{item['image']} listed in more than one split")
            seen.add(item["image"])
    return manifest


def load_split(root, split, manifest=None):
    manifest = manifest if manifest is not None else read_manifest(root)
    for entry in manifest:
        if entry["split"] == split:
            return [
                Sample(load_image(os.path.join(root, it["image"])), load_label(os.path.join(root, it["label"])),
                       os.path.splitext(os.path.basename(it["image"]))[0], it["domain"])
                for it in entry["items"]
            ]
    return []


def spec_dict(spec):
    return asdict(spec)
