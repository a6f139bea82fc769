"""Synthetic two-modality paired data with known ground-truth misalignment."""
from __future__ import annotations

import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import ndimage

from . import geometry

GENERATOR_VERSION = 1
SAMPLE_ARRAYS = ("xa", "xb", "mask_a", "mask_b", "gt_affine", "gt_field")


class DatasetError(RuntimeError):
    pass


class DataCorruptionError(DatasetError):
    pass


@dataclass
class CorruptionRanges:
    """Magnitudes of the random corruption applied to modality B.

    Angles in degrees; everything else in normalized units.
    """

    rotation_deg: float = 15.0
    scale: float = 0.1           # isotropic scale drawn from [1 - scale, 1 + scale]
    translation: float = 0.25
    shear: float = 0.05
    nr_mag: float = 0.1
    nr_sigma: float = 8.0
    noise: float = 0.02

    def __post_init__(self):
        if self.rotation_deg < 0 or self.rotation_deg > 180:
            raise ValueError("rotation_deg must lie in [0, 180]")
        if not 0 <= self.scale < 1:
            raise ValueError("scale range must lie in [0, 1)")
        for name in ("translation", "shear", "nr_mag", "noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.nr_mag > 0.2:
            raise ValueError("nr_mag must not exceed 0.2 normalized units")
        if self.nr_sigma <= 0:
            raise ValueError("nr_sigma must be positive")

    @classmethod
    def zero(cls) -> "CorruptionRanges":
        return cls(rotation_deg=0, scale=0, translation=0, shear=0, nr_mag=0)


@dataclass
class SyntheticSample:
    xa: np.ndarray          # (*shape) modality A, aligned with the anatomy
    xb: np.ndarray          # (*shape) modality B, corrupted by the ground-truth warp
    mask_a: np.ndarray      # (*shape) uint8
    mask_b: np.ndarray
    gt_affine: np.ndarray   # (n, n+1)
    gt_field: np.ndarray    # (*shape, n)
    seed: int

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.xa.shape


def _rotation(n: int, angles: Sequence[float]) -> np.ndarray:
    if n == 2:
        c, s = math.cos(angles[0]), math.sin(angles[0])
        return np.array([[c, -s], [s, c]])
    R = np.eye(3)
    for axis, a in enumerate(angles):
        i, j = [k for k in range(3) if k != axis]
        Ra = np.eye(3)
        Ra[i, i] = Ra[j, j] = math.cos(a)
        Ra[i, j], Ra[j, i] = -math.sin(a), math.sin(a)
        R = R @ Ra
    return R


def generate_anatomy(seed: int, shape: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Procedural label map of 3-6 overlapping ellipsoids on a background.

    Returns ``(labels, mask)``: labels are 0 (background) .. k, label 1 is the
    largest blob and ``mask`` marks where it stays visible.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 16 for s in shape):
        raise ValueError(f"every axis must be >= 16 voxels, got {shape}")
    if any(s % 4 for s in shape):
        raise ValueError(f"every axis must be divisible by 4, got {shape}")
    n = len(shape)
    rng = np.random.default_rng(seed)
    k = int(rng.integers(3, 7))
    coords = geometry.identity_grid(shape, n, dtype=torch.float64).numpy()
    labels = np.zeros(shape, dtype=np.int64)
    for label in range(1, k + 1):
        if label == 1:
            centre = rng.uniform(-0.2, 0.2, n)
            radii = rng.uniform(0.5, 0.7, n)
        else:
            centre = rng.uniform(-0.45, 0.45, n)
            radii = rng.uniform(0.1, 0.25, n)
        R = _rotation(n, rng.uniform(-math.pi, math.pi, 1 if n == 2 else 3))
        local = (coords - centre) @ R
        inside = np.sum((local / radii) ** 2, axis=-1) <= 1.0
        labels[inside] = label
    mask = (labels == 1).astype(np.uint8)
    return labels, mask


# Per-label intensities, indexed by label 1..6.  Modality B inverts the
# contrast of the dominant structure and permutes the rest, so intensities
# do not correspond monotonically across modalities.
_RAMP_A = np.array([-1.0, 0.7, -0.3, 0.0, 0.3, 0.5, 1.0])
_RAMP_B = np.array([-1.0, -0.85, 0.3, 0.9, -0.5, 1.0, 0.6])


def render_modalities(labels: np.ndarray, noise: float = 0.0, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Render modalities A and B of a label map, both in [-1, 1]."""
    xa = ndimage.gaussian_filter(_RAMP_A[labels], sigma=1.0, mode="nearest")
    xb = ndimage.gaussian_filter(_RAMP_B[labels], sigma=1.0, mode="nearest")
    if noise > 0:
        rng = np.random.default_rng(seed)
        xa = add_noise(xa, rng, noise, textured=False)
        xb = add_noise(xb, rng, noise, textured=True)
    return np.clip(xa, -1, 1), np.clip(xb, -1, 1)


def add_noise(x: np.ndarray, rng: np.random.Generator, sigma: float, textured: bool) -> np.ndarray:
    """White noise, or spatially correlated noise of the same std when ``textured``."""
    eps = rng.standard_normal(x.shape)
    if textured:
        eps = ndimage.gaussian_filter(eps, sigma=1.0, mode="wrap")
        eps /= eps.std()
    return np.clip(x + sigma * eps, -1, 1)


def random_affine(rng: np.random.Generator, ranges: CorruptionRanges, n: int = 2) -> np.ndarray:
    """Sample ``rotation . scale . shear`` plus translation uniformly within ``ranges``."""
    theta = math.radians(ranges.rotation_deg)
    R = _rotation(n, rng.uniform(-theta, theta, 1 if n == 2 else 3))
    S = np.eye(n) * rng.uniform(1 - ranges.scale, 1 + ranges.scale)
    H = np.eye(n)
    for i in range(n):
        for j in range(n):
            if i != j:
                H[i, j] = rng.uniform(-ranges.shear, ranges.shear)
    t = rng.uniform(-ranges.translation, ranges.translation, n)
    return np.concatenate([R @ S @ H, t[:, None]], axis=1)


def random_smooth_field(rng: np.random.Generator, shape: Sequence[int], max_mag: float = 0.1, smoothness: float = 8.0) -> np.ndarray:
    """Gaussian-smoothed white noise rescaled so its largest component is ``max_mag``."""
    shape = tuple(shape)
    n = len(shape)
    noise = rng.standard_normal((n,) + shape)
    if max_mag == 0:
        return np.zeros(shape + (n,))
    field = np.stack([ndimage.gaussian_filter(c, sigma=smoothness, mode="reflect") for c in noise], axis=-1)
    return field * (max_mag / np.abs(field).max())


def _warp(x: np.ndarray, A: np.ndarray, u: Optional[np.ndarray], interp: str, pad: float) -> np.ndarray:
    img = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64))[None, None]
    At = torch.from_numpy(A)[None]
    ut = None if u is None else torch.from_numpy(u)[None]
    return geometry.warp_image(img, At, ut, interp, pad)[0, 0].numpy()


def make_pair(seed: int, shape: Sequence[int], ranges: Optional[CorruptionRanges] = None) -> SyntheticSample:
    """Aligned two-modality rendering with modality B (and its mask) warped by a random transform."""
    ranges = ranges or CorruptionRanges()
    shape = tuple(int(s) for s in shape)
    n = len(shape)
    labels, mask_a = generate_anatomy(seed, shape)
    xa, xb_aligned = render_modalities(labels)
    rng = np.random.default_rng([seed, 1])
    A = random_affine(rng, ranges, n)
    u = random_smooth_field(rng, shape, ranges.nr_mag, ranges.nr_sigma)
    xb = _warp(xb_aligned, A, u, "linear", -1.0)
    mask_b = _warp(mask_a.astype(np.float64), A, u, "nearest", 0.0).astype(np.uint8)
    if ranges.noise > 0:
        noise_rng = np.random.default_rng([seed, 2])
        xa = add_noise(xa, noise_rng, ranges.noise, textured=False)
        xb = add_noise(xb, noise_rng, ranges.noise, textured=True)
    return SyntheticSample(
        xa=np.clip(xa, -1, 1).astype(np.float32),
        xb=np.clip(xb, -1, 1).astype(np.float32),
        mask_a=mask_a,
        mask_b=mask_b,
        gt_affine=A,
        gt_field=u,
        seed=int(seed),
    )


def sample_seeds(seed: int, count: int) -> List[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)]


def make_dataset(seed: int, count: int, shape: Sequence[int], ranges: Optional[CorruptionRanges] = None) -> List[SyntheticSample]:
    """A dataset that is a pure function of ``(seed, count, shape, ranges)``."""
    return [make_pair(s, shape, ranges) for s in sample_seeds(seed, count)]


def normalize_intensity(raw: np.ndarray) -> np.ndarray:
    """Min-max map to [-1, 1]; a constant image maps to all -1."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.full(raw.shape, -1.0)
    return 2.0 * (raw - lo) / (hi - lo) - 1.0


def save_samples(path, samples: Sequence[SyntheticSample], ranges: Optional[CorruptionRanges] = None, seed: Optional[int] = None) -> Path:
    """Write one ``.npz`` per sample plus ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        name = f"sample_{i:05d}.npz"
        np.savez(path / name, **{k: getattr(s, k) for k in SAMPLE_ARRAYS})
        entries.append({"file": name, "seed": s.seed, "shape": list(s.shape)})
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "seed": seed,
        "count": len(entries),
        "ranges": asdict(ranges) if ranges is not None else None,
        "samples": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"no manifest.json in {path}") from None
    except json.JSONDecodeError as e:
        raise DataCorruptionError(f"unreadable manifest in {path}: {e}") from None
    if manifest.get("count") != len(manifest.get("samples", [])):
        raise DatasetError(f"manifest in {path} lists {len(manifest.get('samples', []))} samples but count={manifest.get('count')}")
    return manifest


def load_samples(path) -> List[SyntheticSample]:
    path = Path(path)
    manifest = read_manifest(path)
    samples = []
    for entry in manifest["samples"]:
        f = path / entry["file"]
        if not f.exists():
            raise DatasetError(f"manifest lists missing file {f}")
        try:
            with np.load(f) as data:
                missing = [k for k in SAMPLE_ARRAYS if k not in data.files]
                if missing:
                    raise DatasetError(f"{f} lacks arrays {missing}")
                arrays = {k: data[k] for k in SAMPLE_ARRAYS}
        except (zipfile.BadZipFile, EOFError, OSError, ValueError) as e:
            raise DataCorruptionError(f"corrupt sample file {f}: {e}") from None
        if list(arrays["xa"].shape) != entry["shape"]:
            raise DatasetError(f"{f} has shape {arrays['xa'].shape}, manifest says {entry['shape']}")
        samples.append(SyntheticSample(seed=int(entry["seed"]), **arrays))
    return samples


def to_tensors(samples: Iterable[SyntheticSample], dtype=torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack samples into ``(B, 1, *shape)`` tensors for x^A and x^B."""
    samples = list(samples)
    xa = torch.from_numpy(np.stack([s.xa for s in samples]))[:, None].to(dtype)
    xb = torch.from_numpy(np.stack([s.xb for s in samples]))[:, None].to(dtype)
    return xa, xb
