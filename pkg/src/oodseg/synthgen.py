"""Multi-environment synthetic segmentation data with controllable shift.

Each sample is a single deformed ellipsoid ("organ") rendered with an
environment-specific contrast, bias field and noise level. The background
carries a checkerboard whose amplitude is correlated with organ size; the sign
of that correlation differs between environments, which gives a model a
shortcut that only holds in some of them.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .volumes import (LabelMask, Sample, Volume, load_raw_mask, load_raw_volume, read_raw_array,
                      write_raw_volume)

# Radial deformation below this amplitude keeps the organ star-shaped and a
# single connected component after voxelization.
MAX_CONNECTED_DEFORMATION = 0.3

MANIFEST_NAME = "manifest.txt"
MANIFEST_HEADER = "sample_id\tenv_id\tlabeled\tvolume\tmask"


@dataclass(frozen=True)
class EnvSpec:
    env_id: int
    name: str = ""
    n_labeled: int = 20
    n_unlabeled: int = 0
    volume_shape: Tuple[int, int, int] = (32, 32, 24)
    # organ radii as fractions of each axis length
    radius_range: Tuple[float, float] = (0.15, 0.25)
    deformation: float = 0.1
    foreground_mean: float = 1.0
    background_mean: float = 0.3
    bias_strength: float = 0.1
    noise_std: float = 0.05
    spurious_corr: float = 0.0
    cue_amplitude: float = 0.1
    # site-specific acquisition artifact: stripes along one axis
    stripe_amplitude: float = 0.0
    stripe_axis: int = 0
    stripe_period: float = 3.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_labeled < 0 or self.n_unlabeled < 0:
            raise ValueError("sample counts must be non-negative")
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 4:
            raise ValueError(f"volume_shape must be three axes >= 4: {self.volume_shape}")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid radius range {self.radius_range}")
        if not -1.0 <= self.spurious_corr <= 1.0:
            raise ValueError("spurious_corr must lie in [-1, 1]")
        if self.deformation < 0 or self.noise_std < 0 or self.bias_strength < 0:
            raise ValueError("deformation, noise_std and bias_strength must be non-negative")
        if self.stripe_amplitude < 0 or self.stripe_axis not in (0, 1, 2) or self.stripe_period <= 0:
            raise ValueError("invalid stripe artifact settings")
        for n in self.volume_shape:
            extent = hi * n * (1.0 + self.deformation)
            if 2.0 * extent + 2.0 > n:
                raise ValueError(
                    f"infeasible geometry: organ extent {2 * extent:.1f} does not fit axis of {n}"
                )

    @property
    def n_samples(self) -> int:
        return self.n_labeled + self.n_unlabeled


@dataclass
class EnvironmentDataset:
    env_id: int
    name: str
    samples: List[Sample] = field(default_factory=list)
    # per-sample generation parameters (center, radii, cue amplitude, ...)
    metadata: Dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        for s in self.samples:
            if s.environment_id != self.env_id:
                raise ValueError(f"sample {s.sample_id} has env {s.environment_id}, expected {self.env_id}")

    def __len__(self):
        return len(self.samples)

    @property
    def sample_ids(self) -> List[str]:
        return [s.sample_id for s in self.samples]

    @property
    def labeled_ids(self) -> List[str]:
        return [s.sample_id for s in self.samples if s.labeled]

    def by_id(self) -> Dict[str, Sample]:
        return {s.sample_id: s for s in self.samples}


def sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, sample_id)``."""
    digest = hashlib.blake2b(f"{int(seed)}:{sample_id}".encode(), digest_size=16).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))


def _size_moments(lo: float, hi: float) -> Tuple[float, float]:
    # mean and std of the product of three iid U(lo, hi) radius fractions
    m1 = (lo + hi) / 2.0
    m2 = (lo * lo + lo * hi + hi * hi) / 3.0
    mean = m1 ** 3
    var = m2 ** 3 - m1 ** 6
    return mean, math.sqrt(max(var, 0.0))


def checkerboard(shape, period: int = 4) -> np.ndarray:
    half = max(period // 2, 1)
    grid = np.indices(shape)
    idx = sum(grid[ax] // half for ax in range(3))
    return np.where(idx % 2 == 0, 1.0, -1.0)


def _organ_mask(shape, center, radii, deformation, rng) -> np.ndarray:
    grid = np.indices(shape, dtype=np.float64)
    rel = [(grid[ax] - center[ax]) / radii[ax] for ax in range(3)]
    rho = np.sqrt(rel[0] ** 2 + rel[1] ** 2 + rel[2] ** 2)
    # low-frequency radial deformation; draws happen even at zero amplitude so
    # the random stream does not depend on the deformation setting
    dirs = rng.normal(size=(3, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    freqs = rng.integers(1, 3, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    if deformation == 0:
        return (rho <= 1.0).astype(np.uint8)
    safe = np.where(rho > 0, rho, 1.0)
    unit = [r / safe for r in rel]
    wobble = np.zeros(shape)
    for j in range(3):
        proj = dirs[j, 0] * unit[0] + dirs[j, 1] * unit[1] + dirs[j, 2] * unit[2]
        wobble += np.sin(np.pi * freqs[j] * proj + phases[j])
    wobble /= 3.0
    return (rho <= 1.0 + deformation * wobble).astype(np.uint8)


def _bias(shape, strength, rng) -> np.ndarray:
    coeffs = rng.uniform(-1.0, 1.0, size=6)
    if strength == 0:
        return np.ones(shape)
    x, y, z = np.meshgrid(*[np.linspace(-1, 1, n) for n in shape], indexing="ij")
    poly = (coeffs[0] * x + coeffs[1] * y + coeffs[2] * z
            + coeffs[3] * x * y + coeffs[4] * y * z + coeffs[5] * x * z)
    return np.exp(strength * poly)


def generate_sample(spec: EnvSpec, index: int, labeled: bool) -> Tuple[Sample, dict]:
    sample_id = f"e{spec.env_id}_{index:04d}"
    rng = sample_rng(spec.seed, sample_id)
    shape = tuple(spec.volume_shape)
    lo, hi = spec.radius_range

    frac = rng.uniform(lo, hi, size=3)
    radii = frac * np.array(shape, dtype=np.float64)
    extent = radii * (1.0 + spec.deformation)
    center = np.array([rng.uniform(e, n - 1 - e) for e, n in zip(extent, shape)])
    mask = _organ_mask(shape, center, radii, spec.deformation, rng)

    mean_size, std_size = _size_moments(lo, hi)
    size_z = (np.prod(frac) - mean_size) / std_size if std_size > 0 else 0.0
    rho = spec.spurious_corr
    cue = spec.cue_amplitude * (rho * size_z + math.sqrt(max(1.0 - rho * rho, 0.0)) * rng.normal())

    image = np.where(mask == 1, spec.foreground_mean, spec.background_mean + cue * checkerboard(shape))
    image = image * _bias(shape, spec.bias_strength, rng)
    phase = rng.uniform(0, 2 * np.pi)
    if spec.stripe_amplitude > 0:
        coord = np.indices(shape)[spec.stripe_axis]
        image = image + spec.stripe_amplitude * np.sin(2 * np.pi * coord / spec.stripe_period + phase)
    noise = rng.normal(0.0, 1.0, size=shape)
    if spec.noise_std > 0:
        image = image + spec.noise_std * noise

    sample = Sample(
        volume=Volume(image.astype(np.float32)),
        environment_id=spec.env_id,
        sample_id=sample_id,
        mask=LabelMask(mask) if labeled else None,
    )
    meta = {
        "center": center.tolist(),
        "radii": radii.tolist(),
        "size_z": float(size_z),
        "cue": float(cue),
        "foreground_fraction": float(mask.mean()),
    }
    return sample, meta


def generate_environment(spec: EnvSpec) -> EnvironmentDataset:
    spec.validate()
    ds = EnvironmentDataset(env_id=spec.env_id, name=spec.name or f"env{spec.env_id}")
    for i in range(spec.n_samples):
        sample, meta = generate_sample(spec, i, labeled=i < spec.n_labeled)
        ds.samples.append(sample)
        ds.metadata[sample.sample_id] = meta
    return ds


def default_env_suite(scale: str = "desk", seed: int = 0) -> List[EnvSpec]:
    """Three environments; the first two share the spurious-cue sign, the third flips it."""
    if scale == "desk":
        shape, n_lab, n_unl = (32, 32, 24), 20, 4
    elif scale == "full":
        shape, n_lab, n_unl = (64, 64, 48), 100, 20
    else:
        raise ValueError(f"unknown scale {scale!r}; expected 'desk' or 'full'")
    common = dict(volume_shape=shape, n_labeled=n_lab, n_unlabeled=n_unl, seed=seed)
    return [
        EnvSpec(env_id=0, name="site_a", foreground_mean=1.0, background_mean=0.30,
                noise_std=0.03, bias_strength=0.10, deformation=0.10, spurious_corr=0.8,
                cue_amplitude=0.08, stripe_amplitude=0.05, stripe_axis=0, **common),
        EnvSpec(env_id=1, name="site_b", foreground_mean=0.85, background_mean=0.40,
                noise_std=0.10, bias_strength=0.20, deformation=0.15, spurious_corr=0.6,
                cue_amplitude=0.08, stripe_amplitude=0.05, stripe_axis=1, **common),
        EnvSpec(env_id=2, name="site_c", foreground_mean=0.75, background_mean=0.45,
                noise_std=0.20, bias_strength=0.30, deformation=0.25, spurious_corr=-0.8,
                cue_amplitude=0.08, stripe_amplitude=0.05, stripe_axis=2, **common),
    ]


def generate_suite(specs: Sequence[EnvSpec]) -> List[EnvironmentDataset]:
    ids = [s.env_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate env ids in suite: {ids}")
    return [generate_environment(s) for s in specs]


# ------------------------------------------------------------------- disk layout


def write_datasets(datasets: Sequence[EnvironmentDataset], out_dir: Union[str, Path]) -> Path:
    """Write raw volume/mask files plus ``manifest.txt``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"#env\t{ds.env_id}\t{ds.name}" for ds in datasets]
    lines.append(MANIFEST_HEADER)
    for ds in datasets:
        env_dir = out_dir / ds.name
        env_dir.mkdir(exist_ok=True)
        for s in ds.samples:
            vol_rel = f"{ds.name}/{s.sample_id}_img.oodv"
            write_raw_volume(out_dir / vol_rel, s.volume.voxels)
            mask_rel = "-"
            if s.labeled:
                mask_rel = f"{ds.name}/{s.sample_id}_seg.oodv"
                write_raw_volume(out_dir / mask_rel, s.mask.voxels.astype(np.float32))
            lines.append(f"{s.sample_id}\t{ds.env_id}\t{int(s.labeled)}\t{vol_rel}\t{mask_rel}")
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path: Union[str, Path], preprocess_fn=None) -> List[EnvironmentDataset]:
    """Load every sample listed in a manifest.

    ``preprocess_fn(volume, raw_label_map) -> (volume, mask)`` is applied per
    sample when given (crop/pad/binarize for ingested real data).
    """
    path = Path(path)
    root = path.parent
    names: Dict[int, str] = {}
    envs: Dict[int, EnvironmentDataset] = {}
    header_seen = False
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split("\t")
        if line.startswith("#env"):
            names[int(parts[1])] = parts[2]
            continue
        if line.startswith("#"):
            continue
        if not header_seen:
            if line != MANIFEST_HEADER:
                raise ValueError(f"{path}:{lineno}: expected header {MANIFEST_HEADER!r}")
            header_seen = True
            continue
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields")
        sample_id, env_id, labeled, vol_rel, mask_rel = parts
        env_id = int(env_id)
        volume = load_raw_volume(root / vol_rel)
        if labeled == "1" and mask_rel == "-":
            raise ValueError(f"{path}:{lineno}: labeled sample without mask path")
        if preprocess_fn is not None:
            # raw label maps go through the hook, which binarizes them
            mask = read_raw_array(root / mask_rel) if labeled == "1" else None
            volume, mask = preprocess_fn(volume, mask)
        else:
            mask = load_raw_mask(root / mask_rel) if labeled == "1" else None
        if env_id not in envs:
            envs[env_id] = EnvironmentDataset(env_id, names.get(env_id, f"env{env_id}"))
        envs[env_id].samples.append(Sample(volume, env_id, sample_id, mask))
    return [envs[k] for k in sorted(envs)]


def intensity_histograms(datasets: Sequence[EnvironmentDataset], bins: int = 32,
                         value_range: Optional[Tuple[float, float]] = None):
    """Per-sample normalized intensity histograms and env labels (shift diagnostics)."""
    vols = [s.volume.voxels for ds in datasets for s in ds.samples]
    if value_range is None:
        value_range = (min(float(v.min()) for v in vols), max(float(v.max()) for v in vols))
    feats = np.stack([np.histogram(v, bins=bins, range=value_range, density=True)[0] for v in vols])
    labels = np.array([ds.env_id for ds in datasets for _ in ds.samples])
    return feats, labels
