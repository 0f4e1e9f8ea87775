"""Volumetric data model, raw-file I/O, deterministic preprocessing and augmentation."""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

MAGIC = b"OODV1\x00"
_HEADER = struct.Struct("<III")

Shape3 = Tuple[int, int, int]


class VolumeFormatError(ValueError):
    """Raised when a raw volume file does not follow the OODV1 layout."""


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"expected a non-empty 3D array, got shape {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("volume contains non-finite voxels")

    @property
    def shape(self) -> Shape3:
        return tuple(int(s) for s in self.voxels.shape)


@dataclass
class LabelMask:
    voxels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.voxels)
        if arr.ndim != 3:
            raise ValueError(f"expected a 3D mask, got shape {arr.shape}")
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("mask values must be 0 or 1")
        self.voxels = arr.astype(np.uint8)

    @property
    def shape(self) -> Shape3:
        return tuple(int(s) for s in self.voxels.shape)


@dataclass
class Sample:
    volume: Volume
    environment_id: int
    sample_id: str
    mask: Optional[LabelMask] = None

    def __post_init__(self):
        if self.mask is not None and self.mask.shape != self.volume.shape:
            raise ValueError(
                f"mask shape {self.mask.shape} differs from volume shape {self.volume.shape}"
            )

    @property
    def labeled(self) -> bool:
        return self.mask is not None


@dataclass
class AugmentationConfig:
    """Switches and parameter ranges of the random augmentation pipeline.

    Ranges are ``(low, high)`` pairs sampled uniformly. Noise std is given in
    the (normalized) intensity units of the volume.
    """

    enable_affine: bool = True
    enable_flip: bool = True
    enable_motion: bool = True
    enable_bias_field: bool = False
    enable_noise: bool = False
    rotation_degrees: Tuple[float, float] = (-10.0, 10.0)
    scale_range: Tuple[float, float] = (0.9, 1.1)
    flip_axes: Tuple[int, ...] = (0,)
    motion_ghosts: Tuple[int, int] = (1, 2)
    motion_max_shift: int = 2
    motion_max_weight: float = 0.3
    bias_field_order: int = 3
    bias_field_coefficient: Tuple[float, float] = (-0.3, 0.3)
    noise_std: Tuple[float, float] = (0.0, 0.05)
    seed: int = 0

    def __post_init__(self):
        def _check(name, rng, positive=False):
            lo, hi = rng
            if lo > hi or (positive and hi <= 0):
                raise ValueError(f"degenerate range for {name}: {rng}")

        if self.enable_affine:
            _check("rotation_degrees", self.rotation_degrees)
            _check("scale_range", self.scale_range, positive=True)
            if self.scale_range[0] <= 0:
                raise ValueError("scale factors must be positive")
        if self.enable_flip:
            if not self.flip_axes or any(a not in (0, 1, 2) for a in self.flip_axes):
                raise ValueError(f"flip_axes must be a non-empty subset of (0, 1, 2): {self.flip_axes}")
        if self.enable_motion:
            _check("motion_ghosts", self.motion_ghosts, positive=True)
            if self.motion_max_shift < 1 or not 0 < self.motion_max_weight < 1:
                raise ValueError("motion needs max_shift >= 1 and 0 < max_weight < 1")
        if self.enable_bias_field:
            _check("bias_field_coefficient", self.bias_field_coefficient)
            if self.bias_field_order < 1:
                raise ValueError("bias_field_order must be >= 1")
        if self.enable_noise:
            _check("noise_std", self.noise_std, positive=True)
            if self.noise_std[0] < 0:
                raise ValueError("noise std must be non-negative")

    @classmethod
    def disabled(cls, **kwargs) -> "AugmentationConfig":
        flags = dict(enable_affine=False, enable_flip=False, enable_motion=False,
                     enable_bias_field=False, enable_noise=False)
        flags.update(kwargs)
        return cls(**flags)

    @property
    def any_enabled(self) -> bool:
        return any((self.enable_affine, self.enable_flip, self.enable_motion,
                    self.enable_bias_field, self.enable_noise))


# --------------------------------------------------------------------------- I/O


def write_raw_volume(path: Union[str, Path], voxels: np.ndarray) -> None:
    """Write a 3D array in the OODV1 container (x-fastest float32 payload)."""
    arr = np.asarray(voxels, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {arr.shape}")
    w, h, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(w, h, d))
        # x fastest == Fortran order for an array indexed [x, y, z]
        fh.write(arr.tobytes(order="F"))


def read_raw_array(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + _HEADER.size or data[: len(MAGIC)] != MAGIC:
        raise VolumeFormatError(f"{path}: missing OODV1 magic or header")
    w, h, d = _HEADER.unpack_from(data, len(MAGIC))
    if min(w, h, d) < 1:
        raise VolumeFormatError(f"{path}: malformed header dims {(w, h, d)}")
    payload = data[len(MAGIC) + _HEADER.size:]
    expected = 4 * w * h * d
    if len(payload) < expected:
        raise VolumeFormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise VolumeFormatError(f"{path}: trailing bytes after payload")
    flat = np.frombuffer(payload, dtype="<f4")
    return flat.reshape((w, h, d), order="F").astype(np.float32)


def load_raw_volume(path: Union[str, Path]) -> Volume:
    arr = read_raw_array(path)
    if not np.all(np.isfinite(arr)):
        raise VolumeFormatError(f"{path}: non-finite voxels")
    return Volume(arr)


def load_raw_mask(path: Union[str, Path]) -> LabelMask:
    arr = read_raw_array(path)
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise VolumeFormatError(f"{path}: mask values must be 0.0 or 1.0")
    return LabelMask(arr.astype(np.uint8))


# ----------------------------------------------------------------- preprocessing


def _as_array(v):
    return v.voxels if isinstance(v, (Volume, LabelMask)) else np.asarray(v)


def _rewrap(template, arr):
    if isinstance(template, Volume):
        return Volume(arr, spacing=template.spacing)
    if isinstance(template, LabelMask):
        return LabelMask(arr)
    return arr


def crop_fixed(v, origin: Sequence[int], size: Sequence[int]):
    """Copy the axis-aligned box ``[origin, origin + size)`` out of ``v``."""
    arr = _as_array(v)
    origin, size = tuple(int(o) for o in origin), tuple(int(s) for s in size)
    if len(origin) != 3 or len(size) != 3:
        raise ValueError("origin and size must have three components")
    for ax, (o, s, n) in enumerate(zip(origin, size, arr.shape)):
        if o < 0 or s < 1 or o + s > n:
            raise ValueError(f"crop box exceeds bounds on axis {ax}: origin {o} + size {s} > {n}")
    box = arr[origin[0]:origin[0] + size[0], origin[1]:origin[1] + size[1], origin[2]:origin[2] + size[2]]
    return _rewrap(v, box.copy())


def pad_to_shape(v, target: Sequence[int]):
    """Center ``v`` in a zero array of shape ``target``.

    Odd margins put the extra voxel on the high side (floor on the low side).
    """
    arr = _as_array(v)
    target = tuple(int(t) for t in target)
    if any(n > t for n, t in zip(arr.shape, target)):
        raise ValueError(f"input shape {arr.shape} larger than target {target}")
    out = np.zeros(target, dtype=arr.dtype)
    lo = [(t - n) // 2 for n, t in zip(arr.shape, target)]
    out[lo[0]:lo[0] + arr.shape[0], lo[1]:lo[1] + arr.shape[1], lo[2]:lo[2] + arr.shape[2]] = arr
    return _rewrap(v, out)


def binarize_labels(raw_mask, foreground_classes: Iterable[int]) -> LabelMask:
    raw = np.asarray(_as_array(raw_mask))
    classes = np.array(sorted(set(int(c) for c in foreground_classes)), dtype=np.int64)
    return LabelMask(np.isin(raw.astype(np.int64), classes).astype(np.uint8))


def normalize_intensity(v):
    """Per-volume z-score; constant volumes are only mean-centered."""
    arr = _as_array(v).astype(np.float64)
    std = arr.std()
    out = arr - arr.mean()
    if std > 0:
        out /= std
    return _rewrap(v, out.astype(np.float32))


# Named crop presets for whole-head scans. Origins are placeholders to be set
# per corpus in the experiment config.
CROP_PRESETS = {
    "left": {"origin": (0, 0, 0), "size": (64, 64, 48)},
    "right": {"origin": (0, 0, 0), "size": (64, 64, 48)},
}


def preprocess(volume: Volume, mask=None, *, crop=None, pad_to=None,
               foreground_classes=None, normalize=True):
    """Crop, pad, binarize and normalize one volume/mask pair.

    ``crop`` is ``None`` or a ``{"origin": ..., "size": ...}`` mapping.
    Returns ``(Volume, LabelMask | None)``.
    """
    if crop is not None:
        volume = crop_fixed(volume, crop["origin"], crop["size"])
        if mask is not None:
            mask = crop_fixed(_as_array(mask), crop["origin"], crop["size"])
    if pad_to is not None:
        volume = pad_to_shape(volume, pad_to)
        if mask is not None:
            mask = pad_to_shape(_as_array(mask), pad_to)
    if mask is not None and not isinstance(mask, LabelMask):
        if foreground_classes is None:
            mask = LabelMask((np.asarray(mask) > 0).astype(np.uint8))
        else:
            mask = binarize_labels(mask, foreground_classes)
    if normalize:
        volume = normalize_intensity(volume)
    return volume, mask


# ------------------------------------------------------------------ augmentation


def _rotation_matrix(angles_deg):
    ax, ay, az = np.deg2rad(angles_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def _random_affine(vol, mask, cfg, rng):
    angles = rng.uniform(*cfg.rotation_degrees, size=3)
    scales = rng.uniform(*cfg.scale_range, size=3)
    # output -> input mapping: x_in = A x_out + offset, rotation about the center
    a = _rotation_matrix(angles) @ np.diag(1.0 / scales)
    center = (np.array(vol.shape) - 1) / 2.0
    offset = center - a @ center
    vol = ndimage.affine_transform(vol, a, offset=offset, order=1, mode="nearest")
    if mask is not None:
        mask = ndimage.affine_transform(mask, a, offset=offset, order=0, mode="constant", cval=0)
    return vol, mask


def _bias_field(shape, cfg, rng):
    coords = np.meshgrid(*[np.linspace(-1, 1, n) for n in shape], indexing="ij")
    field = np.zeros(shape)
    lo, hi = cfg.bias_field_coefficient
    for i in range(cfg.bias_field_order + 1):
        for j in range(cfg.bias_field_order + 1 - i):
            for k in range(cfg.bias_field_order + 1 - i - j):
                field += rng.uniform(lo, hi) * coords[0] ** i * coords[1] ** j * coords[2] ** k
    return np.exp(field)


def _motion_ghosts(vol, cfg, rng):
    n = int(rng.integers(cfg.motion_ghosts[0], cfg.motion_ghosts[1] + 1))
    out = vol.astype(np.float64)
    total_w = 0.0
    ghosts = np.zeros_like(out)
    for _ in range(n):
        shift = rng.integers(-cfg.motion_max_shift, cfg.motion_max_shift + 1, size=3)
        w = rng.uniform(0.0, cfg.motion_max_weight / n)
        ghosts += w * ndimage.shift(vol, shift, order=0, mode="nearest")
        total_w += w
    return (1.0 - total_w) * out + ghosts


def augment_arrays(vol: np.ndarray, mask: Optional[np.ndarray], cfg: AugmentationConfig, rng):
    """Array-level augmentation; ``rng`` is a seed or ``numpy.random.Generator``.

    The draw order is fixed (affine, flip, motion, bias field, noise) so a given
    generator state always yields the same output.
    """
    rng = np.random.default_rng(rng)
    vol = np.asarray(vol, dtype=np.float32)
    out_mask = None if mask is None else np.asarray(mask, dtype=np.uint8)
    if not cfg.any_enabled:
        return vol, out_mask
    if cfg.enable_affine:
        vol, out_mask = _random_affine(vol, out_mask, cfg, rng)
    if cfg.enable_flip:
        for axis in cfg.flip_axes:
            if rng.random() < 0.5:
                vol = np.flip(vol, axis=axis)
                if out_mask is not None:
                    out_mask = np.flip(out_mask, axis=axis)
    if cfg.enable_motion:
        vol = _motion_ghosts(vol, cfg, rng)
    if cfg.enable_bias_field:
        vol = vol * _bias_field(vol.shape, cfg, rng)
    if cfg.enable_noise:
        std = rng.uniform(*cfg.noise_std)
        vol = vol + rng.normal(0.0, std, size=vol.shape)
    vol = np.ascontiguousarray(vol, dtype=np.float32)
    if out_mask is not None:
        out_mask = np.ascontiguousarray(out_mask, dtype=np.uint8)
    return vol, out_mask


def augment(s: Sample, cfg: AugmentationConfig, rng) -> Sample:
    vol, mask = augment_arrays(s.volume.voxels, None if s.mask is None else s.mask.voxels, cfg, rng)
    return replace(
        s,
        volume=Volume(vol, spacing=s.volume.spacing),
        mask=None if mask is None else LabelMask(mask),
    )
