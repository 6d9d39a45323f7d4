"""Volume file IO, patch sampling, augmentation, and a synthetic
mitochondria-like volume generator for desk-scale training and testing.

Volume file format: a `.raw` file of little-endian values in T-major order
plus a `.json` sidecar:

    {"dims": [T, H, W], "dtype": "f32" | "u8" | "u32",
     "voxel_size_nm": [z, y, x], "byte_order": "little-endian"}

Round trips are bit-exact for every dtype. u8 image volumes load to floats
in [0, 1] via /255 unless ``raw=True``.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .postproc import LabelVolume


class VolumeIOError(Exception):
    """Base for volume file errors."""


class SidecarError(VolumeIOError):
    """Missing or malformed JSON sidecar."""


class VolumeDtypeError(VolumeIOError):
    """Unsupported dtype in sidecar or array."""


class VolumeLengthError(VolumeIOError):
    """Raw byte length disagrees with dims * dtype width."""


class PackingError(RuntimeError):
    """Synthetic instance placement failed after bounded retries."""


_DTYPES = {"f32": "<f4", "u8": "u1", "u32": "<u4"}


@dataclass
class VolumeMeta:
    dims: tuple
    dtype: str
    voxel_size_nm: tuple = (30.0, 8.0, 8.0)


@dataclass
class VolumePatch:
    """A (T,H,W) sub-volume with its voxel spacing."""

    data: np.ndarray
    voxel_size_nm: tuple = (30.0, 8.0, 8.0)

    @property
    def shape(self):
        return self.data.shape


def _base_path(path):
    p = Path(path)
    if p.suffix in (".raw", ".json"):
        p = p.with_suffix("")
    return p


def save_volume(path, array, voxel_size_nm=(30.0, 8.0, 8.0)):
    """Write array (T,H,W) as sidecar + raw pair; returns the base path."""
    array = np.asarray(array)
    if array.ndim != 3:
        raise VolumeIOError(f"volume must be 3-d (T,H,W), got shape {array.shape}")
    kind = {np.dtype(np.float32): "f32", np.dtype(np.uint8): "u8", np.dtype(np.uint32): "u32"}.get(array.dtype)
    if kind is None:
        raise VolumeDtypeError(f"unsupported volume dtype {array.dtype}; use float32, uint8, or uint32")
    base = _base_path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "dims": [int(d) for d in array.shape],
        "dtype": kind,
        "voxel_size_nm": [float(v) for v in voxel_size_nm],
        "byte_order": "little-endian",
    }
    base.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")
    base.with_suffix(".raw").write_bytes(np.ascontiguousarray(array).astype(_DTYPES[kind]).tobytes())
    return base


def load_volume(path, raw=False):
    """Read a sidecar + raw pair -> (array, VolumeMeta).

    u8 volumes are normalized to floats in [0,1] unless raw=True; f32 and
    u32 load as stored.
    """
    base = _base_path(path)
    sidecar = base.with_suffix(".json")
    if not sidecar.exists():
        raise SidecarError(f"sidecar not found: {sidecar}")
    try:
        meta = json.loads(sidecar.read_text())
    except json.JSONDecodeError as e:
        raise SidecarError(f"malformed sidecar {sidecar}: {e}") from e
    for key in ("dims", "dtype", "byte_order"):
        if key not in meta:
            raise SidecarError(f"sidecar {sidecar} missing required key {key!r}")
    if meta["byte_order"] != "little-endian":
        raise SidecarError(f"sidecar {sidecar}: unsupported byte_order {meta['byte_order']!r}")
    kind = meta["dtype"]
    if kind not in _DTYPES:
        raise VolumeDtypeError(f"unknown dtype {kind!r} in {sidecar}; expected one of {sorted(_DTYPES)}")
    dims = tuple(int(d) for d in meta["dims"])
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise SidecarError(f"sidecar {sidecar}: dims must be three positive extents, got {meta['dims']}")
    blob = base.with_suffix(".raw").read_bytes()
    expected = int(np.prod(dims)) * np.dtype(_DTYPES[kind]).itemsize
    if len(blob) != expected:
        raise VolumeLengthError(f"{base.with_suffix('.raw')}: expected {expected} bytes for dims {dims} ({kind}), found {len(blob)}")
    arr = np.frombuffer(blob, dtype=_DTYPES[kind]).reshape(dims)
    if kind == "u8" and not raw:
        arr = arr.astype(np.float64) / 255.0
    vm = VolumeMeta(dims=dims, dtype=kind, voxel_size_nm=tuple(meta.get("voxel_size_nm", (30.0, 8.0, 8.0))))
    return arr.copy(), vm


def save_label_volume(path, vol: LabelVolume, voxel_size_nm=(30.0, 8.0, 8.0)):
    if vol.labels.min() < 0:
        raise VolumeIOError("label volume has negative ids")
    return save_volume(path, vol.labels.astype(np.uint32), voxel_size_nm)


def load_label_volume(path):
    arr, meta = load_volume(path, raw=True)
    if meta.dtype != "u32":
        raise VolumeDtypeError(f"label volume must be u32, found {meta.dtype}")
    return LabelVolume.from_array(arr.astype(np.int32))


# -- patch sampling -------------------------------------------------------------


def sample_patch(volume, labels, patch_shape, rng):
    """Uniformly random patch; with probability 0.9 redraws (up to 10 tries)
    until the patch holds at least one foreground voxel."""
    volume = np.asarray(volume)
    patch_shape = tuple(int(s) for s in patch_shape)
    if any(p > v for p, v in zip(patch_shape, volume.shape)):
        raise ValueError(f"patch shape {patch_shape} exceeds volume shape {volume.shape}")
    lab = None if labels is None else np.asarray(labels)
    want_fg = lab is not None and rng.random() < 0.9
    for _ in range(10):
        corner = tuple(int(rng.integers(0, v - p + 1)) for p, v in zip(patch_shape, volume.shape))
        sl = tuple(slice(c, c + p) for c, p in zip(corner, patch_shape))
        if not want_fg or (lab[sl] > 0).any():
            break
    patch = volume[sl].copy()
    return (patch, None) if lab is None else (patch, lab[sl].copy())


# -- augmentation ---------------------------------------------------------------


@dataclass
class AugmentConfig:
    enabled: bool = True
    p_flip_x: float = 0.5  # in-plane W axis
    p_flip_y: float = 0.5  # in-plane H axis
    p_flip_z: float = 0.5  # slice axis
    p_rot90: float = 0.5
    p_intensity: float = 0.5  # brightness/contrast jitter, +-10%
    noise_sigma: float = 0.02  # grayscale Gaussian noise ceiling; 0 disables

    def __post_init__(self):
        for name in ("p_flip_x", "p_flip_y", "p_flip_z", "p_rot90", "p_intensity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {v}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def augment(patch, labels, rng, cfg: AugmentConfig = AugmentConfig()):
    """Independently applied flips, in-plane 90-degree rotations, intensity
    jitter, and Gaussian noise; geometric ops hit image and labels alike."""
    img = np.asarray(patch).copy()
    lab = None if labels is None else np.asarray(labels).copy()
    if not cfg.enabled:
        return img, lab

    if rng.random() < cfg.p_flip_x:
        img = img[:, :, ::-1]
        lab = lab if lab is None else lab[:, :, ::-1]
    if rng.random() < cfg.p_flip_y:
        img = img[:, ::-1, :]
        lab = lab if lab is None else lab[:, ::-1, :]
    if rng.random() < cfg.p_flip_z:
        img = img[::-1]
        lab = lab if lab is None else lab[::-1]
    if rng.random() < cfg.p_rot90:
        k = int(rng.integers(1, 4)) if img.shape[1] == img.shape[2] else 2
        img = np.rot90(img, k, axes=(1, 2))
        lab = lab if lab is None else np.rot90(lab, k, axes=(1, 2))
    if rng.random() < cfg.p_intensity:
        delta = rng.uniform(-0.1, 0.1)
        factor = rng.uniform(0.9, 1.1)
        mean = img.mean()
        img = np.clip(mean + factor * (img - mean) + delta, 0.0, 1.0)
    if cfg.noise_sigma > 0:
        img = np.clip(img + rng.normal(0.0, cfg.noise_sigma, size=img.shape), 0.0, 1.0)
    return np.ascontiguousarray(img), None if lab is None else np.ascontiguousarray(lab)


# -- synthetic volumes ------------------------------------------------------------

BG_LEVEL = 0.68
INTERIOR_BASE = 0.28
INTERIOR_SPAN = 0.15
RIM_LEVEL = 0.92


@dataclass
class SynthSpec:
    dims: tuple = (8, 64, 64)
    instance_range: tuple = (3, 6)
    axis_range_t: tuple = (1.6, 3.0)  # semi-axes (voxels) along the slice axis
    axis_range_hw: tuple = (5.0, 10.0)  # in-plane semi-axes
    bend: float = 0.3
    noise_sigma: float = 0.02
    touching_prob: float = 0.0
    distractor_texture: bool = False
    distractor_strength: float = 0.25

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.instance_range = tuple(int(c) for c in self.instance_range)
        if len(self.dims) != 3 or any(d < m for d, m in zip(self.dims, (8, 32, 32))):
            raise ValueError(f"dims must be at least (8,32,32), got {self.dims}")
        lo, hi = self.instance_range
        if lo < 1 or hi < lo:
            raise ValueError(f"instance_range must satisfy 1 <= lo <= hi, got {self.instance_range}")
        for rng_name in ("axis_range_t", "axis_range_hw"):
            lo_a, hi_a = getattr(self, rng_name)
            if lo_a <= 0 or hi_a < lo_a:
                raise ValueError(f"{rng_name} must satisfy 0 < lo <= hi, got {getattr(self, rng_name)}")
        if not 0.0 <= self.touching_prob <= 1.0:
            raise ValueError(f"touching_prob must be in [0,1], got {self.touching_prob}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def _random_rotation(rng):
    """Uniform 3D rotation via QR of a Gaussian matrix."""
    m = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(m)
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _single_component(mask):
    """BFS check that a small boolean crop is one 26-connected component."""
    total = int(mask.sum())
    if total == 0:
        return False
    start = tuple(np.argwhere(mask)[0])
    seen = np.zeros_like(mask)
    seen[start] = True
    queue = deque([start])
    count = 1
    dims = mask.shape
    while queue:
        t, h, w = queue.popleft()
        for dt in (-1, 0, 1):
            for dh in (-1, 0, 1):
                for dw in (-1, 0, 1):
                    nt, nh, nw = t + dt, h + dh, w + dw
                    if 0 <= nt < dims[0] and 0 <= nh < dims[1] and 0 <= nw < dims[2] and mask[nt, nh, nw] and not seen[nt, nh, nw]:
                        seen[nt, nh, nw] = True
                        count += 1
                        queue.append((nt, nh, nw))
    return count == total


def _dilate(mask):
    """26-connected dilation by one voxel (zero outside the crop)."""
    out = mask.copy()
    padded = np.pad(mask, 1)
    T, H, W = mask.shape
    for dt in (-1, 0, 1):
        for dh in (-1, 0, 1):
            for dw in (-1, 0, 1):
                if dt == dh == dw == 0:
                    continue
                out |= padded[1 + dt : 1 + dt + T, 1 + dh : 1 + dh + H, 1 + dw : 1 + dw + W]
    return out


def _roll_valid(shape, axis, shift):
    valid = np.ones(shape, dtype=bool)
    sl = [slice(None)] * 3
    sl[axis] = slice(0, 1) if shift == 1 else slice(-1, None)
    valid[tuple(sl)] = False
    return valid


def _carve_instance(rng, spec, labels, radius_sq, instance_id):
    """Place one bent ellipsoid; returns True on success."""
    T, H, W = spec.dims
    for _ in range(60):
        at = rng.uniform(*spec.axis_range_t)
        ah = rng.uniform(*spec.axis_range_hw)
        aw = rng.uniform(*spec.axis_range_hw)
        bend = rng.uniform(0.0, spec.bend)
        rot = _random_rotation(rng)
        reach = float(max(at, ah, aw)) * (1.0 + bend) + 1.0
        center = np.array(
            [
                rng.uniform(at, T - at),
                rng.uniform(min(ah, H / 2 - 1), H - min(ah, H / 2 - 1)),
                rng.uniform(min(aw, W / 2 - 1), W - min(aw, W / 2 - 1)),
            ]
        )
        lo = np.maximum(np.floor(center - reach).astype(int), 0)
        hi = np.minimum(np.ceil(center + reach).astype(int) + 1, spec.dims)
        grid = np.stack(np.meshgrid(*[np.arange(lo[a], hi[a]) for a in range(3)], indexing="ij"), axis=-1).astype(np.float64)
        q = (grid - center) @ rot  # local frame coordinates
        qb = q.copy()
        qb[..., 1] -= bend * (q[..., 0] ** 2) / max(at, 1e-6)
        rho_sq = (qb[..., 0] / at) ** 2 + (qb[..., 1] / ah) ** 2 + (qb[..., 2] / aw) ** 2
        cand = rho_sq <= 1.0
        if cand.sum() < 30 or not _single_component(cand):
            continue
        crop = tuple(slice(lo[a], hi[a]) for a in range(3))
        existing = labels[crop] > 0
        if (cand & existing).any():
            continue
        allow_touch = rng.random() < spec.touching_prob
        if not allow_touch and (cand & _dilate(existing)).any():
            continue
        labels[crop][cand] = instance_id
        radius_sq[crop][cand] = rho_sq[cand]
        return True
    return False


def _distractors(rng, spec):
    """Unlabeled clutter: dark smudges plus a smooth low-frequency field."""
    T, H, W = spec.dims
    field_lo = rng.normal(0.0, 1.0, size=(max(T // 4, 1), max(H // 8, 1), max(W // 8, 1)))
    reps = (int(np.ceil(T / field_lo.shape[0])), int(np.ceil(H / field_lo.shape[1])), int(np.ceil(W / field_lo.shape[2])))
    smooth = np.kron(field_lo, np.ones(reps))[:T, :H, :W]
    smooth = smooth / max(np.abs(smooth).max(), 1e-9) * spec.distractor_strength * 0.3
    out = smooth
    n_blobs = int(rng.integers(3, 7))
    coords = np.stack(np.meshgrid(np.arange(T), np.arange(H), np.arange(W), indexing="ij"), axis=-1).astype(np.float64)
    for _ in range(n_blobs):
        c = np.array([rng.uniform(0, T), rng.uniform(0, H), rng.uniform(0, W)])
        s = np.array([rng.uniform(1.0, 2.5), rng.uniform(3.0, 8.0), rng.uniform(3.0, 8.0)])
        d2 = (((coords - c) / s) ** 2).sum(axis=-1)
        out = out - spec.distractor_strength * np.exp(-d2)
    return out


def generate_synthetic(spec: SynthSpec, seed):
    """Bent-ellipsoid instances in a noisy background -> (image, LabelVolume).

    Foreground voxels get a darker interior and a one-voxel bright rim
    (mimicking membranes); labels are exactly the generating instance ids.
    Fully determined by (spec, seed).
    """
    rng = np.random.default_rng(seed)
    labels = np.zeros(spec.dims, dtype=np.int32)
    radius_sq = np.zeros(spec.dims, dtype=np.float64)
    n = int(rng.integers(spec.instance_range[0], spec.instance_range[1] + 1))
    for instance_id in range(1, n + 1):
        if not _carve_instance(rng, spec, labels, radius_sq, instance_id):
            raise PackingError(f"could not place instance {instance_id}/{n} in dims {spec.dims} after bounded retries")

    img = np.full(spec.dims, BG_LEVEL, dtype=np.float64)
    if spec.distractor_texture:
        img += _distractors(rng, spec)
    fg = labels > 0
    img[fg] = INTERIOR_BASE + INTERIOR_SPAN * radius_sq[fg]

    # one-voxel surface shell brightened to mimic the membrane
    interior = fg.copy()
    for axis in range(3):
        for shift in (-1, 1):
            neighbor_fg = np.roll(fg, shift, axis=axis) & _roll_valid(fg.shape, axis, shift)
            interior &= neighbor_fg
    rim = fg & ~interior
    img[rim] = RIM_LEVEL

    if spec.noise_sigma > 0:
        img += rng.normal(0.0, spec.noise_sigma, size=spec.dims)
    img = np.clip(img, 0.0, 1.0)
    return img, LabelVolume.from_array(labels)
