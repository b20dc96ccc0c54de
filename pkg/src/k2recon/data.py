"""Synthetic multi-coil phantom data and the on-disk container format.

A dataset is a directory holding ``manifest.json`` plus one raw
little-endian binary file per array.  Complex arrays are stored as
interleaved (re, im) float64 pairs, masks as uint8; round-trips are
bit-exact and every file carries a sha256 checksum.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractViolation, CorruptDatasetError, UnsupportedVersionError
from .linops import CoilSensitivities, fft2c, from_coil_kspace, ifft2c, to_coil_kspace
from .sampling import SamplingMask, make_mask

FORMAT_VERSION = 1

_DTYPES = {"c16": "<c16", "f8": "<f8", "u1": "u1"}


# ---------------------------------------------------------------------------
# phantoms and coil maps

# Modified Shepp-Logan ellipses: intensity, half-axes (a, b), center, angle.
_SHEPP_LOGAN = [
    (1.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.80, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.20, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.20, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.10, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.10, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.10, 0.0230, 0.0230, 0.00, -0.6060, 0.0),
    (0.10, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
]

PHANTOM_KINDS = ("shepp-logan", "random-ellipses")


def _ellipse_stack(h: int, w: int, ellipses) -> np.ndarray:
    ys = np.linspace(-1.0, 1.0, h)[:, None]
    xs = np.linspace(-1.0, 1.0, w)[None, :]
    img = np.zeros((h, w))
    for amp, a, b, x0, y0, ang in ellipses:
        t = np.deg2rad(ang)
        xr = (xs - x0) * np.cos(t) + (ys - y0) * np.sin(t)
        yr = -(xs - x0) * np.sin(t) + (ys - y0) * np.cos(t)
        img += amp * (((xr / a) ** 2 + (yr / b) ** 2) <= 1.0)
    return img


def _smooth_field(h: int, w: int, rng: np.random.Generator,
                  cutoff: float = 0.06) -> np.ndarray:
    """Unit-std low-pass filtered white noise (smooth random field)."""
    noise = rng.standard_normal((h, w))
    fy = np.fft.fftshift(np.fft.fftfreq(h))[:, None]
    fx = np.fft.fftshift(np.fft.fftfreq(w))[None, :]
    lowpass = np.exp(-(fx**2 + fy**2) / (2 * cutoff**2))
    smooth = ifft2c(fft2c(noise.astype(np.complex128)) * lowpass).real
    std = smooth.std()
    return smooth / std if std > 0 else smooth


def make_phantom(h: int, w: int, kind: str = "shepp-logan", seed: int = 0,
                 phase_amp: float = 0.3) -> np.ndarray:
    """Complex ground-truth image: magnitude in [0,1], smooth random phase."""
    if h < 32 or w < 32:
        raise ConfigurationError(f"phantom size must be at least 32x32, got {h}x{w}")
    if kind not in PHANTOM_KINDS:
        raise ConfigurationError(f"unknown phantom kind {kind!r}, expected {PHANTOM_KINDS}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A]))
    if kind == "shepp-logan":
        mag = _ellipse_stack(h, w, _SHEPP_LOGAN)
    else:
        n = int(rng.integers(6, 13))
        ellipses = [(1.0, 0.85, 0.85, 0.0, 0.0, 0.0)]  # background disk
        for _ in range(n):
            ellipses.append((
                float(rng.uniform(-0.6, 0.8)),
                float(rng.uniform(0.08, 0.45)),
                float(rng.uniform(0.08, 0.45)),
                float(rng.uniform(-0.55, 0.55)),
                float(rng.uniform(-0.55, 0.55)),
                float(rng.uniform(0.0, 180.0)),
            ))
        mag = _ellipse_stack(h, w, ellipses)
    mag = np.clip(mag, 0.0, None)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    mag = np.clip(mag, 0.0, 1.0)
    phase = phase_amp * _smooth_field(h, w, rng)
    return mag * np.exp(1j * phase)


def make_coils(h: int, w: int, ncoil: int, seed: int = 0) -> CoilSensitivities:
    """Smooth Gaussian-lobe coil maps around the FOV, pixelwise normalized."""
    if ncoil < 1:
        raise ConfigurationError(f"ncoil must be >= 1, got {ncoil}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    radius = 0.5 * max(h, w)
    width = 0.45 * max(h, w)
    maps = np.zeros((ncoil, h, w), dtype=np.complex128)
    for i in range(ncoil):
        angle = 2 * np.pi * i / ncoil
        cy = h / 2 + radius * np.sin(angle)
        cx = w / 2 + radius * np.cos(angle)
        mag = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * width**2))
        if ncoil == 1:
            maps[i] = mag
        else:
            ramp = (rng.uniform(-0.5, 0.5) * (xs - w / 2) / w
                    + rng.uniform(-0.5, 0.5) * (ys - h / 2) / h)
            maps[i] = mag * np.exp(1j * (2 * np.pi * ramp + rng.uniform(0, 2 * np.pi)))
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return CoilSensitivities(maps)


def simulate_kspace(gt: np.ndarray, coils: CoilSensitivities,
                    noise_sigma: float = 0.0, seed: int = 0) -> np.ndarray:
    """Fully sampled coil k-space with complex white Gaussian noise."""
    if noise_sigma < 0:
        raise ConfigurationError(f"noise_sigma must be >= 0, got {noise_sigma}")
    y = to_coil_kspace(np.asarray(gt, dtype=np.complex128), coils)
    if noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11]))
        y = y + noise_sigma * (rng.standard_normal(y.shape)
                               + 1j * rng.standard_normal(y.shape))
    return y


# ---------------------------------------------------------------------------
# samples and dataset generation


@dataclass
class Sample:
    id: str
    kspace: np.ndarray
    coils: CoilSensitivities
    omega: SamplingMask
    ground_truth: np.ndarray | None = None
    role: str = "train"

    def validate(self):
        if self.omega.grid.shape != self.kspace.shape[1:]:
            raise ContractViolation(
                f"sample {self.id}: omega shape {self.omega.grid.shape} vs "
                f"k-space {self.kspace.shape}"
            )
        self.coils.validate(tol=1e-6)
        if self.ground_truth is not None and self.ground_truth.shape != self.kspace.shape[1:]:
            raise ContractViolation(
                f"sample {self.id}: ground truth shape {self.ground_truth.shape} vs "
                f"k-space {self.kspace.shape}"
            )

    def y_omega(self) -> np.ndarray:
        return self.kspace * self.omega.grid

    def zero_filled(self) -> np.ndarray:
        return from_coil_kspace(self.y_omega(), self.coils)


@dataclass
class DataConfig:
    h: int = 64
    w: int = 64
    ncoil: int = 4
    n_train: int = 20
    n_val: int = 5
    n_test: int = 5
    phantom: str = "random-ellipses"
    phase_amp: float = 0.3
    noise_sigma: float = 0.005
    accel: float = 4.0
    acs_lines: int | None = None
    mask_kind: str = "random-1d"
    seed: int = 0

    def validate(self):
        if self.h < 32 or self.w < 32:
            raise ConfigurationError(f"image size must be >= 32, got {self.h}x{self.w}")
        if self.ncoil < 1:
            raise ConfigurationError(f"ncoil must be >= 1, got {self.ncoil}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigurationError("sample counts must be non-negative")
        if self.phantom not in PHANTOM_KINDS:
            raise ConfigurationError(f"unknown phantom kind {self.phantom!r}")
        if self.accel < 1:
            raise ConfigurationError(f"accel must be >= 1, got {self.accel}")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def generate_dataset(cfg: DataConfig) -> list[Sample]:
    """Deterministic synthetic dataset; per-sample seeds derive from cfg.seed."""
    cfg.validate()
    roles = (["train"] * cfg.n_train + ["val"] * cfg.n_val + ["test"] * cfg.n_test)
    samples = []
    counters = {"train": 0, "val": 0, "test": 0}
    for index, role in enumerate(roles):
        sid = f"{role}_{counters[role]:03d}"
        counters[role] += 1
        sseed = int(np.random.SeedSequence([cfg.seed, index]).generate_state(1)[0])
        gt = make_phantom(cfg.h, cfg.w, cfg.phantom, seed=sseed, phase_amp=cfg.phase_amp)
        coils = make_coils(cfg.h, cfg.w, cfg.ncoil, seed=sseed + 1)
        clean = to_coil_kspace(gt, coils)
        back = from_coil_kspace(clean, coils)
        assert np.max(np.abs(back - gt)) < 1e-10  # consistency before noise
        kspace = simulate_kspace(gt, coils, cfg.noise_sigma, seed=sseed + 2)
        omega = make_mask(cfg.h, cfg.w, cfg.accel, acs_lines=cfg.acs_lines,
                          kind=cfg.mask_kind, seed=sseed + 3)
        s = Sample(sid, kspace, coils, omega, ground_truth=gt, role=role)
        s.validate()
        samples.append(s)
    return samples


# ---------------------------------------------------------------------------
# generic array container


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_array_container(path, kind: str, meta: dict, arrays: dict):
    """Write manifest.json plus one raw binary per array; returns the path."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if np.iscomplexobj(arr):
            tag, cast = "c16", "<c16"
        elif arr.dtype == np.uint8:
            tag, cast = "u1", "u1"
        else:
            tag, cast = "f8", "<f8"
        payload = np.ascontiguousarray(arr.astype(cast)).tobytes()
        fname = name.replace("/", ".") + ".bin"
        (path / fname).write_bytes(payload)
        entries[name] = {
            "file": fname,
            "dtype": tag,
            "shape": list(arr.shape),
            "sha256": _sha256(payload),
        }
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "arrays": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_array_container(path, expect_kind: str | None = None):
    """Read a container back; validates version, sizes and checksums."""
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise CorruptDatasetError(f"no manifest.json under {path}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise CorruptDatasetError(f"unreadable manifest {mpath}: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{mpath}: format_version {version} not supported (reader supports {FORMAT_VERSION})"
        )
    if expect_kind is not None and manifest.get("kind") != expect_kind:
        raise CorruptDatasetError(
            f"{mpath}: container kind {manifest.get('kind')!r}, expected {expect_kind!r}"
        )
    arrays = {}
    for name, entry in manifest["arrays"].items():
        fpath = path / entry["file"]
        if not fpath.is_file():
            raise CorruptDatasetError(f"missing array file {fpath}")
        payload = fpath.read_bytes()
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * dtype.itemsize
        if len(payload) != expected:
            raise CorruptDatasetError(
                f"corrupt array file {fpath}: {len(payload)} bytes, expected {expected}"
            )
        if _sha256(payload) != entry["sha256"]:
            raise CorruptDatasetError(f"checksum mismatch for {fpath}")
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(entry["shape"]).copy()
    return manifest["meta"], arrays


# ---------------------------------------------------------------------------
# dataset container


def write_dataset(samples: list[Sample], meta: dict, out_dir) -> Path:
    arrays = {}
    sample_meta = []
    for s in samples:
        arrays[f"{s.id}.kspace"] = s.kspace
        arrays[f"{s.id}.coils"] = s.coils.maps
        arrays[f"{s.id}.omega"] = s.omega.grid
        if s.ground_truth is not None:
            arrays[f"{s.id}.ground_truth"] = s.ground_truth
        sample_meta.append({
            "id": s.id,
            "role": s.role,
            "has_ground_truth": s.ground_truth is not None,
            "acceleration": s.omega.acceleration,
            "acs_lines": s.omega.acs_lines,
            "mask_seed": s.omega.seed,
        })
    meta = dict(meta)
    meta["samples"] = sample_meta
    return write_array_container(out_dir, "dataset", meta, arrays)


def read_dataset(path):
    """Load and validate a dataset container, returning (meta, samples)."""
    meta, arrays = read_array_container(path, expect_kind="dataset")
    samples = []
    for sm in meta["samples"]:
        sid = sm["id"]
        try:
            kspace = arrays[f"{sid}.kspace"]
            coils = CoilSensitivities(arrays[f"{sid}.coils"])
            omega = SamplingMask(arrays[f"{sid}.omega"].astype(np.uint8),
                                 float(sm["acceleration"]), int(sm["acs_lines"]),
                                 int(sm["mask_seed"]))
        except KeyError as e:
            raise CorruptDatasetError(f"dataset {path}: missing array for sample {sid}: {e}")
        gt = arrays.get(f"{sid}.ground_truth") if sm.get("has_ground_truth") else None
        s = Sample(sid, kspace, coils, omega, ground_truth=gt, role=sm["role"])
        s.validate()
        samples.append(s)
    return meta, samples
