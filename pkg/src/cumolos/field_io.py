"""Time-height field I/O, preprocessing, patch tiling and synthetic data."""

from __future__ import annotations

import dataclasses
import datetime as dt
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    FieldReadError,
    MetadataError,
    MissingVariableError,
    ParameterError,
    ShapeError,
)

VELOCITY_SCALE = 5.0  # m/s, clamp bound and normalization constant
SNR_THRESHOLD = 0.005
FILL_VALUE = 0.0

MAGIC = b"CMLS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIff")

DEFAULT_VARIABLES = {"velocity": "velocity", "intensity": "intensity", "time": "time"}


@dataclass
class TimeHeightField:
    """Velocity and intensity arrays over (time, range gate).

    ``validity`` is ``None`` for raw fields and a boolean array once
    :func:`preprocess` has run.
    """

    velocity: np.ndarray
    intensity: np.ndarray
    time_step_s: float
    gate_spacing_m: float = 30.0
    start_time: dt.datetime | None = None
    validity: np.ndarray | None = None

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        if self.velocity.ndim != 2:
            raise ShapeError(f"velocity must be 2D (time, gate), got shape {self.velocity.shape}")
        if self.intensity.shape != self.velocity.shape:
            raise ShapeError(
                f"intensity shape {self.intensity.shape} != velocity shape {self.velocity.shape}"
            )
        if self.validity is not None:
            self.validity = np.asarray(self.validity, dtype=bool)
            if self.validity.shape != self.velocity.shape:
                raise ShapeError("validity shape does not match velocity")
        if self.time_step_s is None or not np.isfinite(self.time_step_s):
            raise MetadataError("time_step_s is required")
        if self.time_step_s <= 0 or self.gate_spacing_m <= 0:
            raise ParameterError("time_step_s and gate_spacing_m must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.velocity.shape

    @property
    def gate_count(self) -> int:
        return self.velocity.shape[1]

    def replace(self, **changes) -> "TimeHeightField":
        return dataclasses.replace(self, **changes)


@dataclass
class PatchSample:
    values: np.ndarray  # (H, W) normalized, invalid pixels hold FILL_VALUE
    validity: np.ndarray  # (H, W) bool
    t_origin: int = 0
    g_origin: int = 0
    source: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def physical(self) -> np.ndarray:
        return denormalize(self.values)


def normalize(velocity):
    return np.asarray(velocity, dtype=np.float64) / VELOCITY_SCALE


def denormalize(values):
    return np.asarray(values, dtype=np.float64) * VELOCITY_SCALE


# --------------------------------------------------------------------------
# reading / writing
# --------------------------------------------------------------------------


def load_field(path, variable_names: Mapping[str, str] | None = None) -> TimeHeightField:
    """Read a field from a NetCDF file or a ``CMLS`` binary container.

    The format is detected from the leading bytes. No preprocessing is done.
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(4)
    except OSError as exc:
        raise FieldReadError(f"cannot read {path}: {exc}") from exc
    if head == MAGIC:
        records = read_records(path)
        return records[0]
    return _load_netcdf(path, {**DEFAULT_VARIABLES, **(variable_names or {})})


def _load_netcdf(path: Path, names: Mapping[str, str]) -> TimeHeightField:
    import netCDF4

    try:
        ds = netCDF4.Dataset(path, "r")
    except OSError as exc:
        raise FieldReadError(f"cannot open {path} as NetCDF: {exc}") from exc
    with ds:
        ds.set_auto_mask(False)
        arrays = {}
        for key in ("velocity", "intensity"):
            name = names[key]
            if name not in ds.variables:
                raise MissingVariableError(name, path)
            arr = np.array(ds.variables[name][:], dtype=np.float64)
            if arr.ndim != 2:
                raise ShapeError(f"variable {name!r} must be 2D (time, gate), got shape {arr.shape}")
            fill = getattr(ds.variables[name], "_FillValue", None)
            if fill is not None:
                arr[arr == fill] = np.nan
            arrays[key] = arr

        attrs = {k: ds.getncattr(k) for k in ds.ncattrs()}
        time_step = attrs.get("time_step_s")
        time_name = names["time"]
        if time_step is None and time_name in ds.variables:
            t = np.asarray(ds.variables[time_name][:], dtype=np.float64)
            if t.size >= 2:
                time_step = float(np.median(np.diff(t)))
        if time_step is None:
            raise MetadataError(f"{path}: no time_step_s attribute and no usable {time_name!r} coordinate")
        start = attrs.get("start_time")
        start_time = dt.datetime.fromisoformat(start) if start else None
        return TimeHeightField(
            velocity=arrays["velocity"],
            intensity=arrays["intensity"],
            time_step_s=float(time_step),
            gate_spacing_m=float(attrs.get("gate_spacing_m", 30.0)),
            start_time=start_time,
        )


def save_netcdf(field: TimeHeightField, path, variable_names: Mapping[str, str] | None = None) -> Path:
    import netCDF4

    names = {**DEFAULT_VARIABLES, **(variable_names or {})}
    path = Path(path)
    T, G = field.shape
    with netCDF4.Dataset(path, "w") as ds:
        ds.createDimension("time", T)
        ds.createDimension("range", G)
        t = ds.createVariable(names["time"], "f8", ("time",))
        t.units = "s"
        t[:] = np.arange(T) * field.time_step_s
        r = ds.createVariable("range", "f8", ("range",))
        r.units = "m"
        r[:] = (np.arange(G) + 0.5) * field.gate_spacing_m
        v = ds.createVariable(names["velocity"], "f4", ("time", "range"), fill_value=np.float32(-9999.0))
        v.units = "m s-1"
        v[:] = np.where(np.isfinite(field.velocity), field.velocity, -9999.0)
        i = ds.createVariable(names["intensity"], "f4", ("time", "range"))
        i[:] = field.intensity
        ds.time_step_s = float(field.time_step_s)
        ds.gate_spacing_m = float(field.gate_spacing_m)
        if field.start_time is not None:
            ds.start_time = field.start_time.isoformat()
    return path


def _pack_record(velocity: np.ndarray, intensity: np.ndarray, time_step_s: float, gate_spacing_m: float) -> bytes:
    velocity = np.ascontiguousarray(velocity, dtype="<f4")
    intensity = np.ascontiguousarray(intensity, dtype="<f4")
    T, G = velocity.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, T, G, time_step_s, gate_spacing_m)
    return header + velocity.tobytes() + intensity.tobytes()


def write_records(path, records: Sequence[tuple[np.ndarray, np.ndarray]], time_step_s: float = 1.0,
                  gate_spacing_m: float = 30.0) -> Path:
    """Write one or more (array, companion) pairs as consecutive CMLS records."""
    path = Path(path)
    blob = b"".join(_pack_record(a, b, time_step_s, gate_spacing_m) for a, b in records)
    atomic_write_bytes(path, blob)
    return path


def save_binary(field: TimeHeightField, path) -> Path:
    return write_records(path, [(field.velocity, field.intensity)], field.time_step_s, field.gate_spacing_m)


def iter_records(path) -> Iterator[TimeHeightField]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FieldReadError(f"cannot read {path}: {exc}") from exc
    offset = 0
    while offset < len(data):
        if len(data) - offset < _HEADER.size:
            raise FieldReadError(f"{path}: truncated header at byte {offset}")
        magic, version, T, G, step, spacing = _HEADER.unpack_from(data, offset)
        if magic != MAGIC:
            raise FieldReadError(f"{path}: bad magic {magic!r} at byte {offset}")
        if version != FORMAT_VERSION:
            raise FieldReadError(f"{path}: unsupported container version {version}")
        offset += _HEADER.size
        n = T * G
        if len(data) - offset < 8 * n:
            raise FieldReadError(f"{path}: truncated payload")
        vel = np.frombuffer(data, "<f4", n, offset).reshape(T, G)
        offset += 4 * n
        inten = np.frombuffer(data, "<f4", n, offset).reshape(T, G)
        offset += 4 * n
        yield TimeHeightField(vel.astype(np.float64), inten.astype(np.float64), float(step), float(spacing))


def read_records(path) -> list[TimeHeightField]:
    return list(iter_records(path))


def atomic_write_bytes(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def save_field(field: TimeHeightField, path) -> Path:
    path = Path(path)
    if path.suffix in (".nc", ".nc4", ".cdf"):
        return save_netcdf(field, path)
    return save_binary(field, path)


# --------------------------------------------------------------------------
# preprocessing and tiling
# --------------------------------------------------------------------------


def preprocess(field: TimeHeightField, snr_threshold: float = SNR_THRESHOLD,
               clamp: tuple[float, float] = (-VELOCITY_SCALE, VELOCITY_SCALE)) -> TimeHeightField:
    """SNR-filter and clamp a field.

    Pixels with intensity below ``snr_threshold`` (or a non-finite velocity)
    become invalid and their velocity is set to NaN. Intensity is passed
    through unchanged, which keeps the operation idempotent.
    """
    if snr_threshold < 0:
        raise ParameterError(f"snr_threshold must be >= 0, got {snr_threshold}")
    lo, hi = clamp
    if lo > hi:
        raise ParameterError(f"clamp interval is empty: {clamp}")
    v = field.velocity
    inten = field.intensity
    with np.errstate(invalid="ignore"):
        valid = np.isfinite(v) & np.isfinite(inten) & (inten >= snr_threshold)
    velocity = np.where(valid, np.clip(np.nan_to_num(v), lo, hi), np.nan)
    return field.replace(velocity=velocity, intensity=inten.copy(), validity=valid)


def _validity_of(field: TimeHeightField) -> np.ndarray:
    if field.validity is not None:
        return field.validity & np.isfinite(field.velocity)
    return np.isfinite(field.velocity)


def extract_patches(field: TimeHeightField, window_t: int = 64, window_g: int = 64,
                    gate_limit: int = 64, source: str = "") -> list[PatchSample]:
    """Tile the lowest ``gate_limit`` gates into non-overlapping windows.

    Tiling starts at time index 0; the trailing remainder is dropped.
    """
    T, G = field.shape
    if window_t < 1 or window_g < 1:
        raise ParameterError("window sizes must be positive")
    if gate_limit > G:
        raise ShapeError(f"gate_limit {gate_limit} exceeds gate count {G}")
    if window_t > T or window_g > gate_limit:
        raise ShapeError(
            f"window {window_t}x{window_g} does not fit field of {T} profiles x {gate_limit} gates"
        )
    valid = _validity_of(field)[:, :gate_limit]
    vel = field.velocity[:, :gate_limit]
    values = np.where(valid, normalize(np.clip(np.nan_to_num(vel), -VELOCITY_SCALE, VELOCITY_SCALE)), FILL_VALUE)

    patches = []
    for t0 in range(0, (T // window_t) * window_t, window_t):
        for g0 in range(0, (gate_limit // window_g) * window_g, window_g):
            sl = (slice(t0, t0 + window_t), slice(g0, g0 + window_g))
            patches.append(PatchSample(values[sl].copy(), valid[sl].copy(), t0, g0, source))
    return patches


def assemble_patches(patches: Sequence[PatchSample], arrays: Sequence[np.ndarray] | None = None,
                     fill: float = np.nan) -> np.ndarray:
    """Inverse tiling: place each patch (or a per-patch array) at its origin.

    Returns an array covering the bounding box of all patches, ``fill`` elsewhere.
    """
    if not patches:
        raise ParameterError("no patches to assemble")
    if arrays is None:
        arrays = [p.values for p in patches]
    H, W = patches[0].shape
    T = max(p.t_origin for p in patches) + H
    G = max(p.g_origin for p in patches) + W
    out = np.full((T, G), fill, dtype=np.float64)
    for p, a in zip(patches, arrays):
        out[p.t_origin:p.t_origin + H, p.g_origin:p.g_origin + W] = a
    return out


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    n_time: int = 5760
    n_gates: int = 320
    time_step_s: float = 15.0
    gate_spacing_m: float = 30.0
    n_blobs: int = 600
    blob_amplitude: tuple[float, float] = (0.5, 3.0)
    blob_sigma_t: tuple[float, float] = (3.0, 16.0)
    blob_sigma_g: tuple[float, float] = (2.0, 8.0)
    n_shear_bands: int = 60
    shear_amplitude: tuple[float, float] = (0.5, 2.0)
    shear_width: tuple[float, float] = (1.5, 4.0)
    shear_length: tuple[float, float] = (20.0, 120.0)
    background_amplitude: float = 0.6
    noise_sigma: float = 0.4
    dropout_fraction: float = 0.1
    dropout_smoothness: tuple[float, float] = (8.0, 3.0)
    seed: int = 0

    def validate(self) -> None:
        if self.n_time < 1 or self.n_gates < 1:
            raise ParameterError(f"synthetic dimensions must be positive, got {self.n_time}x{self.n_gates}")
        if self.time_step_s <= 0 or self.gate_spacing_m <= 0:
            raise ParameterError("synthetic time_step_s and gate_spacing_m must be positive")
        if not 0.0 <= self.dropout_fraction < 1.0:
            raise ParameterError("dropout_fraction must lie in [0, 1)")
        if self.noise_sigma < 0 or self.n_blobs < 0 or self.n_shear_bands < 0:
            raise ParameterError("noise_sigma and structure counts must be non-negative")


def _streams(seed: int):
    # independent streams so that noise/dropout settings never shift the structures
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(3)]


def synthetic_template(spec: SyntheticSpec, seed: int) -> np.ndarray:
    """Noise-free velocity template: smooth background, Gaussian updraft and
    downdraft cores, and finite sheared bands."""
    spec.validate()
    rng = _streams(seed)[0]
    T, G = spec.n_time, spec.n_gates
    t = np.arange(T, dtype=np.float64)[:, None]
    g = np.arange(G, dtype=np.float64)[None, :]

    field = np.zeros((T, G))
    for _ in range(3):
        period_t = rng.uniform(300.0, 2000.0)
        period_g = rng.uniform(60.0, 400.0)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        field += (spec.background_amplitude / 3.0) * np.sin(2 * np.pi * t / period_t + phase[0]) * np.cos(
            2 * np.pi * g / period_g + phase[1]
        )

    for _ in range(spec.n_blobs):
        tc, gc = rng.uniform(0, T), rng.uniform(0, G)
        st, sg = rng.uniform(*spec.blob_sigma_t), rng.uniform(*spec.blob_sigma_g)
        amp = rng.uniform(*spec.blob_amplitude) * rng.choice([-1.0, 1.0])
        t_lo, t_hi = int(max(0, tc - 4 * st)), int(min(T, tc + 4 * st + 1))
        g_lo, g_hi = int(max(0, gc - 4 * sg)), int(min(G, gc + 4 * sg + 1))
        if t_lo >= t_hi or g_lo >= g_hi:
            continue
        tt = t[t_lo:t_hi] - tc
        gg = g[:, g_lo:g_hi] - gc
        field[t_lo:t_hi, g_lo:g_hi] += amp * np.exp(-0.5 * ((tt / st) ** 2 + (gg / sg) ** 2))

    for _ in range(spec.n_shear_bands):
        tc, gc = rng.uniform(0, T), rng.uniform(0, G)
        angle = rng.uniform(0, np.pi)
        width = rng.uniform(*spec.shear_width)
        half_len = 0.5 * rng.uniform(*spec.shear_length)
        amp = rng.uniform(*spec.shear_amplitude) * rng.choice([-1.0, 1.0])
        reach = half_len + 4 * width
        t_lo, t_hi = int(max(0, tc - reach)), int(min(T, tc + reach + 1))
        g_lo, g_hi = int(max(0, gc - reach)), int(min(G, gc + reach + 1))
        if t_lo >= t_hi or g_lo >= g_hi:
            continue
        dt_ = t[t_lo:t_hi] - tc
        dg_ = g[:, g_lo:g_hi] - gc
        along = dt_ * np.cos(angle) + dg_ * np.sin(angle)
        across = -dt_ * np.sin(angle) + dg_ * np.cos(angle)
        # odd profile across the band gives a velocity jump (shear line)
        profile = np.tanh(across / width) * np.exp(-0.5 * (across / (2 * width)) ** 2)
        taper = np.exp(-0.5 * (along / half_len) ** 4)
        field[t_lo:t_hi, g_lo:g_hi] += amp * profile * taper
    return field


def generate_synthetic(spec: SyntheticSpec, seed: int | None = None) -> TimeHeightField:
    """Deterministic synthetic time-height field.

    Dropout regions are smooth blobs covering ``dropout_fraction`` of the
    pixels; there the intensity falls below the SNR threshold and the
    velocity is replaced with garbage well outside the clamp range.
    """
    seed = spec.seed if seed is None else seed
    template = synthetic_template(spec, seed)
    _, noise_rng, drop_rng = _streams(seed)
    T, G = template.shape

    velocity = template.copy()
    if spec.noise_sigma > 0:
        velocity += spec.noise_sigma * noise_rng.standard_normal((T, G))
    intensity = noise_rng.uniform(0.01, 0.2, size=(T, G))

    if spec.dropout_fraction > 0:
        score = ndimage.gaussian_filter(drop_rng.standard_normal((T, G)), sigma=spec.dropout_smoothness,
                                        mode="wrap")
        n_drop = int(round(spec.dropout_fraction * T * G))
        order = np.argsort(score, axis=None, kind="stable")[::-1][:n_drop]
        dropped = np.zeros(T * G, dtype=bool)
        dropped[order] = True
        dropped = dropped.reshape(T, G)
        intensity[dropped] = drop_rng.uniform(0.0, 0.0049, size=int(dropped.sum()))
        velocity[dropped] = drop_rng.uniform(-20.0, 20.0, size=int(dropped.sum()))

    return TimeHeightField(
        velocity=velocity,
        intensity=intensity,
        time_step_s=spec.time_step_s,
        gate_spacing_m=spec.gate_spacing_m,
        start_time=dt.datetime(2011, 6, 1) + dt.timedelta(days=int(seed) % 365),
    )
