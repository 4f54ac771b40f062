"""Raw array I/O, synthetic fields, manifests and CSV output."""

from __future__ import annotations

import csv
import math
import mmap
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}
SYNTH_KINDS = ("smooth", "banded", "uniform_noise", "constant")


class DataError(Exception):
    """Input data could not be loaded or is invalid."""


def validate_dims(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= 3:
        raise DataError(f"rank must be 1..3, got {len(dims)}")
    if any(d <= 0 for d in dims):
        raise DataError(f"dims must be positive, got {dims}")
    return dims


def parse_dims(text: str) -> tuple[int, ...]:
    try:
        return validate_dims(int(t) for t in text.split(","))
    except ValueError as exc:
        raise DataError(f"bad dims {text!r}") from exc


HUGE_PAGE = 2 << 20


def aligned_zeros(n: int, dtype=np.float64) -> np.ndarray:
    """Flat zero-filled array; large ones are 2 MiB aligned huge-page memory.

    Buffers of at least one huge page come from an anonymous mapping marked
    MADV_HUGEPAGE, so every run gets the same page size. Left to malloc,
    large arrays get huge pages only when they happen to reuse memory numpy
    had advised earlier, and stencil sweeps then vary in speed by a third
    from run to run.
    """
    dtype = np.dtype(dtype)
    nbytes = n * dtype.itemsize
    if nbytes < HUGE_PAGE:
        return np.zeros(n, dtype=dtype)
    # private: a shared anonymous mapping is shmem and ignores the advice
    buf = mmap.mmap(-1, nbytes + HUGE_PAGE, flags=mmap.MAP_PRIVATE | mmap.MAP_ANONYMOUS)
    try:
        buf.madvise(mmap.MADV_HUGEPAGE)
    except (AttributeError, OSError):
        pass
    raw = np.frombuffer(buf, dtype=np.uint8)
    start = (-raw.ctypes.data) % HUGE_PAGE
    return raw[start:start + nbytes].view(dtype)


aligned_empty = aligned_zeros


def aligned_copy(a: np.ndarray, dtype=np.float64) -> np.ndarray:
    out = aligned_zeros(a.size, dtype)
    out[...] = a.reshape(-1)
    return out


@dataclass(frozen=True, eq=False)
class ScalarField:
    """An n-d grid of float64 values stored flat in row-major order."""

    dims: tuple[int, ...]
    values: np.ndarray
    name: str = "field"

    def __post_init__(self):
        dims = validate_dims(self.dims)
        values = np.asarray(self.values).reshape(-1)
        if values.size * 8 >= HUGE_PAGE:
            values = aligned_copy(values)
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.size != math.prod(dims):
            raise DataError(
                f"{values.size} values do not match dims {dims} ({math.prod(dims)})"
            )
        if not np.all(np.isfinite(values)):
            raise DataError("field contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def rank(self) -> int:
        return len(self.dims)

    def grid(self) -> np.ndarray:
        return self.values.reshape(self.dims)

    def __eq__(self, other):
        if not isinstance(other, ScalarField):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.values, other.values)


def load_raw(path, dims: Sequence[int], dtype: str = "f32le", name: str | None = None) -> ScalarField:
    if dtype not in DTYPES:
        raise DataError(f"unknown dtype {dtype!r}")
    dims = validate_dims(dims)
    dt = DTYPES[dtype]
    try:
        size = os.path.getsize(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    expected = math.prod(dims) * dt.itemsize
    if size != expected:
        raise DataError(f"{path}: size {size} bytes, expected {expected} for {dims} {dtype}")
    try:
        raw = np.fromfile(path, dtype=dt)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if name is None:
        name = os.path.splitext(os.path.basename(str(path)))[0]
    return ScalarField(dims, raw.astype(np.float64), name)


def write_raw(f: ScalarField, path, dtype: str = "f64le") -> None:
    if dtype not in DTYPES:
        raise DataError(f"unknown dtype {dtype!r}")
    f.values.astype(DTYPES[dtype]).tofile(path)


def synth_field(kind: str, dims: Sequence[int], seed: int = 0, name: str | None = None) -> ScalarField:
    """Deterministic synthetic field.

    smooth: Gaussian-filtered white noise scaled to unit standard deviation.
    banded: the smooth field snapped to a coarse set of levels plus a faint
        smooth ripple, giving flat plateaus separated by sharp steps.
    uniform_noise: i.i.d. uniform values in [0, 1).
    constant: a single seed-dependent value.
    """
    dims = validate_dims(dims)
    rng = np.random.default_rng(seed)
    if kind == "smooth":
        values = _smooth(rng, dims)
    elif kind == "banded":
        base = _smooth(rng, dims)
        ripple = _smooth(rng, dims, sigma=8.0)
        values = np.round(base * 4.0) / 4.0 + 0.01 * ripple
    elif kind == "uniform_noise":
        values = rng.random(dims)
    elif kind == "constant":
        values = np.full(dims, rng.uniform(-1.0, 1.0))
    else:
        raise DataError(f"unknown synthetic kind {kind!r}")
    return ScalarField(dims, values, name or f"{kind}_{seed}")


def _smooth(rng: np.random.Generator, dims, sigma: float = 4.0) -> np.ndarray:
    noise = rng.standard_normal(dims)
    out = ndimage.gaussian_filter(noise, sigma=sigma, mode="wrap")
    std = out.std()
    return out / std if std > 0 else out


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    dims: tuple[int, ...]
    dtype: str
    name: str

    def load(self) -> ScalarField:
        return load_raw(self.path, self.dims, self.dtype, self.name)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise DataError("manifest paths must be unique")
        for e in self.entries:
            validate_dims(e.dims)
            if e.dtype not in DTYPES:
                raise DataError(f"unknown dtype {e.dtype!r} in manifest")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        """Read a manifest CSV with columns path,dims,dtype,name.

        Relative paths resolve against the manifest's directory.
        """
        base = os.path.dirname(os.path.abspath(path))
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        entries = []
        for row in rows:
            try:
                p = row["path"]
                entries.append(
                    ManifestEntry(
                        p if os.path.isabs(p) else os.path.join(base, p),
                        parse_dims(row["dims"].strip().strip('"')),
                        row["dtype"].strip(),
                        row["name"].strip(),
                    )
                )
            except (KeyError, AttributeError) as exc:
                raise DataError(f"malformed manifest row {row}") from exc
        return cls(entries)

    def write(self, path) -> None:
        write_csv(
            [{"path": e.path, "dims": ",".join(map(str, e.dims)), "dtype": e.dtype, "name": e.name}
             for e in self.entries],
            path,
            columns=["path", "dims", "dtype", "name"],
        )

    def load_all(self) -> list[ScalarField]:
        return [e.load() for e in self.entries]


def format_cell(value) -> str:
    # repr gives the shortest round-trip decimal for floats
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(rows: Iterable[dict], path, columns: Sequence[str] | None = None) -> None:
    rows = list(rows)
    if columns is None:
        if not rows:
            raise ValueError("columns are required for an empty table")
        columns = list(rows[0])
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([format_cell(row.get(c, "")) for c in columns])
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def append_csv_row(row: dict, path, columns: Sequence[str]) -> None:
    """Append one row, writing the header first if the file is new or empty."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    try:
        with open(path, "a", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if new:
                writer.writerow(columns)
            writer.writerow([format_cell(row.get(c, "")) for c in columns])
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
