"""File formats: HSIC cubes, model checkpoints, PGM maps, CSV spectra, run records.

Byte layouts are documented in ``docs/formats.md``.
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .mixing import AbundanceCube, EndmemberMatrix, HsiCube
from .network import ModelConfig, ModelParams, init_params

HSIC_MAGIC = "HSIC1"
CKPT_MAGIC = "HSCK1"
HEADER_END = b"\n\x00"
_DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4")}


class FormatError(ValueError):
    """A file does not match its documented layout."""


def _split_header(raw: bytes, path) -> tuple[dict, int]:
    end = raw.find(HEADER_END)
    if end < 0:
        raise FormatError(f"{path}: no header terminator (newline + NUL) found in {len(raw)} bytes")
    try:
        header = json.loads(raw[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header bytes 0..{end} are not valid JSON: {exc}") from exc
    return header, end + len(HEADER_END)


def _encode_header(header: dict) -> bytes:
    text = json.dumps(header, separators=(",", ":"), sort_keys=True)
    return text.encode("utf-8") + HEADER_END


# ---------------------------------------------------------------------------
# HSIC
# ---------------------------------------------------------------------------


def write_hsic(cube: HsiCube | np.ndarray, path, dtype: str = "f64") -> int:
    """Write a B×H×W cube band-sequentially; returns the file size in bytes."""
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported dtype {dtype!r}")
    if not isinstance(cube, HsiCube):
        cube = HsiCube(cube)
    B, H, W = cube.data.shape
    header = {"magic": HSIC_MAGIC, "B": B, "H": H, "W": W, "dtype": dtype}
    if cube.wavelengths is not None:
        header["wavelengths"] = [float(w) for w in cube.wavelengths]
    if cube.band_names is not None:
        header["band_names"] = list(cube.band_names)
    blob = _encode_header(header) + np.ascontiguousarray(cube.data, dtype=_DTYPES[dtype]).tobytes()
    Path(path).write_bytes(blob)
    return len(blob)


def read_hsic(path) -> HsiCube:
    raw = Path(path).read_bytes()
    header, offset = _split_header(raw, path)
    if header.get("magic") != HSIC_MAGIC:
        raise FormatError(f"{path}: magic {header.get('magic')!r} at byte 0, expected {HSIC_MAGIC!r}")
    if header.get("dtype") not in _DTYPES:
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    try:
        B, H, W = (int(header[k]) for k in ("B", "H", "W"))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: header missing or invalid B/H/W") from exc
    if min(B, H, W) < 1:
        raise FormatError(f"{path}: non-positive shape {B}×{H}×{W}")
    dt = _DTYPES[header["dtype"]]
    expected = B * H * W * dt.itemsize
    actual = len(raw) - offset
    if actual != expected:
        raise FormatError(
            f"{path}: payload at byte offset {offset} holds {actual} bytes, expected {expected} "
            f"({B}×{H}×{W} {header['dtype']})"
        )
    data = np.frombuffer(raw, dtype=dt, offset=offset).reshape(B, H, W).astype(np.float64)
    return HsiCube(data, wavelengths=header.get("wavelengths"), band_names=header.get("band_names"))


def write_abundances(A: AbundanceCube | np.ndarray, path) -> int:
    data = A.data if isinstance(A, AbundanceCube) else np.asarray(A)
    return write_hsic(HsiCube(data), path)


def read_abundances(path) -> AbundanceCube:
    return AbundanceCube(read_hsic(path).data)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    arrays = params.state_arrays()
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        buf = np.ascontiguousarray(arrays[name], dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arrays[name].shape), "offset": offset,
                        "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = {"magic": CKPT_MAGIC, "config": params.config.to_dict(), "arrays": entries,
              "extra": extra or {}}
    Path(path).write_bytes(_encode_header(header) + b"".join(chunks))


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    header, start = _split_header(raw, path)
    if header.get("magic") != CKPT_MAGIC:
        raise FormatError(f"{path}: magic {header.get('magic')!r} at byte 0, expected {CKPT_MAGIC!r}")
    payload = len(raw) - start
    arrays = {}
    for entry in header["arrays"]:
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > payload:
            raise FormatError(
                f"{path}: array {entry['name']!r} spans payload bytes {lo}..{lo + n}, "
                f"only {payload} available"
            )
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n // 8,
                                              offset=start + lo).reshape(entry["shape"])
    params = init_params(ModelConfig(**header["config"]))
    params.load_state_arrays(arrays)
    return params


# ---------------------------------------------------------------------------
# PGM maps
# ---------------------------------------------------------------------------


def quantize(values: np.ndarray) -> np.ndarray:
    """round(255 * clamp(v, 0, 1)) with halves rounded up."""
    return np.floor(255.0 * np.clip(values, 0.0, 1.0) + 0.5).astype(np.uint8)


def write_pgm(image: np.ndarray, path) -> None:
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + quantize(image).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    w, h = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise FormatError(f"{path}: maxval {parts[2]!r}, expected 255")
    body = parts[3]
    if len(body) != w * h:
        raise FormatError(f"{path}: pixel data holds {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


def export_abundance_pgm(A: AbundanceCube | np.ndarray, directory, names=None) -> list[Path]:
    data = A.data if isinstance(A, AbundanceCube) else np.asarray(A)
    names = names or [f"em{k + 1}" for k in range(data.shape[0])]
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, (image, name) in enumerate(zip(data, names), start=1):
        path = directory / f"abundance_{k}_{_safe(name)}.pgm"
        write_pgm(image, path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Endmember CSV
# ---------------------------------------------------------------------------


def export_endmembers_csv(E: EndmemberMatrix | np.ndarray, wavelengths, path,
                          names=None, digits: int = 17) -> None:
    """One row per band; first column is the wavelength (or band index)."""
    if isinstance(E, EndmemberMatrix):
        names = names or E.names
        E = E.E
    E = np.asarray(E, dtype=np.float64)
    names = list(names) if names else [f"em{k + 1}" for k in range(E.shape[1])]
    if wavelengths is None:
        first, axis = "band", np.arange(E.shape[0])
    else:
        first, axis = "wavelength", np.asarray(wavelengths, dtype=np.float64)
    fmt = f"{{:.{digits}g}}"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([first, *names])
        for b in range(E.shape[0]):
            lead = str(int(axis[b])) if wavelengths is None else fmt.format(axis[b])
            writer.writerow([lead, *(fmt.format(v) for v in E[b])])


def read_endmembers_csv(path) -> tuple[EndmemberMatrix, np.ndarray | None]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 2:
        raise FormatError(f"{path}: expected a header row with at least one endmember column")
    head, body = rows[0], rows[1:]
    try:
        table = np.array([[float(v) for v in row] for row in body], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric cell: {exc}") from exc
    if table.ndim != 2 or table.shape[1] != len(head):
        raise FormatError(f"{path}: ragged rows")
    wavelengths = table[:, 0] if head[0] == "wavelength" else None
    return EndmemberMatrix(table[:, 1:], names=head[1:]), wavelengths


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------


def write_json(obj, path) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
