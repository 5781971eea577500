"""Minimal NIfTI-1 single-file reader/writer.

Implements exactly the subset the pipeline needs: little-endian 348-byte
headers, magic ``n+1``, contiguous data at a 352-byte offset, and the six
datatype codes that cover images and label maps.  Hand-rolled (struct module)
rather than delegated so that malformed headers produce errors naming the
offending field and the on-disk layout stays auditable.

Array convention: volumes are C-ordered ``[D, H, W]`` with spacing
``(sz, sy, sx)``; NIfTI's dim/pixdim are x-fastest, so ``dim[1] = W`` and the
pixdim order is the reverse of ours.  A 2D grid is saved as a depth-1 volume.
"""

from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path

import numpy as np

from hardseg.errors import NiftiParseError, UnsupportedDatatypeError
from hardseg.grids import IntensityGrid, LabelGrid, Sample

HEADER_SIZE = 348
VOX_OFFSET = 352.0
MAGIC = b"n+1\x00"

# NIfTI-1 datatype codes we accept.
DTYPES = {
    2: np.uint8,
    4: np.int16,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
}
DTYPE_CODES = {np.dtype(v): k for k, v in DTYPES.items()}

# one struct format for the whole 348-byte header (little-endian, unpadded)
_HDR_FMT = "<i10s18sihBB8h3fhhhh8ffffhBBffffii80s24shh3f3f4f4f4f16s4s"
assert struct.calcsize(_HDR_FMT) == HEADER_SIZE


def _is_gz(path: Path) -> bool:
    return path.name.endswith(".gz")


def _read_bytes(path: Path) -> bytes:
    if _is_gz(path):
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _write_bytes_atomic(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    if _is_gz(path):
        # fixed mtime and no embedded filename so identical content gives
        # identical bytes
        with open(tmp, "wb") as raw:
            with gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as fh:
                fh.write(payload)
    else:
        tmp.write_bytes(payload)
    os.replace(tmp, path)


def _parse_header(blob: bytes, path: Path) -> dict:
    if len(blob) < HEADER_SIZE:
        raise NiftiParseError(
            f"{path}: file too short for a NIfTI-1 header "
            f"({len(blob)} bytes < {HEADER_SIZE})"
        )
    fields = struct.unpack(_HDR_FMT, blob[:HEADER_SIZE])
    sizeof_hdr = fields[0]
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiParseError(
            f"{path}: header field sizeof_hdr = {sizeof_hdr}, expected 348"
        )
    magic = fields[-1]
    if magic != MAGIC:
        raise NiftiParseError(f"{path}: header field magic = {magic!r}, "
                              f"expected {MAGIC!r}")
    dim = fields[7:15]
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiParseError(f"{path}: header field dim[0] = {ndim}, "
                              "expected 1..7")
    shape_xyz = dim[1:1 + ndim]
    if any(d <= 0 for d in shape_xyz):
        raise NiftiParseError(
            f"{path}: header field dim[1..{ndim}] = {tuple(shape_xyz)} "
            "contains a nonpositive extent"
        )
    datatype = fields[19]
    bitpix = fields[20]
    if datatype not in DTYPES:
        raise UnsupportedDatatypeError(
            f"{path}: header field datatype = {datatype} is unsupported "
            f"(supported codes: {sorted(DTYPES)})"
        )
    expect_bits = np.dtype(DTYPES[datatype]).itemsize * 8
    if bitpix != expect_bits:
        raise NiftiParseError(
            f"{path}: header field bitpix = {bitpix} inconsistent with "
            f"datatype {datatype} (expected {expect_bits})"
        )
    pixdim = fields[22:30]
    spacing_xyz = pixdim[1:1 + ndim]
    if any(not np.isfinite(s) or s <= 0 for s in spacing_xyz):
        raise NiftiParseError(
            f"{path}: header field pixdim[1..{ndim}] = {tuple(spacing_xyz)} "
            "must be strictly positive"
        )
    vox_offset = fields[30]
    if vox_offset < HEADER_SIZE:
        raise NiftiParseError(
            f"{path}: header field vox_offset = {vox_offset} < {HEADER_SIZE}"
        )
    return {
        "shape_xyz": tuple(int(d) for d in shape_xyz),
        "spacing_xyz": tuple(float(s) for s in spacing_xyz),
        "datatype": datatype,
        "vox_offset": int(vox_offset),
        "scl_slope": float(fields[31]),
        "scl_inter": float(fields[32]),
        "intent_p1": float(fields[10]),
    }


def _load_array(path: Path):
    blob = _read_bytes(path)
    hdr = _parse_header(blob, path)
    shape_xyz = hdr["shape_xyz"]
    if len(shape_xyz) > 3:
        raise NiftiParseError(
            f"{path}: header field dim[0] = {len(shape_xyz)}, "
            "only 1..3 spatial dimensions are supported"
        )
    dtype = np.dtype(DTYPES[hdr["datatype"]]).newbyteorder("<")
    count = int(np.prod(shape_xyz))
    start = hdr["vox_offset"]
    end = start + count * dtype.itemsize
    if len(blob) < end:
        raise NiftiParseError(
            f"{path}: data truncated ({len(blob)} bytes, need {end})"
        )
    flat = np.frombuffer(blob[start:end], dtype=dtype)
    # x varies fastest on disk; our C-order axes are reversed (z, y, x)
    arr = flat.reshape(tuple(reversed(shape_xyz)))
    spacing = tuple(reversed(hdr["spacing_xyz"]))
    return arr, spacing, hdr


def label_companion(path: Path) -> Path:
    """<stem>_label with the same (.nii/.nii.gz) suffix as path."""
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return path.with_name(name[: -len(suffix)] + "_label" + suffix)
    return path.with_name(name + "_label.nii")


def load_volume(path) -> tuple[IntensityGrid, LabelGrid | None]:
    """Load a NIfTI-1 volume plus its label companion when one exists."""
    path = Path(path)
    if not path.exists():
        raise NiftiParseError(f"{path}: no such file")
    arr, spacing, hdr = _load_array(path)
    values = arr.astype(np.float64)
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope not in (0.0, 1.0) or inter != 0.0:
        if slope == 0.0:
            slope = 1.0
        values = values * slope + inter
    image = IntensityGrid(values.astype(np.float32), spacing)

    labels = None
    companion = label_companion(path)
    if companion.exists():
        lab_arr, lab_spacing, lab_hdr = _load_array(companion)
        if not np.issubdtype(lab_arr.dtype, np.integer):
            raise NiftiParseError(
                f"{companion}: label companion has non-integer datatype "
                f"{lab_hdr['datatype']}"
            )
        if lab_arr.shape != arr.shape:
            raise NiftiParseError(
                f"{companion}: label shape {lab_arr.shape} does not match "
                f"image shape {arr.shape}"
            )
        # the writer stashes the category count in intent_p1; fall back to
        # max label + 1 for files from other writers
        c_hint = int(lab_hdr["intent_p1"])
        num_categories = c_hint if c_hint >= 2 else int(lab_arr.max()) + 1
        num_categories = max(num_categories, 2)
        labels = LabelGrid(lab_arr.astype(np.int64), num_categories)
    return image, labels


def _build_header(shape_zyx, spacing_zyx, datatype: int, intent_p1: float = 0.0) -> bytes:
    shape_xyz = tuple(reversed(shape_zyx))
    spacing_xyz = tuple(reversed(spacing_zyx))
    dim = [len(shape_xyz)] + list(shape_xyz) + [1] * (7 - len(shape_xyz))
    pixdim = [1.0] + list(spacing_xyz) + [1.0] * (7 - len(spacing_xyz))
    bitpix = np.dtype(DTYPES[datatype]).itemsize * 8
    return struct.pack(
        _HDR_FMT,
        HEADER_SIZE,            # sizeof_hdr
        b"", b"", 0, 0, 0, 0,   # data_type, db_name, extents, session_error,
                                # regular, dim_info (all unused)
        *dim,                   # dim[8]
        float(intent_p1), 0.0, 0.0,  # intent_p1..p3
        0,                      # intent_code
        datatype, bitpix,
        0,                      # slice_start
        *pixdim,                # pixdim[8]
        VOX_OFFSET,
        1.0, 0.0,               # scl_slope, scl_inter
        0, 0, 0,                # slice_end, slice_code, xyzt_units
        0.0, 0.0, 0.0, 0.0,     # cal_max, cal_min, slice_duration, toffset
        0, 0,                   # glmax, glmin
        b"hardseg volume", b"",  # descrip, aux_file
        0, 0,                   # qform_code, sform_code
        0.0, 0.0, 0.0,          # quatern_b/c/d
        0.0, 0.0, 0.0,          # qoffset_x/y/z
        float(spacing_xyz[0]), 0.0, 0.0, 0.0,   # srow_x
        0.0, float(spacing_xyz[1] if len(spacing_xyz) > 1 else 1.0), 0.0, 0.0,
        0.0, 0.0, float(spacing_xyz[2] if len(spacing_xyz) > 2 else 1.0), 0.0,
        b"",                    # intent_name
        MAGIC,
    )


def save_volume(grid, path, spacing=None) -> None:
    """Write an IntensityGrid or LabelGrid as a NIfTI-1 single file.

    2D grids are promoted to depth-1 3D volumes.  Labels are stored as uint8
    when C fits in a byte (uint16 otherwise), with the category count stashed
    in intent_p1 so reloading restores it; label grids carry no spacing of
    their own, so pass the image's via ``spacing``.  Paths ending in .gz are
    gzipped.  Writes are atomic (temp file + rename).
    """
    path = Path(path)
    if isinstance(grid, IntensityGrid):
        arr = np.asarray(grid.values, dtype=np.float32)
        spacing = grid.spacing if spacing is None else tuple(spacing)
        intent_p1 = 0.0
    elif isinstance(grid, LabelGrid):
        c = grid.num_categories
        if c > 65535:
            raise NiftiParseError(f"cannot store {c} categories in uint16")
        dtype = np.uint8 if c <= 255 else np.uint16
        arr = np.asarray(grid.labels).astype(dtype)
        if spacing is None:
            spacing = (1.0,) * grid.labels.ndim
        intent_p1 = float(c)
    else:
        raise TypeError(f"cannot save {type(grid).__name__} as a volume")

    if arr.ndim == 2:
        arr = arr[None]
        spacing = (1.0,) + tuple(spacing)
    datatype = DTYPE_CODES[np.dtype(arr.dtype)]
    header = _build_header(arr.shape, spacing, datatype, intent_p1)
    header += b"\x00" * (int(VOX_OFFSET) - HEADER_SIZE)  # extension pad
    payload = header + np.ascontiguousarray(arr).tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_bytes_atomic(path, payload)


def save_sample(sample, image_path) -> None:
    """Write a Sample's image plus its label companion next to it."""
    image_path = Path(image_path)
    save_volume(sample.image, image_path)
    save_volume(sample.labels, label_companion(image_path),
                spacing=sample.image.spacing)


def _squeeze_depth1(image: IntensityGrid, labels: LabelGrid | None):
    """Collapse depth-1 volumes (the writer's 2D promotion) back to 2D."""
    if image.values.ndim == 3 and image.values.shape[0] == 1:
        image = IntensityGrid(image.values[0], image.spacing[1:])
        if labels is not None:
            labels = LabelGrid(labels.labels[0], labels.num_categories)
    return image, labels


def volume_stem(path) -> str:
    name = Path(path).name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def load_sample(image_path) -> Sample:
    """Load an image + required label companion as a 2D training Sample."""
    image_path = Path(image_path)
    image, labels = load_volume(image_path)
    if labels is None:
        raise NiftiParseError(
            f"{image_path}: no label companion "
            f"({label_companion(image_path).name} not found)"
        )
    image, labels = _squeeze_depth1(image, labels)
    return Sample(image=image, labels=labels, id=volume_stem(image_path))


def load_dataset(directory) -> list[Sample]:
    """All image/label pairs in a directory, sorted by filename."""
    directory = Path(directory)
    if not directory.is_dir():
        raise NiftiParseError(f"{directory}: not a directory")
    images = sorted(
        p for p in directory.iterdir()
        if (p.name.endswith(".nii") or p.name.endswith(".nii.gz"))
        and "_label" not in p.name
    )
    if not images:
        raise NiftiParseError(f"{directory}: no NIfTI images found")
    return [load_sample(p) for p in images]
