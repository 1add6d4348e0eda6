"""Binary checkpoint container: magic string, JSON header, raw arrays.

Layout: 10-byte magic, little-endian uint64 header length, UTF-8 JSON
header (sorted keys, so identical content gives identical bytes), then the
arrays named in the header concatenated in order as little-endian floats.
A checkpoint always holds the voxel field and may additionally carry the
exposure calibration, the training config, and the step counter.
"""

import json
import struct

import numpy as np
import torch

from .field import VoxelField
from .losses import ExposureCalibration

__all__ = ["save_checkpoint", "load_checkpoint"]

MAGIC = b"RAWFIELD1\n"

_DTYPES = {"float32": ("<f4", torch.float32), "float64": ("<f8", torch.float64)}


def _dtype_name(dtype):
    for name, (_, t) in _DTYPES.items():
        if t == dtype:
            return name
    raise ValueError(f"unsupported checkpoint dtype {dtype}")


def save_checkpoint(path, field, calibration=None, config=None, step=None):
    dtype_name = _dtype_name(field.dtype)
    arrays = [
        ("density_raw", field.density_raw.detach().numpy()),
        ("color_raw", field.color_raw.detach().numpy()),
    ]
    header = {
        "format_version": 1,
        "field": {
            "resolution": list(field.resolution),
            "bbox": field.bbox.tolist(),
            "dtype": dtype_name,
            "color_activation": field.color_activation,
        },
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "calibration": calibration.state() if calibration is not None else None,
        "config": config,
        "step": step,
    }
    payload = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        np_dtype = _DTYPES[dtype_name][0]
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype=np_dtype).tobytes())


def load_checkpoint(path):
    """Returns a dict with keys field, calibration, config, step."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a rawfield checkpoint (magic {magic!r})")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len))
        np_dtype, torch_dtype = _DTYPES[header["field"]["dtype"]]
        data = {}
        for spec in header["arrays"]:
            count = int(np.prod(spec["shape"]))
            buf = f.read(count * np.dtype(np_dtype).itemsize)
            data[spec["name"]] = np.frombuffer(buf, dtype=np_dtype).reshape(spec["shape"])
    fmeta = header["field"]
    field = VoxelField(
        fmeta["resolution"],
        fmeta["bbox"],
        density_raw=torch.from_numpy(data["density_raw"].copy()),
        color_raw=torch.from_numpy(data["color_raw"].copy()),
        color_activation=fmeta["color_activation"],
        dtype=torch_dtype,
    )
    calibration = None
    if header["calibration"] is not None:
        calibration = ExposureCalibration.from_state(header["calibration"], dtype=torch_dtype)
    return {
        "field": field,
        "calibration": calibration,
        "config": header["config"],
        "step": header["step"],
    }
