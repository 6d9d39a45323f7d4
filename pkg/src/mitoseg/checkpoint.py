"""Parameter checkpoint format: a zip archive holding one raw little-endian
binary entry per tensor plus ``manifest.json`` listing names (in load
order), shapes, and dtypes. Arbitrary JSON metadata rides along under the
manifest's ``extra`` key."""

from __future__ import annotations

import json
import zipfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

_DTYPE_CODES = {"f64": "<f8", "f32": "<f4"}


class CheckpointError(Exception):
    pass


def save_checkpoint(path, named_arrays, extra=None):
    """named_arrays: iterable of (name, np.ndarray); extra: JSON-compatible dict."""
    entries = []
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, arr in named_arrays:
            arr = np.asarray(arr)
            code = "f32" if arr.dtype == np.float32 else "f64"
            entries.append({"name": name, "shape": list(arr.shape), "dtype": code})
            zf.writestr(f"data/{name}", np.ascontiguousarray(arr).astype(_DTYPE_CODES[code]).tobytes())
        manifest = {"format": "mitoseg-checkpoint-v1", "params": entries, "extra": extra or {}}
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path):
    """-> (OrderedDict name -> array, extra dict), arrays in manifest order."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            arrays = OrderedDict()
            for entry in manifest["params"]:
                raw = zf.read(f"data/{entry['name']}")
                arr = np.frombuffer(raw, dtype=_DTYPE_CODES[entry["dtype"]]).reshape(entry["shape"])
                arrays[entry["name"]] = arr.astype(np.float64 if entry["dtype"] == "f64" else np.float32)
            return arrays, manifest.get("extra", {})
    except (KeyError, zipfile.BadZipFile, json.JSONDecodeError) as e:
        raise CheckpointError(f"malformed checkpoint {path}: {e}") from e


def load_into(module, arrays, prefix=""):
    """Copy checkpoint arrays into a module's parameters by name."""
    for name, tensor in module.parameters():
        key = f"{prefix}{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing parameter {key!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(f"parameter {key!r} has shape {tuple(arr.shape)} in checkpoint, model expects {tuple(tensor.shape)}")
        tensor.data = arr.astype(tensor.data.dtype)
