"""Zip checkpoint archives: JSON documents plus little-endian float32 tensors."""

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import IntegrityError, InvalidState, MissingCheckpoint

ARCHIVE_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)  # fixed entry timestamp keeps archives byte-reproducible


def _tensor_bytes(t):
    arr = t.detach().cpu().numpy()
    arr = arr.astype("<f4") if arr.dtype.kind == "f" else arr.astype("<i8") if arr.dtype.kind in "iu" else arr
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def _write(zf, name, data):
    zf.writestr(zipfile.ZipInfo(name, _EPOCH), data, compress_type=zipfile.ZIP_DEFLATED)


def save_archive(path, docs: dict, tensors: dict):
    """Write ``docs`` (name -> JSON-able) and ``tensors`` (group -> {name: tensor}).

    Float tensors must be finite; a non-finite parameter aborts the save.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    for group, named in tensors.items():
        for name, t in named.items():
            if t.is_floating_point() and not torch.all(torch.isfinite(t)):
                raise InvalidState(f"refusing to save non-finite tensor {group}/{name}")
    tmp = path.with_suffix(path.suffix + ".part")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_DEFLATED) as zf:
        _write(zf, "archive.json", json.dumps({"version": ARCHIVE_VERSION, "groups": sorted(tensors)}))
        for name, doc in docs.items():
            _write(zf, f"{name}.json", json.dumps(doc, sort_keys=True, indent=1))
        for group, named in tensors.items():
            for name, t in named.items():
                _write(zf, f"{group}/{name}.npy", _tensor_bytes(t))
    tmp.replace(path)


def load_archive(path):
    """Return ``(docs, tensors)`` as written by :func:`save_archive`."""
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            head = json.loads(zf.read("archive.json"))
            if head.get("version") != ARCHIVE_VERSION:
                raise IntegrityError(f"{path}: unsupported archive version {head.get('version')}")
            docs, tensors = {}, {g: {} for g in head["groups"]}
            for info in zf.infolist():
                name = info.filename
                if name == "archive.json":
                    continue
                if name.endswith(".json") and "/" not in name:
                    docs[name[:-5]] = json.loads(zf.read(name))
                elif name.endswith(".npy"):
                    group, key = name[:-4].split("/", 1)
                    arr = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
                    tensors.setdefault(group, {})[key] = torch.from_numpy(arr.copy())
    except (zipfile.BadZipFile, KeyError, ValueError) as exc:
        raise IntegrityError(f"{path}: corrupt checkpoint ({exc})") from None
    return docs, tensors


def load_state(module: torch.nn.Module, state: dict):
    """Load a state dict saved as float32, casting back to the module's dtypes."""
    own = module.state_dict()
    missing = set(own) - set(state)
    if missing:
        raise IntegrityError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    module.load_state_dict({k: state[k].to(own[k].dtype) for k in own})
