"""Single-file checkpoint archive.

A zip container holding ``manifest.json`` plus one ``.npy`` member per named
tensor.  Member timestamps are pinned so identical state dicts produce
identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_state(path, state: dict[str, torch.Tensor], manifest: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    manifest.setdefault("format_version", FORMAT_VERSION)
    manifest["tensors"] = sorted(state)
    with zipfile.ZipFile(path, "w") as zf:
        _member(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        for name in sorted(state):
            buf = io.BytesIO()
            np.save(buf, state[name].detach().cpu().numpy(), allow_pickle=False)
            _member(zf, f"tensors/{name}.npy", buf.getvalue())
    return path


def load_state(path) -> tuple[dict[str, torch.Tensor], dict]:
    with zipfile.ZipFile(Path(path)) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
        state = {}
        for name in manifest["tensors"]:
            arr = np.load(io.BytesIO(zf.read(f"tensors/{name}.npy")), allow_pickle=False)
            state[name] = torch.from_numpy(arr.copy())
    return state, manifest


def read_manifest(path) -> dict:
    with zipfile.ZipFile(Path(path)) as zf:
        return json.loads(zf.read("manifest.json"))
