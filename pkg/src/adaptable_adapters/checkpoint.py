"""Checkpoints: a JSON manifest plus a little-endian float64 blob.

Each tensor is located in the blob by ``offset`` and ``length`` (in float64
elements) recorded in the manifest's ``tensors`` table. The frozen backbone
is not stored; it is rebuilt from ``backbone.backbone_seed``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .adapters import AdapterConfig, AdapterModel, variant_from_dict, variant_to_dict
from .backbone import BackboneConfig, build_backbone

FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(path, model: AdapterModel, extra: dict | None = None) -> Path:
    """Write ``<path>.json`` and ``<path>.bin``; returns the manifest path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path, blob_path = path.with_suffix(".json"), path.with_suffix(".bin")
    table, chunks, offset = {}, [], 0
    for name, arr in model.state_dict().items():
        flat = arr.astype(_LE_F64).reshape(-1)
        table[name] = {"shape": list(arr.shape), "offset": offset, "length": int(flat.size)}
        chunks.append(flat.tobytes())
        offset += flat.size
    manifest = {
        "format_version": FORMAT_VERSION,
        "blob": blob_path.name,
        "backbone": model.encoder.cfg.to_dict(),
        "adapter": model.adapter_cfg.to_dict(),
        "variant": variant_to_dict(model.variant),
        "num_classes": model.num_classes,
        "seed": model.seed,
        "tensors": table,
        **(extra or {}),
    }
    _atomic_write(blob_path, b"".join(chunks))
    _atomic_write(manifest_path, json.dumps(manifest, indent=1, sort_keys=True).encode())
    return manifest_path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    manifest_path = Path(path).with_suffix(".json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{manifest_path}: unsupported checkpoint format {manifest.get('format_version')}")
    blob = np.frombuffer((manifest_path.parent / manifest["blob"]).read_bytes(), dtype=_LE_F64)
    arrays = {}
    for name, ent in manifest["tensors"].items():
        o, n = ent["offset"], ent["length"]
        if o + n > blob.size:
            raise ValueError(f"{manifest_path}: tensor {name} runs past the end of the blob")
        arrays[name] = blob[o:o + n].astype(np.float64).reshape(ent["shape"])
    return manifest, arrays


def load_checkpoint(path) -> tuple[AdapterModel, dict]:
    manifest, arrays = read_checkpoint(path)
    enc = build_backbone(BackboneConfig.from_dict(manifest["backbone"]))
    model = AdapterModel(enc, variant_from_dict(manifest["variant"]),
                         AdapterConfig.from_dict(manifest["adapter"]),
                         manifest["num_classes"], manifest["seed"])
    model.load_state_dict(arrays)
    return model, manifest
