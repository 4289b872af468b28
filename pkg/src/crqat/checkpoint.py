"""Checkpoint serialization: a JSON manifest plus a raw tensor blob.

The manifest records the config hash, epoch, model role, architecture, a
tensor index (name, shape, byte offset) and every quantizer's parameters; the
blob is the concatenated little-endian float32 parameter data, checksummed
with SHA-256. Loading rebuilds the architecture and restores parameters and
quantizer specs so that forward outputs reproduce bitwise.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import CheckpointError, ChecksumError
from .models import ModelState, build_model
from .quantization import QuantSpec

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"
FORMAT_VERSION = 1


def save_checkpoint(model: ModelState, directory, config_hash: str = "",
                    epoch: int = 0) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    chunks = []
    index = []
    offset = 0
    for name, tensor in model.named_parameters():
        raw = tensor.data.astype("<f4").tobytes()
        index.append({"name": name, "shape": list(tensor.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)

    sites = []
    for site in model.quant_sites():
        entry = {"name": site.name, "bits": site.bits, "axis": site.axis,
                 "kind": site.kind, "spec": None}
        if site.spec is not None:
            entry["spec"] = {
                "bits": site.spec.bits,
                "step": [float(v) for v in site.spec.step.data],
                "zero_point": [int(v) for v in site.spec.zero_point],
                "axis": site.spec.axis,
                "step_learnable": site.spec.step_learnable,
            }
        sites.append(entry)

    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "epoch": epoch,
        "role": model.role,
        "arch": model.arch,
        "num_classes": model.num_classes,
        "wbits": model.wbits,
        "abits": model.abits,
        "tensors": index,
        "quant_sites": sites,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    (directory / BLOB_NAME).write_bytes(blob)
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))


def load_checkpoint(directory) -> ModelState:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    blob_path = directory / BLOB_NAME
    if not manifest_path.is_file():
        raise CheckpointError(f"missing manifest: {manifest_path}")
    if not blob_path.is_file():
        raise CheckpointError(f"missing tensor blob: {blob_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {manifest.get('format_version')}"
        )

    blob = blob_path.read_bytes()
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["blob_sha256"]:
        raise ChecksumError(
            f"tensor blob checksum mismatch in {directory}: "
            f"manifest {manifest['blob_sha256'][:12]}.., blob {digest[:12]}.."
        )

    model = build_model(manifest["arch"], manifest["num_classes"],
                        manifest["wbits"], manifest["abits"])
    model.role = manifest["role"]

    params = model.named_parameters()
    if len(params) != len(manifest["tensors"]):
        raise CheckpointError(
            f"manifest lists {len(manifest['tensors'])} tensors, model has "
            f"{len(params)}"
        )
    for (name, tensor), entry in zip(params, manifest["tensors"]):
        if name != entry["name"]:
            raise CheckpointError(
                f"tensor order mismatch: expected '{name}', manifest has "
                f"'{entry['name']}'"
            )
        if list(tensor.shape) != entry["shape"]:
            raise CheckpointError(
                f"shape mismatch for '{name}': model {list(tensor.shape)}, "
                f"manifest {entry['shape']}"
            )
        end = entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise CheckpointError(
                f"blob truncated: '{name}' needs bytes up to {end}, "
                f"blob has {len(blob)}"
            )
        flat = np.frombuffer(blob[entry["offset"] : end], dtype="<f4")
        tensor.data = flat.reshape(entry["shape"]).astype(np.float32)

    sites = model.quant_sites()
    if len(sites) != len(manifest["quant_sites"]):
        raise CheckpointError(
            f"manifest lists {len(manifest['quant_sites'])} quant sites, "
            f"model has {len(sites)}"
        )
    for site, entry in zip(sites, manifest["quant_sites"]):
        if site.name != entry["name"]:
            raise CheckpointError(
                f"quant site order mismatch: expected '{site.name}', manifest "
                f"has '{entry['name']}'"
            )
        site.bits = entry["bits"]
        spec = entry["spec"]
        if spec is not None:
            site.spec = QuantSpec(
                bits=spec["bits"],
                step=Tensor(np.asarray(spec["step"], dtype=np.float32),
                            requires_grad=spec["step_learnable"]),
                zero_point=np.asarray(spec["zero_point"], dtype=np.int64),
                axis=spec["axis"],
                step_learnable=spec["step_learnable"],
            )
    return model
