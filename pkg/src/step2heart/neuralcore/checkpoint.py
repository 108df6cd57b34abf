"""Checkpoint files: a JSON manifest next to a raw little-endian float64 blob."""

import json
import os

import numpy as np

from ..errors import CohortIOError, ShapeError
from .models import ModelSpec, build_model

FORMAT_VERSION = 1


def save_checkpoint(net, path):
    """Write ``<path>.json`` (kind, spec, tensor table) and ``<path>.bin``."""
    tensors = []
    offset = 0
    blobs = []
    for name, arr in net.params.items():
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        offset += arr.size
    manifest = {"version": FORMAT_VERSION, "kind": net.kind, "spec": net.spec.to_dict(),
                "tensors": tensors}
    if net.kind == "autoencoder":
        manifest["spec"]["ae_channels"] = net.channels
    for suffix, data, mode in ((".bin", b"".join(blobs), "wb"),
                               (".json", json.dumps(manifest, indent=2), "w")):
        tmp = path + suffix + ".tmp"
        with open(tmp, mode) as fh:
            fh.write(data)
        os.replace(tmp, path + suffix)


def load_checkpoint(path, expect_kind=None):
    try:
        with open(path + ".json") as fh:
            manifest = json.load(fh)
        flat = np.fromfile(path + ".bin", dtype="<f8")
    except (OSError, ValueError) as exc:
        raise CohortIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise CohortIOError(f"{path}.json: unsupported checkpoint version {manifest.get('version')}")
    if expect_kind is not None and manifest["kind"] != expect_kind:
        raise ShapeError(f"{path}: checkpoint holds a {manifest['kind']}, expected {expect_kind}")
    spec = ModelSpec.from_dict(manifest["spec"])
    net = build_model(manifest["kind"], spec, seed=0)
    tensors = {}
    for t in manifest["tensors"]:
        size = int(np.prod(t["shape"], dtype=np.int64))
        chunk = flat[t["offset"]:t["offset"] + size]
        if chunk.size != size:
            raise CohortIOError(f"{path}.bin: truncated at tensor {t['name']}")
        tensors[t["name"]] = chunk.reshape(t["shape"])
    net.params.load(tensors)
    return net
