"""Checkpoint persistence.

A checkpoint directory holds ``manifest.json`` (backbone config, linear
schedule parameters, training step, named parameter shapes) and
``params.bin`` (the arrays as raw little-endian float32, concatenated in
manifest order).
"""

from __future__ import annotations

import json
import os

import numpy as np

from .backbone import BackboneConfig, JointDenoiser
from .schedule import NoiseSchedule, ScheduleSpec

MANIFEST_NAME = "manifest.json"
PARAMS_NAME = "params.bin"


def save_checkpoint(path: str, net: JointDenoiser, sched_spec: ScheduleSpec, step: int) -> None:
    os.makedirs(path, exist_ok=True)
    manifest = {
        "backbone": net.config.to_dict(),
        "schedule": sched_spec.to_dict(),
        "step": int(step),
        "dtype": "f32",
        "byte_order": "little",
        "params": [{"name": k, "shape": list(v.shape)} for k, v in net.params.items()],
    }
    with open(os.path.join(path, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1)
    with open(os.path.join(path, PARAMS_NAME), "wb") as fh:
        for v in net.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> tuple[JointDenoiser, NoiseSchedule, ScheduleSpec, int]:
    with open(os.path.join(path, MANIFEST_NAME)) as fh:
        manifest = json.load(fh)
    config = BackboneConfig.from_dict(manifest["backbone"])
    sched_spec = ScheduleSpec.from_dict(manifest["schedule"])
    raw = np.fromfile(os.path.join(path, PARAMS_NAME), dtype="<f4")
    params: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        params[entry["name"]] = raw[offset : offset + size].reshape(shape).astype(np.float32)
        offset += size
    if offset != raw.size:
        raise ValueError(f"params.bin holds {raw.size} floats, manifest implies {offset}")
    net = JointDenoiser(config, sched_spec.T, params=params)
    return net, sched_spec.build(), sched_spec, int(manifest["step"])
