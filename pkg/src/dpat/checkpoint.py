"""Checkpoint container: named raw arrays plus a plain-text manifest.

A checkpoint is a directory holding

* ``tensors.bin``: the row-major bytes of every array, concatenated in
  manifest order;
* ``manifest.txt``: ``key=value`` header lines (format, config hash, task,
  stage, payload sha256) followed by one ``array`` line per tensor giving
  name, dtype, shape, byte offset and byte length;
* ``config.yaml``: the resolved run configuration.

Writing the same arrays twice produces identical bytes.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .config import Config, config_from_dict, dump_config
from .errors import CheckpointError

FORMAT = "dpat-checkpoint-1"


def model_arrays(model) -> "OrderedDict[str, np.ndarray]":
    """Name every model tensor with the container's naming scheme."""
    return OrderedDict(
        (k, np.asarray(v.detach().cpu().numpy(), order="C")) for k, v in _named_tensors(model).items()
    )


def save_arrays(path, arrays, header: dict, config: Config | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs, lines, offset = [], [], 0
    for name, arr in arrays.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"array name may not contain whitespace: {name!r}")
        arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d arrays to 1-d
        raw = arr.tobytes(order="C")
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"array {name} {arr.dtype.str} {shape} {offset} {len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    head = {"format": FORMAT, **{k: header[k] for k in sorted(header)}, "sha256": hashlib.sha256(payload).hexdigest()}
    text = "".join(f"{k}={v}\n" for k, v in head.items()) + "".join(line + "\n" for line in lines)
    (path / "tensors.bin").write_bytes(payload)
    (path / "manifest.txt").write_text(text)
    if config is not None:
        (path / "config.yaml").write_text(dump_config(config))
    return path


def load_arrays(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    path = Path(path)
    try:
        text = (path / "manifest.txt").read_text()
        payload = (path / "tensors.bin").read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint at {path}: {exc}") from exc
    header, arrays = {}, OrderedDict()
    for line in text.splitlines():
        if line.startswith("array "):
            try:
                _, name, dtype, shape, offset, size = line.split(" ")
                offset, size = int(offset), int(size)
                dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
            except ValueError as exc:
                raise CheckpointError(f"malformed manifest line: {line!r}") from exc
            if offset + size > len(payload):
                raise CheckpointError(f"array {name} runs past the end of tensors.bin")
            arr = np.frombuffer(payload, dtype=np.dtype(dtype), count=int(np.prod(dims)) if dims else 1, offset=offset)
            arrays[name] = arr.reshape(dims).copy()
        elif "=" in line:
            k, v = line.split("=", 1)
            header[k] = v
        elif line.strip():
            raise CheckpointError(f"malformed manifest line: {line!r}")
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} container")
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch (corrupted checkpoint)")
    return header, arrays


def save_model(path, model, task: int, stage: str) -> Path:
    header = {"config_hash": model.cfg.fingerprint(), "task": task, "stage": stage}
    return save_arrays(path, model_arrays(model), header, model.cfg)


def load_model(path):
    """Rebuild a :class:`~dpat.model.DPATModel` from a checkpoint directory."""
    import yaml

    from .model import DPATModel

    path = Path(path)
    header, arrays = load_arrays(path)
    try:
        cfg = config_from_dict(yaml.safe_load((path / "config.yaml").read_text()))
    except OSError as exc:
        raise CheckpointError(f"{path}: missing config.yaml") from exc
    if cfg.fingerprint() != header.get("config_hash"):
        raise CheckpointError(f"{path}: config does not match the manifest hash")
    # backbone weights come from the container, so skip the stand-in pretraining
    build_cfg = config_from_dict(cfg.to_dict())
    build_cfg.model.pretrain_steps = 0
    model = DPATModel(build_cfg)
    model.cfg = cfg
    n_tasks = sum(1 for k in arrays if k.startswith("key/"))
    for t in range(1, n_tasks + 1):
        model.add_task(arrays[f"head/{t}/weight"].shape[0])
    current = model_arrays(model)
    if list(current) != list(arrays):
        missing = set(current) ^ set(arrays)
        raise CheckpointError(f"{path}: array set mismatch ({sorted(missing)[:5]})")
    with torch.no_grad():
        for name, target in _named_tensors(model).items():
            src = torch.from_numpy(arrays[name])
            if tuple(src.shape) != tuple(target.shape):
                raise CheckpointError(f"{name}: shape {tuple(src.shape)} != {tuple(target.shape)}")
            target.copy_(src)
    model.eval()
    return model, header


def _named_tensors(model) -> "OrderedDict[str, torch.Tensor]":
    """Live model tensors under names like ``key/<t>`` and ``prompt/e_T/<t>/<layer>``."""
    out = OrderedDict()
    for name, t in model.backbone.state_dict(keep_vars=True).items():
        out[f"backbone/{name}"] = t
    for i, ad in enumerate(model.adapters):
        for role in ("T", "S"):
            for name, t in ad[role].state_dict(keep_vars=True).items():
                out[f"adapter/{i + 1}/{role}/{name}"] = t
    for kind in ("g_T", "g_S"):
        for layer, p in getattr(model.prompts, kind).items():
            out[f"prompt/{kind}/{layer}"] = p
    for kind in ("e_T", "e_S"):
        for key, p in getattr(model.prompts, kind).items():
            task, layer = key.split("_")
            out[f"prompt/{kind}/{task}/{layer}"] = p
    for t, k in enumerate(model.keys.keys):
        out[f"key/{t + 1}"] = k
    for t, (w, b) in enumerate(zip(model.head.weights, model.head.biases)):
        out[f"head/{t + 1}/weight"] = w
        out[f"head/{t + 1}/bias"] = b
    return out
