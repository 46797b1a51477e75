"""Versioned checkpoint archives.

A checkpoint is a zip file with ``header.json`` (format tag, version, model
kinds and their build arguments, training phase, step counts, RNG state) and
``params.pt`` (named state dicts). Optimizer state, when saved, lives in
``optim.pt``.
"""

from __future__ import annotations

import base64
import io
import json
import zipfile
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import CheckpointError
from .nets import (
    Discriminator,
    EvaluatorBundle,
    Generator,
    TargetClassifier,
    build_discriminator,
    build_evaluator,
    build_generator,
    build_target_classifier,
)

FORMAT = "cama-checkpoint"
VERSION = 1
# fixed entry timestamps keep archives byte-identical across identical runs
_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def describe(model) -> dict:
    """Build arguments sufficient to reconstruct ``model``."""
    if isinstance(model, Generator):
        return {"kind": "generator", "n_classes": model.n_classes, "width": model.width}
    if isinstance(model, Discriminator):
        return {"kind": "discriminator", "n_classes": model.n_classes, "width": model.conv1.out_channels}
    if isinstance(model, EvaluatorBundle):
        return {"kind": "evaluator", "classes": model.classes, "width": model.width, "arch": model.arch}
    if isinstance(model, TargetClassifier):
        return {
            "kind": "target",
            "arch": model.arch,
            "preproc": model.preproc.value,
            "classes": model.classes,
            "width": model.width,
        }
    raise CheckpointError(f"cannot describe {type(model).__name__}")


def build(desc: dict):
    kind = desc["kind"]
    if kind == "generator":
        return build_generator(desc["n_classes"], desc["width"])
    if kind == "discriminator":
        return build_discriminator(desc["n_classes"], desc["width"])
    if kind == "evaluator":
        return build_evaluator(desc["classes"], desc["width"], desc.get("arch", "resnet18"))
    if kind == "target":
        return build_target_classifier(desc["arch"], desc["preproc"], desc["classes"], desc["width"])
    raise CheckpointError(f"unknown model kind {kind!r}")


def encode_rng_state() -> str:
    return base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode()


def restore_rng_state(s: str) -> None:
    torch.set_rng_state(torch.from_numpy(np.frombuffer(base64.b64decode(s), dtype=np.uint8).copy()))


def _write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def save(path, models: dict, header: Optional[dict] = None, optimizers: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = {
        "format": FORMAT,
        "version": VERSION,
        "models": {name: describe(m) for name, m in models.items()},
        "rng_state": encode_rng_state(),
    }
    head.update(header or {})
    buf = io.BytesIO()
    torch.save({name: m.state_dict() for name, m in models.items()}, buf)
    with zipfile.ZipFile(path, "w") as zf:
        _write(zf, "header.json", json.dumps(head, indent=1, sort_keys=True).encode())
        _write(zf, "params.pt", buf.getvalue())
        if optimizers:
            obuf = io.BytesIO()
            torch.save({name: o.state_dict() for name, o in optimizers.items()}, obuf)
            _write(zf, "optim.pt", obuf.getvalue())
    return path


def read_header(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            head = json.loads(zf.read("header.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint archive ({exc})") from exc
    if head.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unexpected format tag {head.get('format')!r}")
    if head.get("version") != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {head.get('version')} != supported {VERSION}")
    return head


def load(path, with_optim: bool = False):
    """Return ``(header, models)`` or ``(header, models, optimizer_states)``."""
    head = read_header(path)
    with zipfile.ZipFile(path) as zf:
        states = torch.load(io.BytesIO(zf.read("params.pt")), weights_only=True)
        optim = None
        if with_optim and "optim.pt" in zf.namelist():
            optim = torch.load(io.BytesIO(zf.read("optim.pt")), weights_only=False)
    models = {}
    for name, desc in head["models"].items():
        m = build(desc)
        m.load_state_dict(states[name])
        models[name] = m
    if with_optim:
        return head, models, optim
    return head, models


def load_model(path, name: Optional[str] = None):
    head, models = load(path)
    if name is None:
        if len(models) != 1:
            raise CheckpointError(f"{path} holds {sorted(models)}; name one")
        return next(iter(models.values()))
    if name not in models:
        raise CheckpointError(f"{path} has no model {name!r}")
    return models[name]
