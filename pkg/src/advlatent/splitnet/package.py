"""Model packages: weights plus a manifest that fully describes how to rebuild them.

A package is a ``torch.save`` archive holding ``{"manifest": dict, "state":
{name: tensor}}``. The manifest carries the architecture, split, bottleneck,
codec, a hash of that configuration and a hash of the stored weights. A
``mobile`` package stores only the mobile half (plus encoder) and a ``local``
package only the local half (plus decoder).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch

from .codecs import CompressionCodec
from .models import ArchSpec
from .split import SplitModel, attach_bottleneck, split_model

FORMAT = "advlatent-package/1"
ROLES = ("full", "mobile", "local")


class PackageError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def weights_hash(state: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().contiguous().cpu()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def split_config(split: SplitModel, arch: ArchSpec) -> dict:
    codec = split.codec
    return {
        "arch": arch.arch,
        "arch_kwargs": dict(arch.kwargs),
        "split_index": split.split_index,
        "bottleneck_channels": None if split.bottleneck is None else split.bottleneck.channels,
        "codec": None
        if codec is None
        else {"kind": codec.kind, "bits": codec.bits, "quality": codec.quality, "value_range": None if codec.value_range is None else list(codec.value_range)},
    }


def _role_state(split: SplitModel, role: str) -> dict:
    graph_state = {}
    for i, block in enumerate(split.graph.blocks):
        mobile_side = i < split.split_index
        if role == "full" or (role == "mobile") == mobile_side:
            for k, v in block.state_dict().items():
                graph_state[f"blocks.{i}.{k}"] = v.clone()
    if split.bottleneck is not None:
        parts = {"full": ("encoder", "decoder"), "mobile": ("encoder",), "local": ("decoder",)}[role]
        for part in parts:
            for k, v in getattr(split.bottleneck, part).state_dict().items():
                graph_state[f"bottleneck.{part}.{k}"] = v.clone()
    return graph_state


def save_package(split: SplitModel, path, arch: ArchSpec, role: str = "full", extra: dict | None = None) -> dict:
    """Write ``split`` (or one half of it) to ``path``; returns the manifest."""
    if role not in ROLES:
        raise PackageError(f"role must be one of {ROLES}")
    config = split_config(split, arch)
    state = _role_state(split, role)
    manifest = {
        "format": FORMAT,
        "role": role,
        "config": config,
        "config_hash": config_hash(config),
        "weights_hash": weights_hash(state),
        "blocks": [f"blocks.{i}" for i in range(len(split.graph)) if role == "full" or (role == "mobile") == (i < split.split_index)],
        **(extra or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"manifest": manifest, "state": state}, path)
    return manifest


def read_manifest(path) -> dict:
    return _load(path)["manifest"]


def _load(path) -> dict:
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise PackageError(f"cannot read package {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("manifest", {}).get("format") != FORMAT:
        raise PackageError(f"{path} is not an {FORMAT} package")
    return blob


def build_split(config: dict) -> SplitModel:
    """Rebuild an untrained SplitModel from a manifest config."""
    arch = ArchSpec(config["arch"], dict(config.get("arch_kwargs") or {}))
    split = split_model(arch.build(), int(config["split_index"]))
    if config.get("bottleneck_channels"):
        split = attach_bottleneck(split, int(config["bottleneck_channels"]))
    codec = config.get("codec")
    if codec:
        vr = codec.get("value_range")
        split.codec = CompressionCodec(codec["kind"], int(codec["bits"]), int(codec["quality"]), None if vr is None else tuple(vr))
    return split


def load_package(path) -> tuple[SplitModel, dict]:
    """Load a package; half packages leave the other half at its random init."""
    blob = _load(path)
    manifest, state = blob["manifest"], blob["state"]
    if config_hash(manifest["config"]) != manifest["config_hash"]:
        raise PackageError("config hash mismatch; package is corrupt")
    if weights_hash(state) != manifest["weights_hash"]:
        raise PackageError("weights hash mismatch; package is corrupt")
    split = build_split(manifest["config"])
    for i, block in enumerate(split.graph.blocks):
        sub = {k[len(f"blocks.{i}.") :]: v for k, v in state.items() if k.startswith(f"blocks.{i}.")}
        if sub:
            block.load_state_dict(sub)
    if split.bottleneck is not None:
        for part in ("encoder", "decoder"):
            sub = {k[len(f"bottleneck.{part}.") :]: v for k, v in state.items() if k.startswith(f"bottleneck.{part}.")}
            if sub:
                getattr(split.bottleneck, part).load_state_dict(sub)
    split.role = manifest["role"]
    split.eval()
    for p in split.parameters():
        p.requires_grad_(False)
    return split, manifest
