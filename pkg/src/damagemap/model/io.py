"""Model archives and third-party weight import."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Mapping, Sequence

import torch

from .unet import ModelConfig, SiameseUNet

HEAD_KEYS = ("head.weight", "head.bias")


def save_model(path: str | Path, model: SiameseUNet, **extra) -> None:
    torch.save({"model_config": model.cfg.to_dict(), "state_dict": model.state_dict(), **extra}, path)


def load_model(path: str | Path, map_location="cpu") -> tuple[SiameseUNet, dict]:
    blob = torch.load(path, map_location=map_location, weights_only=False)
    model = SiameseUNet(ModelConfig.from_dict(blob["model_config"]))
    model.load_state_dict(blob["state_dict"])
    return model, blob


def load_name_table(path: str | Path) -> list[tuple[str, str]]:
    """JSON list of ``[regex, replacement]`` pairs, tried in order."""
    return [(a, b) for a, b in json.loads(Path(path).read_text())]


def _short(names: list[str], n: int = 8) -> str:
    return str(names[:n]) + (f" (+{len(names) - n} more)" if len(names) > n else "")


def translate_state_dict(
    foreign: Mapping[str, torch.Tensor],
    table: Sequence[tuple[str, str]],
    model: SiameseUNet,
    *,
    skip_head: bool = False,
) -> dict[str, torch.Tensor]:
    """Rename ``foreign`` parameters into ``model``'s key space.

    Every foreign name must translate to a model key of the same shape, and
    every model key (except the head when ``skip_head``) must be covered;
    otherwise a ``KeyError`` lists the offending names.
    """
    target = model.state_dict()
    rules = [(re.compile(pat), rep) for pat, rep in table]
    out: dict[str, torch.Tensor] = {}
    unmapped, bad_shape = [], []
    for name, tensor in foreign.items():
        new = None
        for rx, rep in rules:
            if rx.fullmatch(name):
                new = rx.sub(rep, name)
                break
        if new is None:
            new = name if name in target else None
        if new is None or new not in target:
            unmapped.append(name)
            continue
        if skip_head and new in HEAD_KEYS:
            continue
        if tuple(target[new].shape) != tuple(tensor.shape):
            bad_shape.append(f"{name} -> {new}: {tuple(tensor.shape)} vs {tuple(target[new].shape)}")
            continue
        out[new] = tensor
    missing = [k for k in target if k not in out and not (skip_head and k in HEAD_KEYS)]
    if unmapped or bad_shape or missing:
        raise KeyError(
            "pretrained weights do not map onto the model; "
            f"unmapped={_short(unmapped)} shape_mismatch={_short(bad_shape)} uncovered={_short(missing)}"
        )
    return out


def import_pretrained(model: SiameseUNet, path: str | Path, table: Sequence[tuple[str, str]] = ()) -> SiameseUNet:
    """Load weights from one of our archives, a fold checkpoint or a foreign state dict.

    The fusion head is re-initialized when the class count differs.
    """
    blob = torch.load(path, map_location="cpu", weights_only=False)
    state = blob
    if isinstance(blob, dict):
        # our archives keep weights under "state_dict", fold checkpoints under "model_state"
        state = blob.get("state_dict", blob.get("model_state", blob))
    if table:
        # foreign heads never line up with our class layout
        skip_head = True
    else:
        head_w = state.get("head.weight")
        skip_head = head_w is None or head_w.shape[0] != model.cfg.num_classes
    mapped = translate_state_dict(state, table, model, skip_head=skip_head)
    model.load_state_dict(mapped, strict=False)
    if skip_head:
        model.reset_head(model.cfg.num_classes)
    return model
