"""Low-rank adapters on attention projections.

Each wrapped projection computes ``base(x) + scale * up(down(x))`` with
``up`` zero-initialized, so injection is an exact identity until the
first optimizer step. Merging folds ``scale * up @ down`` into the base
weight and removes the wrapper, restoring baseline inference cost.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import DiffusionBackbone
from .errors import InputValidationError, StateError
from .io import read_tensor_archive, write_tensor_archive

DEFAULT_RANK = 32


class LoraLinear(nn.Module):
    """A frozen linear projection with an additive low-rank delta."""

    def __init__(self, base: nn.Linear, rank: int, generator: torch.Generator):
        super().__init__()
        if rank < 1:
            raise InputValidationError("adapter rank must be >= 1")
        self.base = base
        self.rank = rank
        self.scale = 1.0 / rank
        n_out, n_in = base.weight.shape
        down = torch.randn(rank, n_in, generator=generator) / math.sqrt(n_in)
        self.lora_down = nn.Parameter(down)
        self.lora_up = nn.Parameter(torch.zeros(n_out, rank))
        self.enabled = True
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.base(x)
        if self.enabled:
            out = out + self.scale * torch.nn.functional.linear(
                torch.nn.functional.linear(x, self.lora_down), self.lora_up
            )
        return out

    def delta(self) -> torch.Tensor:
        return self.scale * (self.lora_up @ self.lora_down)


@dataclass
class LoraState:
    """All adapters injected into one backbone, keyed by projection path."""

    rank: int
    adapters: dict[str, LoraLinear] = field(default_factory=dict)
    merged: bool = False

    def parameters(self) -> list[nn.Parameter]:
        out = []
        for adapter in self.adapters.values():
            out.extend([adapter.lora_down, adapter.lora_up])
        return out

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def set_enabled(self, enabled: bool) -> None:
        for adapter in self.adapters.values():
            adapter.enabled = enabled

    def tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for path in sorted(self.adapters):
            adapter = self.adapters[path]
            out[f"{path}.lora_down"] = adapter.lora_down.detach().numpy()
            out[f"{path}.lora_up"] = adapter.lora_up.detach().numpy()
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.tensors().items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(arr, dtype=np.float32).tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        write_tensor_archive(self.tensors(), path)

    def load(self, path: str | Path) -> None:
        stored = read_tensor_archive(path)
        with torch.no_grad():
            for proj_path, adapter in self.adapters.items():
                for attr in ("lora_down", "lora_up"):
                    key = f"{proj_path}.{attr}"
                    if key not in stored:
                        raise InputValidationError(f"archive is missing tensor {key!r}")
                    arr = stored[key]
                    param = getattr(adapter, attr)
                    if tuple(arr.shape) != tuple(param.shape):
                        raise InputValidationError(
                            f"{key}: stored shape {arr.shape} != adapter shape {tuple(param.shape)}"
                        )
                    param.copy_(torch.from_numpy(arr))


def inject_adapters(
    backbone: DiffusionBackbone, rank: int = DEFAULT_RANK, seed: int = 0
) -> LoraState:
    """Wrap every attention projection of the backbone with an adapter.

    The forward pass is numerically identical to the pre-injection model
    until the up factors move away from zero.
    """
    projections = backbone.attention_projections()
    if not projections:
        raise InputValidationError("backbone exposes no attention projections")
    gen = torch.Generator().manual_seed(int(seed))
    state = LoraState(rank=int(rank))
    for path in sorted(projections):
        base = projections[path]
        if not isinstance(base, nn.Linear):
            raise InputValidationError(f"projection {path!r} is not a linear layer")
        adapter = LoraLinear(base, rank, gen)
        backbone.replace_projection(path, adapter)
        state.adapters[path] = adapter
    return state


def merge_adapters(backbone: DiffusionBackbone, lora: LoraState) -> None:
    """Fold adapter deltas into the base weights and drop the wrappers."""
    if lora.merged:
        raise StateError("adapters were already merged into this backbone")
    current = backbone.attention_projections()
    for path, adapter in lora.adapters.items():
        if current.get(path) is not adapter:
            raise InputValidationError(
                f"adapter {path!r} is not attached to this backbone"
            )
    with torch.no_grad():
        for path, adapter in lora.adapters.items():
            adapter.base.weight += adapter.delta()
            backbone.replace_projection(path, adapter.base)
    lora.merged = True
