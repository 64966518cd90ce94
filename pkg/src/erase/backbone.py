"""Latent text-conditioned diffusion backbone abstraction plus a toy model.

The interface is what the adaptation engine needs: encode/decode between
image and latent space, a one-step denoiser that also reports per-token
cross-attention at latent resolution, and enumerable attention
projections for adapter injection.

The toy backbone is fully self-contained: a fixed seeded linear
pixel-block codec, a variance-preserving cosine noise schedule, and a
two-block patchified transformer (one self-attention, one
cross-attention) small enough for desk-scale experiments.
"""

from __future__ import annotations

import hashlib
import math
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import InputValidationError
from .types import validate_image


class NoiseSchedule:
    """Cosine variance-preserving schedule: alpha_t^2 + sigma_t^2 = 1."""

    def __init__(self, steps: int = 50):
        if steps < 1:
            raise InputValidationError("schedule needs at least one step")
        self.steps = int(steps)
        theta = (math.pi / 2.0) * np.arange(self.steps + 1) / self.steps
        self._alpha = np.cos(theta)
        self._sigma = np.sin(theta)

    def alpha(self, t: int) -> float:
        return float(self._alpha[self._check(t)])

    def sigma(self, t: int) -> float:
        return float(self._sigma[self._check(t)])

    def add_noise(self, z: torch.Tensor, t: int, noise: torch.Tensor) -> torch.Tensor:
        return self.alpha(t) * z + self.sigma(t) * noise

    def _check(self, t: int) -> int:
        t = int(t)
        if t < 0 or t > self.steps:
            raise InputValidationError(f"timestep {t} outside [0, {self.steps}]")
        return t


class DiffusionBackbone:
    """Contract every backbone (toy or shimmed) satisfies."""

    schedule: NoiseSchedule

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        raise NotImplementedError

    @property
    def image_shape(self) -> tuple[int, int]:
        raise NotImplementedError

    def encode(self, image: np.ndarray) -> torch.Tensor:
        raise NotImplementedError

    def decode(self, latent: torch.Tensor) -> np.ndarray:
        raise NotImplementedError

    def denoise_step(
        self, z_t: torch.Tensor, t: int, cond: Sequence[str]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """One-step clean-latent prediction.

        Returns (z0_hat, attn) where attn is (n_cond_tokens, h, w) raw
        cross-attention at latent resolution; at each index the values
        sum to 1 over condition tokens.
        """
        raise NotImplementedError

    def attention_projections(self) -> dict[str, nn.Linear]:
        """Adapter targets: query/key/value/output of every attention block."""
        raise InputValidationError(
            f"{type(self).__name__} does not expose attention projections"
        )

    def replace_projection(self, path: str, module: nn.Module) -> None:
        raise InputValidationError(
            f"{type(self).__name__} does not support projection replacement"
        )

    def base_checksum(self) -> str:
        """SHA-256 over base (non-adapter) parameters; adapters excluded."""
        raise NotImplementedError


def _sinusoidal_embedding(t_norm: float, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half))
    angles = t_norm * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)])


class _AttentionBlock(nn.Module):
    """Single-head attention with enumerable q/k/v/o projections.

    ``qk_diag`` initializes query/key as scaled identities, so attention
    starts near-diagonal wherever token features are near-orthogonal;
    per-token corrections then flow through the value/output path from
    the first adapter step instead of being averaged away.
    """

    def __init__(self, dim: int, generator: torch.Generator, qk_diag: float | None = None):
        super().__init__()
        self.dim = dim
        if qk_diag is None:
            self.q = _seeded_linear(dim, dim, generator)
            self.k = _seeded_linear(dim, dim, generator)
        else:
            self.q = _diagonal_linear(dim, qk_diag)
            self.k = _diagonal_linear(dim, qk_diag)
        self.v = _seeded_linear(dim, dim, generator)
        self.o = _seeded_linear(dim, dim, generator)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        q = self.q(x)
        k = self.k(context)
        v = self.v(context)
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.dim), dim=-1)
        return x + self.o(weights @ v), weights


def _seeded_linear(
    n_in: int, n_out: int, generator: torch.Generator, std: float | None = None
) -> nn.Linear:
    layer = nn.Linear(n_in, n_out, bias=False)
    std = std if std is not None else 1.0 / math.sqrt(n_in)
    with torch.no_grad():
        layer.weight.copy_(torch.randn(n_out, n_in, generator=generator) * std)
    return layer


def _diagonal_linear(dim: int, scale: float) -> nn.Linear:
    layer = nn.Linear(dim, dim, bias=False)
    with torch.no_grad():
        layer.weight.copy_(torch.eye(dim) * scale)
    return layer


class ToyBackbone(DiffusionBackbone, nn.Module):
    """Deterministic desk-scale backbone.

    Latent grid ``latent_hw x latent_hw`` with ``latent_channels``
    channels; the codec is a fixed seeded linear projection of pixel
    blocks (first three latent channels track per-block RGB means, the
    rest are seeded random directions; decode uses the pseudo-inverse).
    The denoiser patchifies the latent (patch size 2), runs one
    self-attention and one cross-attention block, and predicts the noise
    component, so the zero-noise endpoint is exactly the identity.
    """

    def __init__(
        self,
        image_size: int = 64,
        latent_hw: int = 8,
        latent_channels: int = 4,
        patch_size: int = 2,
        d_model: int = 32,
        schedule_steps: int = 50,
        seed: int = 0,
    ):
        nn.Module.__init__(self)
        if image_size % latent_hw != 0:
            raise InputValidationError("image size must be a multiple of the latent grid")
        if latent_hw % patch_size != 0:
            raise InputValidationError("latent grid must be a multiple of the patch size")
        self.seed = int(seed)
        self._image_size = image_size
        self._latent_hw = latent_hw
        self._latent_channels = latent_channels
        self.patch_size = patch_size
        self.d_model = d_model
        self.schedule = NoiseSchedule(schedule_steps)
        self.block = image_size // latent_hw

        gen = torch.Generator().manual_seed(self.seed)

        # codec: per-block RGB means plus seeded random rows, bias-free
        block_dim = self.block * self.block * 3
        enc = torch.zeros(latent_channels, block_dim)
        per_channel = self.block * self.block
        for c in range(min(3, latent_channels)):
            enc[c].view(per_channel, 3)[:, c] = 1.0 / per_channel
        for c in range(3, latent_channels):
            row = torch.randn(block_dim, generator=gen)
            enc[c] = row / (row.norm() * math.sqrt(block_dim))
        self.register_buffer("enc_weight", enc)
        self.register_buffer("dec_weight", torch.linalg.pinv(enc))

        patch_dim = patch_size * patch_size * latent_channels
        self.token_proj = _seeded_linear(patch_dim, d_model, gen)
        self.time_proj = _seeded_linear(d_model, d_model, gen)
        self.self_attn = _AttentionBlock(d_model, gen, qk_diag=2.0)
        self.cross_attn = _AttentionBlock(d_model, gen)
        self.out_head = _seeded_linear(d_model, patch_dim, gen, std=0.05)

        self._token_table: dict[str, torch.Tensor] = {}
        for p in self.parameters():
            p.requires_grad_(False)

    # -- contract surface -------------------------------------------------

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self._latent_hw, self._latent_hw, self._latent_channels)

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self._image_size, self._image_size)

    def encode(self, image: np.ndarray) -> torch.Tensor:
        image = validate_image(image)
        if image.shape[:2] != self.image_shape:
            raise InputValidationError(
                f"image shape {image.shape[:2]} does not match configured {self.image_shape}"
            )
        hw, b = self._latent_hw, self.block
        x = torch.from_numpy(np.ascontiguousarray(image))
        blocks = (
            x.reshape(hw, b, hw, b, 3).permute(0, 2, 1, 3, 4).reshape(hw, hw, -1)
        )
        return blocks @ self.enc_weight.T

    def decode(self, latent: torch.Tensor) -> np.ndarray:
        if tuple(latent.shape) != self.latent_shape:
            raise InputValidationError(
                f"latent shape {tuple(latent.shape)} does not match {self.latent_shape}"
            )
        hw, b = self._latent_hw, self.block
        blocks = latent.detach().to(torch.float32) @ self.dec_weight.T
        image = (
            blocks.reshape(hw, hw, b, b, 3).permute(0, 2, 1, 3, 4)
            .reshape(hw * b, hw * b, 3)
        )
        return np.clip(image.numpy(), 0.0, 1.0)

    def register_tokens(self, tags: Sequence[str]) -> None:
        """Build deterministic embeddings; independent of registration order."""
        for tag in tags:
            if tag not in self._token_table:
                self._token_table[tag] = self._embed(tag)

    def _embed(self, tag: str) -> torch.Tensor:
        digest = hashlib.blake2b(
            f"{self.seed}:{tag}".encode("utf-8"), digest_size=8
        ).digest()
        gen = torch.Generator().manual_seed(int.from_bytes(digest, "little") % (2**63))
        return torch.randn(self.d_model, generator=gen) / math.sqrt(self.d_model)

    def denoise_step(
        self, z_t: torch.Tensor, t: int, cond: Sequence[str]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if len(cond) == 0:
            raise InputValidationError("denoise_step needs at least one condition token")
        unknown = [c for c in cond if c not in self._token_table]
        if unknown:
            raise InputValidationError(f"unknown condition tokens: {unknown}")
        if tuple(z_t.shape) != self.latent_shape:
            raise InputValidationError(
                f"latent shape {tuple(z_t.shape)} does not match {self.latent_shape}"
            )
        alpha, sigma = self.schedule.alpha(t), self.schedule.sigma(t)
        correction, weights = self._predict_noise(z_t, t, cond)
        # preconditioned noise prediction: sigma * z_t is the exact
        # posterior mean for a unit-Gaussian latent prior, so the
        # untrained model already denoises sanely and the network only
        # learns the image-specific correction
        eps_hat = sigma * z_t + correction
        z0_hat = (z_t - sigma * eps_hat) / alpha
        attn = self._weights_to_latent_maps(weights)
        return z0_hat, attn

    # -- internals ---------------------------------------------------------

    def _predict_noise(
        self, z_t: torch.Tensor, t: int, cond: Sequence[str]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        hw, p = self._latent_hw, self.patch_size
        n_side = hw // p
        patches = (
            z_t.reshape(n_side, p, n_side, p, self._latent_channels)
            .permute(0, 2, 1, 3, 4)
            .reshape(n_side * n_side, -1)
        )
        tokens = self.token_proj(patches)
        t_emb = _sinusoidal_embedding(t / self.schedule.steps, self.d_model)
        tokens = tokens + self.time_proj(t_emb.to(tokens.dtype))
        tokens, _ = self.self_attn(tokens, tokens)
        context = torch.stack([self._token_table[c].to(tokens.dtype) for c in cond])
        tokens, weights = self.cross_attn(tokens, context)
        out = self.out_head(tokens)
        eps_hat = (
            out.reshape(n_side, n_side, p, p, self._latent_channels)
            .permute(0, 2, 1, 3, 4)
            .reshape(hw, hw, self._latent_channels)
        )
        return eps_hat, weights

    def _weights_to_latent_maps(self, weights: torch.Tensor) -> torch.Tensor:
        """(n_patches, n_tokens) -> (n_tokens, h, w) by nearest replication."""
        hw, p = self._latent_hw, self.patch_size
        n_side = hw // p
        maps = weights.T.reshape(-1, n_side, n_side)
        return maps.repeat_interleave(p, dim=1).repeat_interleave(p, dim=2)

    def attention_projections(self) -> dict[str, nn.Linear]:
        out: dict[str, nn.Linear] = {}
        for block_name in ("self_attn", "cross_attn"):
            block = getattr(self, block_name)
            for proj in ("q", "k", "v", "o"):
                out[f"{block_name}.{proj}"] = getattr(block, proj)
        return out

    def replace_projection(self, path: str, module: nn.Module) -> None:
        block_name, proj = path.split(".")
        setattr(getattr(self, block_name), proj, module)

    def base_checksum(self) -> str:
        digest = hashlib.sha256()
        # adapter wrapping renames `q.weight` to `q.base.weight`; normalize
        # so the checksum tracks the underlying weights only
        named = sorted(
            (name.replace(".base.", "."), param)
            for name, param in self.named_parameters()
            if ".lora_down" not in name and ".lora_up" not in name
        )
        for name, param in named:
            digest.update(name.encode("utf-8"))
            digest.update(param.detach().to(torch.float32).numpy().tobytes())
        for name, buf in sorted(self.named_buffers()):
            digest.update(name.encode("utf-8"))
            digest.update(buf.detach().to(torch.float32).numpy().tobytes())
        return digest.hexdigest()


def sample_removal(
    backbone: DiffusionBackbone,
    z_source: torch.Tensor,
    cond: Sequence[str],
    strength: float = 0.8,
    steps: int = 10,
    seed: int = 0,
) -> np.ndarray:
    """Regenerate an image from a partially noised source latent.

    Noises the source to level ``strength * T``, then walks a
    deterministic denoising trajectory conditioned on ``cond`` and
    decodes the final clean-latent prediction.
    """
    if not (0.0 < strength <= 1.0):
        raise InputValidationError("strength must lie in (0, 1]")
    T = backbone.schedule.steps
    t_start = max(1, round(strength * T))
    if steps < 1:
        raise InputValidationError("steps must be >= 1")

    gen = torch.Generator().manual_seed(int(seed))
    noise = torch.randn(z_source.shape, generator=gen, dtype=torch.float32)
    z = backbone.schedule.add_noise(z_source.to(torch.float32), t_start, noise)

    ts = np.unique(np.round(np.linspace(t_start, 0, steps + 1)).astype(int))[::-1]
    z0_hat = z
    with torch.no_grad():
        for t_cur, t_next in zip(ts[:-1], ts[1:]):
            z0_hat, _ = backbone.denoise_step(z, int(t_cur), cond)
            alpha_c, sigma_c = backbone.schedule.alpha(int(t_cur)), backbone.schedule.sigma(int(t_cur))
            eps_hat = (z - alpha_c * z0_hat) / max(sigma_c, 1e-8)
            z = backbone.schedule.add_noise(z0_hat, int(t_next), eps_hat)
    return backbone.decode(z0_hat if ts[-1] == 0 else z)
