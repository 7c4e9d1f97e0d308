"""Encoder over visible tokens and the lightweight reconstructing decoder.

The decoder rebuilds the full token sequence: projected visible
features at their original positions, and a shared learnable mask
vector plus the fixed positional encoding everywhere else. The
prediction head maps decoder features to flattened patch pixels
(normalized-pixel space when targets are normalized).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .layers import BlockParams, LinearParams, LayerNormParams, apply_layer_norm, linear, transformer_block
from .masking import MaskSpec
from .numerics import Tensor, add, concat_rows, gather_rows
from .tokenizer import TokenizerConfig, positional_encoding


@dataclass
class BackboneConfig:
    enc_depth: int = 4
    enc_dim: int = 64
    enc_heads: int = 4
    enc_mlp_ratio: float = 4.0
    dec_depth: int = 4
    dec_dim: int = 32
    dec_heads: int = 2
    dec_mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.enc_dim % self.enc_heads != 0:
            raise ConfigError(f"encoder dim {self.enc_dim} not divisible by {self.enc_heads} heads")
        if self.dec_dim % self.dec_heads != 0:
            raise ConfigError(f"decoder dim {self.dec_dim} not divisible by {self.dec_heads} heads")
        if self.dec_dim % 2 != 0:
            raise ConfigError("decoder dim must be even for the positional table")


class ModelParams:
    """Every trainable tensor of the autoencoder: tokenizer projection,
    encoder blocks, decoder embed/blocks/head, and the mask vector."""

    def __init__(
        self,
        tok_cfg: TokenizerConfig,
        bb_cfg: BackboneConfig,
        rng: np.random.Generator,
        channels: int = 3,
    ):
        if tok_cfg.dim != bb_cfg.enc_dim:
            raise ConfigError(
                f"token dim {tok_cfg.dim} must equal encoder dim {bb_cfg.enc_dim}"
            )
        self.tok_cfg = tok_cfg
        self.bb_cfg = bb_cfg
        self.channels = channels
        patch_len = tok_cfg.patch_len(channels)
        # LeCun-scale init keeps patch content comparable to the O(1)
        # positional table; a 0.02 init buries it and stalls training
        self.proj = LinearParams(rng, patch_len, tok_cfg.dim, std=1.0 / math.sqrt(patch_len))
        self.enc_blocks = [
            BlockParams(rng, bb_cfg.enc_dim, bb_cfg.enc_heads, bb_cfg.enc_mlp_ratio)
            for _ in range(bb_cfg.enc_depth)
        ]
        self.enc_norm = LayerNormParams(bb_cfg.enc_dim)
        self.dec_embed = LinearParams(rng, bb_cfg.enc_dim, bb_cfg.dec_dim)
        self.mask_token = Tensor(
            (rng.standard_normal((1, bb_cfg.dec_dim)) * 0.02).astype(np.float32),
            requires_grad=True,
        )
        self.dec_blocks = [
            BlockParams(rng, bb_cfg.dec_dim, bb_cfg.dec_heads, bb_cfg.dec_mlp_ratio)
            for _ in range(bb_cfg.dec_depth)
        ]
        self.dec_norm = LayerNormParams(bb_cfg.dec_dim)
        self.head = LinearParams(rng, bb_cfg.dec_dim, patch_len)

    def named(self, prefix: str = "model") -> dict[str, Tensor]:
        out = {}
        out.update(self.proj.named(f"{prefix}.tokenizer.proj"))
        for i, block in enumerate(self.enc_blocks):
            out.update(block.named(f"{prefix}.encoder.block{i}"))
        out.update(self.enc_norm.named(f"{prefix}.encoder.norm"))
        out.update(self.dec_embed.named(f"{prefix}.decoder.embed"))
        out[f"{prefix}.decoder.mask_token"] = self.mask_token
        for i, block in enumerate(self.dec_blocks):
            out.update(block.named(f"{prefix}.decoder.block{i}"))
        out.update(self.dec_norm.named(f"{prefix}.decoder.norm"))
        out.update(self.head.named(f"{prefix}.decoder.head"))
        return out

    def encoder_named(self, prefix: str = "model") -> dict[str, Tensor]:
        """The subset used by the downstream classification path."""
        out = {}
        out.update(self.proj.named(f"{prefix}.tokenizer.proj"))
        for i, block in enumerate(self.enc_blocks):
            out.update(block.named(f"{prefix}.encoder.block{i}"))
        out.update(self.enc_norm.named(f"{prefix}.encoder.norm"))
        return out


@dataclass
class LatentBatch:
    features: Tensor  # (n_visible, enc_dim)
    spec: MaskSpec

    def __post_init__(self):
        if self.features.shape[0] != self.spec.n_visible:
            raise ContractError(
                f"latent rows {self.features.shape[0]} != visible count {self.spec.n_visible}"
            )


@dataclass
class PatchPredictions:
    values: Tensor  # (n_masked, patch_len), aligned to masked_ids order
    masked_ids: np.ndarray


def encode(visible_tokens: Tensor, params: ModelParams) -> Tensor:
    """Pre-norm transformer over the visible tokens (optionally batched),
    final layer-norm."""
    if visible_tokens.shape[-2] < 1:
        raise ContractError("encoder needs at least one visible token")
    if visible_tokens.shape[-1] != params.bb_cfg.enc_dim:
        raise ConfigError(
            f"token dim {visible_tokens.shape[-1]} != encoder dim {params.bb_cfg.enc_dim}"
        )
    x = visible_tokens
    for block in params.enc_blocks:
        x = transformer_block(x, block)
    return apply_layer_norm(x, params.enc_norm)


def encode_visible(grid_tokens: Tensor, spec: MaskSpec, params: ModelParams) -> LatentBatch:
    visible = gather_rows(grid_tokens, spec.visible_ids)
    return LatentBatch(encode(visible, params), spec)


def decode(latents: LatentBatch, spec: MaskSpec, params: ModelParams) -> PatchPredictions:
    """Reconstruct masked patches from visible latents.

    Builds the N-length decoder sequence (projected visible features at
    their positions, mask vector + positional encoding at masked ones),
    runs the decoder blocks, and predicts pixels for masked slots only.
    """
    if latents.spec is not spec and latents.features.shape[0] != spec.n_visible:
        raise ContractError("latents do not match the mask spec")
    if spec.n_masked < 1:
        raise ContractError("decode needs at least one masked token")
    dec_dim = params.bb_cfg.dec_dim
    vis = linear(latents.features, params.dec_embed)
    pe = positional_encoding(spec.n_tokens, dec_dim, dtype=vis.data.dtype)
    mask_rows = gather_rows(params.mask_token, np.zeros(spec.n_masked, dtype=np.int64))
    mask_rows = add(mask_rows, Tensor(pe[spec.masked_ids]))
    stacked = concat_rows([vis, mask_rows])
    order = np.empty(spec.n_tokens, dtype=np.int64)
    order[spec.visible_ids] = np.arange(spec.n_visible)
    order[spec.masked_ids] = spec.n_visible + np.arange(spec.n_masked)
    x = gather_rows(stacked, order)
    for block in params.dec_blocks:
        x = transformer_block(x, block)
    x = apply_layer_norm(x, params.dec_norm)
    preds = linear(gather_rows(x, spec.masked_ids), params.head)
    return PatchPredictions(preds, spec.masked_ids)
