"""Toy segmentation transformer with condition strainers.

The network is a flat patch transformer: patch embedding + learned positional
embedding, ``num_layers`` pre-norm blocks (MHSA + FFN), and a linear
per-patch decoder head upsampled back to pixels. Every sublayer carries an
optional bottleneck residual (the "strainer"): with the strainer enabled the
sublayer output becomes ``x + sublayer(x) + strainer(x)``, with it disabled
the strainer modules are never invoked, so no strainer parameter enters the
autograd graph on that path.

Strainer init makes the residual exactly zero at start: the down-projection
weight and every strainer bias are zero, the up-projection is He-uniform.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig

PARAM_GROUPS = ("encoder", "decoder", "strainer", "projection", "discriminator")

CHECKPOINT_VERSION = 1


@dataclass
class FeaturePack:
    """Per-layer patch features; ``final`` aliases the last entry."""

    per_layer: list[torch.Tensor]

    @property
    def final(self) -> torch.Tensor:
        return self.per_layer[-1]

    def __len__(self) -> int:
        return len(self.per_layer)


class Strainer(nn.Module):
    """Bottleneck residual: zero-init down projection -> GELU -> He-uniform up."""

    def __init__(self, dim: int, bottleneck: int):
        super().__init__()
        self.down = nn.Linear(dim, bottleneck)
        self.up = nn.Linear(bottleneck, dim)
        nn.init.zeros_(self.down.weight)
        nn.init.zeros_(self.down.bias)
        nn.init.kaiming_uniform_(self.up.weight, nonlinearity="relu")
        nn.init.zeros_(self.up.bias)

    def forward(self, x):
        return self.up(F.gelu(self.down(x)))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.embed_dim)
        self.attn = nn.MultiheadAttention(cfg.embed_dim, cfg.num_heads, batch_first=True)
        self.ln2 = nn.LayerNorm(cfg.embed_dim)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.embed_dim, 4 * cfg.embed_dim),
            nn.GELU(),
            nn.Linear(4 * cfg.embed_dim, cfg.embed_dim),
        )
        self.strainer_attn = Strainer(cfg.embed_dim, cfg.strainer_bottleneck)
        self.strainer_ffn = Strainer(cfg.embed_dim, cfg.strainer_bottleneck)

    def forward(self, x, use_strainer: bool):
        h = self.ln1(x)
        h, _ = self.attn(h, h, h, need_weights=False)
        x = x + h + (self.strainer_attn(x) if use_strainer else 0)
        h = self.ffn(self.ln2(x))
        x = x + h + (self.strainer_ffn(x) if use_strainer else 0)
        return x


class ProjectionHead(nn.Module):
    """Two-layer MLP into the condition embedding space; outputs are unit-norm."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.embed_dim, cfg.proj_dim)
        self.fc2 = nn.Linear(cfg.proj_dim, cfg.proj_dim)

    def forward(self, x):
        z = self.fc2(F.gelu(self.fc1(x)))
        return F.normalize(z, dim=-1, eps=1e-12)


class LayerDiscriminator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.embed_dim, cfg.disc_hidden)
        self.fc2 = nn.Linear(cfg.disc_hidden, 1)

    def forward(self, x):
        return torch.sigmoid(self.fc2(F.gelu(self.fc1(x))))


class ModelBundle(nn.Module):
    """Encoder + decoder + strainers + projection head + per-layer discriminators."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        self.patch_embed = nn.Linear(p * p * 3, cfg.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.num_patches, cfg.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.num_layers))
        self.head = nn.Linear(cfg.embed_dim, p * p * cfg.num_classes)
        self.proj = ProjectionHead(cfg)
        self.discs = nn.ModuleList(LayerDiscriminator(cfg) for _ in range(cfg.num_layers))

    # ---- forward paths -------------------------------------------------

    def patchify(self, image: torch.Tensor) -> torch.Tensor:
        """(H, W, 3) image in [0, 1] -> (num_patches, patch_size^2 * 3)."""
        cfg = self.cfg
        if image.shape != (cfg.image_size, cfg.image_size, 3):
            raise ValueError(
                f"expected image of shape ({cfg.image_size}, {cfg.image_size}, 3), "
                f"got {tuple(image.shape)}"
            )
        g, p = cfg.grid_size, cfg.patch_size
        x = image.reshape(g, p, g, p, 3).permute(0, 2, 1, 3, 4)
        return x.reshape(g * g, p * p * 3)

    def encoder_forward(self, image: torch.Tensor, use_strainer: bool) -> FeaturePack:
        x = self.patch_embed(self.patchify(image)) + self.pos_embed
        per_layer = []
        for block in self.blocks:
            x = block(x, use_strainer)
            per_layer.append(x)
        return FeaturePack(per_layer)

    def project(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.cfg.embed_dim:
            raise ValueError(f"feature dim {features.shape[-1]} != embed_dim {self.cfg.embed_dim}")
        return self.proj(features)

    def discriminate(self, patch_feature: torch.Tensor, layer: int) -> torch.Tensor:
        """Probability that ``patch_feature`` is a plain encoder feature. 1-based layer."""
        if not 1 <= layer <= self.cfg.num_layers:
            raise ValueError(f"layer {layer} out of range [1, {self.cfg.num_layers}]")
        return self.discs[layer - 1](patch_feature).squeeze(-1)

    def decode(self, features: FeaturePack) -> torch.Tensor:
        """(num_patches, D) final features -> (H, W, C) logits."""
        cfg = self.cfg
        g, p, c = cfg.grid_size, cfg.patch_size, cfg.num_classes
        logits = self.head(features.final)
        logits = logits.reshape(g, g, p, p, c).permute(0, 2, 1, 3, 4)
        return logits.reshape(cfg.image_size, cfg.image_size, c)

    def predict(self, image: torch.Tensor) -> torch.Tensor:
        """Inference path: encoder (no strainer) + decoder only."""
        return self.decode(self.encoder_forward(image, use_strainer=False))

    # ---- parameter bookkeeping -----------------------------------------

    def param_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list[tuple[str, nn.Parameter]]] = {g: [] for g in PARAM_GROUPS}
        for name, p in self.named_parameters():
            groups[self._group_of(name)].append((name, p))
        return groups

    @staticmethod
    def _group_of(name: str) -> str:
        if ".strainer_" in name:
            return "strainer"
        if name.startswith("head."):
            return "decoder"
        if name.startswith("proj."):
            return "projection"
        if name.startswith("discs."):
            return "discriminator"
        return "encoder"

    def group_parameters(self, group: str) -> list[nn.Parameter]:
        if group not in PARAM_GROUPS:
            raise KeyError(f"unknown parameter group {group!r}; expected one of {PARAM_GROUPS}")
        return [p for _, p in self.param_groups()[group]]

    def param_count(self, group: str) -> int:
        return sum(p.numel() for p in self.group_parameters(group))


def build_model(cfg: ModelConfig, seed: int) -> ModelBundle:
    """Deterministically initialized bundle."""
    gen_state = torch.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = ModelBundle(cfg)
    finally:
        torch.set_rng_state(gen_state)
    return model


# ---- checkpoint container ----------------------------------------------


def save_checkpoint(model: ModelBundle, path, seed: int = 0, extra: dict | None = None) -> None:
    """Versioned container: {group -> {param name -> tensor}} + config + seed."""
    groups = {
        g: {name: p.detach().cpu().clone() for name, p in params}
        for g, params in model.param_groups().items()
    }
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.__dict__.copy(),
        "seed": seed,
        "groups": groups,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[ModelBundle, dict]:
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    cfg = ModelConfig(**payload["model_config"])
    model = ModelBundle(cfg)
    state = {}
    for params in payload["groups"].values():
        state.update(params)
    model.load_state_dict(state)
    return model, payload


def strip_to_inference(model: ModelBundle) -> ModelBundle:
    """Copy keeping only encoder + decoder weights (others re-initialized)."""
    cfg = model.cfg
    stripped = build_model(cfg, seed=0)
    keep = dict(model.param_groups()["encoder"]) | dict(model.param_groups()["decoder"])
    state = stripped.state_dict()
    for name, p in keep.items():
        state[name] = p.detach().clone()
    stripped.load_state_dict(state)
    return stripped
