"""Model specs and the four architectures built from them.

Families:

* ``civt``        three-token vision transformer (class / conv / inv tokens,
                  one classification head per token)
* ``transformer`` the same trunk with a single class token and head
* ``cnn``         residual conv net teacher (GroupNorm, 3x3 blocks)
* ``inn``         the identical skeleton with involution blocks instead
* ``mixer``       token/channel MLP mixer

The two teachers deliberately share every structural choice (stem,
stage widths, transitions, norms, head) and differ only in the spatial
operator inside residual blocks, so their disagreement reflects the
inductive bias of that operator and nothing else.

Building a model consumes a seeded Generator in a fixed construction
order: same spec + seed => bit-identical parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .layers import (
    Conv2d,
    GroupNorm,
    Involution2d,
    LayerNorm,
    Linear,
    Module,
    PatchEmbed,
    TransformerBlock,
    global_avg_pool,
)
from .tensor import Tensor, concat, no_grad, truncated_normal

FAMILIES = ("civt", "transformer", "cnn", "inn", "mixer")
TOKEN_NAMES = ("class", "conv", "inv")


@dataclass
class ModelSpec:
    """Everything needed to rebuild a model architecture."""

    family: str = "civt"
    image_size: int = 32
    channels: int = 3
    classes: int = 10
    # transformer / civt / mixer trunk
    width: int = 192
    depth: int = 6
    heads: int = 3
    patch: int = 4
    mixer_token_hidden: int = 0  # 0 -> width // 2
    # cnn / inn trunk
    stage_widths: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    gn_groups: int = 8
    inv_kernel: int = 7
    inv_groups: int = 2
    inv_reduction: int = 4

    def validate(self) -> "ModelSpec":
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family '{self.family}' (choose from {FAMILIES})")
        if self.image_size < 1 or self.channels < 1:
            raise ConfigError(f"bad image geometry {self.channels}x{self.image_size}")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.family in ("civt", "transformer", "mixer"):
            if self.width < 1 or self.depth < 1:
                raise ConfigError(f"width/depth must be positive, got {self.width}/{self.depth}")
            if self.image_size % self.patch:
                raise ConfigError(
                    f"patch {self.patch} does not tile image size {self.image_size}")
            if self.family != "mixer" and self.width % self.heads:
                raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        else:
            widths = tuple(self.stage_widths)
            if not widths:
                raise ConfigError("stage_widths must not be empty")
            if any(w < 1 for w in widths):
                raise ConfigError(f"stage widths must be positive, got {widths}")
            if self.blocks_per_stage < 1:
                raise ConfigError(f"blocks_per_stage must be >= 1, got {self.blocks_per_stage}")
            for w in widths:
                if w % self.gn_groups:
                    raise ConfigError(f"gn_groups {self.gn_groups} does not divide width {w}")
            halvings = len(widths) - 1
            if self.image_size % (1 << halvings):
                raise ConfigError(
                    f"{len(widths)} stages need image size divisible by {1 << halvings}")
            if self.family == "inn":
                if self.inv_kernel < 1 or self.inv_kernel % 2 == 0:
                    raise ConfigError(f"inv_kernel must be odd, got {self.inv_kernel}")
                for w in widths:
                    if w % self.inv_groups:
                        raise ConfigError(
                            f"inv_groups {self.inv_groups} does not divide width {w}")
                    if w % self.inv_reduction:
                        raise ConfigError(
                            f"inv_reduction {self.inv_reduction} does not divide width {w}")
                final = self.image_size >> halvings
                if (self.inv_kernel - 1) // 2 > final:
                    raise ConfigError(
                        f"inv_kernel {self.inv_kernel} too large for final extent {final}")
        return self


PRESETS = {
    # paper-scale profiles (224px, 1000 classes)
    "civt-ti": ModelSpec(family="civt", image_size=224, channels=3, classes=1000,
                         width=192, depth=12, heads=3, patch=16),
    "civt-s": ModelSpec(family="civt", image_size=224, channels=3, classes=1000,
                        width=384, depth=12, heads=6, patch=16),
    # desk-scale profiles (32px)
    "civt-desk": ModelSpec(family="civt", image_size=32, classes=10,
                           width=192, depth=6, heads=3, patch=4),
}


@dataclass
class TokenLogits:
    """Per-token classification outputs of a transformer student.

    ``conv_logits``/``inv_logits`` are None for single-token models.
    """

    class_logits: Tensor
    conv_logits: Tensor | None = None
    inv_logits: Tensor | None = None

    def tokens(self) -> dict:
        out = {"class": self.class_logits}
        if self.conv_logits is not None:
            out["conv"] = self.conv_logits
        if self.inv_logits is not None:
            out["inv"] = self.inv_logits
        return out


class TransformerModel(Module):
    """ViT trunk with one or three learnable tokens ahead of the patches."""

    def __init__(self, rng, spec: ModelSpec, dtype=np.float32):
        d = spec.width
        self.patch_embed = PatchEmbed(rng, (spec.image_size, spec.image_size),
                                      spec.patch, spec.channels, d, dtype=dtype)
        self.n_tokens = 3 if spec.family == "civt" else 1
        m = self.patch_embed.n_patches
        self.tokens = Tensor(truncated_normal(rng, (self.n_tokens, d), dtype=dtype),
                             requires_grad=True)
        self.pos_embed = Tensor(truncated_normal(rng, (self.n_tokens + m, d), dtype=dtype),
                                requires_grad=True)
        self.blocks = [TransformerBlock(rng, d, spec.heads, dtype=dtype)
                       for _ in range(spec.depth)]
        self.norm = LayerNorm(d, dtype=dtype)
        self.head_class = Linear(rng, d, spec.classes, dtype=dtype)
        if self.n_tokens == 3:
            self.head_conv = Linear(rng, d, spec.classes, dtype=dtype)
            self.head_inv = Linear(rng, d, spec.classes, dtype=dtype)
        self.spec = spec

    def forward(self, images: Tensor) -> TokenLogits:
        x = self.patch_embed(images)
        b = x.shape[0]
        toks = self.tokens.reshape(1, self.n_tokens, -1).broadcast_to(
            (b, self.n_tokens, self.tokens.shape[1]))
        x = concat([toks, x], axis=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        if self.n_tokens == 1:
            return TokenLogits(class_logits=self.head_class(x[:, 0]))
        return TokenLogits(
            class_logits=self.head_class(x[:, 0]),
            conv_logits=self.head_conv(x[:, 1]),
            inv_logits=self.head_inv(x[:, 2]),
        )


class _TransitionDown(Module):
    """1x1 strided conv + norm between stages (halves the extent)."""

    def __init__(self, rng, c_in, c_out, gn_groups, dtype):
        self.conv = Conv2d(rng, c_in, c_out, 1, stride=2, dtype=dtype)
        self.norm = GroupNorm(gn_groups, c_out, dtype=dtype)

    def forward(self, x):
        return self.norm(self.conv(x)).relu()


class _ResidualBlock(Module):
    """Width-preserving residual block; the spatial op is conv or involution."""

    def __init__(self, rng, channels, spec: ModelSpec, dtype):
        def spatial():
            if spec.family == "cnn":
                return Conv2d(rng, channels, channels, 3, padding=1, dtype=dtype)
            return Involution2d(rng, channels, kernel_size=spec.inv_kernel,
                                groups=spec.inv_groups, reduction=spec.inv_reduction,
                                dtype=dtype)

        self.op1 = spatial()
        self.norm1 = GroupNorm(spec.gn_groups, channels, dtype=dtype)
        self.op2 = spatial()
        self.norm2 = GroupNorm(spec.gn_groups, channels, dtype=dtype)

    def forward(self, x):
        y = self.norm1(self.op1(x)).relu()
        y = self.norm2(self.op2(y))
        return (x + y).relu()


class TeacherModel(Module):
    """Residual stage stack with a GAP + linear head."""

    def __init__(self, rng, spec: ModelSpec, dtype=np.float32):
        widths = tuple(spec.stage_widths)
        self.stem = Conv2d(rng, spec.channels, widths[0], 3, padding=1, dtype=dtype)
        self.stem_norm = GroupNorm(spec.gn_groups, widths[0], dtype=dtype)
        stages = []
        for i, w in enumerate(widths):
            if i:
                stages.append(_TransitionDown(rng, widths[i - 1], w, spec.gn_groups, dtype))
            for _ in range(spec.blocks_per_stage):
                stages.append(_ResidualBlock(rng, w, spec, dtype))
        self.stages = stages
        self.head = Linear(rng, widths[-1], spec.classes, dtype=dtype)
        self.spec = spec

    def forward(self, images: Tensor) -> Tensor:
        x = self.stem_norm(self.stem(images)).relu()
        for stage in self.stages:
            x = stage(x)
        return self.head(global_avg_pool(x))


class _MixerBlock(Module):
    """Token-mixing MLP across patches, then channel-mixing MLP."""

    def __init__(self, rng, n_patches, dim, token_hidden, dtype):
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.tok_fc1 = Linear(rng, n_patches, token_hidden, dtype=dtype)
        self.tok_fc2 = Linear(rng, token_hidden, n_patches, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.ch_fc1 = Linear(rng, dim, 4 * dim, dtype=dtype)
        self.ch_fc2 = Linear(rng, 4 * dim, dim, dtype=dtype)

    def forward(self, x):
        y = self.norm1(x).transpose(0, 2, 1)
        y = self.tok_fc2(self.tok_fc1(y).gelu()).transpose(0, 2, 1)
        x = x + y
        z = self.norm2(x)
        return x + self.ch_fc2(self.ch_fc1(z).gelu())


class MixerModel(Module):
    """MLP-mixer over the same patch embedding; mean-pooled head."""

    def __init__(self, rng, spec: ModelSpec, dtype=np.float32):
        d = spec.width
        self.patch_embed = PatchEmbed(rng, (spec.image_size, spec.image_size),
                                      spec.patch, spec.channels, d, dtype=dtype)
        token_hidden = spec.mixer_token_hidden or d // 2
        self.blocks = [
            _MixerBlock(rng, self.patch_embed.n_patches, d, token_hidden, dtype)
            for _ in range(spec.depth)
        ]
        self.head = Linear(rng, d, spec.classes, dtype=dtype)
        self.spec = spec

    def forward(self, images: Tensor) -> Tensor:
        x = self.patch_embed(images)
        for blk in self.blocks:
            x = blk(x)
        return self.head(x.mean(axis=1))


def build(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Module:
    """Construct a model with seeded parameters."""
    spec = replace(spec, stage_widths=tuple(spec.stage_widths)).validate()
    rng = np.random.default_rng(seed)
    if spec.family in ("civt", "transformer"):
        return TransformerModel(rng, spec, dtype=dtype)
    if spec.family == "mixer":
        return MixerModel(rng, spec, dtype=dtype)
    return TeacherModel(rng, spec, dtype=dtype)


def forward_civt(model: Module, images: Tensor) -> TokenLogits:
    if not isinstance(model, TransformerModel):
        raise ConfigError(f"expected a transformer student, got family '{model.spec.family}'")
    return model(images)


def forward_teacher(model: Module, images: Tensor) -> Tensor:
    if not isinstance(model, TeacherModel):
        raise ConfigError(f"expected a cnn/inn teacher, got family '{model.spec.family}'")
    return model(images)


def forward_mixer(model: Module, images: Tensor) -> Tensor:
    if not isinstance(model, MixerModel):
        raise ConfigError(f"expected a mixer, got family '{model.spec.family}'")
    return model(images)


def class_logits(model: Module, images: Tensor) -> Tensor:
    """Logits used for classification, regardless of family."""
    out = model(images)
    return out.class_logits if isinstance(out, TokenLogits) else out


def predict(model: Module, images: Tensor) -> np.ndarray:
    """Argmax class indices (lowest index wins ties); no graph is built."""
    with no_grad():
        logits = class_logits(model, images)
    return np.argmax(logits.data, axis=-1)


def param_count(model: Module) -> int:
    return model.param_count()
