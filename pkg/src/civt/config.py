"""Run configuration: a flat, versioned ``key = value`` text format.

The file lists every knob of a run (model, data, optimization,
distillation).  Parsing is strict -- unknown keys, duplicate keys, type
errors and a missing/wrong ``config_version`` all raise ConfigError --
so that a config written by ``format_config`` round-trips exactly and a
run directory always carries a complete, re-runnable description.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .distill import DistillConfig
from .errors import ConfigError
from .models import ModelSpec
from .optim import Schedule
from .data import SynthSpec

CONFIG_VERSION = 1

DATASETS = ("synth", "cifar10")
AUGMENTS = ("none", "crop", "crop_flip")


@dataclass
class RunConfig:
    config_version: int = CONFIG_VERSION
    # model
    family: str = "civt"
    image_size: int = 32
    channels: int = 3
    classes: int = 10
    width: int = 192
    depth: int = 6
    heads: int = 3
    patch: int = 4
    mixer_token_hidden: int = 0
    stage_widths: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    gn_groups: int = 8
    inv_kernel: int = 7
    inv_groups: int = 2
    inv_reduction: int = 4
    # data
    dataset: str = "synth"
    data_dir: str = ""
    synth_train: int = 10000
    synth_test: int = 2000
    synth_p_tex: float = 0.3
    synth_p_struct: float = 0.3
    synth_seed: int = 1234
    norm_mean: tuple = ()  # empty -> computed from the train split
    norm_std: tuple = ()
    # optimization
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_epochs: float = 5.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: str = "crop"
    mixup_alpha: float = 0.0
    # distillation
    mode: str = "cross_bias"
    lambda0: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    tau1: float = 1.0
    tau2: float = 1.0
    # run identity
    seed: int = 0
    out_dir: str = "run_out"

    # -- derived views ---------------------------------------------------

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            family=self.family, image_size=self.image_size, channels=self.channels,
            classes=self.classes, width=self.width, depth=self.depth,
            heads=self.heads, patch=self.patch,
            mixer_token_hidden=self.mixer_token_hidden,
            stage_widths=tuple(self.stage_widths),
            blocks_per_stage=self.blocks_per_stage, gn_groups=self.gn_groups,
            inv_kernel=self.inv_kernel, inv_groups=self.inv_groups,
            inv_reduction=self.inv_reduction,
        ).validate()

    def synth_spec(self, split: str) -> SynthSpec:
        n = self.synth_train if split == "train" else self.synth_test
        # the test split lives in a disjoint region of seed space
        seed = self.synth_seed if split == "train" else self.synth_seed + 1_000_003
        return SynthSpec(n=n, classes=self.classes, image_size=self.image_size,
                         p_tex=self.synth_p_tex, p_struct=self.synth_p_struct,
                         seed=seed).validate()

    def schedule(self) -> Schedule:
        return Schedule(base_lr=self.lr, min_lr=self.min_lr,
                        warmup_epochs=self.warmup_epochs,
                        total_epochs=float(self.epochs)).validate()

    def distill_config(self) -> DistillConfig:
        return DistillConfig(mode=self.mode, lambda0=self.lambda0,
                             lambda1=self.lambda1, lambda2=self.lambda2,
                             tau1=self.tau1, tau2=self.tau2).validate()

    def validate(self) -> "RunConfig":
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(
                f"config_version {self.config_version} unsupported (expected {CONFIG_VERSION})")
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset '{self.dataset}' (choose from {DATASETS})")
        if self.augment not in AUGMENTS:
            raise ConfigError(f"unknown augment '{self.augment}' (choose from {AUGMENTS})")
        if self.dataset == "cifar10" and not self.data_dir:
            raise ConfigError("dataset 'cifar10' needs data_dir")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mixup_alpha < 0:
            raise ConfigError(f"mixup_alpha must be >= 0, got {self.mixup_alpha}")
        if len(self.norm_mean) != len(self.norm_std):
            raise ConfigError("norm_mean and norm_std must both be set or both empty")
        if self.norm_mean and len(self.norm_mean) != self.channels:
            raise ConfigError(
                f"norm stats have {len(self.norm_mean)} entries for {self.channels} channels")
        if self.dataset == "synth":
            if self.synth_train < 1 or self.synth_test < 1:
                raise ConfigError("synth split sizes must be >= 1")
            self.synth_spec("train")
        self.model_spec()
        self.schedule()
        self.distill_config()
        return self


def _parse_tuple(kind):
    def parse(text: str):
        text = text.strip()
        if not text:
            return ()
        return tuple(kind(part.strip()) for part in text.split(","))

    return parse


def _field_parser(f):
    if f.type in ("int",):
        return int
    if f.type in ("float",):
        return float
    if f.type in ("str",):
        return str
    if f.type in ("tuple",):
        # int tuples vs float tuples, by field name
        return _parse_tuple(float if f.name.startswith("norm_") else int)
    raise AssertionError(f"unhandled config field type {f.type} for {f.name}")


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines over ``base`` (defaults if omitted)."""
    cfg = RunConfig(**vars(base)) if base else RunConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key '{key}'")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate config key '{key}'")
        seen.add(key)
        try:
            setattr(cfg, key, _field_parser(_FIELDS[key])(value))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"line {lineno}: bad value for '{key}': {exc}") from exc
    return cfg


def read_config(path: str, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    return parse_config(text, base=base)


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """Apply CLI ``key=value`` overrides onto a parsed config."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override '{pair}' is not of the form key=value")
        key, value = (part.strip() for part in pair.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key '{key}'")
        try:
            setattr(cfg, key, _field_parser(_FIELDS[key])(value))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for '{key}': {exc}") from exc
    return cfg
