"""Run configuration: presets, flat key=value config files, round-tripping.

Config files are INI-style (`key = value` under [sections], one section per
stage).  The `paper` preset carries the reference hyperparameters (4
reasoning steps, 8x8 selection window on a 16x16 grid, loss weights 1.0 /
0.9 / 0.9, prefix length 32, the 1e-4..0.02 linear noise schedule over 1000
steps, stage batch sizes 256/128, stage learning rates 1e-3 / 2e-4); the
`toy` preset shrinks grid, window, diffusion length, and batch sizes for
desk-scale runs while keeping the same mechanism constants.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

PRESETS = ("toy", "paper")


@dataclass
class RunConfig:
    # model
    d_t: int = 64
    d_v: int = 32
    d_patch: int = 8
    lm_layers: int = 4
    lm_heads: int = 4
    enc_layers: int = 1
    fusion_heads: int = 4
    vocab_size: int = 64
    grid_h: int = 8
    grid_w: int = 8
    max_seq: int = 160
    # selection
    window: int = 4
    reselect_each_step: bool = False
    drop_masked_keys: bool = False
    # reasoning
    k_steps: int = 4
    h0_mode: str = "mean"
    h0_first_query: bool = False
    context_mode: str = "mean_layers"
    max_new_tokens: int = 24
    # diffusion
    schedule_kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    t_diff: int = 64
    recon_channels: int = 2
    recon_h: int = 7
    recon_w: int = 7
    denoiser_channels: tuple = (8, 16)
    denoiser_layers_per_block: int = 1
    stop_grad_chain: bool = False
    # losses
    lambda1: float = 1.0
    lambda2: float = 0.9
    lambda3: float = 0.9
    tau: float = 0.07
    prefix_len: int = 32
    d_p: int = 32
    # data
    family: str = "counting"
    train_size: int = 16
    eval_size: int = 16
    # run
    seed: int = 0
    out_dir: str = "out"
    scale_divisor: int = 32
    # ablation switches
    no_lqformer: bool = False
    no_selection: bool = False
    no_recon: bool = False
    no_nce: bool = False
    no_prefix: bool = False
    # stages (batch sizes are pre-divisor reference values)
    stage1_lr: float = 1e-3
    stage1_warmup: float = 0.03
    stage1_epochs: int = 1
    stage1_batch: int = 256
    stage1_steps: int = 60
    stage2_lr: float = 2e-4
    stage2_warmup: float = 0.03
    stage2_epochs: int = 1
    stage2_batch: int = 128
    stage2_steps: int = 80
    stage3_lr: float = 2e-4
    stage3_warmup: float = 0.03
    stage3_epochs: int = 1
    stage3_batch: int = 128
    stage3_steps: int = 500
    stage4_lr: float = 2e-4
    stage4_warmup: float = 0.03
    stage4_epochs: int = 1
    stage4_batch: int = 128
    stage4_steps: int = 500

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError(f"grid {self.grid_h}x{self.grid_w} invalid")
        if not (1 <= self.window <= min(self.grid_h, self.grid_w)):
            raise ConfigError(f"window {self.window} out of range for grid {self.grid_h}x{self.grid_w}")
        if self.k_steps < 0:
            raise ConfigError(f"k_steps must be >= 0, got {self.k_steps}")
        if self.scale_divisor < 1:
            raise ConfigError(f"scale_divisor must be >= 1, got {self.scale_divisor}")
        if isinstance(self.denoiser_channels, list):
            self.denoiser_channels = tuple(self.denoiser_channels)

    @property
    def n_visual_tokens(self) -> int:
        return self.grid_h * self.grid_w

    def effective_batch(self, reference: int) -> int:
        return max(1, reference // self.scale_divisor)

    def stage_fields(self, idx: int) -> dict:
        return {
            key: getattr(self, f"stage{idx}_{key}")
            for key in ("lr", "warmup", "epochs", "batch", "steps")
        }

    def replace(self, **kv) -> "RunConfig":
        return dataclasses.replace(self, **kv)


def toy_config(**overrides) -> RunConfig:
    return RunConfig(**overrides)


def paper_config(**overrides) -> RunConfig:
    base = dict(
        grid_h=16,
        grid_w=16,
        window=8,
        k_steps=4,
        schedule_kind="linear",
        beta_start=1e-4,
        beta_end=0.02,
        t_diff=1000,
        recon_channels=4,
        recon_h=28,
        recon_w=28,
        denoiser_channels=(96, 192, 384, 512),
        denoiser_layers_per_block=3,
        lambda1=1.0,
        lambda2=0.9,
        lambda3=0.9,
        prefix_len=32,
        d_p=256,
        max_seq=340,
        scale_divisor=1,
        stage1_batch=256,
        stage2_batch=128,
        stage3_batch=128,
        stage4_batch=128,
    )
    base.update(overrides)
    return RunConfig(**base)


def preset(name: str, **overrides) -> RunConfig:
    if name == "toy":
        return toy_config(**overrides)
    if name == "paper":
        return paper_config(**overrides)
    raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")


# -- file round trip -----------------------------------------------------------

_STAGE_KEYS = ("lr", "warmup", "epochs", "batch", "steps")


def _section_of(field_name: str) -> str:
    for idx in (1, 2, 3, 4):
        if field_name.startswith(f"stage{idx}_"):
            return f"stage{idx}"
    groups = {
        "model": {"d_t", "d_v", "d_patch", "lm_layers", "lm_heads", "enc_layers", "fusion_heads",
                  "vocab_size", "grid_h", "grid_w", "max_seq"},
        "selection": {"window", "reselect_each_step", "drop_masked_keys"},
        "reasoning": {"k_steps", "h0_mode", "h0_first_query", "context_mode", "max_new_tokens"},
        "diffusion": {"schedule_kind", "beta_start", "beta_end", "t_diff", "recon_channels",
                      "recon_h", "recon_w", "denoiser_channels", "denoiser_layers_per_block",
                      "stop_grad_chain"},
        "losses": {"lambda1", "lambda2", "lambda3", "tau", "prefix_len", "d_p"},
        "data": {"family", "train_size", "eval_size"},
        "ablation": {"no_lqformer", "no_selection", "no_recon", "no_nce", "no_prefix"},
    }
    for section, names in groups.items():
        if field_name in names:
            return section
    return "run"


def save_config(cfg: RunConfig, path):
    parser = configparser.ConfigParser()
    for f in dataclasses.fields(cfg):
        section = _section_of(f.name)
        if not parser.has_section(section):
            parser.add_section(section)
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        key = f.name.split("_", 1)[1] if section.startswith("stage") else f.name
        parser.set(section, key, text)
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path, encoding="utf-8")
    values = {}
    field_types = {f.name: f for f in dataclasses.fields(RunConfig)}
    for section in parser.sections():
        for key, raw in parser.items(section):
            name = f"{section}_{key}" if section.startswith("stage") else key
            if name not in field_types:
                raise ConfigError(f"unknown config key [{section}] {key}")
            values[name] = _parse_value(raw, getattr(base or RunConfig(), name))
    merged = dataclasses.asdict(base) if base else {}
    merged.update(values)
    return RunConfig(**merged) if merged else RunConfig()


def _parse_value(raw: str, reference):
    raw = raw.strip()
    if isinstance(reference, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if isinstance(reference, tuple):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if isinstance(reference, int):
        return int(raw)
    if isinstance(reference, float):
        return float(raw)
    return raw
