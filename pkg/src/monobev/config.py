"""Experiment configuration: named presets and the flat key=value file
format used by the CLI."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .geometry import BevGridSpec, CameraModel


@dataclass
class ExperimentConfig:
    # model
    image_h: int = 128
    image_w: int = 128
    c_t: int = 32
    levels: int = 3  # pyramid levels 1..levels, downsample 2^(i+2)
    n_dec: int = 2
    heads: int = 4
    n_his: int = 2
    head_hidden: int = 16
    # BEV feature grid (the prediction head upsamples this 2x)
    bev_z: int = 24
    bev_x: int = 20
    bev_cell_m: float = 0.5
    bev_z_min: float = 1.0
    n_c: int = 4
    # camera intrinsics
    cam_f: float = 100.0
    cam_u0: float = 64.0
    # optimization
    base_lr: float = 3e-3
    warmup_steps: int = 150
    total_steps: int = 2000
    batch_size: int = 4
    weight_decay: float = 0.01
    alpha: float = 0.001
    beta: float = 0.01
    # data
    seed: int = 0
    data_seed: int = 100
    n_sequences: int = 4
    seq_len: int = 10
    motion_model: str = "wander"
    occluder_bias: bool = False
    # bookkeeping
    log_every: int = 25
    eval_every: int = 0  # 0 = evaluate only at the end
    checkpoint_every: int = 0  # 0 = only final

    def camera(self):
        return CameraModel(f=self.cam_f, u0=self.cam_u0, image_h=self.image_h, image_w=self.image_w)

    def bev_spec(self):
        return BevGridSpec(Z=self.bev_z, X=self.bev_x, cell_m=self.bev_cell_m, z_min=self.bev_z_min)

    def out_spec(self):
        """Ground-truth / prediction grid: twice the BEV feature resolution."""
        return self.bev_spec().refined(2)

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and not isinstance(v, bool) and v < 0:
                raise ValueError(f"config field {f.name} must be nonnegative, got {v}")
        if self.levels not in (1, 2, 3, 4, 5):
            raise ValueError(f"levels must be 1..5, got {self.levels}")
        if self.n_dec > 0 and self.c_t % self.heads:
            raise ValueError(f"c_t={self.c_t} not divisible by heads={self.heads}")
        if self.bev_z < self.levels:
            raise ValueError(f"bev_z={self.bev_z} smaller than level count {self.levels}")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be positive")
        if self.motion_model not in ("wander", "straight"):
            raise ValueError(f"unknown motion model {self.motion_model!r}")
        return self


def desk_preset(**overrides):
    """Laptop-scale preset: the full acceptance suite runs in minutes."""
    return replace(ExperimentConfig(), **overrides).validate()


def full_preset(**overrides):
    """Full-scale benchmark hyperparameters, encoded for reference; not
    exercised by the test suite."""
    cfg = ExperimentConfig(
        image_h=1024,
        image_w=1024,
        c_t=512,
        levels=5,
        n_dec=2,
        heads=4,
        n_his=2,
        head_hidden=256,
        bev_z=98,
        bev_x=100,
        bev_cell_m=0.5,
        bev_z_min=1.0,
        n_c=14,
        cam_f=800.0,
        cam_u0=512.0,
        base_lr=4e-4,
        warmup_steps=1500,
        total_steps=40000,
        batch_size=64,
    )
    return replace(cfg, **overrides).validate()


PRESETS = {"desk": desk_preset, "full": full_preset}


def _parse_value(field_type, raw, key):
    raw = raw.strip()
    if field_type == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key!r}: expected a boolean, got {raw!r}")
    if field_type == "int":
        return int(raw)
    if field_type == "float":
        return float(raw)
    return raw


def parse_config(text, base=None):
    """Parse `key = value` lines (# starts a comment) onto a preset."""
    cfg = base or ExperimentConfig()
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected `key = value`, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key == "preset":
            if raw not in PRESETS:
                raise ValueError(f"config line {lineno}: unknown preset {raw!r}")
            cfg = PRESETS[raw]()
            continue
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        updates[key] = _parse_value(types[key], raw, key)
    return replace(cfg, **updates).validate()


def load_config(path, base=None):
    with open(path) as fh:
        return parse_config(fh.read(), base=base)


def format_config(cfg):
    lines = []
    for f in fields(ExperimentConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def save_config(path, cfg):
    with open(path, "w") as fh:
        fh.write(format_config(cfg))
