"""Flat key-value run configuration.

Config files are plain text, one ``namespace.key = value`` per line (``#``
comments allowed); command-line overrides use the same ``key=value`` form.
Every run directory stores the fully resolved config plus a content hash of
the package sources, so a run can be re-executed identically.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

DEFAULTS: dict[str, object] = {
    # camera
    "camera.radius": 2.7,
    "camera.focal": 5.4,
    "camera.near": 2.25,
    "camera.far": 5.0,
    "camera.yaw_range_deg": 35.0,
    "camera.pitch_range_deg": 15.0,
    "camera.eval_yaw_sigma_rad": 0.3,
    "camera.eval_pitch_sigma_rad": 0.15,
    # model (desk scale; the 256^2 preset from the source setup is in
    # presets/paper.cfg)
    "model.image_res": 64,
    "model.render_res": 16,
    "model.n_samples": 32,
    "model.latent_channels": 4,
    "model.latent_res": 8,
    "model.triplane_channels": 12,
    "model.triplane_res": 32,
    "model.feat_channels": 16,
    "model.mlp_hidden": 32,
    "model.encode_depth": True,
    # depth supervision
    "depth.k": 5,
    "depth.oracle_scale_lo": 0.5,
    "depth.oracle_scale_hi": 2.0,
    "depth.oracle_shift_lo": -0.2,
    "depth.oracle_shift_hi": 0.2,
    "depth.oracle_noise_std": 0.0,
    # losses
    "loss.px": 10.0,
    "loss.vgg": 10.0,
    "loss.depth2d": 1.0,
    "loss.depth3d": 1.0,
    "loss.kl": 1e-4,
    # adversarial
    "gan.enabled": True,
    "gan.start_step": 300,
    "gan.ramp_steps": 1000,
    "gan.depth_enabled": True,
    "gan.r1_lambda": 1.0,
    "gan.r1_lambda_depth": 10.0,
    "gan.r1_interval": 16,
    "gan.novel_view_fraction": 0.95,
    # stage-1 training
    "train.batch": 8,
    "train.steps": 20000,
    "train.lr_ae": 1.4e-4,
    "train.lr_sr": 2e-3,
    "train.lr_disc": 1.9e-3,
    "train.ema_decay": 0.999,
    "train.ckpt_every": 2000,
    "train.seed": 0,
    # diffusion / stage-2
    "diffusion.steps": 1000,
    "diffusion.offset": 0.008,
    "diffusion.ddim_steps": 200,
    "diffusion.eta": 1.0,
    "diffusion.guidance_scale": 2.0,
    "diffusion.p_drop": 0.1,
    "diffusion.scale_factor": 1.0,
    "diffusion.channels": 32,
    "diffusion.lr": 1e-4,
    "diffusion.batch": 16,
    "diffusion.train_steps": 10000,
    "diffusion.clip_norm": 10.0,
    "diffusion.ckpt_every": 2000,
    # sampling / demos
    "sample.yaw_range_deg": 30.0,
    # metrics
    "metrics.nfs_bins": 64,
}


def parse_value(text: str):
    s = text.strip()
    if s.lower() in ("true", "false"):
        return s.lower() == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    return s


class RunConfig:
    def __init__(self, values: dict[str, object] | None = None):
        self.values = dict(DEFAULTS)
        if values:
            self.values.update(values)

    def __getitem__(self, key: str):
        if key not in self.values:
            raise KeyError(f"unknown config key {key!r}")
        return self.values[key]

    def set(self, key: str, value):
        if key not in DEFAULTS:
            raise KeyError(f"unknown config key {key!r}")
        self.values[key] = value

    def to_text(self) -> str:
        return "\n".join(f"{k} = {self.values[k]}"
                         for k in sorted(self.values)) + "\n"

    def copy(self) -> "RunConfig":
        return RunConfig(dict(self.values))


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, val = line.split("=", 1)
            cfg.set(key.strip(), parse_value(val))
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        cfg.set(key.strip().lstrip("-"), parse_value(val))
    return cfg


def code_version_hash() -> str:
    """Content hash over the package sources (stable across runs)."""
    root = Path(__file__).parent
    digest = hashlib.sha1()
    for path in sorted(root.rglob("*.py")):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def write_run_stamp(out_dir, cfg: RunConfig):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    (out / "code_version.txt").write_text(code_version_hash() + "\n")
