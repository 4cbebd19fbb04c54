"""Command-line surface.

Subcommands: gen-data, train-ae, train-ldm, sample, reconstruct,
interpolate, resample, eval.  Every command is deterministic under --seed;
run directories store the resolved config and a content hash of the package
sources.  Exit codes: 0 success, 1 usage error, 2 runtime failure.

Config overrides are passed as repeated ``--set key=value`` flags.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autoencoder as ae
from . import camera as cam
from . import diffusion as df
from . import fileio
from . import gan  # noqa: F401  (re-exported for config docs)
from . import metrics as mt
from . import renderer as rd
from . import synthscenes as scn
from . import trainer as tr
from .config import RunConfig, load_config, write_run_stamp
from .grad import Tensor, no_grad
from .grad.checkpoint import save_arrays


class UsageError(ValueError):
    pass


def _cfg_from_args(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None),
                      overrides=getattr(args, "set", None) or [])
    return cfg


def _render_turntable(model, planes, cfg: RunConfig, n_views: int,
                      yaw_range_deg: float):
    """Frames and depth maps sweeping yaw across the view range."""
    mcfg = tr.model_config(cfg)
    _, intr = cam.default_camera()
    if n_views == 1:
        yaws = np.array([0.0])
    else:
        yaws = np.linspace(-yaw_range_deg, yaw_range_deg, n_views)
    frames = []
    with no_grad():
        for yaw in yaws:
            pose = cam.pose_from_angles(np.deg2rad(yaw), 0.0)
            out = rd.render_view(planes, model.mlp, pose, intr,
                                 mcfg.render_res, mcfg.n_samples)
            img = model.sr(out.feature_map)
            frames.append((yaw, img.data, out.depth_low.data))
    return frames


def _write_frames(out_dir: Path, tag: str, frames, batch_index: int = 0):
    for k, (yaw, img, depth) in enumerate(frames):
        stem = f"{tag}_view{k:02d}_yaw{yaw:+06.2f}"
        fileio.write_png(out_dir / (stem + ".png"), img[batch_index])
        fileio.write_pfm(out_dir / (stem + ".pfm"), depth[batch_index, 0])


def _write_grid(out_dir: Path, name: str, frames, batch_index: int = 0):
    row = np.concatenate([f[1][batch_index] for f in frames], axis=2)
    fileio.write_png(out_dir / name, row)


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    fixtures = [float(y) for y in args.fixtures.split(",")] \
        if args.fixtures else None
    scn.generate_dataset(out, args.n, args.res, args.seed,
                         fixture_yaws_deg=fixtures)
    print(f"wrote {args.n} records to {out}")
    return 0


def cmd_train_ae(args) -> int:
    cfg = _cfg_from_args(args)
    if not Path(args.data, "manifest.txt").exists():
        raise UsageError(f"no dataset at {args.data}")
    dataset = scn.DatasetFolder(args.data)
    write_run_stamp(args.out, cfg)
    ckpt = tr.run_stage1(dataset, args.out, cfg, steps=args.steps,
                         resume=args.resume,
                         log_cb=_progress_cb("stage1", args.quiet))
    print(f"final checkpoint: {ckpt}")
    return 0


def cmd_train_ldm(args) -> int:
    cfg = _cfg_from_args(args)
    if not Path(args.data, "manifest.txt").exists():
        raise UsageError(f"no dataset at {args.data}")
    if not Path(args.ae_ckpt).exists():
        raise UsageError(f"no autoencoder checkpoint at {args.ae_ckpt}")
    dataset = scn.DatasetFolder(args.data)
    write_run_stamp(args.out, cfg)
    ckpt = tr.run_stage2(dataset, args.ae_ckpt, args.out, cfg,
                         steps=args.steps, resume=args.resume,
                         log_cb=_progress_cb("stage2", args.quiet))
    print(f"final checkpoint: {ckpt}")
    return 0


def _progress_cb(tag, quiet):
    if quiet:
        return None

    def cb(step, report):
        if step % 100 == 0:
            keys = ("l_px", "loss") if "l_px" in report else ("loss",)
            vals = " ".join(f"{k}={report[k]:.4f}" for k in keys
                            if k in report)
            print(f"[{tag}] step {step} {vals}", flush=True)

    return cb


def cmd_sample(args) -> int:
    cfg = _cfg_from_args(args)
    for path in (args.ae_ckpt, args.ldm_ckpt):
        if not Path(path).exists():
            raise UsageError(f"missing checkpoint {path}")
    if not (0 <= args.class_id < scn.N_CLASSES):
        raise UsageError(f"class id must be in [0, {scn.N_CLASSES})")
    model = tr.load_autoencoder(args.ae_ckpt, cfg)
    denoiser, scaler = tr.load_denoiser(args.ldm_ckpt, cfg)
    sched = df.cosine_schedule(cfg["diffusion.steps"], cfg["diffusion.offset"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_run_stamp(out, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 606]))
    mcfg = tr.model_config(cfg)
    v_fn = denoiser.v_fn(sched, args.class_id, args.guidance)
    latents = {}
    for s in range(args.n):
        z_t = rng.standard_normal(mcfg.latent_shape)
        x0 = df.ddim_sample(v_fn, z_t[None], sched,
                            steps=cfg["diffusion.ddim_steps"],
                            eta=cfg["diffusion.eta"], rng=rng)
        z = scaler.unscale(x0)
        latents[f"latent_{s:03d}"] = z[0]
        with no_grad():
            planes = model.decode(Tensor(z))
        frames = _render_turntable(model, planes, cfg, args.views,
                                   cfg["sample.yaw_range_deg"])
        _write_frames(out, f"sample{s:03d}", frames)
        _write_grid(out, f"sample{s:03d}_grid.png", frames)
    save_arrays(out / "latents.bin", latents)
    print(f"wrote {args.n} samples to {out}")
    return 0


def _encode_image(model, image_path, depth_path, cfg):
    image = fileio.read_png(image_path)
    depth = fileio.read_pfm(depth_path)
    with no_grad():
        post = model.encode(Tensor(image[None]), depth[None])
    return image, post.mu.data   # deterministic eval encoding


def cmd_reconstruct(args) -> int:
    cfg = _cfg_from_args(args)
    if not Path(args.ae_ckpt).exists():
        raise UsageError(f"missing checkpoint {args.ae_ckpt}")
    model = tr.load_autoencoder(args.ae_ckpt, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, z = _encode_image(model, args.image, args.depth, cfg)
    with no_grad():
        planes = model.decode(Tensor(z))
    frames = _render_turntable(model, planes, cfg, args.views,
                               cfg["sample.yaw_range_deg"])
    _write_frames(out, "recon", frames)
    _write_grid(out, "recon_grid.png", frames)
    print(f"wrote {args.views} views to {out}")
    return 0


def _guided_identity_fn(denoiser, sched):
    return denoiser.v_fn(sched, denoiser.null_class(), guidance_scale=1.0)


def cmd_interpolate(args) -> int:
    cfg = _cfg_from_args(args)
    for path in (args.ae_ckpt, args.ldm_ckpt, args.image_a, args.image_b,
                 args.depth_a, args.depth_b):
        if not Path(path).exists():
            raise UsageError(f"missing input {path}")
    model = tr.load_autoencoder(args.ae_ckpt, cfg)
    denoiser, scaler = tr.load_denoiser(args.ldm_ckpt, cfg)
    sched = df.cosine_schedule(cfg["diffusion.steps"], cfg["diffusion.offset"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    v_fn = _guided_identity_fn(denoiser, sched)
    steps = cfg["diffusion.ddim_steps"]
    _, za = _encode_image(model, args.image_a, args.depth_a, cfg)
    _, zb = _encode_image(model, args.image_b, args.depth_b, cfg)
    enc_a = df.ddim_invert(v_fn, scaler.scale(za), sched, steps=steps)
    enc_b = df.ddim_invert(v_fn, scaler.scale(zb), sched, steps=steps)
    fracs = np.linspace(0.0, 1.0, args.steps)
    mcfg = tr.model_config(cfg)
    _, intr = cam.default_camera()
    frames = []
    for k, f in enumerate(fracs):
        mixed = df.slerp(enc_a, enc_b, float(f))
        x0 = df.ddim_sample(v_fn, mixed, sched, steps=steps, eta=0.0)
        z = scaler.unscale(x0)
        with no_grad():
            planes = model.decode(Tensor(z))
            render = rd.render_view(planes, model.mlp,
                                    cam.default_camera()[0], intr,
                                    mcfg.render_res, mcfg.n_samples)
            img = model.sr(render.feature_map)
        fileio.write_png(out / f"interp_{k:02d}.png", img.data[0])
        frames.append(img.data[0])
    fileio.write_png(out / "interp_row.png", np.concatenate(frames, axis=2))
    print(f"wrote {args.steps} interpolation frames to {out}")
    return 0


def cmd_resample(args) -> int:
    cfg = _cfg_from_args(args)
    for path in (args.ae_ckpt, args.ldm_ckpt, args.image, args.depth):
        if not Path(path).exists():
            raise UsageError(f"missing input {path}")
    model = tr.load_autoencoder(args.ae_ckpt, cfg)
    denoiser, scaler = tr.load_denoiser(args.ldm_ckpt, cfg)
    sched = df.cosine_schedule(cfg["diffusion.steps"], cfg["diffusion.offset"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 707]))
    _, z = _encode_image(model, args.image, args.depth, cfg)
    v_fn = _guided_identity_fn(denoiser, sched)
    x0 = df.partial_resample(scaler.scale(z), args.tau, v_fn, sched, rng,
                             steps=cfg["diffusion.ddim_steps"],
                             eta=cfg["diffusion.eta"])
    z_out = scaler.unscale(x0)
    mcfg = tr.model_config(cfg)
    _, intr = cam.default_camera()
    with no_grad():
        planes = model.decode(Tensor(z_out))
        render = rd.render_view(planes, model.mlp, cam.default_camera()[0],
                                intr, mcfg.render_res, mcfg.n_samples)
        img = model.sr(render.feature_map)
    fileio.write_png(out / f"resample_tau{args.tau:04d}.png", img.data[0])
    print(f"wrote resampled image (tau={args.tau}) to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _cfg_from_args(args)
    if not Path(args.ae_ckpt).exists():
        raise UsageError(f"missing checkpoint {args.ae_ckpt}")
    dataset = scn.DatasetFolder(args.data)
    model = tr.load_autoencoder(args.ae_ckpt, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_autoencoder(model, dataset, cfg, limit=args.limit)
    lines = [f"{k}={v:.6g}" for k, v in sorted(report.items())]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def evaluate_autoencoder(model, dataset, cfg: RunConfig,
                         limit: int | None = None) -> dict:
    """Input-view L1/PSNR, novel-view L1 against fixtures, rendered-depth
    NFS, and the latent std (deterministic: posterior means)."""
    mcfg = tr.model_config(cfg)
    pose0, intr = cam.default_camera()
    n = len(dataset) if limit is None else min(limit, len(dataset))
    cache = tr._MonoCache(dataset, cfg)
    l1s, psnrs, nv_l1s, depths, mus = [], [], [], [], []
    with no_grad():
        for start in range(0, n, 8):
            idx = np.arange(start, min(start + 8, n))
            images, monos = cache.batch(idx)
            post = model.encode(Tensor(images), monos)
            planes = model.decode(post.mu)
            render = rd.render_view(planes, model.mlp, pose0, intr,
                                    mcfg.render_res, mcfg.n_samples)
            recon = model.sr(render.feature_map).data
            mus.append(post.mu.data.copy())
            for b, i in enumerate(idx):
                rep = mt.recon_metrics(images[b], recon[b])
                l1s.append(rep["l1"])
                psnrs.append(rep["psnr"])
                depths.append(render.depth_low.data[b, 0].copy())
                for yaw, fix_img, _ in dataset.fixtures_for(int(i)):
                    pose = cam.pose_from_angles(np.deg2rad(yaw), 0.0)
                    nv = rd.render_view(planes[b:b + 1], model.mlp, pose,
                                        intr, mcfg.render_res, mcfg.n_samples)
                    nv_img = model.sr(nv.feature_map).data[0]
                    nv_l1s.append(float(np.abs(nv_img - fix_img).mean()))
    report = {
        "input_l1": float(np.mean(l1s)),
        "input_psnr": float(np.mean(psnrs)),
        "nfs": mt.nfs(np.stack(depths), bins=cfg["metrics.nfs_bins"]).mean,
        "latent_std": float(np.concatenate(mus).std()),
        "records": float(len(l1s)),
    }
    if nv_l1s:
        report["novel_l1"] = float(np.mean(nv_l1s))
    return report


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tridiff", description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a procedural dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--res", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--fixtures", default=None,
                   help="comma-separated novel-view yaw angles in degrees")
    g.set_defaults(fn=cmd_gen_data)

    for name, fn in (("train-ae", cmd_train_ae), ("train-ldm", cmd_train_ldm)):
        t = sub.add_parser(name, help=f"{name} training stage")
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--config", default=None)
        t.add_argument("--steps", type=int, default=None)
        t.add_argument("--resume", default=None)
        t.add_argument("--quiet", action="store_true")
        t.add_argument("--set", action="append", metavar="KEY=VALUE")
        if name == "train-ldm":
            t.add_argument("--ae-ckpt", required=True)
        t.set_defaults(fn=fn)

    s = sub.add_parser("sample", help="draw latents and render turntables")
    s.add_argument("--ldm-ckpt", required=True)
    s.add_argument("--ae-ckpt", required=True)
    s.add_argument("--class", dest="class_id", type=int, default=0)
    s.add_argument("--guidance", type=float, default=2.0)
    s.add_argument("--views", type=int, default=5)
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", default=None)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(fn=cmd_sample)

    r = sub.add_parser("reconstruct", help="encode an image, render views")
    r.add_argument("--ae-ckpt", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--depth", required=True)
    r.add_argument("--views", type=int, default=5)
    r.add_argument("--out", required=True)
    r.add_argument("--config", default=None)
    r.add_argument("--set", action="append", metavar="KEY=VALUE")
    r.set_defaults(fn=cmd_reconstruct)

    i = sub.add_parser("interpolate",
                       help="invert two images and walk the prior geodesic")
    i.add_argument("--ae-ckpt", required=True)
    i.add_argument("--ldm-ckpt", required=True)
    i.add_argument("--image-a", required=True)
    i.add_argument("--depth-a", required=True)
    i.add_argument("--image-b", required=True)
    i.add_argument("--depth-b", required=True)
    i.add_argument("--steps", type=int, default=5)
    i.add_argument("--out", required=True)
    i.add_argument("--config", default=None)
    i.add_argument("--set", action="append", metavar="KEY=VALUE")
    i.set_defaults(fn=cmd_interpolate)

    z = sub.add_parser("resample", help="partially re-diffuse an encoding")
    z.add_argument("--ae-ckpt", required=True)
    z.add_argument("--ldm-ckpt", required=True)
    z.add_argument("--image", required=True)
    z.add_argument("--depth", required=True)
    z.add_argument("--tau", type=int, required=True)
    z.add_argument("--out", required=True)
    z.add_argument("--seed", type=int, default=0)
    z.add_argument("--config", default=None)
    z.add_argument("--set", action="append", metavar="KEY=VALUE")
    z.set_defaults(fn=cmd_resample)

    e = sub.add_parser("eval", help="autoencoder metrics on a dataset")
    e.add_argument("--ae-ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--config", default=None)
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:   # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
