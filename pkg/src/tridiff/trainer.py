"""Two-stage training orchestration.

Stage 1 alternates a generator-side update of the autoencoder (pixel,
perceptual-proxy, depth, and KL terms plus non-saturating adversarial terms
from the image and depth discriminators) with a discriminator-side update
(both critics, lazy R1 with interval compensation).  Discriminator batches
mix novel and input views at the configured fraction using an
error-diffusion counter, so per-batch counts round exactly and the long-run
fraction is met.  The per-step rendered fakes are reused (detached) for the
critic update rather than re-rendered.

Stage 2 trains the latent denoiser on frozen-encoder latents normalized by
a fitted LatentScaler, with uniform diffusion times, classifier-free class
dropout, and global-norm gradient clipping.

Checkpoints are flat array files plus a JSON sidecar that captures the rng
state and counters, so save -> load -> step is bitwise identical to running
straight through.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autoencoder as ae
from . import camera as cam
from . import depthsup as dsup
from . import diffusion as df
from . import gan
from . import grad as G
from . import renderer as rd
from .config import RunConfig
from .grad import Tensor, reset_tape, no_grad, retain_grads
from .grad.checkpoint import save_arrays, load_arrays
from .grad.nn import Adam, EmaState, clip_grad_norm


class TrainingDiverged(RuntimeError):
    """Raised when a loss term turns non-finite; carries the term dump."""

    def __init__(self, report: dict):
        self.report = report
        bad = {k: v for k, v in report.items() if not np.isfinite(v)}
        super().__init__(f"non-finite loss terms: {bad}")


def model_config(cfg: RunConfig) -> ae.ModelConfig:
    return ae.ModelConfig(
        image_res=cfg["model.image_res"],
        render_res=cfg["model.render_res"],
        n_samples=cfg["model.n_samples"],
        latent_channels=cfg["model.latent_channels"],
        latent_res=cfg["model.latent_res"],
        triplane_channels=cfg["model.triplane_channels"],
        triplane_res=cfg["model.triplane_res"],
        feat_channels=cfg["model.feat_channels"],
        mlp_hidden=cfg["model.mlp_hidden"],
        encode_depth=cfg["model.encode_depth"],
    )


def loss_weights(cfg: RunConfig) -> ae.LossWeights:
    return ae.LossWeights(px=cfg["loss.px"], vgg=cfg["loss.vgg"],
                          depth2d=cfg["loss.depth2d"],
                          depth3d=cfg["loss.depth3d"], kl=cfg["loss.kl"])


def mono_for_record(dataset, i: int, cfg: RunConfig) -> np.ndarray:
    rec_rng = dataset.mono_rng(i)
    rec = dataset.load(i)
    return dsup.mono_oracle(
        rec.gt_depth, rec_rng,
        scale_range=(cfg["depth.oracle_scale_lo"], cfg["depth.oracle_scale_hi"]),
        shift_range=(cfg["depth.oracle_shift_lo"], cfg["depth.oracle_shift_hi"]),
        noise_std=cfg["depth.oracle_noise_std"])


class Stage1Trainer:
    def __init__(self, model: ae.Autoencoder, disc_img: gan.ImageDiscriminator,
                 disc_depth: gan.DepthDiscriminator, cfg: RunConfig,
                 rng: np.random.Generator):
        self.model = model
        self.disc_img = disc_img
        self.disc_depth = disc_depth
        self.cfg = cfg
        self.rng = rng
        self.proxy = ae.PerceptualProxy()
        self.weights = loss_weights(cfg)
        gen_params = {}
        for part in ("encoder", "decoder", "mlp"):
            gen_params.update(getattr(model, part).named_params(part + "."))
        self.opt_ae = Adam(gen_params, lr=cfg["train.lr_ae"])
        self.opt_sr = Adam(model.sr.named_params("sr."), lr=cfg["train.lr_sr"])
        disc_params = dict(disc_img.named_params("disc_img."))
        disc_params.update(disc_depth.named_params("disc_depth."))
        self.opt_disc = Adam(disc_params, lr=cfg["train.lr_disc"])
        self.ema = EmaState(model.named_params(), cfg["train.ema_decay"])
        self.step_idx = 0
        self.novel_acc = 0.0     # error-diffusion counter for the 95/5 mix
        self.pose0, self.intr = cam.default_camera()
        # per-record caches for quantities that are fixed functions of the
        # input image: frozen-proxy features and the real discriminator pair
        self._feat_cache: dict[int, list[np.ndarray]] = {}
        self._pair_cache: dict[int, np.ndarray] = {}
        self._batch_ids = None

    # -- batching helpers --------------------------------------------------

    def novel_view_count(self, batch: int) -> int:
        """Error-diffusion rounding of the novel-view fraction per batch."""
        frac = self.cfg["gan.novel_view_fraction"]
        want = frac * batch + self.novel_acc
        n = int(round(want))
        n = max(0, min(batch, n))
        self.novel_acc = want - n
        return n

    def sample_poses(self, batch: int) -> tuple[list, int]:
        n_novel = self.novel_view_count(batch)
        poses = []
        for i in range(batch):
            if i < n_novel:
                poses.append(cam.sample_novel_pose(
                    self.rng, self.cfg["camera.yaw_range_deg"],
                    self.cfg["camera.pitch_range_deg"]))
            else:
                poses.append(self.pose0)
        return poses, n_novel

    # -- one optimization step ---------------------------------------------

    def step(self, images: np.ndarray, monos: np.ndarray,
             rec_ids=None) -> dict:
        with retain_grads(False):
            self._batch_ids = rec_ids
            return self._step(images, monos)

    _CACHE_CAP = 1500   # records; bounds resident memory on large datasets

    def _proxy_feats(self, images: np.ndarray):
        if self._batch_ids is None:
            return None
        feats = []
        for b, rid in enumerate(self._batch_ids):
            rid = int(rid)
            if rid not in self._feat_cache:
                if len(self._feat_cache) >= self._CACHE_CAP:
                    self._feat_cache.pop(next(iter(self._feat_cache)))
                self._feat_cache[rid] = \
                    self.proxy.reference_features(images[b:b + 1])
            feats.append(self._feat_cache[rid])
        return [np.concatenate([f[k] for f in feats]) for k in range(3)]

    def _real_pairs(self, images: np.ndarray) -> np.ndarray:
        if self._batch_ids is None:
            with no_grad():
                return gan.real_pair(Tensor(images)).data
        rows = []
        for b, rid in enumerate(self._batch_ids):
            rid = int(rid)
            if rid not in self._pair_cache:
                if len(self._pair_cache) >= self._CACHE_CAP:
                    self._pair_cache.pop(next(iter(self._pair_cache)))
                with no_grad():
                    self._pair_cache[rid] = \
                        gan.real_pair(Tensor(images[b:b + 1])).data
            rows.append(self._pair_cache[rid])
        return np.concatenate(rows)

    def _step(self, images: np.ndarray, monos: np.ndarray) -> dict:
        cfg = self.cfg
        mcfg = self.model.cfg
        B = images.shape[0]
        adv_on = cfg["gan.enabled"] and self.step_idx >= cfg["gan.start_step"]
        depth_on = cfg["gan.depth_enabled"] and adv_on
        report = {}

        reset_tape()
        img_t = Tensor(images)
        post = self.model.encode(img_t, monos)
        z = post.sample(self.rng)
        planes = self.model.decode(z)

        bundle = cam.cast_rays(self.pose0, self.intr, mcfg.render_res)
        t_depths = cam.sample_disparity(bundle, mcfg.n_samples).depths
        if adv_on:
            # one batched render covers the input view and the novel views
            poses, n_novel = self.sample_poses(B)
            both = rd.render_view(G.concat([planes, planes], axis=0),
                                  self.model.mlp,
                                  [self.pose0] * B + poses, self.intr,
                                  mcfg.render_res, mcfg.n_samples)
            sr_both = self.model.sr(both.feature_map)
            render_in = rd.RenderOutput(
                feature_map=both.feature_map[:B], rgb_low=both.rgb_low[:B],
                depth_low=both.depth_low[:B], weights=both.weights[:B],
                alpha_acc=both.alpha_acc[:B])
            recon = sr_both[:B]
        else:
            render_in = rd.render_view(planes, self.model.mlp, self.pose0,
                                       self.intr, mcfg.render_res,
                                       mcfg.n_samples)
            recon = self.model.sr(render_in.feature_map)

        rec_loss, rec_report, ss_list, depth_targets = ae.reconstruction_loss(
            img_t, recon, monos, render_in, self.weights, self.proxy,
            t_depths, k_nearest=cfg["depth.k"],
            image_feats=self._proxy_feats(images))
        kl = ae.kl_loss(post)
        gen_loss = G.add(rec_loss, G.mul(kl, self.weights.kl))
        report.update(rec_report)
        report["l_kl"] = float(kl.data)
        report["alpha_acc"] = float(render_in.alpha_acc.data.mean())

        fake_pair_data = None
        fake_depth_data = None
        if adv_on:
            # generator-side adversarial pressure ramps in after the warmup
            # so depth supervision anchors geometry first; the objective is
            # unscaled once the ramp completes
            ramp = max(1, cfg["gan.ramp_steps"])
            adv_w = min(1.0,
                        (self.step_idx - cfg["gan.start_step"] + 1) / ramp)
            fake_pair = gan.dual_disc_input(G.sigmoid(both.rgb_low[B:]),
                                            sr_both[B:])
            g_adv = gan.generator_loss(self.disc_img(fake_pair))
            gen_loss = G.add(gen_loss, G.mul(g_adv, adv_w))
            report["g_adv_img"] = float(g_adv.data)
            report["adv_weight"] = adv_w
            report["novel_in_batch"] = float(n_novel)
            fake_pair_data = fake_pair.data.copy()
            if depth_on:
                fake_depth = G.mul(both.depth_low[B:], 1.0 / cam.FAR)
                g_adv_d = gan.generator_loss(self.disc_depth(fake_depth))
                gen_loss = G.add(gen_loss, G.mul(g_adv_d, adv_w))
                report["g_adv_depth"] = float(g_adv_d.data)
                fake_depth_data = fake_depth.data.copy()

        report["loss_gen"] = float(gen_loss.data)
        self._check_finite(report)
        self.opt_ae.zero_grad()
        self.opt_sr.zero_grad()
        self.opt_disc.zero_grad()
        gen_loss.backward()
        self.opt_ae.step()
        self.opt_sr.step()

        if adv_on:
            reset_tape()
            self.opt_disc.zero_grad()
            real_pair = Tensor(self._real_pairs(images), requires_grad=True)
            d_loss = gan.discriminator_loss(self.disc_img(Tensor(fake_pair_data)),
                                            self.disc_img(real_pair))
            report["d_loss_img"] = float(d_loss.data)
            lazy = cfg["gan.r1_interval"]
            do_r1 = (self.step_idx % lazy) == 0
            report["r1_img"] = 0.0
            report["r1_depth"] = 0.0
            if do_r1 and cfg["gan.r1_lambda"] > 0:
                pen = gan.r1_penalty(self.disc_img, real_pair,
                                     cfg["gan.r1_lambda"] * lazy)
                d_loss = G.add(d_loss, pen)
                report["r1_img"] = float(pen.data)
            if depth_on:
                res = self.model.cfg.render_res
                real_depth = np.clip(
                    depth_targets.reshape(-1, 1, res, res) / cam.FAR, 0.0, 1.0)
                real_depth = Tensor(real_depth, requires_grad=True)
                d_loss_d = gan.discriminator_loss(
                    self.disc_depth(Tensor(fake_depth_data)),
                    self.disc_depth(real_depth))
                report["d_loss_depth"] = float(d_loss_d.data)
                d_loss = G.add(d_loss, d_loss_d)
                if do_r1 and cfg["gan.r1_lambda_depth"] > 0:
                    pen_d = gan.r1_penalty(self.disc_depth, real_depth,
                                           cfg["gan.r1_lambda_depth"] * lazy)
                    d_loss = G.add(d_loss, pen_d)
                    report["r1_depth"] = float(pen_d.data)
            report["loss_disc"] = float(d_loss.data)
            self._check_finite(report)
            d_loss.backward()
            self.opt_disc.step()

        self.ema.update(self.model.named_params())
        self.step_idx += 1
        reset_tape()
        return report

    @staticmethod
    def _check_finite(report: dict):
        if not all(np.isfinite(v) for v in report.values()):
            raise TrainingDiverged(report)

    # -- persistence ---------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = self.model.value_dict("gen.")
        arrays.update(self.disc_img.value_dict("disc_img."))
        arrays.update(self.disc_depth.value_dict("disc_depth."))
        arrays.update(self.ema.arrays("ema."))
        arrays.update(self.opt_ae.state_arrays("adam_ae."))
        arrays.update(self.opt_sr.state_arrays("adam_sr."))
        arrays.update(self.opt_disc.state_arrays("adam_disc."))
        arrays["meta.step"] = np.array([float(self.step_idx)])
        arrays["meta.novel_acc"] = np.array([self.novel_acc])
        return arrays

    def save(self, path):
        save_arrays(path, self.state_arrays())
        sidecar = {"rng": self.rng.bit_generator.state,
                   "step": self.step_idx}
        Path(str(path) + ".state.json").write_text(json.dumps(sidecar))

    def load(self, path):
        arrays = load_arrays(path)
        self.model.load_values(arrays, "gen.")
        self.disc_img.load_values(arrays, "disc_img.")
        self.disc_depth.load_values(arrays, "disc_depth.")
        self.ema.load_arrays(arrays, "ema.")
        self.opt_ae.load_state_arrays(arrays, "adam_ae.")
        self.opt_sr.load_state_arrays(arrays, "adam_sr.")
        self.opt_disc.load_state_arrays(arrays, "adam_disc.")
        self.step_idx = int(arrays["meta.step"][0])
        self.novel_acc = float(arrays["meta.novel_acc"][0])
        sidecar = json.loads(Path(str(path) + ".state.json").read_text())
        state = sidecar["rng"]
        state["state"]["state"] = int(state["state"]["state"])
        state["state"]["inc"] = int(state["state"]["inc"])
        self.rng.bit_generator.state = state


def build_stage1(cfg: RunConfig, seed: int | None = None) -> Stage1Trainer:
    seed = cfg["train.seed"] if seed is None else seed
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    mcfg = model_config(cfg)
    model = ae.Autoencoder(init_rng, mcfg)
    disc_img = gan.ImageDiscriminator(init_rng, mcfg.image_res)
    disc_depth = gan.DepthDiscriminator(init_rng, mcfg.render_res)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    return Stage1Trainer(model, disc_img, disc_depth, cfg, rng)


def run_stage1(dataset, out_dir, cfg: RunConfig, steps: int | None = None,
               resume: str | None = None, log_cb=None) -> Path:
    """Training loop: batches drawn with replacement from the dataset, loss
    log appended one key=value line per step, periodic checkpoints."""
    import gc
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = build_stage1(cfg)
    if resume:
        trainer.load(resume)
    total = cfg["train.steps"] if steps is None else steps
    batch = cfg["train.batch"]
    log_path = out / "loss_log.txt"
    cache = _MonoCache(dataset, cfg)
    gc_was_on = gc.isenabled()
    gc.disable()        # the tape breaks its own cycles; sweep manually
    try:
        with open(log_path, "a") as log:
            while trainer.step_idx < total:
                idx = trainer.rng.integers(0, len(dataset), size=batch)
                images, monos = cache.batch(idx)
                report = trainer.step(images, monos, rec_ids=idx)
                line = f"step={trainer.step_idx} " + " ".join(
                    f"{k}={v:.6g}" for k, v in sorted(report.items()))
                log.write(line + "\n")
                if log_cb:
                    log_cb(trainer.step_idx, report)
                if trainer.step_idx % 200 == 0:
                    gc.collect()
                    log.flush()
                if (trainer.step_idx % cfg["train.ckpt_every"] == 0
                        or trainer.step_idx >= total):
                    ckpt = out / f"stage1_step{trainer.step_idx:07d}.ckpt"
                    trainer.save(ckpt)
    finally:
        if gc_was_on:
            gc.enable()
    final = out / f"stage1_step{trainer.step_idx:07d}.ckpt"
    if not final.exists():
        trainer.save(final)
    return final


class _MonoCache:
    """Caches decoded images (uint8, exact) and mono-oracle depths."""

    def __init__(self, dataset, cfg: RunConfig):
        self.dataset = dataset
        self.cfg = cfg
        self.images: dict[int, np.ndarray] = {}
        self.monos: dict[int, np.ndarray] = {}
        self.labels: dict[int, int] = {}

    def one(self, i: int):
        i = int(i)
        if i not in self.images:
            rec = self.dataset.load(i)
            self.images[i] = np.round(rec.image * 255.0).astype(np.uint8)
            self.labels[i] = rec.label
            self.monos[i] = mono_for_record(self.dataset, i, self.cfg)
        return self.images[i], self.monos[i]

    def batch(self, idx):
        pairs = [self.one(i) for i in idx]
        images = np.stack([p[0] for p in pairs]).astype(np.float64) / 255.0
        return images, np.stack([p[1] for p in pairs])

    def label_batch(self, idx):
        return np.array([self.labels[int(i)] for i in idx])


def load_autoencoder(ckpt_path, cfg: RunConfig,
                     use_ema: bool = True) -> ae.Autoencoder:
    arrays = load_arrays(ckpt_path)
    model = ae.Autoencoder(np.random.default_rng(0), model_config(cfg))
    prefix = "ema." if use_ema and any(k.startswith("ema.") for k in arrays) \
        else "gen."
    model.load_values(arrays, prefix)
    return model


# ---------------------------------------------------------------------------
# stage 2

class Stage2Trainer:
    def __init__(self, denoiser: df.Denoiser, sched: df.DiffusionSchedule,
                 cfg: RunConfig, rng: np.random.Generator):
        self.denoiser = denoiser
        self.sched = sched
        self.cfg = cfg
        self.rng = rng
        self.opt = Adam(denoiser.named_params(), lr=cfg["diffusion.lr"])
        self.step_idx = 0
        self.dropped = 0
        self.seen = 0

    def step(self, latents: np.ndarray, labels: np.ndarray) -> dict:
        """One denoising-score-matching step on pre-scaled latents."""
        with retain_grads(False):
            return self._step(latents, labels)

    def _step(self, latents: np.ndarray, labels: np.ndarray) -> dict:
        B = latents.shape[0]
        sched = self.sched
        taus = self.rng.integers(1, sched.timesteps + 1, size=B)
        eps = self.rng.standard_normal(latents.shape)
        a = sched.alpha[taus][:, None, None, None]
        s = sched.sigma[taus][:, None, None, None]
        x_tau = a * latents + s * eps
        v = a * eps - s * latents
        ids = np.asarray(labels).copy()
        drop = self.rng.random(B) < self.cfg["diffusion.p_drop"]
        ids[drop] = self.denoiser.null_class()
        self.dropped += int(drop.sum())
        self.seen += B

        reset_tape()
        out = self.denoiser(Tensor(x_tau), taus, ids)
        d = G.sub(out, v)
        loss = G.tmean(G.mul(d, d))
        report = {"loss": float(loss.data),
                  "p_drop_running": self.dropped / max(self.seen, 1)}
        if not np.isfinite(report["loss"]):
            raise TrainingDiverged(report)
        self.opt.zero_grad()
        loss.backward()
        norm = clip_grad_norm(self.opt.params, self.cfg["diffusion.clip_norm"])
        report["grad_norm"] = norm
        self.opt.step()
        self.step_idx += 1
        reset_tape()
        return report

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = self.denoiser.value_dict("denoiser.")
        arrays.update(self.opt.state_arrays("adam."))
        arrays["meta.step"] = np.array([float(self.step_idx)])
        return arrays

    def save(self, path, scaler: df.LatentScaler):
        arrays = self.state_arrays()
        arrays.update(scaler.arrays())
        save_arrays(path, arrays)
        sidecar = {"rng": self.rng.bit_generator.state, "step": self.step_idx}
        Path(str(path) + ".state.json").write_text(json.dumps(sidecar))

    def load(self, path) -> df.LatentScaler:
        arrays = load_arrays(path)
        self.denoiser.load_values(arrays, "denoiser.")
        self.opt.load_state_arrays(arrays, "adam.")
        self.step_idx = int(arrays["meta.step"][0])
        sidecar = json.loads(Path(str(path) + ".state.json").read_text())
        state = sidecar["rng"]
        state["state"]["state"] = int(state["state"]["state"])
        state["state"]["inc"] = int(state["state"]["inc"])
        self.rng.bit_generator.state = state
        return df.LatentScaler.from_arrays(arrays)


def encode_dataset(model: ae.Autoencoder, dataset, cfg: RunConfig,
                   limit: int | None = None):
    """Posterior parameters for every record (frozen encoder, no tape)."""
    n = len(dataset) if limit is None else min(limit, len(dataset))
    mus, lvs, labels = [], [], []
    cache = _MonoCache(dataset, cfg)
    with no_grad():
        for start in range(0, n, 32):
            idx = np.arange(start, min(start + 32, n))
            images, monos = cache.batch(idx)
            post = model.encode(Tensor(images), monos)
            mus.append(post.mu.data.copy())
            lvs.append(post.log_var.data.copy())
            labels.append(cache.label_batch(idx))
    return np.concatenate(mus), np.concatenate(lvs), np.concatenate(labels)


def build_stage2(cfg: RunConfig, n_classes: int,
                 seed: int | None = None) -> Stage2Trainer:
    seed = cfg["train.seed"] if seed is None else seed
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, 303]))
    mcfg = model_config(cfg)
    denoiser = df.Denoiser(init_rng, mcfg.latent_shape, n_classes,
                           channels=cfg["diffusion.channels"],
                           timesteps=cfg["diffusion.steps"])
    sched = df.cosine_schedule(cfg["diffusion.steps"], cfg["diffusion.offset"])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 404]))
    return Stage2Trainer(denoiser, sched, cfg, rng)


def run_stage2(dataset, ae_ckpt, out_dir, cfg: RunConfig,
               steps: int | None = None, resume: str | None = None,
               log_cb=None) -> Path:
    """Fit the latent scaler, then train the denoiser on sampled latents."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = load_autoencoder(ae_ckpt, cfg)
    mcfg = model_config(cfg)
    arrays = load_arrays(ae_ckpt)
    ck_shape = arrays["gen.encoder.head.b"].shape[0] // 2
    if ck_shape != mcfg.latent_channels:
        raise ValueError(
            f"checkpoint latent channels {ck_shape} disagree with config "
            f"{mcfg.latent_channels}")
    from . import synthscenes as scn
    trainer = build_stage2(cfg, scn.N_CLASSES)
    mus, lvs, labels = encode_dataset(model, dataset, cfg)
    fit_rng = np.random.default_rng(np.random.SeedSequence(
        [cfg["train.seed"], 505]))
    take = min(256, mus.shape[0])
    draws = -(-64 // take)        # posterior samples per record, >= 64 total
    z_fit = np.concatenate([
        mus[:take] + np.exp(0.5 * lvs[:take])
        * fit_rng.standard_normal(mus[:take].shape)
        for _ in range(draws)])
    scaler = df.LatentScaler.fit(z_fit, cfg["diffusion.scale_factor"])
    if resume:
        scaler = trainer.load(resume)
    total = cfg["diffusion.train_steps"] if steps is None else steps
    batch = cfg["diffusion.batch"]
    log_path = out / "loss_log.txt"
    import gc
    gc_was_on = gc.isenabled()
    gc.disable()
    try:
        with open(log_path, "a") as log:
            while trainer.step_idx < total:
                idx = trainer.rng.integers(0, mus.shape[0], size=batch)
                noise = trainer.rng.standard_normal((batch,) + mus.shape[1:])
                z = mus[idx] + np.exp(0.5 * lvs[idx]) * noise
                report = trainer.step(scaler.scale(z), labels[idx])
                log.write(f"step={trainer.step_idx} " + " ".join(
                    f"{k}={v:.6g}" for k, v in sorted(report.items())) + "\n")
                if log_cb:
                    log_cb(trainer.step_idx, report)
                if trainer.step_idx % 500 == 0:
                    gc.collect()
                    log.flush()
                if (trainer.step_idx % cfg["diffusion.ckpt_every"] == 0
                        or trainer.step_idx >= total):
                    trainer.save(
                        out / f"stage2_step{trainer.step_idx:07d}.ckpt",
                        scaler)
    finally:
        if gc_was_on:
            gc.enable()
    final = out / f"stage2_step{trainer.step_idx:07d}.ckpt"
    if not final.exists():
        trainer.save(final, scaler)
    return final


def load_denoiser(ckpt_path, cfg: RunConfig):
    from . import synthscenes as scn
    arrays = load_arrays(ckpt_path)
    mcfg = model_config(cfg)
    denoiser = df.Denoiser(np.random.default_rng(0), mcfg.latent_shape,
                           scn.N_CLASSES, channels=cfg["diffusion.channels"],
                           timesteps=cfg["diffusion.steps"])
    denoiser.load_values(arrays, "denoiser.")
    scaler = df.LatentScaler.from_arrays(arrays)
    return denoiser, scaler
