"""Procedural single-view dataset: textured primitives rasterized analytically.

Scenes are specified in view coordinates of the fixed input camera (x right,
y down, z = depth along the view axis) and rendered by exact ray-primitive
intersection with Lambertian-style shading.  Ground-truth depth is the
first-hit distance along each unit-norm ray; background pixels carry the far
plane.  Four classes differ in primitive count and a disjoint color palette.

The training loader exposes exactly one pose (the input pose) per record.
Rasterized novel views exist only as held-out fixtures for evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import camera as cam
from . import fileio

DEPTH_MIN = 2.4
DEPTH_MAX = 4.5
_LIGHT = np.array([0.35, 0.65, 0.675])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)

PALETTES = {
    0: [(0.85, 0.20, 0.20), (0.95, 0.45, 0.30), (0.75, 0.10, 0.25)],
    1: [(0.20, 0.35, 0.85), (0.30, 0.55, 0.90), (0.15, 0.20, 0.70)],
    2: [(0.20, 0.75, 0.30), (0.35, 0.85, 0.45), (0.10, 0.60, 0.35)],
    3: [(0.90, 0.75, 0.20), (0.80, 0.60, 0.10), (0.95, 0.85, 0.40)],
}
_PRIM_PLANS = {
    0: ("sphere",),
    1: ("sphere", "sphere"),
    2: ("box",),
    3: ("box", "sphere"),
}
N_CLASSES = len(PALETTES)


@dataclass
class Primitive:
    kind: str                 # "sphere" | "box"
    center_view: np.ndarray   # (x, y, depth) in input-camera coordinates
    size: np.ndarray          # sphere: (radius,), box: half extents (3,)
    albedo: np.ndarray        # rgb in [0,1]

    def center_world(self) -> np.ndarray:
        x, y, d = self.center_view
        return np.array([x, -y, cam.RADIUS - d])


@dataclass
class SceneSpec:
    primitives: list[Primitive]
    background: np.ndarray
    class_id: int

    def __post_init__(self):
        for p in self.primitives:
            if not (DEPTH_MIN <= p.center_view[2] <= DEPTH_MAX):
                raise ValueError("primitive depth outside allowed range")


def generate_scene(rng: np.random.Generator, class_id: int) -> SceneSpec:
    """Deterministic per rng state; primitives stay visible under the
    novel-view orbit by keeping centers near the world origin."""
    if class_id not in PALETTES:
        raise ValueError(f"unknown class id {class_id}")
    palette = PALETTES[class_id]
    prims = []
    for kind in _PRIM_PLANS[class_id]:
        depth = rng.uniform(2.5, 3.2)
        half_w = depth * 0.5 / cam.FOCAL      # frustum half extent at depth
        x = rng.uniform(-0.35, 0.35) * half_w
        y = rng.uniform(-0.35, 0.35) * half_w
        albedo = np.asarray(palette[int(rng.integers(len(palette)))])
        if kind == "sphere":
            size = np.array([rng.uniform(0.45, 0.75) * half_w])
        else:
            size = rng.uniform(0.35, 0.6, size=3) * half_w
        prims.append(Primitive(kind, np.array([x, y, depth]), size, albedo))
    tint = rng.uniform(0.05, 0.30)
    background = np.clip(tint + rng.uniform(-0.03, 0.03, size=3), 0.02, 0.35)
    return SceneSpec(prims, background, class_id)


def _intersect_sphere(origins, dirs, center, radius):
    oc = origins - center
    b = np.einsum("pd,pd->p", oc, dirs)
    c = np.einsum("pd,pd->p", oc, oc) - radius * radius
    disc = b * b - c
    hit = disc > 0.0
    t = np.where(hit, -b - np.sqrt(np.maximum(disc, 0.0)), np.inf)
    t = np.where(t > 1e-6, t, np.inf)

    def normal_at(pts, sel):
        return (pts - center) / radius

    return t, normal_at


def _intersect_box(origins, dirs, center, half):
    bmin, bmax = center - half, center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (bmin - origins) * inv
        t2 = (bmax - origins) * inv
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    tnear = np.max(lo, axis=-1)
    tfar = np.min(hi, axis=-1)
    hit = (tnear <= tfar) & (tnear > 1e-6)
    t = np.where(hit, tnear, np.inf)
    axis = np.argmax(lo, axis=-1)

    def normal_at(pts, sel):
        n = np.zeros_like(pts)
        rel = pts - center
        rows = np.arange(pts.shape[0])
        ax = axis[sel]
        n[rows, ax] = np.sign(rel[rows, ax])
        return n

    return t, normal_at


def raster_view(spec: SceneSpec, pose: cam.CameraPose, intr: cam.Intrinsics,
                resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-hit shading; returns ((3,R,R) image in [0,1], (R,R) depth)."""
    bundle = cam.cast_rays(pose, intr, resolution)
    P = bundle.directions.shape[0]
    best_t = np.full(P, np.inf)
    image = np.tile(spec.background[:, None], (1, P))
    for prim in spec.primitives:
        cw = prim.center_world()
        if prim.kind == "sphere":
            t, normal_at = _intersect_sphere(bundle.origins, bundle.directions,
                                             cw, prim.size[0])
        else:
            t, normal_at = _intersect_box(bundle.origins, bundle.directions,
                                          cw, prim.size)
        closer = t < best_t
        if not np.any(closer):
            continue
        pts = bundle.origins[closer] + t[closer, None] * bundle.directions[closer]
        n = normal_at(pts, closer)
        lam = np.maximum(0.0, n @ _LIGHT)
        shade = prim.albedo[:, None] * (0.35 + 0.65 * lam)[None, :]
        image[:, closer] = shade
        best_t[closer] = t[closer]
    depth = np.where(np.isfinite(best_t), best_t, bundle.far)
    r = resolution
    return (np.clip(image, 0.0, 1.0).reshape(3, r, r),
            depth.reshape(r, r))


# ---------------------------------------------------------------------------
# dataset directory layout

@dataclass
class DatasetRecord:
    index: int
    seed: int
    label: int
    image: np.ndarray      # (3, H, W) in [0,1]
    gt_depth: np.ndarray   # (H, W)


def record_rng(base_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([base_seed, index]))


def generate_dataset(out_dir, n: int, resolution: int, seed: int,
                     fixture_yaws_deg: list[float] | None = None):
    """Write n records (PNG image + PFM depth + manifest line each).

    ``fixture_yaws_deg`` optionally rasterizes held-out novel views into
    fixtures/ for evaluation; training never reads them.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    pose0, intr = cam.default_camera()
    lines = []
    fixture_lines = []
    if fixture_yaws_deg:
        (out / "fixtures").mkdir(exist_ok=True)
    for i in range(n):
        rng = record_rng(seed, i)
        label = int(rng.integers(N_CLASSES))
        spec = generate_scene(rng, label)
        img, depth = raster_view(spec, pose0, intr, resolution)
        fileio.write_png(out / "images" / f"{i:05d}.png", img)
        fileio.write_pfm(out / "depth" / f"{i:05d}.pfm", depth)
        lines.append(f"{i:05d} seed={seed}:{i} class={label}")
        for yaw in fixture_yaws_deg or []:
            pose = cam.pose_from_angles(np.deg2rad(yaw), 0.0)
            fimg, fdepth = raster_view(spec, pose, intr, resolution)
            stem = f"{i:05d}_yaw{yaw:+06.2f}"
            fileio.write_png(out / "fixtures" / (stem + ".png"), fimg)
            fileio.write_pfm(out / "fixtures" / (stem + ".pfm"), fdepth)
            fixture_lines.append(f"{stem} yaw_deg={yaw}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    if fixture_lines:
        (out / "fixtures" / "fixtures.txt").write_text(
            "\n".join(fixture_lines) + "\n")


class DatasetFolder:
    """Reader for the directory layout written by ``generate_dataset``."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / "manifest.txt"
        if not manifest.exists():
            raise FileNotFoundError(f"no manifest at {manifest}")
        self.entries = []
        for line in manifest.read_text().splitlines():
            idx, seed_part, class_part = line.split()
            base, sub = seed_part.split("=")[1].split(":")
            self.entries.append((int(idx), int(base), int(sub),
                                 int(class_part.split("=")[1])))

    def __len__(self):
        return len(self.entries)

    def load(self, i: int) -> DatasetRecord:
        idx, base_seed, sub, label = self.entries[i]
        img = fileio.read_png(self.root / "images" / f"{idx:05d}.png")
        depth = fileio.read_pfm(self.root / "depth" / f"{idx:05d}.pfm")
        return DatasetRecord(idx, sub, label, img, depth)

    def mono_rng(self, i: int) -> np.random.Generator:
        idx, base_seed, sub, _ = self.entries[i]
        return np.random.default_rng(
            np.random.SeedSequence([base_seed, sub, 7741]))

    def fixtures_for(self, i: int) -> list[tuple[float, np.ndarray, np.ndarray]]:
        fdir = self.root / "fixtures"
        idx = self.entries[i][0]
        out = []
        if not fdir.exists():
            return out
        for line in (fdir / "fixtures.txt").read_text().splitlines():
            stem, yaw_part = line.split()
            if stem.startswith(f"{idx:05d}_"):
                yaw = float(yaw_part.split("=")[1])
                img = fileio.read_png(fdir / (stem + ".png"))
                depth = fileio.read_pfm(fdir / (stem + ".pfm"))
                out.append((yaw, img, depth))
        return out
