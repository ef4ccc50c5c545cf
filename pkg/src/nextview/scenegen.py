"""Procedural paired-view datasets of simple 3D objects.

A deterministic pinhole ray caster over sphere/box/cylinder primitives with
Lambertian shading. Objects, cameras, and rendered bytes are a pure function
of the dataset seed, so datasets can be rebuilt bit-for-bit anywhere.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .conditioning import CameraSpec
from .numerics import Rng

_EPS = 1e-6


@dataclass(frozen=True)
class Primitive:
    kind: str  # "sphere" | "box" | "cylinder"
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # sphere: (r,-,-); box: half-extents; cyl: (r, half_h, -)
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class ToyObject:
    object_id: int
    seed: int
    primitives: tuple[Primitive, ...]

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("object needs at least one primitive")


@dataclass(frozen=True)
class RenderSettings:
    resolution: int = 32
    fov_deg: float = 50.0
    light_dir: tuple[float, float, float] = (-0.45, 0.35, -0.82)  # direction light travels
    background: tuple[float, float, float] = (0.06, 0.06, 0.09)
    ambient: float = 0.25


@dataclass(frozen=True)
class CameraRanges:
    elev_max_deg: float = 75.0
    radius_min: float = 1.5
    radius_max: float = 2.5
    # "classic" narrow-elevation input sampling (comparison mode only)
    classic_elev_lo_deg: float = 15.0
    classic_elev_hi_deg: float = 35.0


@dataclass
class ViewRecord:
    object_id: int
    view_id: int
    path: str
    elevation_deg: float
    azimuth_deg: float
    radius: float
    split: str

    def camera(self, fov_deg: float) -> CameraSpec:
        return CameraSpec(
            elevation=math.radians(self.elevation_deg),
            azimuth=math.radians(self.azimuth_deg),
            radius=self.radius,
            fov=math.radians(fov_deg),
        )


@dataclass
class DatasetManifest:
    root: str
    seed: int
    objects: int
    views_per_object: int
    settings: RenderSettings
    ranges: CameraRanges
    eval_mode: bool
    classic: bool
    records: list[ViewRecord] = field(default_factory=list)

    def camera(self, rec: ViewRecord) -> CameraSpec:
        return rec.camera(self.settings.fov_deg)

    def image(self, rec: ViewRecord) -> np.ndarray:
        return load_image(os.path.join(self.root, rec.path))

    def by_object(self) -> dict[int, list[ViewRecord]]:
        out: dict[int, list[ViewRecord]] = {}
        for r in self.records:
            out.setdefault(r.object_id, []).append(r)
        return out


# ---------------------------------------------------------------------------
# Object and camera sampling
# ---------------------------------------------------------------------------

_KINDS = ("sphere", "box", "cylinder")


def sample_object(object_id: int, rng: Rng) -> ToyObject:
    """1-3 random primitives with random albedos, rescaled into the unit ball."""
    n = int(rng.integers(1, 4))
    prims = []
    reach = 0.0
    for _ in range(n):
        kind = _KINDS[int(rng.integers(0, 3))]
        center = rng.uniform(-0.45, 0.45, size=3)
        albedo = rng.uniform(0.15, 0.95, size=3)
        if kind == "sphere":
            r = float(rng.uniform(0.18, 0.45))
            size = (r, 0.0, 0.0)
            extent = r
        elif kind == "box":
            hx, hy, hz = rng.uniform(0.12, 0.4, size=3)
            size = (float(hx), float(hy), float(hz))
            extent = math.sqrt(hx * hx + hy * hy + hz * hz)
        else:
            r = float(rng.uniform(0.12, 0.35))
            hh = float(rng.uniform(0.15, 0.45))
            size = (r, hh, 0.0)
            extent = math.sqrt(r * r + hh * hh)
        reach = max(reach, float(np.linalg.norm(center)) + extent)
        prims.append(
            Primitive(kind, tuple(float(c) for c in center), size, tuple(float(a) for a in albedo))
        )
    scale = min(1.0, 1.0 / (reach + 1e-9))
    if scale < 1.0:
        prims = [
            Primitive(
                p.kind,
                tuple(c * scale for c in p.center),
                tuple(s * scale for s in p.size),
                p.albedo,
            )
            for p in prims
        ]
    return ToyObject(object_id=object_id, seed=rng.seed, primitives=tuple(prims))


def sample_camera(rng: Rng, ranges: CameraRanges, classic_input: bool = False) -> CameraSpec:
    """Uniform full-sphere camera (elevation capped), radius varying."""
    azim = float(rng.uniform(0.0, 2.0 * math.pi))
    if classic_input:
        elev = float(
            rng.uniform(
                math.radians(ranges.classic_elev_lo_deg),
                math.radians(ranges.classic_elev_hi_deg),
            )
        )
    else:
        m = math.radians(ranges.elev_max_deg)
        elev = float(rng.uniform(-m, m))
    radius = float(rng.uniform(ranges.radius_min, ranges.radius_max))
    return CameraSpec(elevation=elev, azimuth=azim, radius=radius)


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------


def _camera_rays(cam: CameraSpec, res: int) -> tuple[np.ndarray, np.ndarray]:
    ce, se = math.cos(cam.elevation), math.sin(cam.elevation)
    ca, sa = math.cos(cam.azimuth), math.sin(cam.azimuth)
    pos = cam.radius * np.array([ce * ca, ce * sa, se])
    fwd = -pos / np.linalg.norm(pos)
    up_world = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up_world)
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)

    t = math.tan(cam.fov / 2.0)
    px = (np.arange(res) + 0.5) / res * 2.0 - 1.0
    xs, ys = np.meshgrid(px, -px, indexing="xy")  # y flips so row 0 is the top
    dirs = fwd[None, None] + t * (xs[..., None] * right[None, None] + ys[..., None] * up[None, None])
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pos, dirs.shape)
    return origins.reshape(-1, 3), dirs.reshape(-1, 3)


def _safe_points(o, d, t):
    ts = np.where(np.isfinite(t), t, 1.0)
    return o + ts[..., None] * d


def _hit_sphere(o, d, c, r):
    oc = o - c
    b = np.sum(oc * d, axis=-1)
    q = np.sum(oc * oc, axis=-1) - r * r
    disc = b * b - q
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = np.where(hit, -b - sq, np.inf)
    t = np.where(t > _EPS, t, np.inf)
    n = (_safe_points(o, d, t) - c) / r
    return t, n


def _hit_box(o, d, c, half):
    safe_d = np.where(np.abs(d) < 1e-12, 1e-12, d)
    t1 = (c - half - o) / safe_d
    t2 = (c + half - o) / safe_d
    tn = np.max(np.minimum(t1, t2), axis=-1)
    tf = np.min(np.maximum(t1, t2), axis=-1)
    hit = (tn <= tf) & (tf > _EPS) & (tn > _EPS)
    t = np.where(hit, tn, np.inf)
    p = _safe_points(o, d, t)
    rel = (p - c) / half
    axis = np.argmax(np.abs(rel), axis=-1)
    n = np.zeros_like(p)
    rows = np.arange(p.shape[0])
    n[rows, axis] = np.sign(rel[rows, axis])
    return t, n


def _hit_cylinder(o, d, c, r, hh):
    # lateral surface: quadratic in the xy-plane relative to the axis
    ox, oy = o[:, 0] - c[0], o[:, 1] - c[1]
    dx, dy = d[:, 0], d[:, 1]
    a = dx * dx + dy * dy
    b = ox * dx + oy * dy
    q = ox * ox + oy * oy - r * r
    disc = b * b - a * q
    ok = (disc >= 0.0) & (a > 1e-12)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t_side = np.where(ok, (-b - sq) / np.where(a > 1e-12, a, 1.0), np.inf)
    z_at = o[:, 2] + t_side * d[:, 2]
    in_band = np.abs(z_at - c[2]) <= hh
    t_side = np.where(ok & in_band & (t_side > _EPS), t_side, np.inf)

    # caps
    dz = np.where(np.abs(d[:, 2]) < 1e-12, 1e-12, d[:, 2])
    t_caps = np.full_like(t_side, np.inf)
    cap_sign = np.zeros_like(t_side)
    for s in (1.0, -1.0):
        t_c = (c[2] + s * hh - o[:, 2]) / dz
        px = o[:, 0] + t_c * d[:, 0] - c[0]
        py = o[:, 1] + t_c * d[:, 1] - c[1]
        good = (px * px + py * py <= r * r) & (t_c > _EPS)
        closer = good & (t_c < t_caps)
        t_caps = np.where(closer, t_c, t_caps)
        cap_sign = np.where(closer, s, cap_sign)

    use_cap = t_caps < t_side
    t = np.where(use_cap, t_caps, t_side)
    p = _safe_points(o, d, t)
    n_side = np.stack(
        [p[:, 0] - c[0], p[:, 1] - c[1], np.zeros_like(t)], axis=-1
    )
    norm = np.linalg.norm(n_side, axis=-1, keepdims=True)
    n_side = n_side / np.where(norm > 0, norm, 1.0)
    n_cap = np.stack([np.zeros_like(t), np.zeros_like(t), cap_sign], axis=-1)
    n = np.where(use_cap[..., None], n_cap, n_side)
    return t, n


def render(obj: ToyObject, cam: CameraSpec, settings: RenderSettings) -> np.ndarray:
    """Render to an (H, W, 3) float32 image in [0, 1]."""
    res = settings.resolution
    o, d = _camera_rays(cam, res)
    n_rays = o.shape[0]
    best_t = np.full(n_rays, np.inf)
    color = np.tile(np.asarray(settings.background, dtype=np.float64), (n_rays, 1))

    light = -np.asarray(settings.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)

    for prim in obj.primitives:
        c = np.asarray(prim.center)
        if prim.kind == "sphere":
            t, n = _hit_sphere(o, d, c, prim.size[0])
        elif prim.kind == "box":
            t, n = _hit_box(o, d, c, np.asarray(prim.size))
        else:
            t, n = _hit_cylinder(o, d, c, prim.size[0], prim.size[1])
        closer = t < best_t
        if not closer.any():
            continue
        lam = np.clip(np.sum(n * light, axis=-1), 0.0, 1.0)
        shade = settings.ambient + (1.0 - settings.ambient) * lam
        albedo = np.asarray(prim.albedo)
        color[closer] = albedo[None, :] * shade[closer, None]
        best_t = np.where(closer, t, best_t)

    img = np.clip(color, 0.0, 1.0).reshape(res, res, 3)
    return img.astype(np.float32)


# ---------------------------------------------------------------------------
# Dataset building and IO
# ---------------------------------------------------------------------------


def save_image(path: str, img: np.ndarray) -> None:
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def build_dataset(
    n_objects: int,
    views_per_object: int,
    seed: int,
    out_dir: str,
    eval_mode: bool = False,
    classic_cameras: bool = False,
    settings: RenderSettings | None = None,
    ranges: CameraRanges | None = None,
) -> DatasetManifest:
    """Render ``n_objects`` x ``views_per_object`` views and write a manifest.

    Eval mode marks view 0 of each object as the input view and the rest as
    eval targets (7 views total by default protocol); otherwise every view is
    a training view. The output tree is bit-reproducible from the seed.
    """
    settings = settings or RenderSettings()
    ranges = ranges or CameraRanges()
    if eval_mode and views_per_object < 2:
        raise ValueError("eval mode needs at least an input and one eval view")
    root = os.path.abspath(out_dir)
    img_dir = os.path.join(root, "images")
    os.makedirs(img_dir, exist_ok=True)

    rng = Rng(seed)
    manifest = DatasetManifest(
        root=root,
        seed=seed,
        objects=n_objects,
        views_per_object=views_per_object,
        settings=settings,
        ranges=ranges,
        eval_mode=eval_mode,
        classic=classic_cameras,
    )
    for oi in range(n_objects):
        obj = sample_object(oi, rng.child("object", oi))
        for vi in range(views_per_object):
            classic_input = classic_cameras and eval_mode and vi == 0
            cam = sample_camera(rng.child("camera", oi, vi), ranges, classic_input)
            cam = CameraSpec(cam.elevation, cam.azimuth, cam.radius, math.radians(settings.fov_deg))
            img = render(obj, cam, settings)
            rel = os.path.join("images", f"obj{oi:05d}_v{vi:02d}.png")
            save_image(os.path.join(root, rel), img)
            if eval_mode:
                split = "input" if vi == 0 else "eval"
            else:
                split = "train"
            manifest.records.append(
                ViewRecord(
                    object_id=oi,
                    view_id=vi,
                    path=rel,
                    elevation_deg=math.degrees(cam.elevation),
                    azimuth_deg=math.degrees(cam.azimuth),
                    radius=cam.radius,
                    split=split,
                )
            )
    write_manifest(manifest)
    return manifest


def manifest_path(root: str) -> str:
    return os.path.join(root, "manifest.jsonl")


def write_manifest(manifest: DatasetManifest) -> None:
    lines = [
        json.dumps(
            {
                "record": "meta",
                "seed": manifest.seed,
                "objects": manifest.objects,
                "views_per_object": manifest.views_per_object,
                "eval_mode": manifest.eval_mode,
                "classic": manifest.classic,
                "resolution": manifest.settings.resolution,
                "fov_deg": manifest.settings.fov_deg,
                "light_dir": list(manifest.settings.light_dir),
                "background": list(manifest.settings.background),
                "ambient": manifest.settings.ambient,
                "elev_max_deg": manifest.ranges.elev_max_deg,
                "radius_min": manifest.ranges.radius_min,
                "radius_max": manifest.ranges.radius_max,
            },
            sort_keys=True,
        )
    ]
    for r in manifest.records:
        lines.append(
            json.dumps(
                {
                    "record": "view",
                    "object_id": r.object_id,
                    "view_id": r.view_id,
                    "path": r.path,
                    "elevation_deg": r.elevation_deg,
                    "azimuth_deg": r.azimuth_deg,
                    "radius": r.radius,
                    "split": r.split,
                },
                sort_keys=True,
            )
        )
    tmp = manifest_path(manifest.root) + ".tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, manifest_path(manifest.root))


def load_manifest(root: str) -> DatasetManifest:
    root = os.path.abspath(root)
    records: list[ViewRecord] = []
    meta = None
    with open(manifest_path(root)) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if row["record"] == "meta":
                meta = row
            else:
                records.append(
                    ViewRecord(
                        object_id=row["object_id"],
                        view_id=row["view_id"],
                        path=row["path"],
                        elevation_deg=row["elevation_deg"],
                        azimuth_deg=row["azimuth_deg"],
                        radius=row["radius"],
                        split=row["split"],
                    )
                )
    if meta is None:
        raise ValueError(f"manifest at {root} has no meta record")
    settings = RenderSettings(
        resolution=meta["resolution"],
        fov_deg=meta["fov_deg"],
        light_dir=tuple(meta["light_dir"]),
        background=tuple(meta["background"]),
        ambient=meta["ambient"],
    )
    ranges = CameraRanges(
        elev_max_deg=meta["elev_max_deg"],
        radius_min=meta["radius_min"],
        radius_max=meta["radius_max"],
    )
    manifest = DatasetManifest(
        root=root,
        seed=meta["seed"],
        objects=meta["objects"],
        views_per_object=meta["views_per_object"],
        settings=settings,
        ranges=ranges,
        eval_mode=meta["eval_mode"],
        classic=meta["classic"],
        records=records,
    )
    for r in records:
        p = os.path.join(root, r.path)
        if not os.path.exists(p):
            raise FileNotFoundError(f"manifest references missing image {p}")
    return manifest


def dataset_hash(root: str) -> str:
    import hashlib

    with open(manifest_path(root), "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
