"""Procedural stereo/temporal scenes with exact ground truth.

Scenes are built from textured planes (a ground plane, a far backdrop and a
few slanted rectangular patches).  Every view is ray cast against the same
surfaces and textures live in surface coordinates, so left, right and
temporal frames are photometrically consistent wherever a point is visible.
The left camera at time ``t`` defines the world frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import fileio
from .geometry import DepthMap, ImageFrame, Intrinsics, Pose

VIEWS = ("left", "right", "prev", "next")


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    num_primitives: int = 4
    depth_range: Tuple[float, float] = (2.0, 20.0)
    texture_octaves: int = 3
    baseline: float = 0.2
    ego_motion: Optional[Pose] = None
    width: int = 64
    height: int = 64
    focal: float = 48.0

    def __post_init__(self):
        near, far = self.depth_range
        if near <= 0 or far <= near:
            raise ValueError("depth_range must satisfy 0 < near < far")
        if self.baseline < 0:
            raise ValueError("baseline must be non-negative")
        if self.num_primitives < 0 or self.texture_octaves < 1:
            raise ValueError("need num_primitives >= 0 and texture_octaves >= 1")

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, (self.width - 1) / 2, (self.height - 1) / 2,
                          self.width, self.height)

    def to_dict(self) -> dict:
        return dict(seed=self.seed, num_primitives=self.num_primitives,
                    depth_range=list(self.depth_range), texture_octaves=self.texture_octaves,
                    baseline=self.baseline,
                    ego_motion=None if self.ego_motion is None else self.ego_motion.to_dict(),
                    width=self.width, height=self.height, focal=self.focal)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        if d.get("ego_motion") is not None:
            d["ego_motion"] = Pose.from_dict(d["ego_motion"])
        if "depth_range" in d:
            d["depth_range"] = tuple(d["depth_range"])
        return cls(**d)


class _Texture:
    """Multi-octave RGB value noise on a periodic lattice."""

    def __init__(self, rng: np.random.Generator, octaves: int, cell: float, lattice: int = 64,
                 stretch: float = 1.0):
        self.cell = cell
        self.stretch = stretch
        self.lattices = [rng.random((lattice, lattice, 3)) for _ in range(octaves)]
        self.base = rng.uniform(0.25, 0.75, size=3)
        self.contrast = rng.uniform(0.5, 0.9)

    def __call__(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        acc = np.zeros(s.shape + (3,))
        amp, total = 1.0, 0.0
        for k, lat in enumerate(self.lattices):
            L = lat.shape[0]
            c = self.cell / 2 ** k
            x, y = s / c, t / (c * self.stretch)
            x0, y0 = np.floor(x), np.floor(y)
            fx, fy = x - x0, y - y0
            fx = (fx * fx * (3 - 2 * fx))[..., None]
            fy = (fy * fy * (3 - 2 * fy))[..., None]
            i0, j0 = x0.astype(np.int64) % L, y0.astype(np.int64) % L
            i1, j1 = (i0 + 1) % L, (j0 + 1) % L
            top = lat[j0, i0] * (1 - fx) + lat[j0, i1] * fx
            bot = lat[j1, i0] * (1 - fx) + lat[j1, i1] * fx
            acc += amp * (top * (1 - fy) + bot * fy)
            total += amp
            amp *= 0.5
        return np.clip(self.base + self.contrast * (acc / total - 0.5), 0.0, 1.0)


@dataclass
class _Plane:
    normal: np.ndarray        # unit normal
    point: np.ndarray         # a point on the plane; centre for bounded patches
    axes: np.ndarray          # (2, 3) orthonormal in-plane directions
    texture: _Texture
    half_extent: Optional[Tuple[float, float]] = None
    # Maps world points to texture coordinates; in-plane axes by default.
    coords: Optional[Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]] = None

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - origin) @ self.normal) / denom
        t = np.where(np.abs(denom) > 1e-12, t, np.inf)
        t = np.where(t > 1e-9, t, np.inf)
        if self.half_extent is not None:
            local = (origin + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs - self.point) @ self.axes.T
            inside = (np.abs(local[:, 0]) <= self.half_extent[0]) & (np.abs(local[:, 1]) <= self.half_extent[1])
            t = np.where(inside, t, np.inf)
        return t

    def shade(self, points: np.ndarray) -> np.ndarray:
        if self.coords is not None:
            return self.texture(*self.coords(points))
        local = (points - self.point) @ self.axes.T
        return self.texture(local[:, 0], local[:, 1])


def _plane_axes(normal: np.ndarray) -> np.ndarray:
    helper = np.array([0.0, 1.0, 0.0]) if abs(normal[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(helper, normal)
    e1 /= np.linalg.norm(e1)
    return np.stack([e1, np.cross(normal, e1)])


def _cell_size(depth: float, focal: float, octaves: int, min_pixels: float = 3.0) -> float:
    # The finest octave spans at least `min_pixels` pixels at `depth`, which
    # keeps bilinear resampling of rendered views close to the true surface.
    return min_pixels * depth / focal * 2 ** (octaves - 1)


def _ground_coords(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    z = np.maximum(points[:, 2], 1e-3)
    return points[:, 0] / z, np.log(z)


def _build_scene(spec: SceneSpec, rng: np.random.Generator) -> List[_Plane]:
    near, far = spec.depth_range
    K = spec.intrinsics
    ray_x = max(K.cx, K.width - 1 - K.cx) / K.fx
    ray_y = max(K.cy, K.height - 1 - K.cy) / K.fy
    octaves = spec.texture_octaves
    planes: List[_Plane] = []

    # Backdrop: nearly fronto-parallel, depth kept inside [near, far] over the
    # whole frustum by bounding its tilt.
    max_tilt = 0.15
    denom_lo = 1 - max_tilt * (ray_x + ray_y)
    denom_hi = 1 + max_tilt * (ray_x + ray_y)
    z_hi = 0.95 * far * denom_lo
    z_lo = max(near * denom_hi, 0.6 * z_hi)
    zb = rng.uniform(z_lo, z_hi)
    a, b = rng.uniform(-max_tilt, max_tilt, size=2)
    n = np.array([a, b, -1.0])
    n /= np.linalg.norm(n)
    planes.append(_Plane(n, np.array([0.0, 0.0, zb]), _plane_axes(n),
                         _Texture(rng, octaves, cell=_cell_size(zb, K.fx, octaves))))

    # Ground plane, low enough that its nearest visible point stays beyond `near`.
    cam_height = max(rng.uniform(1.4, 1.8), near * ray_y * 1.05)
    n = np.array([0.0, -1.0, 0.0])
    # A world-space texture in (x / z, log z) keeps roughly constant detail
    # per pixel from the nearest ground row to the horizon; a plain planar
    # texture is either blurry up close or aliased far away.
    cell = _cell_size(1.0, K.fx, octaves)
    planes.append(_Plane(n, np.array([0.0, cam_height, 0.0]), np.array([[1.0, 0, 0], [0, 0, 1.0]]),
                         _Texture(rng, octaves, cell=cell, stretch=zb / cam_height),
                         coords=_ground_coords))

    for _ in range(spec.num_primitives):
        half = rng.uniform(0.3, 1.5, size=2)
        reach = float(np.hypot(*half))
        z_c = rng.uniform(near + reach + 0.1, max(near + reach + 0.2, 0.6 * far))
        x_c = rng.uniform(-0.8, 0.8) * ray_x * z_c
        y_c = rng.uniform(-0.8, 0.5) * ray_y * z_c
        tilt = np.tan(rng.uniform(-0.7, 0.7, size=2))
        n = np.array([tilt[0], tilt[1], -1.0])
        n /= np.linalg.norm(n)
        planes.append(_Plane(n, np.array([x_c, y_c, z_c]), _plane_axes(n),
                             _Texture(rng, octaves, cell=_cell_size(z_c + reach, K.fx, octaves)), tuple(half)))
    return planes


def _cast(planes: List[_Plane], origin: np.ndarray, dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    hits = np.stack([p.intersect(origin, dirs) for p in planes])
    idx = np.argmin(hits, axis=0)
    return hits[idx, np.arange(dirs.shape[0])], idx


def _render(planes, K: Intrinsics, pose: Pose, uv: Optional[np.ndarray] = None):
    """Ray cast a view whose camera maps world points by ``pose``.

    Returns colours ``(N, 3)``, depth in the view camera ``(N,)`` and the
    world points hit.  ``uv`` defaults to every pixel centre.
    """
    if uv is None:
        v, u = np.indices((K.height, K.width), dtype=np.float64)
        uv = np.stack([u.ravel(), v.ravel()], axis=1)
    rays = np.stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy, np.ones(len(uv))], axis=1)
    R, t = pose.rotation, pose.translation
    origin = -R.T @ t
    dirs = rays @ R            # rows are R^T @ ray
    depth, idx = _cast(planes, origin, dirs)
    points = origin + depth[:, None] * dirs
    colours = np.zeros((len(uv), 3))
    for k, plane in enumerate(planes):
        sel = idx == k
        if sel.any():
            colours[sel] = plane.shade(points[sel])
    return colours, depth, points


def _visibility(planes, K: Intrinsics, pose: Pose, world_points: np.ndarray) -> np.ndarray:
    """True where ``world_points`` are seen unoccluded and in frame by the posed camera."""
    cam = world_points @ pose.rotation.T + pose.translation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([K.fx * cam[:, 0] / z + K.cx, K.fy * cam[:, 1] / z + K.cy], axis=1)
    inside = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= K.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= K.height - 1)
    visible = np.zeros(len(z), dtype=bool)
    if inside.any():
        _, seen, _ = _render(planes, K, pose, uv[inside])
        visible[inside] = np.abs(seen - z[inside]) <= 1e-6 * np.maximum(z[inside], 1.0)
    return visible


def _random_ego_motion(rng: np.random.Generator) -> Pose:
    # Camera advances 0.1 m along its optical axis with a small random rotation.
    R = Pose.from_axis_angle(rng.normal(0.0, 0.01, size=3), np.zeros(3)).rotation
    return Pose(R, -R @ np.array([0.0, 0.0, 0.1]))


@dataclass
class Sample:
    left: ImageFrame
    right: ImageFrame
    prev: ImageFrame
    next: ImageFrame
    depth: DepthMap
    poses: Dict[str, Pose]
    visible: Dict[str, np.ndarray] = field(default_factory=dict)

    def view(self, name: str) -> ImageFrame:
        return getattr(self, name)


def render_sample(spec: SceneSpec, index: int) -> Sample:
    """Render the stereo pair and temporal triplet for sample ``index``.

    ``poses[view]`` maps left camera (time t) coordinates into ``view``'s
    camera; ``visible[view]`` marks left pixels that are unoccluded and in
    frame in that view.
    """
    rng = np.random.default_rng([spec.seed, index])
    K = spec.intrinsics
    planes = _build_scene(spec, rng)
    ego = spec.ego_motion if spec.ego_motion is not None else _random_ego_motion(rng)
    poses = {
        "left": Pose.identity(),
        "right": Pose(np.eye(3), np.array([-spec.baseline, 0.0, 0.0])),
        "next": ego,
        "prev": ego.inverse(),
    }
    h, w = K.height, K.width
    frames, visible = {}, {}
    colours, depth, points = _render(planes, K, poses["left"])
    frames["left"] = colours.reshape(h, w, 3)
    for view in ("right", "prev", "next"):
        frames[view] = _render(planes, K, poses[view])[0].reshape(h, w, 3)
        visible[view] = _visibility(planes, K, poses[view], points).reshape(h, w)
    near, far = spec.depth_range
    return Sample(
        left=ImageFrame(frames["left"], K, poses["left"]),
        right=ImageFrame(frames["right"], K, poses["right"]),
        prev=ImageFrame(frames["prev"], K, poses["prev"]),
        next=ImageFrame(frames["next"], K, poses["next"]),
        depth=DepthMap(depth.reshape(h, w), (near, far)),
        poses=poses,
        visible=visible,
    )


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass
class Dataset:
    """Stacked samples ready for training and evaluation.

    ``images[view]`` is ``(N, H, W, 3)`` float32 in [0, 1]; ``poses[view]`` is
    ``(N, 4, 4)`` mapping the left camera into ``view``.
    """

    ids: List[str]
    images: Dict[str, np.ndarray]
    depth: np.ndarray
    poses: Dict[str, np.ndarray]
    visible: Dict[str, np.ndarray]
    intrinsics: Intrinsics
    split: List[str]
    depth_range: Tuple[float, float] = (2.0, 20.0)
    content_hash: str = ""

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def train_indices(self) -> List[int]:
        return [i for i, s in enumerate(self.split) if s == "train"]

    @property
    def test_indices(self) -> List[int]:
        return [i for i, s in enumerate(self.split) if s == "test"]

    def frame(self, i: int, view: str = "left") -> ImageFrame:
        return ImageFrame(self.images[view][i], self.intrinsics, Pose.from_matrix(self.poses[view][i]))

    def depth_map(self, i: int) -> DepthMap:
        return DepthMap(self.depth[i], self.depth_range)


def _split(count: int) -> List[str]:
    n_train = (count * 4) // 5
    return ["train" if i < n_train else "test" for i in range(count)]


def _sample_id(index: int) -> str:
    return f"{index:06d}"


def generate_dataset(spec: SceneSpec, count: int) -> Dataset:
    """Render ``count`` samples in memory, 8-bit quantised like their files."""
    samples = [render_sample(spec, i) for i in range(count)]
    ds = Dataset(
        ids=[_sample_id(i) for i in range(count)],
        images={v: np.stack([fileio.quantize(s.view(v).pixels) for s in samples]) for v in VIEWS},
        depth=np.stack([s.depth.values.astype(np.float32) for s in samples]),
        poses={v: np.stack([s.poses[v].matrix() for s in samples]) for v in VIEWS},
        visible={v: np.stack([s.visible[v] for s in samples]) for v in VIEWS if v != "left"},
        intrinsics=spec.intrinsics,
        split=_split(count),
        depth_range=tuple(spec.depth_range),
    )
    ds.content_hash = _content_hash(ds)
    return ds


def _content_hash(ds: Dataset) -> str:
    """Hash of pixels and depth; identical for in-memory and loaded datasets."""
    return fileio.sha256_bytes(b"".join(
        [np.ascontiguousarray(ds.images[v], dtype=np.float32).tobytes() for v in VIEWS]
        + [np.ascontiguousarray(ds.depth, dtype=np.float32).tobytes()]))


def write_dataset(spec: SceneSpec, count: int, out_dir) -> dict:
    """Render ``count`` samples into ``out_dir`` and return the manifest."""
    out = Path(out_dir)
    for sub in ("images", "depth", "visibility", "poses"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    split = _split(count)
    entries = []
    for i in range(count):
        s = render_sample(spec, i)
        sid = _sample_id(i)
        files = {}
        for v in VIEWS:
            files[v] = f"images/{sid}_{v}.png"
            fileio.write_image(out / files[v], s.view(v).pixels)
        files["depth"] = f"depth/{sid}.uqdm"
        fileio.write_map(out / files["depth"], s.depth.values)
        for v, mask in s.visible.items():
            files[f"visible_{v}"] = f"visibility/{sid}_{v}.uqdm"
            fileio.write_map(out / files[f"visible_{v}"], mask.astype(np.float32))
        files["poses"] = f"poses/{sid}.json"
        fileio.write_json(out / files["poses"], {v: p.to_dict() for v, p in s.poses.items()})
        entries.append({"id": sid, "split": split[i], "files": files})
    hashes = fileio.hash_tree(out, exclude=("manifest.json",))
    manifest = {
        "format": "monouq-dataset/1",
        "spec": spec.to_dict(),
        "intrinsics": spec.intrinsics.to_dict(),
        "count": count,
        "entries": entries,
        "files": hashes,
        "dataset_hash": fileio.sha256_bytes("".join(f"{k}:{v}\n" for k, v in hashes.items()).encode()),
    }
    fileio.write_json(out / "manifest.json", manifest)
    return manifest


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = fileio.read_json(root / "manifest.json")
    entries = manifest["entries"]
    for rel, digest in manifest["files"].items():
        if not (root / rel).is_file():
            raise FileNotFoundError(f"dataset file missing: {rel}")
        if fileio.sha256_file(root / rel) != digest:
            raise ValueError(f"dataset file corrupt (hash mismatch): {rel}")
    images = {v: np.stack([fileio.read_image(root / e["files"][v]) for e in entries]) for v in VIEWS}
    poses = {v: [] for v in VIEWS}
    for e in entries:
        record = fileio.read_json(root / e["files"]["poses"])
        for v in VIEWS:
            poses[v].append(Pose.from_dict(record[v]).matrix())
    spec = manifest["spec"]
    ds = Dataset(
        ids=[e["id"] for e in entries],
        images=images,
        depth=np.stack([fileio.read_map(root / e["files"]["depth"]) for e in entries]),
        poses={v: np.stack(p) for v, p in poses.items()},
        visible={v: np.stack([fileio.read_map(root / e["files"][f"visible_{v}"]) > 0.5 for e in entries])
                 for v in VIEWS if v != "left"},
        intrinsics=Intrinsics(**manifest["intrinsics"]),
        split=[e["split"] for e in entries],
        depth_range=tuple(spec["depth_range"]),
    )
    ds.content_hash = _content_hash(ds)
    return ds
