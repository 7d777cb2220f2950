"""RGB-D samples: normalization, synthetic scene generation, and disk I/O.

Dataset layout on disk:

    root/manifest.json
    root/rgb/<id>.png      8-bit RGB
    root/depth/<id>.png    16-bit grayscale, value v encodes depth v/65535
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_SCHEMA_VERSION = 1


class ManifestError(RuntimeError):
    """Raised when a dataset directory is structurally broken."""


@dataclass
class RgbdSample:
    """An RGB image with an aligned, [0,1]-normalized depth map."""

    rgb: np.ndarray    # H x W x 3 float32 in [0,1]
    depth: np.ndarray  # H x W float32 in [0,1]
    id: str

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"rgb must be HxWx3, got {self.rgb.shape}")
        if self.depth.shape != self.rgb.shape[:2]:
            raise ValueError(
                f"depth shape {self.depth.shape} does not match rgb {self.rgb.shape[:2]}"
            )
        if self.depth.min() < 0 or self.depth.max() > 1:
            raise ValueError("depth values must lie in [0,1]")
        if self.rgb.min() < 0 or self.rgb.max() > 1:
            raise ValueError("rgb values must lie in [0,1]")


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[Path, Path, str]]  # (rgb_path, depth_path, id)
    split: str = "train"

    def __len__(self):
        return len(self.entries)


@dataclass
class SceneSpec:
    """Procedural scene: colored primitives over a background depth gradient."""

    image_size: tuple[int, int] = (112, 112)
    n_objects: int = 6
    object_kinds: tuple[str, ...] = ("box", "sphere")
    depth_range: tuple[float, float] = (0.5, 4.0)
    rng_seed: int = 0
    max_objects: int = 64

    def __post_init__(self):
        z_near, z_far = self.depth_range
        if z_near >= z_far:
            raise ValueError(f"depth_range must satisfy z_near < z_far, got {self.depth_range}")
        if self.n_objects < 0 or self.n_objects > self.max_objects:
            raise ValueError(f"n_objects must be in [0, {self.max_objects}]")
        h, w = self.image_size
        if h <= 0 or w <= 0:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        bad = set(self.object_kinds) - {"box", "sphere"}
        if bad:
            raise ValueError(f"unknown object kinds: {sorted(bad)}")


def normalize_depth(raw_depth: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Linearly map raw depth values to [0,1], clipping to [lo, hi] first."""
    if hi <= lo:
        raise ValueError(f"invalid depth range: hi={hi} must exceed lo={lo}")
    raw = np.asarray(raw_depth, dtype=np.float64)
    return ((np.clip(raw, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def _background_plane(h: int, w: int, z_near: float, z_far: float) -> np.ndarray:
    # tilted plane: depth increases linearly from bottom row (near) to top row (far)
    rows = np.linspace(z_far, z_near, h, dtype=np.float64)
    return np.repeat(rows[:, None], w, axis=1)


def _object_surface_depth(obj: dict, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Per-pixel surface depth of one primitive; +inf where the pixel misses it."""
    z = np.full(ys.shape, np.inf)
    if obj["kind"] == "box":
        inside = (
            (np.abs(xs - obj["cx"]) <= obj["rx"])
            & (np.abs(ys - obj["cy"]) <= obj["ry"])
        )
        z[inside] = obj["z"]
    else:  # sphere: spherical cap bulging toward the camera
        d2 = (xs - obj["cx"]) ** 2 + (ys - obj["cy"]) ** 2
        inside = d2 <= obj["r"] ** 2
        bulge = np.sqrt(np.maximum(obj["r"] ** 2 - d2, 0.0)) * obj["bulge_scale"]
        z[inside] = (obj["z"] - bulge)[inside]
    return z


def _sample_objects(spec: SceneSpec, rng: np.random.Generator) -> list[dict]:
    h, w = spec.image_size
    z_near, z_far = spec.depth_range
    objects = []
    for _ in range(spec.n_objects):
        kind = spec.object_kinds[rng.integers(len(spec.object_kinds))]
        color = rng.uniform(0.2, 1.0, size=3)
        # keep object colors saturated so they stay distinct from the gray background
        color[rng.integers(3)] = rng.uniform(0.0, 0.15)
        obj = {
            "kind": kind,
            "cx": float(rng.uniform(0, w)),
            "cy": float(rng.uniform(0, h)),
            "z": float(rng.uniform(z_near + 0.1 * (z_far - z_near), z_far)),
            "color": color.astype(np.float32),
        }
        if kind == "box":
            obj["rx"] = float(rng.uniform(0.05, 0.2) * w)
            obj["ry"] = float(rng.uniform(0.05, 0.2) * h)
        else:
            obj["r"] = float(rng.uniform(0.05, 0.18) * min(h, w))
            obj["bulge_scale"] = float(0.05 * (z_far - z_near) / max(obj["r"], 1e-6))
        objects.append(obj)
    return objects


def generate_scene(spec: SceneSpec, objects: list[dict] | None = None) -> RgbdSample:
    """Render an orthographic scene of primitives with a nearest-surface z-buffer.

    Deterministic for a fixed ``spec.rng_seed``. ``objects`` overrides the random
    object placement (used by tests with hand-built layouts).
    """
    h, w = spec.image_size
    z_near, z_far = spec.depth_range
    rng = np.random.default_rng(spec.rng_seed)
    if objects is None:
        objects = _sample_objects(spec, rng)

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    zbuf = _background_plane(h, w, z_near, z_far)
    # mildly textured gray background so crops are never featureless
    tex = rng.uniform(-0.03, 0.03, size=(h, w))
    base = 0.55 + 0.1 * (zbuf - z_near) / (z_far - z_near) + tex
    rgb = np.repeat(base[:, :, None], 3, axis=2)

    for obj in objects:
        z = _object_surface_depth(obj, ys, xs)
        nearer = z < zbuf
        zbuf = np.where(nearer, z, zbuf)
        rgb[nearer] = obj["color"]

    depth = normalize_depth(zbuf, z_near, z_far)
    return RgbdSample(
        rgb=np.clip(rgb, 0.0, 1.0).astype(np.float32),
        depth=depth,
        id=f"scene_{spec.rng_seed:08d}",
    )


def save_sample(sample: RgbdSample, root: Path) -> tuple[Path, Path]:
    """Write one sample as 8-bit RGB + 16-bit depth PNGs under ``root``."""
    root = Path(root)
    rgb_dir = root / "rgb"
    depth_dir = root / "depth"
    rgb_dir.mkdir(parents=True, exist_ok=True)
    depth_dir.mkdir(parents=True, exist_ok=True)

    rgb_path = rgb_dir / f"{sample.id}.png"
    depth_path = depth_dir / f"{sample.id}.png"
    rgb8 = np.round(sample.rgb * 255.0).astype(np.uint8)
    Image.fromarray(rgb8, mode="RGB").save(rgb_path)
    depth16 = np.round(sample.depth.astype(np.float64) * 65535.0).astype(np.uint16)
    Image.fromarray(depth16).save(depth_path)
    return rgb_path, depth_path


def write_manifest(root: Path, ids: list[str], split: str = "train") -> Path:
    root = Path(root)
    payload = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "split": split,
        "entries": [
            {"id": i, "rgb": f"rgb/{i}.png", "depth": f"depth/{i}.png"} for i in sorted(ids)
        ],
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(payload, indent=2))
    return path


def load_manifest(root: Path, split: str = "train") -> DatasetManifest:
    """Load a dataset manifest, falling back to paired rgb/ and depth/ directories."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        payload = json.loads(manifest_path.read_text())
        entries = []
        for e in payload["entries"]:
            rgb_path = root / e["rgb"]
            depth_path = root / e["depth"]
            for p in (rgb_path, depth_path):
                if not p.exists():
                    raise ManifestError(f"manifest references missing file: {p}")
            entries.append((rgb_path, depth_path, e["id"]))
        ids = [e[2] for e in entries]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate ids in manifest")
        entries.sort(key=lambda e: e[2])
        if not entries:
            warnings.warn(f"empty manifest at {manifest_path}")
        return DatasetManifest(root=root, entries=entries, split=payload.get("split", split))

    rgb_dir = root / "rgb"
    depth_dir = root / "depth"
    if not rgb_dir.is_dir() or not depth_dir.is_dir():
        raise ManifestError(
            f"{root} has neither manifest.json nor rgb/ + depth/ subdirectories"
        )
    rgb_stems = {p.stem: p for p in rgb_dir.iterdir() if p.is_file()}
    depth_stems = {p.stem: p for p in depth_dir.iterdir() if p.is_file()}
    orphans = sorted(set(rgb_stems) ^ set(depth_stems))
    if orphans:
        raise ManifestError(f"unpaired rgb/depth stems: {orphans}")
    entries = [(rgb_stems[s], depth_stems[s], s) for s in sorted(rgb_stems)]
    if not entries:
        warnings.warn(f"no samples found under {root}")
    return DatasetManifest(root=root, entries=entries, split=split)


def load_sample(
    rgb_path: Path,
    depth_path: Path,
    sample_id: str,
    depth_lo: float = 0.0,
    depth_hi: float = 65535.0,
) -> RgbdSample:
    """Read one sample from disk.

    Depth may be a 16-bit grayscale image (raw value interpreted via
    (depth_lo, depth_hi); the native format stores normalized depth with
    lo=0, hi=65535) or a raw float .npy array, assumed already in [0,1].
    """
    rgb = np.asarray(Image.open(rgb_path).convert("RGB"), dtype=np.float32) / 255.0
    depth_path = Path(depth_path)
    if depth_path.suffix == ".npy":
        depth = np.load(depth_path).astype(np.float32)
        depth = np.clip(depth, 0.0, 1.0)
    else:
        raw = np.asarray(Image.open(depth_path), dtype=np.float64)
        depth = normalize_depth(raw, depth_lo, depth_hi)
    return RgbdSample(rgb=rgb, depth=depth, id=sample_id)


def generate_dataset(
    out_root: Path,
    count: int,
    seed: int,
    spec: SceneSpec | None = None,
    split: str = "train",
) -> DatasetManifest:
    """Generate ``count`` synthetic samples plus a manifest under ``out_root``.

    Each sample's stream derives from (seed, index) so generation order and
    parallelism cannot change the output.
    """
    base = spec or SceneSpec()
    ids = []
    for i in range(count):
        sample_spec = SceneSpec(
            image_size=base.image_size,
            n_objects=base.n_objects,
            object_kinds=base.object_kinds,
            depth_range=base.depth_range,
            rng_seed=seed * 1_000_003 + i,
        )
        sample = generate_scene(sample_spec)
        sample.id = f"{split}_{i:06d}"
        save_sample(sample, out_root)
        ids.append(sample.id)
    write_manifest(out_root, ids, split=split)
    return load_manifest(out_root, split=split)
