"""Paired flare / flare-free sample generation.

A sample is built from a background crop ``B``, a light source ``L``, a
scattering flare ``F_s`` (aligned with ``L``) and a reflective ghost chain
``F_r``. Layers are combined by adding them in linear light:

    GT   = B + L
    x_in = B + L + F_r + F_s

Assets come either from a procedural generator or from a corpus folder laid
out as::

    corpus/backgrounds/*.png
    corpus/flares/scattering/*.png
    corpus/flares/reflective/*.png
    corpus/light/*.png          # paired with scattering/ by sorted order
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy.ndimage import affine_transform, gaussian_filter

from .config import CorpusConfig
from .errors import AssetError, CorpusError, DimensionError, ParameterError
from .imaging import linear_to_srgb, read_png, srgb_to_linear, write_png

SPLITS = {"train": 0, "test": 1}


def composite(parts) -> np.ndarray:
    """Linear-light sum of sRGB layers, clipped and re-encoded to sRGB.

    Values are summed in ascending order per element so the result does not
    depend on the order of ``parts`` (floating-point addition is not
    associative) and exact zeros never perturb the sum.
    """
    parts = [np.asarray(p, dtype=np.float64) for p in parts]
    if not parts:
        raise DimensionError("composite needs at least one layer")
    shape = parts[0].shape
    for p in parts[1:]:
        if p.shape != shape:
            raise DimensionError(f"layer shape mismatch: {shape} vs {p.shape}")
    lin = np.sort(np.stack([srgb_to_linear(p) for p in parts]), axis=0)
    total = lin[0].copy()
    for layer in lin[1:]:
        total += layer
    return linear_to_srgb(np.clip(total, 0.0, 1.0))


# ---------------------------------------------------------------------------
# procedural assets


def _grid(size):
    c = size // 2
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy - c, xx - c


def procedural_flare(kind, params=None, seed=0, size=64) -> np.ndarray:
    """Render a flare layer on a black canvas of ``size`` x ``size``.

    ``kind="scattering"``: glow plus radial streaks centred on the canvas
    centre, which is the brightest pixel by construction.
    ``kind="reflective"``: a chain of ``n_ghosts`` non-overlapping discs or
    hexagons on a line through the canvas centre.

    Both have compact support: pixels outside the pattern are exactly 0.
    ``intensity`` and ``opacity`` are linear-light amplitudes.
    """
    rng = np.random.default_rng(seed)
    p = dict(params or {})
    intensity = float(p.get("intensity", 1.0))
    if not 0.0 <= intensity <= 1.0:
        raise ParameterError(f"intensity must lie in [0, 1], got {intensity}")
    if size < 16:
        raise ParameterError("flare canvas must be at least 16 pixels")
    color = np.asarray(p.get("color", _warm_color(rng)), dtype=np.float64)
    if color.shape != (3,) or color.min() < 0 or color.max() > 1:
        raise ParameterError("color must be three values in [0, 1]")
    color = color / color.max()

    if kind == "scattering":
        n_streaks = int(p.get("n_streaks", rng.integers(4, 9)))
        radius = float(p.get("radius", rng.uniform(0.35, 0.5) * size))
        if n_streaks < 1 or radius <= 2:
            raise ParameterError("scattering flare needs n_streaks >= 1 and radius > 2")
        yy, xx = _grid(size)
        r = np.hypot(yy, xx)
        theta = np.arctan2(yy, xx)
        angles = rng.uniform(0, np.pi, n_streaks)
        sharp = rng.uniform(30, 120, n_streaks)
        weights = rng.uniform(0.4, 1.0, n_streaks)
        streak = np.zeros_like(r)
        for a, k, w in zip(angles, sharp, weights):
            # |cos| of the angular offset; both directions of each streak
            streak = np.maximum(streak, w * np.abs(np.cos(theta - a)) ** k)
        blend = np.exp(-r / 1.5)
        streak = streak * (1.0 - blend) + blend
        glow_w = rng.uniform(0.4, 0.7)
        glow = glow_w * (0.6 * np.exp(-r / (0.08 * radius)) + 0.4 * np.exp(-r / (0.35 * radius)))
        rays = (1.0 - glow_w) * streak * np.exp(-r / (0.6 * radius))
        window = np.clip(1.0 - r / radius, 0.0, None) ** 2
        value = window * (glow + rays)
        value /= value.max()
    elif kind == "reflective":
        n = int(p.get("n_ghosts", rng.integers(2, 5)))
        if not 1 <= n <= 8:
            raise ParameterError(f"n_ghosts must lie in [1, 8], got {n}")
        opacity = p.get("opacity")
        angle = float(p.get("angle", rng.uniform(0, np.pi)))
        shape = p.get("shape", "disc" if rng.random() < 0.6 else "hexagon")
        if shape not in ("disc", "hexagon"):
            raise ParameterError(f"unknown ghost shape {shape!r}")
        yy, xx = _grid(size)
        direction = np.array([np.sin(angle), np.cos(angle)])
        value = np.zeros((size, size))
        # place ghosts along the line, left to right, with gaps between them
        half = 0.45 * size
        radii = rng.uniform(0.04, 0.09, n) * size
        total = 2 * radii.sum()
        gap = (2 * half - total) / (n + 1)
        if gap < 2.0:
            raise ParameterError("ghost chain does not fit on the canvas")
        pos = -half + gap
        for i in range(n):
            centre = (pos + radii[i]) * direction
            pos += 2 * radii[i] + gap
            dy, dx = yy - centre[0], xx - centre[1]
            if shape == "disc":
                dist = np.hypot(dy, dx)
            else:
                # hexagon "radius" via max over three face normals
                ang = np.arange(3) * np.pi / 3
                dist = np.max(np.abs(dy[..., None] * np.sin(ang) + dx[..., None] * np.cos(ang)), axis=-1)
            edge = np.clip((radii[i] - dist) / 1.0, 0.0, 1.0)
            a = float(opacity) if opacity is not None else rng.uniform(0.04, 0.25)
            value = np.maximum(value, a * edge)
    else:
        raise ParameterError(f"unknown flare kind {kind!r}")

    # profiles are defined in linear light
    img = intensity * value[..., None] * color[None, None, :]
    return linear_to_srgb(img)


def _warm_color(rng):
    return np.array([1.0, rng.uniform(0.7, 1.0), rng.uniform(0.5, 0.95)])


def light_source(size=64, seed=0, sigma=None, peak=None) -> np.ndarray:
    """Gaussian blob at the canvas centre, peak >= 0.9 in every channel."""
    rng = np.random.default_rng(seed)
    sigma = float(sigma if sigma is not None else rng.uniform(1.2, 2.5) * size / 64)
    peak = float(peak if peak is not None else rng.uniform(0.92, 1.0))
    if peak < 0.9 or peak > 1.0:
        raise ParameterError("light source peak must lie in [0.9, 1]")
    yy, xx = _grid(size)
    r2 = yy**2 + xx**2
    blob = np.exp(-r2 / (2 * sigma**2))
    blob[r2 > (4 * sigma) ** 2] = 0.0
    # keep every channel's peak at or above 0.9
    tint = np.array([1.0, rng.uniform(0.95, 1.0), rng.uniform(0.9, 1.0)])
    tint = np.maximum(tint, 0.9 / peak)
    return np.clip(peak * blob[..., None] * tint, 0.0, 1.0)


def procedural_background(size=80, seed=0) -> np.ndarray:
    """Dim night-style scene: graded sky, block silhouettes, soft texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    top = rng.uniform(0.02, 0.25, 3)
    bottom = rng.uniform(0.1, 0.45, 3)
    img = top[None, None, :] * (1 - yy[..., None]) + bottom[None, None, :] * yy[..., None]
    # buildings / objects
    for _ in range(rng.integers(2, 6)):
        x0, x1 = np.sort(rng.uniform(0, 1, 2))
        y0 = rng.uniform(0.25, 0.8)
        col = rng.uniform(0.05, 0.5, 3)
        inside = (xx >= x0) & (xx <= x1) & (yy >= y0)
        img[inside] = col
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, 1, 2)
        rad = rng.uniform(0.08, 0.25)
        col = rng.uniform(0.05, 0.55, 3)
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 < rad**2
        img[disk] = col
    img = gaussian_filter(img, sigma=(0.8, 0.8, 0))
    tex = gaussian_filter(rng.normal(0, 1, (size, size)), 2.0)
    tex /= np.abs(tex).max() + 1e-12
    img = img * (1.0 + 0.15 * tex[..., None])
    return np.clip(img, 0.0, 0.7)


# ---------------------------------------------------------------------------
# assets and augmentation


@dataclass
class FlareAssets:
    """Pools of flare layers. ``light[i]`` belongs to ``scattering[i]``."""

    scattering: list
    reflective: list
    light: list
    ids: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.scattering or not self.reflective:
            raise AssetError("flare asset pools must not be empty")
        if len(self.light) != len(self.scattering):
            raise AssetError("each scattering flare needs a matching light source")
        for k in ("scattering", "reflective", "light"):
            self.ids.setdefault(k, [f"{k}/{i:04d}" for i in range(len(getattr(self, k)))])

    @classmethod
    def procedural(cls, n_scattering=32, n_reflective=32, size=64, seed=0):
        ss = np.random.SeedSequence([seed, 7])
        s_seeds, r_seeds, l_seeds = (c.generate_state(max(n_scattering, n_reflective)) for c in ss.spawn(3))
        scat = [procedural_flare("scattering", seed=int(s), size=size) for s in s_seeds[:n_scattering]]
        refl = [procedural_flare("reflective", seed=int(s), size=size) for s in r_seeds[:n_reflective]]
        light = [light_source(size=size, seed=int(s)) for s in l_seeds[:n_scattering]]
        return cls(scat, refl, light)

    @classmethod
    def from_folder(cls, root):
        root = Path(root)
        groups = {
            "scattering": sorted((root / "flares" / "scattering").glob("*.png")),
            "reflective": sorted((root / "flares" / "reflective").glob("*.png")),
            "light": sorted((root / "light").glob("*.png")),
        }
        for k, files in groups.items():
            if not files:
                raise AssetError(f"no {k} PNGs under {root}")
        data = {k: [read_png(f) for f in files] for k, files in groups.items()}
        ids = {k: [f.name for f in files] for k, files in groups.items()}
        return cls(data["scattering"], data["reflective"], data["light"], ids=ids)

    def write(self, root):
        root = Path(root)
        for i, img in enumerate(self.scattering):
            write_png(root / "flares" / "scattering" / f"{i:04d}.png", img)
        for i, img in enumerate(self.light):
            write_png(root / "light" / f"{i:04d}.png", img)
        for i, img in enumerate(self.reflective):
            write_png(root / "flares" / "reflective" / f"{i:04d}.png", img)


@dataclass
class AugmentSpec:
    rotation_deg: float
    scale: float
    translate: tuple
    flip: bool
    flare_gain: float
    crop_origin: tuple
    scattering_index: int
    reflective_index: int

    @classmethod
    def draw(cls, rng, cfg: CorpusConfig, bg_shape, n_scat, n_refl):
        crop = cfg.crop_size
        max_y = bg_shape[0] - crop
        max_x = bg_shape[1] - crop
        t = cfg.translate_frac * crop
        return cls(
            rotation_deg=float(rng.uniform(*cfg.rotation_deg)),
            scale=float(rng.uniform(*cfg.scale)),
            translate=(float(rng.uniform(-t, t)), float(rng.uniform(-t, t))),
            flip=bool(rng.random() < cfg.flip_prob),
            flare_gain=float(rng.uniform(*cfg.flare_gain)),
            crop_origin=(int(rng.integers(0, max_x + 1)), int(rng.integers(0, max_y + 1))),
            scattering_index=int(rng.integers(0, n_scat)),
            reflective_index=int(rng.integers(0, n_refl)),
        )


def warp(img, aug: AugmentSpec, out_size) -> np.ndarray:
    """Rotate/scale/flip about the canvas centre, translate, resample to ``out_size``.

    Bilinear with zero fill, so zero regions stay exactly zero.
    """
    h, w = img.shape[:2]
    th = np.deg2rad(aug.rotation_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]) * aug.scale
    if aug.flip:
        rot = rot @ np.diag([1.0, -1.0])
    inv = np.linalg.inv(rot)
    c_out = np.array([out_size // 2, out_size // 2], dtype=np.float64) + np.array(aug.translate[::-1])
    c_in = np.array([h // 2, w // 2], dtype=np.float64)
    offset = c_in - inv @ c_out
    out = np.empty((out_size, out_size, img.shape[2]))
    for ch in range(img.shape[2]):
        out[..., ch] = affine_transform(img[..., ch], inv, offset=offset, output_shape=(out_size, out_size), order=1, mode="constant", cval=0.0)
    out[out < 1e-12] = 0.0
    return np.clip(out, 0.0, 1.0)


def _gain(img, g):
    return linear_to_srgb(np.clip(srgb_to_linear(img) * g, 0.0, 1.0))


@dataclass
class FlareSample:
    background: np.ndarray
    light_source: np.ndarray
    reflective: np.ndarray
    scattering: np.ndarray
    gt: np.ndarray
    input: np.ndarray
    seed: int
    augment: Optional[AugmentSpec] = None
    background_id: str = ""
    asset_ids: dict = field(default_factory=dict)

    def flare_free(self) -> np.ndarray:
        """(H, W) bool: pixels where both flare layers are zero in every channel."""
        return np.all(self.reflective == 0, axis=-1) & np.all(self.scattering == 0, axis=-1)

    def record(self) -> dict:
        return {
            "seed": int(self.seed),
            "background_id": self.background_id,
            "asset_ids": self.asset_ids,
            "augment": asdict(self.augment) if self.augment else None,
        }


def make_sample(background, assets: FlareAssets, seed, cfg: Optional[CorpusConfig] = None, background_id="") -> FlareSample:
    """Deterministically build one paired sample from ``(background, assets, seed)``."""
    cfg = cfg or CorpusConfig()
    if assets is None:
        raise AssetError("no flare assets supplied")
    background = np.asarray(background, dtype=np.float64)
    crop = cfg.crop_size
    if background.ndim != 3 or background.shape[0] < crop or background.shape[1] < crop:
        raise DimensionError(f"background {background.shape} smaller than crop {crop}")
    rng = np.random.default_rng(seed)
    aug = AugmentSpec.draw(rng, cfg, background.shape, len(assets.scattering), len(assets.reflective))
    x0, y0 = aug.crop_origin
    b = np.clip(background[y0 : y0 + crop, x0 : x0 + crop], 0.0, 1.0)
    f_s = _gain(warp(assets.scattering[aug.scattering_index], aug, crop), aug.flare_gain)
    light = warp(assets.light[aug.scattering_index], aug, crop)
    # ghost chain keeps its own orientation but shares the scale/flip
    refl_aug = AugmentSpec(**{**asdict(aug), "rotation_deg": (aug.rotation_deg * 1.618) % 360.0, "translate": (0.0, 0.0)})
    f_r = _gain(warp(assets.reflective[aug.reflective_index], refl_aug, crop), aug.flare_gain)
    gt = composite([b, light])
    x_in = composite([b, light, f_r, f_s])
    ids = {
        "scattering": assets.ids["scattering"][aug.scattering_index],
        "light": assets.ids["light"][aug.scattering_index],
        "reflective": assets.ids["reflective"][aug.reflective_index],
    }
    return FlareSample(b, light, f_r, f_s, gt, x_in, int(seed), aug, background_id, ids)


# ---------------------------------------------------------------------------
# corpora and streams


class BackgroundPool:
    """Indexable background source split into disjoint train/test pools."""

    def __init__(self, cfg: CorpusConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.files = None
        if cfg.corpus_dir:
            root = Path(cfg.corpus_dir) / "backgrounds"
            if not root.is_dir():
                raise CorpusError(f"background folder {root} does not exist")
            files = sorted(root.glob("*.png"))
            if not files:
                raise CorpusError(f"no PNG backgrounds under {root}")
            self.files = files
            self._by_id = {f.stem: f for f in files}
            split_file = Path(cfg.corpus_dir) / "splits.json"
            if split_file.exists():
                self.ids = json.loads(split_file.read_text())
                missing = [i for ids in self.ids.values() for i in ids if i not in self._by_id]
                if missing:
                    raise CorpusError(f"splits.json names missing backgrounds: {missing[:5]}")
            else:
                order = np.random.default_rng([seed, 11]).permutation(len(files))
                n_test = max(1, int(round(cfg.test_fraction * len(files)))) if len(files) > 1 else 0
                self.ids = {
                    "test": [files[i].stem for i in sorted(order[:n_test])],
                    "train": [files[i].stem for i in sorted(order[n_test:])],
                }
        else:
            n_tr, n_te = cfg.n_train_backgrounds, cfg.n_test_backgrounds
            self.ids = {
                "train": [f"bg{i:05d}" for i in range(n_tr)],
                "test": [f"bg{i:05d}" for i in range(n_tr, n_tr + n_te)],
            }

    def load(self, bg_id) -> np.ndarray:
        if self.files is not None:
            return read_png(self._by_id[bg_id])
        index = int(bg_id[2:])
        return procedural_background(self.cfg.background_size, seed=int(np.random.SeedSequence([self.seed, 3, index]).generate_state(1)[0]))


def load_assets(cfg: CorpusConfig, seed: int) -> FlareAssets:
    if cfg.corpus_dir:
        return FlareAssets.from_folder(cfg.corpus_dir)
    return FlareAssets.procedural(cfg.n_scattering, cfg.n_reflective, size=cfg.crop_size, seed=seed)


def sample_seed(seed, split, index) -> int:
    return int(np.random.SeedSequence([seed, SPLITS[split], index]).generate_state(1)[0])


def dataset_stream(cfg: CorpusConfig, split, seed=0, limit=None, assets=None, offset=0) -> Iterator[FlareSample]:
    """Yield samples for ``split``, cycling through its background pool.

    Sample ``k`` uses background ``k // samples_per_background`` (modulo the pool)
    and seed ``sample_seed(seed, split, k)``. With ``limit=None`` the stream
    covers the pool exactly once. ``offset`` lets parallel workers own disjoint
    index ranges.
    """
    if split not in SPLITS:
        raise ParameterError(f"split must be 'train' or 'test', got {split!r}")
    pool = BackgroundPool(cfg, seed)
    ids = pool.ids[split]
    if not ids:
        raise CorpusError(f"{split} split has no backgrounds")
    assets = assets if assets is not None else load_assets(cfg, seed)
    per = max(1, cfg.samples_per_background)
    total = len(ids) * per if limit is None else int(limit)
    cache = {}
    for k in range(offset, offset + total):
        bg_id = ids[(k // per) % len(ids)]
        if bg_id not in cache:
            cache.clear()
            cache[bg_id] = pool.load(bg_id)
        yield make_sample(cache[bg_id], assets, sample_seed(seed, split, k), cfg, background_id=bg_id)


def write_corpus(cfg: CorpusConfig, root, seed=0) -> Path:
    """Materialize the procedural corpus as PNG folders under ``root``."""
    root = Path(root)
    pool = BackgroundPool(cfg, seed)
    for split in ("train", "test"):
        for bg_id in pool.ids[split]:
            write_png(root / "backgrounds" / f"{bg_id}.png", pool.load(bg_id))
    (root / "splits.json").write_text(json.dumps(pool.ids, indent=1))
    load_assets(cfg, seed).write(root)
    return root


def write_manifest(samples, path) -> None:
    """One JSON line per sample: seed, background id, asset ids, augmentation."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for s in samples:
            fh.write(json.dumps(s.record(), sort_keys=True) + "\n")


def read_manifest(path) -> list:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def regenerate(record: dict, cfg: CorpusConfig, seed=0, assets=None, pool=None) -> FlareSample:
    """Rebuild the sample described by one manifest line."""
    pool = pool or BackgroundPool(cfg, seed)
    assets = assets if assets is not None else load_assets(cfg, seed)
    return make_sample(pool.load(record["background_id"]), assets, record["seed"], cfg, background_id=record["background_id"])
