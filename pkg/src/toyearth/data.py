"""Procedural "Toy-Earth" tile generator: images, captions, metadata.

Six scene classes rendered at a fixed pixel size but varying ground
resolution (meters per pixel). Object pixel size follows a closed-form
law so scale behaviour can be checked exactly:

    pixel_diameter = round_half_up(object_physical_size_m / resolution)

clamped to [1, tile_px]. Everything is a pure function of the spec seed,
so the whole corpus is reproducible bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .seeding import derive_seed, rng

GENERATOR_VERSION = "toyearth-data-1"

TILE_PX = 32

SCENE_CLASSES = ("forest", "water", "urban", "farmland", "desert", "storage_tanks")
RESOLUTIONS = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0)
MODALITIES = ("RGB", "NIR", "PAN", "LOWRES", "FOG")
SPLITS = ("train", "val", "test")

# Physical object sizes in meters; fixed per class so resolution -> pixel
# size is a closed-form check.
OBJECT_SIZE_M = {"storage_tanks": 10.0, "urban": 12.0, "farmland": 12.0}

# Object fill colors, small named palette.
PALETTE = {
    "white": (0.92, 0.92, 0.90),
    "silver": (0.78, 0.80, 0.82),
    "gray": (0.60, 0.60, 0.62),
    "red": (0.62, 0.20, 0.18),
    "green": (0.28, 0.58, 0.18),
    "yellow_green": (0.48, 0.62, 0.20),
}

CLASS_COLORS = {
    "storage_tanks": ("white", "silver"),
    "urban": ("white", "gray", "red"),
    "farmland": ("green", "yellow_green"),
    "forest": ("green",),
    "water": ("green",),
    "desert": ("green",),
}

BACKGROUNDS = {
    "forest": (0.10, 0.34, 0.12),
    "water": (0.10, 0.22, 0.55),
    "urban": (0.30, 0.30, 0.32),
    "farmland": (0.48, 0.36, 0.22),
    "desert": (0.72, 0.62, 0.42),
    "storage_tanks": (0.66, 0.56, 0.40),
}

COUNT_WORDS = ("one", "two", "three", "four", "five")
MAX_COUNT = {"storage_tanks": 5, "urban": 5, "farmland": 4}


@dataclass(frozen=True)
class TileSpec:
    """Procedural description of one tile; fully determined by its fields."""

    seed: int
    scene_class: str
    resolution_m_per_px: float
    object_count: int
    object_color: str
    geo: tuple[float, float]
    tile_px: int = TILE_PX


@dataclass
class TileRecord:
    image: np.ndarray
    caption: str
    resolution_m_per_px: float
    scene_class: str
    geo: tuple[float, float]
    modality: str = "RGB"


def pixel_diameter(size_m: float, resolution: float, tile_px: int = TILE_PX) -> int:
    """Object size law: round-half-up of meters/resolution, clamped to tile."""
    return int(min(max(math.floor(size_m / resolution + 0.5), 1), tile_px))


def _grid_capacity(d: int, tile_px: int) -> tuple[int, int]:
    """Cells per axis and cell size for non-overlapping object placement."""
    cell = d + 3
    g = max(1, tile_px // cell)
    return g, cell


def sample_spec(
    rng_seed: int,
    scene_override: str | None = None,
    resolution_override: float | None = None,
    tile_px: int = TILE_PX,
) -> TileSpec:
    """Draw a TileSpec; geo comes from a fixed synthetic world map whose
    longitude bands bias the scene class prior."""
    if scene_override is not None and scene_override not in SCENE_CLASSES:
        raise ValueError(
            f"invalid scene_override {scene_override!r}; must be one of {SCENE_CLASSES}"
        )
    if resolution_override is not None and resolution_override not in RESOLUTIONS:
        raise ValueError(
            f"invalid resolution_override {resolution_override!r}; must be one of {RESOLUTIONS}"
        )
    r = rng(rng_seed, "spec")
    lon = float(r.uniform(-180.0, 180.0))
    lat = float(r.uniform(-60.0, 75.0))
    # One 60-degree band per class: home class gets weight 0.5, the rest
    # 0.1 each, so the marginal over uniform longitude is exactly uniform.
    band = min(int((lon + 180.0) // 60.0), 5)
    weights = np.full(len(SCENE_CLASSES), 0.1)
    weights[band] = 0.5
    scene = str(r.choice(SCENE_CLASSES, p=weights))
    if scene_override is not None:
        scene = scene_override
    resolution = float(r.choice(RESOLUTIONS))
    if resolution_override is not None:
        resolution = float(resolution_override)
    color = str(r.choice(CLASS_COLORS[scene]))
    if scene in OBJECT_SIZE_M:
        d = pixel_diameter(OBJECT_SIZE_M[scene], resolution, tile_px)
        g, _ = _grid_capacity(d, tile_px)
        cap = min(MAX_COUNT[scene], g * g)
        count = int(r.integers(1, cap + 1))
    else:
        count = 0
    return TileSpec(
        seed=int(rng_seed),
        scene_class=scene,
        resolution_m_per_px=resolution,
        object_count=count,
        object_color=color,
        geo=(lat, lon),
        tile_px=tile_px,
    )


def _block_noise(r: np.random.Generator, n: int, block: int, amp: float) -> np.ndarray:
    """Value noise with resolution-scaled granularity, in [-amp, amp]."""
    g = -(-n // block)
    vals = r.uniform(-amp, amp, size=(g, g))
    return np.repeat(np.repeat(vals, block, axis=0), block, axis=1)[:n, :n]


def _texture_block(spec: TileSpec, element_m: float, cap: int = 8) -> int:
    return int(min(max(round(element_m / spec.resolution_m_per_px), 1), cap))


def _polyline_mask(r: np.random.Generator, n: int, width: int) -> np.ndarray:
    """Mask of a meandering line crossing the tile left to right."""
    xs = np.arange(n)
    knots = r.uniform(0.2 * n, 0.8 * n, size=4)
    ys = np.interp(xs, np.linspace(0, n - 1, 4), knots)
    yy = np.arange(n)[:, None]
    half = width / 2.0
    return np.abs(yy - ys[None, :]) <= half


def _object_positions(spec: TileSpec, d: int) -> list[tuple[int, int]]:
    """Non-overlapping top-left corners on a jittered grid (>=2px gaps)."""
    n = spec.tile_px
    g, cell = _grid_capacity(d, n)
    r = rng(spec.seed, "place")
    cells = list(range(g * g))
    r.shuffle(cells)
    jitter_max = max(cell - d - 2, 0)
    out = []
    for c in cells[: spec.object_count]:
        ci, cj = divmod(c, g)
        jy = int(r.integers(0, jitter_max + 1)) if jitter_max else 0
        jx = int(r.integers(0, jitter_max + 1)) if jitter_max else 0
        out.append((min(ci * cell + jy, n - d), min(cj * cell + jx, n - d)))
    return out


def _disc_stamp(d: int) -> np.ndarray:
    c = (d - 1) / 2.0
    yy, xx = np.mgrid[0:d, 0:d]
    return (yy - c) ** 2 + (xx - c) ** 2 <= (d / 2.0) ** 2


def render_tile(spec: TileSpec) -> np.ndarray:
    """Render the RGB image for a spec; values in [0, 1], float32."""
    n = spec.tile_px
    r = rng(spec.seed, "render")
    base = np.array(BACKGROUNDS[spec.scene_class], dtype=np.float64)
    img = np.broadcast_to(base, (n, n, 3)).copy()

    if spec.scene_class == "forest":
        block = _texture_block(spec, 4.0)
        img[..., 1] += _block_noise(r, n, block, 0.06)
        img[..., 0] += _block_noise(r, n, block, 0.03)
        img[..., 2] += _block_noise(r, n, block, 0.03)
    elif spec.scene_class == "water":
        phase = r.uniform(0, 2 * np.pi)
        freq = r.uniform(0.3, 0.8)
        yy = np.arange(n)[:, None] + 0.3 * np.arange(n)[None, :]
        wave = 0.03 * np.sin(freq * yy + phase)
        img += wave[..., None]
        if r.random() < 0.5:  # occasional brighter current streak
            width = pixel_diameter(8.0, spec.resolution_m_per_px, 6)
            streak = _polyline_mask(r, n, width)
            img[streak] += np.array([0.02, 0.06, 0.08])
    elif spec.scene_class == "desert":
        block = _texture_block(spec, 6.0)
        dune = _block_noise(r, n, block, 0.05)
        img += dune[..., None]
    elif spec.scene_class == "storage_tanks":
        block = _texture_block(spec, 6.0)
        img += _block_noise(r, n, block, 0.04)[..., None]
    elif spec.scene_class == "urban":
        block = _texture_block(spec, 8.0)
        img += _block_noise(r, n, block, 0.04)[..., None]
        width = pixel_diameter(6.0, spec.resolution_m_per_px, 6)
        road = _polyline_mask(r, n, width)
        img[road] = np.array([0.22, 0.22, 0.24]) + r.uniform(-0.01, 0.01)
    elif spec.scene_class == "farmland":
        block = _texture_block(spec, 8.0)
        img += _block_noise(r, n, block, 0.04)[..., None]

    if spec.object_count > 0:
        d = pixel_diameter(OBJECT_SIZE_M[spec.scene_class], spec.resolution_m_per_px, n)
        color = np.array(PALETTE[spec.object_color], dtype=np.float64)
        shade = rng(spec.seed, "shade")
        for y, x in _object_positions(spec, d):
            tint = color + shade.uniform(-0.02, 0.02, size=3)
            if spec.scene_class == "storage_tanks":
                stamp = _disc_stamp(d)
                img[y : y + d, x : x + d][stamp] = tint
            else:
                h = max(int(round(d * shade.uniform(0.6, 1.0))), 1)
                img[y : y + h, x : x + d] = tint

    return np.clip(img, 0.0, 1.0).astype(np.float32)


_TEMPLATES = {
    "storage_tanks": (
        "{count} {color} storage {tank_word} on a piece of bare land",
        "an aerial view of {count} {color} storage {tank_word} in a dusty industrial yard",
        "{count} round {color} storage {tank_word} standing on open bare ground",
    ),
    "forest": (
        "a dense forest of dark green trees seen from above",
        "thick forest canopy covering the whole area with deep green foliage",
        "an aerial view of a deep green forest with a closed canopy",
    ),
    "water": (
        "a calm deep blue water surface with gentle waves",
        "wide open blue water seen from above",
        "an expanse of dark blue water with soft ripples",
    ),
    "urban": (
        "{count} {color} {building_word} in a dense urban area with gray streets",
        "an urban block with {count} {color} {building_word} along a dark road",
        "{count} {color} {building_word} of a gray urban district seen from above",
    ),
    "farmland": (
        "{count} green crop {field_word} on brown farmland",
        "farmland with {count} rectangular green {field_word} beside dry soil",
        "an aerial view of farmland divided into {count} green {field_word}",
    ),
    "desert": (
        "an empty desert of pale bare sand with no vegetation",
        "a wide sandy desert area seen from above",
        "dry desert terrain with smooth dunes of light sand",
    ),
}


def caption(spec: TileSpec) -> str:
    """Template caption; always names the scene and the count when > 0."""
    r = rng(spec.seed, "caption")
    template = _TEMPLATES[spec.scene_class][int(r.integers(0, 3))]
    count_word = COUNT_WORDS[spec.object_count - 1] if spec.object_count > 0 else ""
    plural = spec.object_count != 1
    return template.format(
        count=count_word,
        color=spec.object_color.replace("_", " "),
        tank_word="tanks" if plural else "tank",
        building_word="buildings" if plural else "building",
        field_word="fields" if plural else "field",
    )


def parse_caption(text: str) -> tuple[str, int]:
    """Rule-based inverse of ``caption``: recover (scene_class, count)."""
    words = text.lower().replace(",", " ").split()
    joined = " ".join(words)
    if "storage tank" in joined:
        scene = "storage_tanks"
    elif "farmland" in joined or "fields" in joined or "field" in words:
        scene = "farmland"
    elif "forest" in joined:
        scene = "forest"
    elif "desert" in joined:
        scene = "desert"
    elif "building" in joined or "urban" in joined:
        scene = "urban"
    elif "water" in joined:
        scene = "water"
    else:
        raise ValueError(f"cannot parse scene class from caption: {text!r}")
    count = 0
    for i, w in enumerate(COUNT_WORDS):
        if w in words:
            count = i + 1
            break
    return scene, count


def vegetation_mask(image: np.ndarray) -> np.ndarray:
    """Green-dominant pixels (tree canopy and crops)."""
    red, green, blue = image[..., 0], image[..., 1], image[..., 2]
    return (green > red + 0.04) & (green > blue + 0.04)


def luminance(image: np.ndarray) -> np.ndarray:
    return 0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]


def derive_modality(image: np.ndarray, spec: TileSpec, modality: str) -> np.ndarray:
    """Analytic single-band / degraded variants of an RGB render."""
    if modality == "RGB":
        return image.astype(np.float32)
    if modality == "PAN":
        pan = luminance(image)
        return np.repeat(pan[..., None], 3, axis=2).astype(np.float32)
    if modality == "NIR":
        mask = vegetation_mask(image)
        lum = luminance(image)
        nir = np.where(mask, 0.75 + 0.2 * lum, 0.12 + 0.2 * lum)
        return np.repeat(nir[..., None].astype(np.float32), 3, axis=2)
    if modality == "LOWRES":
        n = image.shape[0]
        small = image.reshape(n // 4, 4, n // 4, 4, 3).mean(axis=(1, 3))
        return np.repeat(np.repeat(small, 4, axis=0), 4, axis=1).astype(np.float32)
    if modality == "FOG":
        alpha = float(rng(spec.seed, "fog").uniform(0.3, 0.7))
        return ((1 - alpha) * image + alpha).astype(np.float32)
    raise ValueError(f"unknown modality {modality!r}; expected one of {MODALITIES}")


# ---------------------------------------------------------------------------
# Dataset building and the on-disk manifest
# ---------------------------------------------------------------------------


@dataclass
class BuildConfig:
    n_train: int
    n_val: int
    n_test: int
    global_seed: int
    out_dir: str
    modalities: tuple[str, ...] = ("RGB",)
    tile_px: int = TILE_PX
    force: bool = False

    def config_hash(self) -> str:
        payload = asdict(self)
        payload.pop("out_dir")
        payload.pop("force")
        payload["generator_version"] = GENERATOR_VERSION
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class RecordInfo:
    path: str
    caption: str
    resolution_m_per_px: float
    scene_class: str
    lat: float
    lon: float
    modality: str
    split: str


@dataclass
class Manifest:
    generator_version: str
    global_seed: int
    config_hash: str
    records: list[RecordInfo] = field(default_factory=list)
    root: Path | None = None

    def path_of(self, rec: RecordInfo) -> Path:
        assert self.root is not None
        return self.root / rec.path

    def select(self, split: str | None = None, modality: str | None = None) -> list[RecordInfo]:
        out = self.records
        if split is not None:
            out = [r for r in out if r.split == split]
        if modality is not None:
            out = [r for r in out if r.modality == modality]
        return out


MANIFEST_NAME = "manifest.jsonl"


def save_image(img: np.ndarray, path: Path | str) -> None:
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_manifest(manifest: Manifest, path: Path) -> None:
    with path.open("w", encoding="utf-8") as f:
        header = {
            "generator_version": manifest.generator_version,
            "global_seed": manifest.global_seed,
            "config_hash": manifest.config_hash,
        }
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in manifest.records:
            f.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def load_manifest(path: Path | str) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    lines = path.read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    records = [RecordInfo(**json.loads(line)) for line in lines[1:]]
    return Manifest(
        generator_version=header["generator_version"],
        global_seed=header["global_seed"],
        config_hash=header.get("config_hash", ""),
        records=records,
        root=path.parent,
    )


def spec_for_index(config: BuildConfig, split: str, index: int) -> TileSpec:
    """The spec of record (split, index): classes cycle for exact balance."""
    seed = derive_seed(config.global_seed, "record", split, index)
    scene = SCENE_CLASSES[index % len(SCENE_CLASSES)]
    return sample_spec(seed, scene_override=scene, tile_px=config.tile_px)


def build_dataset(config: BuildConfig) -> Manifest:
    """Render every record to disk and write the manifest (idempotent)."""
    if config.n_train <= 0 or config.n_val <= 0 or config.n_test <= 0:
        raise ValueError("split sizes must all be positive")
    for m in config.modalities:
        if m not in MODALITIES:
            raise ValueError(f"unknown modality {m!r}; expected one of {MODALITIES}")
    out = Path(config.out_dir)
    manifest_path = out / MANIFEST_NAME
    if manifest_path.exists():
        existing = load_manifest(manifest_path)
        if existing.config_hash == config.config_hash() and not config.force:
            return existing
        if not config.force:
            raise ValueError(
                f"{out} already holds a dataset built from a different config; "
                "pass force=True to overwrite"
            )
    out.mkdir(parents=True, exist_ok=True)

    modalities = ["RGB"] + [m for m in config.modalities if m != "RGB"]
    counts = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    manifest = Manifest(
        generator_version=GENERATOR_VERSION,
        global_seed=config.global_seed,
        config_hash=config.config_hash(),
        root=out,
    )
    for split in SPLITS:
        for i in range(counts[split]):
            spec = spec_for_index(config, split, i)
            rgb = render_tile(spec)
            text = caption(spec)
            for modality in modalities:
                img = derive_modality(rgb, spec, modality)
                rel = f"images/{split}/{i:05d}_{modality}.png"
                save_image(img, out / rel)
                manifest.records.append(
                    RecordInfo(
                        path=rel,
                        caption=text,
                        resolution_m_per_px=spec.resolution_m_per_px,
                        scene_class=spec.scene_class,
                        lat=spec.geo[0],
                        lon=spec.geo[1],
                        modality=modality,
                        split=split,
                    )
                )
    write_manifest(manifest, manifest_path)
    return manifest


def manifest_stats(manifest: Manifest) -> dict:
    """Exact corpus statistics; raises listing offenders if files are gone."""
    missing = [str(r.path) for r in manifest.records if not manifest.path_of(r).exists()]
    if missing:
        raise FileNotFoundError(f"manifest references missing files: {missing[:10]}")
    class_histogram = {c: 0 for c in SCENE_CLASSES}
    resolution_histogram: dict[float, int] = {}
    total_words = 0
    for r in manifest.records:
        class_histogram[r.scene_class] += 1
        resolution_histogram[r.resolution_m_per_px] = (
            resolution_histogram.get(r.resolution_m_per_px, 0) + 1
        )
        total_words += len(r.caption.split())
    n = len(manifest.records)
    return {
        "class_histogram": class_histogram,
        "resolution_histogram": dict(sorted(resolution_histogram.items())),
        "caption_length_mean": (total_words / n) if n else 0.0,
        "total_words": total_words,
    }
