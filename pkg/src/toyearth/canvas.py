"""Unbounded scene construction by iterative outpainting.

A canvas is a sparse map of fixed-size tiles with per-pixel population and
op-ownership tracking. Content grows in half-window steps: each extend
places a model-sized window against the populated edge so half of it is
existing context and half is new, runs the editor there, and writes only
the new pixels. All writes are quantized to 8-bit so the in-memory state,
the session files and history replay agree bit for bit.

One session resolution is locked at creation; every subsequent operation
conditions on it, which is what keeps spatial detail consistent across the
expanded scene.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import scipy.sparse
import scipy.sparse.linalg
from PIL import Image

from .data import luminance
from .diffusion import (
    MASK_FILL,
    GuidanceConfig,
    Pipeline,
    ProgressCallback,
    inpaint_raw,
    sample,
)

DEFAULT_OVERLAP = 0.5
DIRECTIONS = ("N", "S", "E", "W")

Rect = tuple[int, int, int, int]  # (x0, y0, x1, y1), exclusive upper bounds


@dataclass
class CanvasModels:
    generator: Pipeline
    editor: Pipeline

    def checkpoint_hashes(self) -> dict[str, str]:
        return {
            "generator": self.generator.checkpoint_hash,
            "editor": self.editor.checkpoint_hash,
        }


@dataclass
class CanvasOp:
    kind: str  # seed | extend | edit
    rect: Rect
    prompt: str
    guidance_omega: float
    seed: int
    resolution: float | None = None  # only the seed op carries it


class CanvasState:
    """Sparse tile map plus append-only history; one writer at a time."""

    def __init__(self, resolution_m_per_px: float, tile_px: int):
        if resolution_m_per_px <= 0:
            raise ValueError(f"resolution must be positive, got {resolution_m_per_px}")
        self.resolution_m_per_px = float(resolution_m_per_px)
        self.tile_px = int(tile_px)
        self.tiles: dict[tuple[int, int], np.ndarray] = {}
        self.alpha: dict[tuple[int, int], np.ndarray] = {}
        self.owner: dict[tuple[int, int], np.ndarray] = {}
        self.history: list[CanvasOp] = []

    # -- geometry -----------------------------------------------------------

    def bounds(self) -> Rect:
        """Tight pixel hull of populated pixels."""
        x0 = y0 = None
        x1 = y1 = None
        p = self.tile_px
        for (i, j), a in self.alpha.items():
            if not a.any():
                continue
            ys, xs = np.nonzero(a)
            ty0, ty1 = i * p + ys.min(), i * p + ys.max() + 1
            tx0, tx1 = j * p + xs.min(), j * p + xs.max() + 1
            x0 = tx0 if x0 is None else min(x0, tx0)
            y0 = ty0 if y0 is None else min(y0, ty0)
            x1 = tx1 if x1 is None else max(x1, tx1)
            y1 = ty1 if y1 is None else max(y1, ty1)
        if x0 is None:
            return (0, 0, 0, 0)
        return (int(x0), int(y0), int(x1), int(y1))

    def _tile(self, key: tuple[int, int]) -> None:
        if key not in self.tiles:
            p = self.tile_px
            self.tiles[key] = np.zeros((p, p, 3), dtype=np.float32)
            self.alpha[key] = np.zeros((p, p), dtype=bool)
            self.owner[key] = np.full((p, p), -1, dtype=np.int32)

    def _iter_tiles(self, rect: Rect):
        x0, y0, x1, y1 = rect
        p = self.tile_px
        for i in range(y0 // p, (y1 - 1) // p + 1):
            for j in range(x0 // p, (x1 - 1) // p + 1):
                ty0, tx0 = i * p, j * p
                sy0, sy1 = max(y0, ty0) - ty0, min(y1, ty0 + p) - ty0
                sx0, sx1 = max(x0, tx0) - tx0, min(x1, tx0 + p) - tx0
                if sy0 < sy1 and sx0 < sx1:
                    yield (i, j), (slice(sy0, sy1), slice(sx0, sx1)), (ty0, tx0)

    def gather(self, rect: Rect) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(pixels, alpha, owner) arrays for a rect; unpopulated is zeroed."""
        x0, y0, x1, y1 = rect
        h, w = y1 - y0, x1 - x0
        pixels = np.zeros((h, w, 3), dtype=np.float32)
        alpha = np.zeros((h, w), dtype=bool)
        owner = np.full((h, w), -1, dtype=np.int32)
        for key, (sy, sx), (ty0, tx0) in self._iter_tiles(rect):
            if key not in self.tiles:
                continue
            dy, dx = ty0 + sy.start - y0, tx0 + sx.start - x0
            oy = slice(dy, dy + sy.stop - sy.start)
            ox = slice(dx, dx + sx.stop - sx.start)
            pixels[oy, ox] = self.tiles[key][sy, sx]
            alpha[oy, ox] = self.alpha[key][sy, sx]
            owner[oy, ox] = self.owner[key][sy, sx]
        return pixels, alpha, owner

    def write(self, rect: Rect, image: np.ndarray, op_index: int,
              where: np.ndarray | None = None) -> None:
        """Write (quantized) pixels of a rect, optionally masked."""
        x0, y0, x1, y1 = rect
        image = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.float32) / 255.0
        for key, (sy, sx), (ty0, tx0) in self._iter_tiles(rect):
            self._tile(key)
            ry = slice(ty0 + sy.start - y0, ty0 + sy.stop - y0)
            rx = slice(tx0 + sx.start - x0, tx0 + sx.stop - x0)
            sel = np.ones((ry.stop - ry.start, rx.stop - rx.start), dtype=bool)
            if where is not None:
                sel = where[ry, rx]
            self.tiles[key][sy, sx][sel] = image[ry, rx][sel]
            self.alpha[key][sy, sx] |= sel
            self.owner[key][sy, sx][sel] = op_index

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.resolution_m_per_px}/{self.tile_px}".encode())
        for key in sorted(self.tiles):
            h.update(str(key).encode())
            h.update(np.round(self.tiles[key] * 255).astype(np.uint8).tobytes())
            h.update(np.packbits(self.alpha[key]).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def seamless_merge(context: np.ndarray, generated: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Gradient-domain composite of generated pixels onto known context.

    Solves a Poisson equation over the masked region: interior gradients
    come from the generated image, Dirichlet boundary values from the known
    pixels adjacent to the region (free boundaries elsewhere). The result
    keeps the generated texture but matches the context's level exactly at
    the seam, which is what makes extensions read as one continuous scene.
    Known pixels are returned untouched.
    """
    mask = mask.astype(bool)
    if not mask.any():
        return context.copy()
    grown = np.zeros_like(mask)
    grown[:-1] |= mask[1:]
    grown[1:] |= mask[:-1]
    grown[:, :-1] |= mask[:, 1:]
    grown[:, 1:] |= mask[:, :-1]
    if not (grown & ~mask).any():  # no known boundary to anchor the solve
        out = context.copy()
        out[mask] = generated[mask]
        return out
    h, w = mask.shape
    idx = np.full((h, w), -1, dtype=np.int64)
    ys, xs = np.nonzero(mask)
    idx[ys, xs] = np.arange(len(ys))
    n = len(ys)
    out = context.copy().astype(np.float64)
    gen = generated.astype(np.float64)
    rows, cols, vals = [], [], []
    rhs = np.zeros((n, context.shape[2]))
    for k in range(n):
        y, x = int(ys[k]), int(xs[k])
        degree = 0
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ny, nx = y + dy, x + dx
            if not (0 <= ny < h and 0 <= nx < w):
                continue
            degree += 1
            rhs[k] += gen[y, x] - gen[ny, nx]
            if mask[ny, nx]:
                rows.append(k)
                cols.append(idx[ny, nx])
                vals.append(-1.0)
            else:
                rhs[k] += out[ny, nx]
        rows.append(k)
        cols.append(k)
        vals.append(float(degree))
    matrix = scipy.sparse.csc_matrix((vals, (rows, cols)), shape=(n, n))
    solved = scipy.sparse.linalg.spsolve(matrix, rhs)
    solved = np.atleast_2d(solved)
    if solved.shape[0] != n:
        solved = solved.T
    out[ys, xs] = solved
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def new_canvas(
    prompt: str,
    resolution: float,
    guidance: GuidanceConfig,
    models: CanvasModels,
    progress: ProgressCallback | None = None,
) -> CanvasState:
    """Seed a canvas with one generated base tile at the origin."""
    p = models.generator.tile_px
    canvas = CanvasState(resolution, p)
    image = sample(models.generator, prompt or None, resolution, guidance, progress=progress)
    canvas.write((0, 0, p, p), image, op_index=0)
    canvas.history.append(
        CanvasOp("seed", (0, 0, p, p), prompt, guidance.omega, guidance.seed,
                 resolution=resolution)
    )
    return canvas


def direction_window(canvas: CanvasState, direction: str,
                     overlap_fraction: float = DEFAULT_OVERLAP) -> Rect:
    """Model-sized window against the given edge, half over content."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    p = canvas.tile_px
    keep = int(round(p * overlap_fraction))
    x0, y0, x1, y1 = canvas.bounds()
    if direction == "E":
        return (x1 - keep, y0, x1 - keep + p, y0 + p)
    if direction == "W":
        return (x0 + keep - p, y0, x0 + keep, y0 + p)
    if direction == "S":
        return (x0, y1 - keep, x0 + p, y1 - keep + p)
    return (x0, y0 + keep - p, x0 + p, y0 + keep)


def extend(
    canvas: CanvasState,
    direction_or_rect: str | Rect,
    prompt: str,
    guidance: GuidanceConfig,
    models: CanvasModels,
    overlap_fraction: float = DEFAULT_OVERLAP,
    progress: ProgressCallback | None = None,
) -> CanvasState:
    """Outpaint one window at the boundary; writes only new pixels."""
    p = canvas.tile_px
    if isinstance(direction_or_rect, str):
        rect = direction_window(canvas, direction_or_rect, overlap_fraction)
    else:
        rect = tuple(int(v) for v in direction_or_rect)
        if rect[2] - rect[0] != p or rect[3] - rect[1] != p:
            raise ValueError(f"extend rect must be {p}x{p}, got {rect}")
    window, alpha, _ = canvas.gather(rect)
    if not alpha.any():
        raise ValueError("no context overlap: extend rect is disjoint from content")
    if alpha.all():
        raise ValueError("extend rect is already fully populated")
    context = np.where(alpha[..., None], window, np.float32(MASK_FILL))
    mask = (~alpha).astype(np.float32)
    raw = inpaint_raw(models.editor, context, mask, prompt or None,
                      canvas.resolution_m_per_px, guidance, progress=progress)
    blended = seamless_merge(context, raw, ~alpha)
    op_index = len(canvas.history)
    canvas.write(rect, blended, op_index, where=~alpha)
    canvas.history.append(CanvasOp("extend", rect, prompt, guidance.omega, guidance.seed))
    return canvas


def edit_region(
    canvas: CanvasState,
    rect: Rect,
    prompt: str,
    guidance: GuidanceConfig,
    models: CanvasModels,
    progress: ProgressCallback | None = None,
) -> CanvasState:
    """Regenerate pixels inside rect only, conditioned on its surroundings."""
    p = canvas.tile_px
    rect = tuple(int(v) for v in rect)
    x0, y0, x1, y1 = rect
    if x1 <= x0 or y1 <= y0:
        return canvas  # zero-area edit is a documented no-op
    bx0, by0, bx1, by1 = canvas.bounds()
    if not (bx0 <= x0 and by0 <= y0 and x1 <= bx1 and y1 <= by1):
        raise ValueError(f"edit rect {rect} outside populated bounds {(bx0, by0, bx1, by1)}")
    if x1 - x0 > p or y1 - y0 > p:
        raise ValueError(f"edit rect must fit a {p}x{p} window, got {rect}")
    wx0 = min(max(x0 - (p - (x1 - x0)) // 2, bx0), bx1 - p)
    wy0 = min(max(y0 - (p - (y1 - y0)) // 2, by0), by1 - p)
    window_rect = (wx0, wy0, wx0 + p, wy0 + p)
    window, alpha, _ = canvas.gather(window_rect)
    context = np.where(alpha[..., None], window, np.float32(MASK_FILL))
    mask = np.zeros((p, p), dtype=np.float32)
    mask[y0 - wy0 : y1 - wy0, x0 - wx0 : x1 - wx0] = 1.0
    raw = inpaint_raw(models.editor, context, mask, prompt or None,
                      canvas.resolution_m_per_px, guidance, progress=progress)
    blended = seamless_merge(context, raw, mask.astype(bool))
    op_index = len(canvas.history)
    canvas.write(rect, blended[y0 - wy0 : y1 - wy0, x0 - wx0 : x1 - wx0], op_index)
    canvas.history.append(CanvasOp("edit", rect, prompt, guidance.omega, guidance.seed))
    return canvas


def checkerboard(rect: Rect, tile: int = 4) -> np.ndarray:
    """Unambiguous "no data" fill, anchored to absolute canvas coordinates."""
    x0, y0, x1, y1 = rect
    yy, xx = np.mgrid[y0:y1, x0:x1]
    pattern = ((yy // tile + xx // tile) % 2).astype(np.float32)
    return (0.35 + 0.2 * pattern)[..., None].repeat(3, axis=2)


def render_region(canvas: CanvasState, rect: Rect) -> np.ndarray:
    """Exact pixel composite; unpopulated areas get the checkerboard."""
    pixels, alpha, _ = canvas.gather(rect)
    board = checkerboard(rect)
    return np.where(alpha[..., None], pixels, board)


def seam_score(canvas: CanvasState) -> float:
    """Cross-seam gradient magnitude relative to interior gradients.

    Seams are boundaries between pixels written by different ops; 1.0 means
    a seam is indistinguishable from the interior. The degenerate 0/0 case
    (constant canvas) scores 1.0 by convention.
    """
    if len(canvas.history) < 2:
        raise ValueError("seam_score needs at least two operations on the canvas")
    pixels, alpha, owner = canvas.gather(canvas.bounds())
    lum = luminance(pixels)
    seam_diffs: list[np.ndarray] = []
    interior_diffs: list[np.ndarray] = []
    for axis in (0, 1):
        a = [slice(None)] * 2
        b = [slice(None)] * 2
        a[axis] = slice(None, -1)
        b[axis] = slice(1, None)
        a, b = tuple(a), tuple(b)
        valid = alpha[a] & alpha[b]
        diff = np.abs(lum[a] - lum[b])
        same = owner[a] == owner[b]
        seam_diffs.append(diff[valid & ~same])
        interior_diffs.append(diff[valid & same])
    seam = np.concatenate(seam_diffs)
    interior = np.concatenate(interior_diffs)
    if seam.size == 0:
        raise ValueError("no seams found; canvas has a single written region")
    seam_mean = float(seam.mean())
    interior_mean = float(interior.mean()) if interior.size else 0.0
    if interior_mean == 0.0:
        return 1.0 if seam_mean == 0.0 else float("inf")
    return seam_mean / interior_mean


def replay(history: list[CanvasOp], models: CanvasModels) -> CanvasState:
    """Deterministically rebuild a canvas from its operation log."""
    if not history or history[0].kind != "seed":
        raise ValueError("history has no seed op")
    first = history[0]
    if first.resolution is None:
        raise ValueError("seed op is missing its resolution")
    canvas = new_canvas(
        first.prompt, first.resolution,
        GuidanceConfig(omega=first.guidance_omega, seed=first.seed), models,
    )
    for op in history[1:]:
        guidance = GuidanceConfig(omega=op.guidance_omega, seed=op.seed)
        if op.kind == "extend":
            extend(canvas, op.rect, op.prompt, guidance, models)
        elif op.kind == "edit":
            edit_region(canvas, op.rect, op.prompt, guidance, models)
        elif op.kind == "seed":
            raise ValueError("duplicate seed op in history")
        else:
            raise ValueError(f"corrupted history entry: unknown op kind {op.kind!r}")
    return canvas


# ---------------------------------------------------------------------------
# Session files
# ---------------------------------------------------------------------------

META_FILE = "meta.json"
HISTORY_FILE = "history.jsonl"


def rebuild_ownership(canvas: CanvasState) -> None:
    """Recompute per-pixel op ownership purely from history geometry.

    Mirrors the write rules: the seed op and edits claim their whole rect,
    extends claim only pixels that were unpopulated when they ran.
    """
    for key in canvas.owner:
        canvas.owner[key][:] = -1
    populated: dict[tuple[int, int], np.ndarray] = {
        key: np.zeros_like(a) for key, a in canvas.alpha.items()
    }
    for idx, op in enumerate(canvas.history):
        for key, (sy, sx), _ in canvas._iter_tiles(op.rect):
            if key not in canvas.owner:
                continue
            if op.kind == "extend":
                sel = ~populated[key][sy, sx]
            else:
                sel = np.ones((sy.stop - sy.start, sx.stop - sx.start), dtype=bool)
            canvas.owner[key][sy, sx][sel] = idx
            populated[key][sy, sx] |= sel


def save_session(canvas: CanvasState, path: Path | str,
                 checkpoint_hashes: dict[str, str] | None = None) -> None:
    path = Path(path)
    tiles_dir = path / "tiles"
    tiles_dir.mkdir(parents=True, exist_ok=True)
    for old in tiles_dir.glob("*.png"):
        old.unlink()
    for (i, j), pix in canvas.tiles.items():
        rgba = np.zeros((canvas.tile_px, canvas.tile_px, 4), dtype=np.uint8)
        rgba[..., :3] = np.round(pix * 255).astype(np.uint8)
        rgba[..., 3] = canvas.alpha[(i, j)] * 255
        Image.fromarray(rgba, "RGBA").save(tiles_dir / f"{i}_{j}.png")
    with (path / HISTORY_FILE).open("w", encoding="utf-8") as f:
        for op in canvas.history:
            f.write(json.dumps(asdict(op), sort_keys=True) + "\n")
    meta = {
        "resolution_m_per_px": canvas.resolution_m_per_px,
        "tile_px": canvas.tile_px,
        "bounds": canvas.bounds(),
        "content_hash": canvas.content_hash(),
        "checkpoint_hashes": checkpoint_hashes or {},
    }
    (path / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_session(path: Path | str) -> CanvasState:
    path = Path(path)
    meta = json.loads((path / META_FILE).read_text())
    canvas = CanvasState(meta["resolution_m_per_px"], meta["tile_px"])
    for tile_file in sorted((path / "tiles").glob("*.png")):
        i, j = (int(v) for v in tile_file.stem.split("_"))
        rgba = np.asarray(Image.open(tile_file).convert("RGBA"))
        canvas._tile((i, j))
        canvas.tiles[(i, j)] = rgba[..., :3].astype(np.float32) / 255.0
        canvas.alpha[(i, j)] = rgba[..., 3] > 127
    for line in (path / HISTORY_FILE).read_text(encoding="utf-8").splitlines():
        raw = json.loads(line)
        raw["rect"] = tuple(raw["rect"])
        canvas.history.append(CanvasOp(**raw))
    rebuild_ownership(canvas)
    return canvas
