"""Synthetic dual-modal terraced-field tiles, cross-scale resampling,
augmentation, dataset splitting, and segmentation metrics.

A tile pairs an RGB texture image with an elevation raster over the same
footprint. Terraces are star-shaped regions where the terrain is
quantized into level treads and the imagery shows banded field texture.
Two kinds of decoys make single-modality models fail in opposite ways:
patches with field texture over smooth terrain (fools imagery-only
models) and stepped natural benches without field texture (fools
elevation-only models). Only regions with both cues are labeled.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "DualModalTile",
    "SynthConfig",
    "synth_tile",
    "prepare_cross_scale",
    "augment",
    "apply_augment",
    "split",
    "miou_oa",
    "confusion_counts",
    "rasterize_polygon",
    "box_resample",
    "REFERENCE_FULL_SCALE",
]

# Accuracy reported for the original full-scale system on its real-world
# dataset; kept for context in reports, never used as a test target.
REFERENCE_FULL_SCALE = {"miou": 0.976, "oa": 0.981}

CROSS_SCALE_FACTOR = 6.25  # imagery-to-elevation resolution ratio being studied


@dataclass
class DualModalTile:
    rgb: np.ndarray            # (3, S, S), values in [0, 1]
    dem: np.ndarray            # (1, Sd, Sd), meters
    label: np.ndarray          # (S_l, S_l), {0, 1}
    gsd_rgb: float             # meters per pixel
    gsd_dem: float
    gsd_label: float
    truth_polygons: list       # list of (n, 2) vertex arrays, (row, col), CCW
    seed: int

    def footprint(self) -> float:
        return self.gsd_rgb * self.rgb.shape[-1]

    def check_footprint(self, tol: float = 1e-6) -> bool:
        f = self.footprint()
        return (abs(self.gsd_dem * self.dem.shape[-1] - f) < tol
                and abs(self.gsd_label * self.label.shape[-1] - f) < tol)


@dataclass
class SynthConfig:
    size: int = 64
    n_terrace_systems: int = 3
    step_height: float = 1.5          # meters between treads
    base_slope: float = 0.12          # meters of elevation per pixel
    rgb_noise: float = 0.03
    dem_noise: float = 0.0
    distractor_density: float = 1.0   # decoy count per terrace system
    terrace_radius: tuple = (0.14, 0.22)     # fraction of tile size
    distractor_radius: tuple = (0.08, 0.13)
    gsd: float = 2.0                  # meters per pixel at native resolution
    seed: int = 0


def rasterize_polygon(vertices: np.ndarray, shape: tuple) -> np.ndarray:
    """Crossing-number rasterization at pixel centers (row, col) = (i, j)."""
    v = np.asarray(vertices, dtype=float)
    h, w = shape
    py, px = np.mgrid[0:h, 0:w]
    py = py.ravel().astype(float)
    px = px.ravel().astype(float)
    inside = np.zeros(h * w, dtype=bool)
    x1, y1 = v[:, 1], v[:, 0]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    for e in range(len(v)):
        cond = (y1[e] > py) != (y2[e] > py)
        if not cond.any():
            continue
        x_cross = x1[e] + (py - y1[e]) * (x2[e] - x1[e]) / (y2[e] - y1[e])
        inside ^= cond & (px < x_cross)
    return inside.reshape(h, w)


def _star_polygon(rng: np.random.Generator, center, radius: float,
                  n_pts: int = 48, wobble: float = 0.12) -> np.ndarray:
    theta = np.linspace(0.0, 2.0 * np.pi, n_pts, endpoint=False)
    r = radius * (1.0
                  + rng.uniform(0, wobble) * np.cos(2 * theta + rng.uniform(0, 2 * np.pi))
                  + rng.uniform(0, wobble * 0.7) * np.cos(3 * theta + rng.uniform(0, 2 * np.pi)))
    rows = center[0] + r * np.sin(theta)
    cols = center[1] + r * np.cos(theta)
    return np.stack([rows, cols], axis=1)


def _place_regions(rng: np.random.Generator, size: int, requests: list) -> list:
    """Rejection-sample disjoint (center, radius, kind) triples.

    Radii shrink gradually when the tile gets crowded, so placement always
    terminates with the requested number of regions.
    """
    placed = []
    for kind, radius in requests:
        r = radius
        attempts = 0
        while True:
            attempts += 1
            if attempts % 60 == 0:
                r *= 0.92
            margin = r + 2.0
            if margin * 2 >= size:
                r *= 0.9
                continue
            cy = rng.uniform(margin, size - 1 - margin)
            cx = rng.uniform(margin, size - 1 - margin)
            ok = all(
                np.hypot(cy - py, cx - px) >= 1.12 * (r + pr) + 3.0
                for (py, px), pr, _ in placed
            )
            if ok:
                placed.append(((cy, cx), r, kind))
                break
    return placed


def synth_tile(cfg: SynthConfig) -> DualModalTile:
    """Deterministic tile generation from the config seed."""
    rng = np.random.default_rng(cfg.seed)
    s = cfg.size
    yy, xx = np.mgrid[0:s, 0:s].astype(float)

    # smooth base terrain: tilted plane plus gentle undulation
    theta = rng.uniform(0, 2 * np.pi)
    z0 = rng.uniform(100.0, 300.0)
    base = z0 + cfg.base_slope * (np.cos(theta) * xx + np.sin(theta) * yy)
    for _ in range(2):
        amp = rng.uniform(0.5, 1.2) * cfg.step_height
        wl = rng.uniform(0.7, 1.4) * s
        ang = rng.uniform(0, 2 * np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        base += amp * np.cos(2 * np.pi * (np.cos(ang) * xx + np.sin(ang) * yy) / wl + phase)

    n_t = cfg.n_terrace_systems
    n_decoy = int(round(cfg.distractor_density * n_t))
    requests = [("terrace", rng.uniform(*cfg.terrace_radius) * s) for _ in range(n_t)]
    requests += [("rgb_decoy", rng.uniform(*cfg.distractor_radius) * s)
                 for _ in range(n_decoy)]
    requests += [("dem_decoy", rng.uniform(*cfg.distractor_radius) * s)
                 for _ in range(n_decoy)]
    regions = _place_regions(rng, s, requests)

    dem = base.copy()
    label = np.zeros((s, s), dtype=np.uint8)
    truth_polygons = []
    band_parity = np.zeros((s, s), dtype=bool)
    textured = np.zeros((s, s), dtype=bool)

    for (cy, cx), radius, kind in regions:
        poly = _star_polygon(rng, (cy, cx), radius)
        mask = rasterize_polygon(poly, (s, s))
        if not mask.any():
            continue
        if kind in ("terrace", "dem_decoy"):
            ref = base[int(round(cy)), int(round(cx))]
            levels = np.round((base - ref) / cfg.step_height)
            dem[mask] = (ref + cfg.step_height * levels)[mask]
        if kind in ("terrace", "rgb_decoy"):
            textured |= mask
            if kind == "terrace":
                ref = base[int(round(cy)), int(round(cx))]
                levels = np.round((base - ref) / cfg.step_height)
            else:
                ang = rng.uniform(0, 2 * np.pi)
                ramp = cfg.base_slope * (np.cos(ang) * xx + np.sin(ang) * yy)
                levels = np.round((ramp - ramp[int(round(cy)), int(round(cx))])
                                  / cfg.step_height)
            band_parity[mask] = (levels[mask].astype(int) % 2).astype(bool)
        if kind == "terrace":
            label[mask] = 1
            truth_polygons.append(poly)

    if cfg.dem_noise > 0:
        dem += rng.normal(0.0, cfg.dem_noise, size=dem.shape)

    # imagery: vegetation-like background, banded field texture on
    # terraces and texture decoys
    rgb = np.empty((3, s, s))
    bg_var = 0.05 * np.cos(2 * np.pi * (xx + yy) / rng.uniform(0.8, 1.5) / s
                           + rng.uniform(0, 2 * np.pi))
    background = np.array([0.28, 0.42, 0.24])
    tone_a = np.array([0.58, 0.46, 0.30])
    tone_b = np.array([0.40, 0.31, 0.20])
    for c in range(3):
        rgb[c] = background[c] + bg_var
        rgb[c][textured & band_parity] = tone_a[c]
        rgb[c][textured & ~band_parity] = tone_b[c]
    if cfg.rgb_noise > 0:
        rgb += rng.normal(0.0, cfg.rgb_noise, size=rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)

    return DualModalTile(
        rgb=rgb,
        dem=dem[None, :, :],
        label=label,
        gsd_rgb=cfg.gsd,
        gsd_dem=cfg.gsd,
        gsd_label=cfg.gsd,
        truth_polygons=truth_polygons,
        seed=cfg.seed,
    )


# -- cross-scale preparation ------------------------------------------------


def _overlap_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic area-overlap matrix for box resampling n_in -> n_out."""
    f = n_in / n_out
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * f, (i + 1) * f
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, n_in)):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    return m / f


def box_resample(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-weighted box average of the trailing two axes."""
    mr = _overlap_matrix(arr.shape[-2], out_h)
    mc = _overlap_matrix(arr.shape[-1], out_w)
    return np.einsum("ij,...jk,lk->...il", mr, arr, mc)


def _majority_downsample(label: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    frac = box_resample(label.astype(float), out_h, out_w)
    return (frac >= 0.5).astype(np.uint8)


def prepare_cross_scale(tile: DualModalTile, grouping: str) -> DualModalTile:
    """Resolution treatment for the three comparison groupings.

    (a) degrades only the elevation raster by the cross-scale factor,
    (b) keeps everything at the native resolution,
    (c) degrades imagery, elevation, and label alike. Degraded sizes are
    rounded down; the stored ground-sample distance carries the exact
    footprint so geometry is preserved.
    """
    if grouping == "b":
        return tile
    s = tile.label.shape[-1]
    low = max(1, int(np.floor(s / CROSS_SCALE_FACTOR)))
    if grouping == "a":
        dem = box_resample(tile.dem, low, low)
        return replace(
            tile, dem=dem, gsd_dem=tile.gsd_dem * tile.dem.shape[-1] / low,
        )
    if grouping == "c":
        factor = s / low
        rgb = box_resample(tile.rgb, low, low)
        dem = box_resample(tile.dem, low, low)
        label = _majority_downsample(tile.label, low, low)
        polys = [(p + 0.5) / factor - 0.5 for p in tile.truth_polygons]
        return replace(
            tile, rgb=rgb, dem=dem, label=label,
            gsd_rgb=tile.gsd_rgb * factor, gsd_dem=tile.gsd_dem * factor,
            gsd_label=tile.gsd_label * factor, truth_polygons=polys,
        )
    raise ValueError(f"unknown cross-scale grouping {grouping!r} (expected a, b, or c)")


# -- augmentation ---------------------------------------------------------------


def _rot90_vertices(verts: np.ndarray, k: int, size: int) -> np.ndarray:
    v = verts.copy()
    for _ in range(k % 4):
        v = np.stack([size - 1 - v[:, 1], v[:, 0]], axis=1)
    return v


def _shear_raster(arr: np.ndarray, factor: float, nearest: bool) -> np.ndarray:
    """Horizontal shear about the raster center; border-clamped sampling."""
    h, w = arr.shape[-2], arr.shape[-1]
    center = (h - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w].astype(float)
    src = cols - factor * (rows - center)
    if nearest:
        idx = np.clip(np.round(src), 0, w - 1).astype(int)
        return arr[..., np.arange(h)[:, None], idx]
    c0 = np.clip(np.floor(src), 0, w - 2).astype(int)
    frac = np.clip(src, 0, w - 1) - c0
    rr = np.arange(h)[:, None]
    return arr[..., rr, c0] * (1 - frac) + arr[..., rr, c0 + 1] * frac


def apply_augment(tile: DualModalTile, k_rot: int, shear: float,
                  brightness: float) -> DualModalTile:
    """Deterministic augmentation: 90-degree rotation and shear applied
    jointly to all rasters and polygons, brightness to imagery only."""
    rgb = np.rot90(tile.rgb, k_rot, axes=(-2, -1)).copy()
    dem = np.rot90(tile.dem, k_rot, axes=(-2, -1)).copy()
    label = np.rot90(tile.label, k_rot, axes=(-2, -1)).copy()
    polys = [_rot90_vertices(p, k_rot, tile.label.shape[-1])
             for p in tile.truth_polygons]
    if shear != 0.0:
        rgb = _shear_raster(rgb, shear, nearest=False)
        dem = _shear_raster(dem, shear, nearest=False)
        label = _shear_raster(label, shear, nearest=True)
        center = (label.shape[0] - 1) / 2.0
        polys = [np.stack([p[:, 0], p[:, 1] + shear * (p[:, 0] - center)], axis=1)
                 for p in polys]
    if brightness != 1.0:
        rgb = np.clip(rgb * brightness, 0.0, 1.0)
    return replace(tile, rgb=rgb, dem=dem, label=label, truth_polygons=polys)


def augment(tile: DualModalTile, rng: np.random.Generator) -> DualModalTile:
    """Random training augmentation draw."""
    k = int(rng.integers(0, 4))
    shear = float(rng.uniform(-0.05, 0.05))
    brightness = float(rng.uniform(0.8, 1.2))
    return apply_augment(tile, k, shear, brightness)


# -- splitting and metrics ---------------------------------------------------


def split(items: list, ratios: tuple = (0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle and partition into (train, val, test)."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(len(items))
    n_train = int(len(items) * ratios[0])
    n_val = int(len(items) * ratios[1])
    train = [items[i] for i in order[:n_train]]
    val = [items[i] for i in order[n_train:n_train + n_val]]
    test = [items[i] for i in order[n_train + n_val:]]
    return train, val, test


def confusion_counts(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """2x2 confusion matrix [[tn, fp], [fn, tp]] as int64 counts."""
    p = np.asarray(pred).astype(bool)
    t = np.asarray(truth).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != truth shape {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(np.count_nonzero(~p & ~t))
    return np.array([[tn, fp], [fn, tp]], dtype=np.int64)


def miou_oa(preds, truths) -> tuple[float, float]:
    """Mean IoU over {background, terrace} and overall accuracy.

    Accepts single rasters or parallel lists; counts are accumulated into
    one global confusion matrix, so tile order does not matter.
    """
    if isinstance(preds, np.ndarray) and preds.ndim == 2:
        preds, truths = [preds], [truths]
    total = np.zeros((2, 2), dtype=np.int64)
    for p, t in zip(preds, truths, strict=True):
        total += confusion_counts(p, t)
    (tn, fp), (fn, tp) = total
    iou_fg = tp / (tp + fp + fn) if (tp + fp + fn) else 1.0
    iou_bg = tn / (tn + fp + fn) if (tn + fp + fn) else 1.0
    oa = (tp + tn) / total.sum()
    return float((iou_fg + iou_bg) / 2.0), float(oa)
