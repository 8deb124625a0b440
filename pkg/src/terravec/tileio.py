"""Disk formats: PPM/PGM rasters with sidecar metadata, GeoJSON polygons,
dataset manifests, and overlay images. All writes are atomic
(temp file + rename) and byte-deterministic for fixed inputs."""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .synth import DualModalTile

__all__ = [
    "write_ppm",
    "read_ppm",
    "write_pgm8",
    "read_pgm8",
    "write_pgm16",
    "read_pgm16",
    "write_geojson",
    "read_geojson",
    "validate_geojson",
    "write_overlay_png",
    "save_tile",
    "load_tile",
    "save_dataset",
    "load_dataset",
    "atomic_write_bytes",
    "atomic_write_text",
]


def atomic_write_bytes(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# -- netpbm rasters -----------------------------------------------------------


def write_ppm(path: str, rgb01: np.ndarray) -> None:
    """8-bit binary PPM from a (3, H, W) array of values in [0, 1]."""
    arr = np.clip(np.asarray(rgb01), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    h, w = data.shape[:2]
    atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def _read_pnm_header(blob: bytes, magic: bytes):
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    if blob[:2] != magic:
        raise ValueError(f"expected {magic!r} header, got {blob[:2]!r}")
    return fields[0], fields[1], fields[2], pos + 1


def read_ppm(path: str) -> np.ndarray:
    blob = open(path, "rb").read()
    w, h, maxval, off = _read_pnm_header(blob, b"P6")
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w * 3, offset=off)
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / maxval


def write_pgm8(path: str, values01: np.ndarray) -> None:
    """8-bit binary PGM; input is a (H, W) array in [0, 1] (masks use {0, 1})."""
    data = np.round(np.clip(np.asarray(values01), 0, 1) * 255).astype(np.uint8)
    h, w = data.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def read_pgm8(path: str) -> np.ndarray:
    blob = open(path, "rb").read()
    w, h, maxval, off = _read_pnm_header(blob, b"P5")
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=off)
    return data.reshape(h, w).astype(np.float64) / maxval


def write_pgm16(path: str, values: np.ndarray, gsd: float) -> None:
    """16-bit PGM (big-endian per netpbm) plus a sidecar with scale/offset/gsd."""
    arr = np.asarray(values, dtype=np.float64)
    offset = float(arr.min())
    span = float(arr.max() - offset)
    scale = span / 65535.0 if span > 0 else 1.0
    quant = np.round((arr - offset) / scale).astype(">u2")
    h, w = arr.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n65535\n".encode() + quant.tobytes())
    meta = f"scale = {scale!r}\noffset = {offset!r}\ngsd = {gsd!r}\n"
    atomic_write_text(path + ".meta", meta)


def read_pgm16(path: str) -> tuple[np.ndarray, float]:
    blob = open(path, "rb").read()
    w, h, maxval, off = _read_pnm_header(blob, b"P5")
    if maxval != 65535:
        raise ValueError(f"{path} is not a 16-bit PGM (maxval {maxval})")
    quant = np.frombuffer(blob, dtype=">u2", count=h * w, offset=off).reshape(h, w)
    meta = {}
    for line in open(path + ".meta", "r", encoding="utf-8"):
        if "=" in line:
            key, val = line.split("=", 1)
            meta[key.strip()] = float(val.strip())
    return quant.astype(np.float64) * meta["scale"] + meta["offset"], meta["gsd"]


# -- GeoJSON ---------------------------------------------------------------


def write_geojson(path: str, collection: dict) -> None:
    atomic_write_text(path, json.dumps(collection, sort_keys=True) + "\n")


def read_geojson(path: str) -> dict:
    return json.loads(open(path, "r", encoding="utf-8").read())


def validate_geojson(collection: dict) -> list[str]:
    """Strict structural validation; returns a list of problems (empty = valid).

    Checks FeatureCollection shape, ring closure, minimum ring length,
    finite coordinates, and counter-clockwise exterior orientation.
    """
    problems = []
    if collection.get("type") != "FeatureCollection":
        problems.append("root type must be FeatureCollection")
        return problems
    features = collection.get("features")
    if not isinstance(features, list):
        problems.append("features must be a list")
        return problems
    for i, feat in enumerate(features):
        if feat.get("type") != "Feature":
            problems.append(f"feature {i}: type must be Feature")
            continue
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            problems.append(f"feature {i}: geometry must be Polygon")
            continue
        rings = geom.get("coordinates")
        if not isinstance(rings, list) or not rings:
            problems.append(f"feature {i}: missing coordinates")
            continue
        for r, ring in enumerate(rings):
            if len(ring) < 4:
                problems.append(f"feature {i} ring {r}: fewer than 4 positions")
                continue
            if ring[0] != ring[-1]:
                problems.append(f"feature {i} ring {r}: not closed")
            arr = np.asarray(ring, dtype=float)
            if not np.isfinite(arr).all():
                problems.append(f"feature {i} ring {r}: non-finite coordinate")
                continue
            x, y = arr[:-1, 0], arr[:-1, 1]
            area = 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
            if r == 0 and area < 0:
                problems.append(f"feature {i} ring {r}: exterior ring not counter-clockwise")
    return problems


def polygons_to_geojson(polygons: list, properties: list | None = None) -> dict:
    """FeatureCollection from (n, 2) row/col vertex arrays (open rings)."""
    features = []
    for i, poly in enumerate(polygons):
        arr = np.asarray(poly, dtype=float)
        coords = np.stack([arr[:, 1], arr[:, 0]], axis=1)
        x, y = coords[:, 0], coords[:, 1]
        area = 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
        if area < 0:
            coords = coords[::-1]
        closed = np.vstack([coords, coords[:1]])
        props = properties[i] if properties else {}
        features.append({
            "type": "Feature",
            "properties": props,
            "geometry": {
                "type": "Polygon",
                "coordinates": [[[float(a), float(b)] for a, b in closed]],
            },
        })
    return {"type": "FeatureCollection", "features": features}


def geojson_to_polygons(collection: dict) -> list[np.ndarray]:
    """Back to (n, 2) row/col arrays, dropping the closing vertex."""
    polys = []
    for feat in collection.get("features", []):
        ring = np.asarray(feat["geometry"]["coordinates"][0], dtype=float)
        polys.append(np.stack([ring[:-1, 1], ring[:-1, 0]], axis=1))
    return polys


# -- overlay image ------------------------------------------------------------


def write_overlay_png(path: str, rgb01: np.ndarray, mask: np.ndarray | None,
                      polygons: list | None) -> None:
    """Inspection image: imagery with mask tint and polygon outlines."""
    from PIL import Image

    img = np.clip(np.asarray(rgb01), 0, 1).transpose(1, 2, 0).copy()
    if mask is not None:
        m = np.asarray(mask) > 0
        img[m] = 0.55 * img[m] + 0.45 * np.array([1.0, 1.0, 0.1])
    if polygons:
        h, w = img.shape[:2]
        for poly in polygons:
            arr = np.asarray(poly, dtype=float)
            closed = np.vstack([arr, arr[:1]])
            for (r0, c0), (r1, c1) in zip(closed[:-1], closed[1:]):
                steps = max(2, int(np.hypot(r1 - r0, c1 - c0) * 3))
                rr = np.clip(np.round(np.linspace(r0, r1, steps)), 0, h - 1).astype(int)
                cc = np.clip(np.round(np.linspace(c0, c1, steps)), 0, w - 1).astype(int)
                img[rr, cc] = np.array([1.0, 0.1, 0.1])
    data = np.round(img * 255).astype(np.uint8)
    pil = Image.fromarray(data, mode="RGB")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".png")
    os.close(fd)
    try:
        pil.save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- tiles and datasets -------------------------------------------------------


def save_tile(directory: str, tile_id: str, tile: DualModalTile) -> dict:
    """Write one tile's rasters and polygons; returns its manifest entry."""
    os.makedirs(directory, exist_ok=True)
    paths = {
        "rgb": f"{tile_id}_rgb.ppm",
        "dem": f"{tile_id}_dem.pgm",
        "label": f"{tile_id}_label.pgm",
        "polygons": f"{tile_id}_polygons.geojson",
    }
    write_ppm(os.path.join(directory, paths["rgb"]), tile.rgb)
    write_pgm16(os.path.join(directory, paths["dem"]), tile.dem[0], tile.gsd_dem)
    write_pgm8(os.path.join(directory, paths["label"]), tile.label.astype(float))
    write_geojson(os.path.join(directory, paths["polygons"]),
                  polygons_to_geojson(tile.truth_polygons))
    entry = dict(paths)
    entry.update({
        "id": tile_id,
        "seed": tile.seed,
        "gsd_rgb": tile.gsd_rgb,
        "gsd_dem": tile.gsd_dem,
        "gsd_label": tile.gsd_label,
    })
    return entry


def load_tile(directory: str, entry: dict) -> DualModalTile:
    rgb = read_ppm(os.path.join(directory, entry["rgb"]))
    dem, gsd_dem = read_pgm16(os.path.join(directory, entry["dem"]))
    label = (read_pgm8(os.path.join(directory, entry["label"])) > 0.5).astype(np.uint8)
    polys = geojson_to_polygons(read_geojson(os.path.join(directory, entry["polygons"])))
    return DualModalTile(
        rgb=rgb, dem=dem[None, :, :], label=label,
        gsd_rgb=entry["gsd_rgb"], gsd_dem=gsd_dem, gsd_label=entry["gsd_label"],
        truth_polygons=polys, seed=entry["seed"],
    )


def save_dataset(directory: str, tiles: list, splits: dict, seed: int,
                 grouping: str) -> str:
    """Write all tiles plus a manifest index; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    split_of = {}
    for name, ids in splits.items():
        for i in ids:
            split_of[i] = name
    for i, tile in enumerate(tiles):
        entry = save_tile(directory, f"tile{i:04d}", tile)
        entry["split"] = split_of.get(i, "train")
        entries.append(entry)
    manifest = {
        "seed": seed,
        "grouping": grouping,
        "count": len(tiles),
        "tiles": entries,
    }
    path = os.path.join(directory, "manifest.json")
    atomic_write_text(path, json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return path


def load_dataset(directory: str) -> tuple[dict, dict[str, list[DualModalTile]]]:
    """Read a manifest and its tiles, grouped by split."""
    manifest = json.loads(open(os.path.join(directory, "manifest.json")).read())
    groups: dict[str, list] = {"train": [], "val": [], "test": []}
    for entry in manifest["tiles"]:
        groups.setdefault(entry["split"], []).append(load_tile(directory, entry))
    return manifest, groups
