"""Voxel datasets and file IO.

Grids are float32 arrays indexed (z, y, x) so x varies fastest in memory.
Three value conventions are tracked per dataset: ``binary01`` (raw 0/1
occupancy), ``mean-subtracted`` (descriptor space) and ``signed-unit``
(2·occupancy − 1, matching a tanh generator).
"""
from __future__ import annotations

import json
import math
import re
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CONVENTIONS = ("binary01", "mean-subtracted", "signed-unit")
CATEGORIES = ("block-table", "block-chair", "block-sofa")

GRID_MAGIC = b"VGRD"
GRID_VERSION = 1
_GRID_HEADER = struct.Struct("<4sI3IB3x")  # magic, version, D, H, W, dtype tag, pad
DTYPE_F32 = 0


class GridFormatError(ValueError):
    pass


class WatertightWarning(UserWarning):
    pass


@dataclass
class Dataset:
    grids: np.ndarray
    labels: list[int] = field(default_factory=list)
    categories: list[str] = field(default_factory=list)
    mean: float = 0.0
    convention: str = "binary01"

    def __post_init__(self):
        self.grids = np.asarray(self.grids, dtype=np.float32)
        if self.grids.ndim != 4:
            raise ValueError(f"dataset grids must be (N, D, H, W), got {self.grids.shape}")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"unknown value convention {self.convention!r}")
        if not self.labels:
            self.labels = [0] * len(self.grids)
        if len(self.labels) != len(self.grids):
            raise ValueError("one label per grid required")
        self.labels = [int(l) for l in self.labels]

    def __len__(self):
        return len(self.grids)

    @property
    def shape(self):
        return self.grids.shape[1:]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.grids[idx], [self.labels[i] for i in idx], list(self.categories), self.mean, self.convention)

    def of_category(self, label):
        return self.subset([i for i, l in enumerate(self.labels) if l == label])

    def split(self, test_fraction, seed):
        """Stratified shuffle split into (train, test)."""
        rng = np.random.default_rng([int(seed), 3])
        train, test = [], []
        for lab in sorted(set(self.labels)):
            idx = np.array([i for i, l in enumerate(self.labels) if l == lab])
            idx = idx[rng.permutation(len(idx))]
            k = int(round(len(idx) * test_fraction))
            test.extend(idx[:k])
            train.extend(idx[k:])
        return self.subset(sorted(train)), self.subset(sorted(test))

    @staticmethod
    def concat(parts):
        parts = list(parts)
        return Dataset(
            np.concatenate([p.grids for p in parts]),
            [l for p in parts for l in p.labels],
            list(parts[0].categories),
            parts[0].mean,
            parts[0].convention,
        )


# ---------------------------------------------------------------- procedural


def _fill(grid, lo, hi):
    """Set the voxel box [lo, hi) (z, y, x index triples) to 1, clipped."""
    n = grid.shape
    sl = tuple(slice(max(0, int(a)), min(s, int(b))) for a, b, s in zip(lo, hi, n))
    grid[sl] = 1.0


def _legs(grid, z_top, y0, y1, x0, x1, w):
    for y in (y0, y1 - w):
        for x in (x0, x1 - w):
            _fill(grid, (0, y, x), (z_top, y + w, x + w))


def _block_table(n, rng):
    g = np.zeros((n, n, n), np.float32)
    half_y = round(n * rng.uniform(0.28, 0.42))
    half_x = round(n * rng.uniform(0.28, 0.42))
    c = n // 2
    y0, y1, x0, x1 = c - half_y, c + half_y, c - half_x, c + half_x
    top = round(n * rng.uniform(0.5, 0.7))
    thick = max(1, round(n * rng.uniform(0.06, 0.12)))
    w = max(1, round(n * rng.uniform(0.08, 0.13)))
    _fill(g, (top, y0, x0), (top + thick, y1, x1))
    _legs(g, top, y0, y1, x0, x1, w)
    return g


def _block_chair(n, rng):
    g = np.zeros((n, n, n), np.float32)
    half = round(n * rng.uniform(0.2, 0.28))
    c = n // 2
    y0, y1, x0, x1 = c - half, c + half, c - half, c + half
    seat = round(n * rng.uniform(0.3, 0.42))
    thick = max(1, round(n * rng.uniform(0.06, 0.1)))
    w = max(1, round(n * rng.uniform(0.07, 0.11)))
    back_top = min(n, round(n * rng.uniform(0.82, 0.97)))
    back_t = max(1, round(n * rng.uniform(0.06, 0.1)))
    _fill(g, (seat, y0, x0), (seat + thick, y1, x1))
    _legs(g, seat, y0, y1, x0, x1, w)
    _fill(g, (seat, y0, x0), (back_top, y0 + back_t, x1))
    return g


def _block_sofa(n, rng):
    g = np.zeros((n, n, n), np.float32)
    depth = round(n * rng.uniform(0.25, 0.33))
    half_x = round(n * rng.uniform(0.36, 0.46))
    c = n // 2
    y0, y1, x0, x1 = c - depth, c + depth, c - half_x, c + half_x
    base = round(n * rng.uniform(0.22, 0.32))
    back_top = round(n * rng.uniform(0.5, 0.62))
    back_t = max(1, round(n * rng.uniform(0.1, 0.16)))
    arm_top = round(n * rng.uniform(0.36, 0.46))
    arm_w = max(1, round(n * rng.uniform(0.08, 0.12)))
    _fill(g, (0, y0, x0), (base, y1, x1))
    _fill(g, (0, y0, x0), (back_top, y0 + back_t, x1))
    _fill(g, (0, y0, x0), (arm_top, y1, x0 + arm_w))
    _fill(g, (0, y0, x1 - arm_w), (arm_top, y1, x1))
    return g


_BUILDERS = {"block-table": _block_table, "block-chair": _block_chair, "block-sofa": _block_sofa}


def gen_procedural(categories, count, resolution=16, seed=0):
    """``count`` seeded cuboid assemblies per category, labelled by position
    in ``categories`` (a name or list of names)."""
    if isinstance(categories, str):
        categories = [categories]
    categories = list(categories)
    if resolution < 8:
        raise ValueError("procedural shapes need resolution >= 8")
    for c in categories:
        if c not in _BUILDERS:
            raise ValueError(f"unknown category {c!r}; known: {list(_BUILDERS)}")
    grids, labels = [], []
    for lab, cat in enumerate(categories):
        for i in range(count):
            rng = np.random.default_rng([int(seed), CATEGORIES.index(cat), i])
            grids.append(_BUILDERS[cat](resolution, rng))
            labels.append(lab)
    if not grids:
        return Dataset(np.zeros((0,) + (resolution,) * 3, np.float32), [], categories)
    return Dataset(np.stack(grids), labels, categories)


def gen_boxes(count, resolution=16, seed=0, min_size=3):
    """Single axis-aligned solid boxes at random positions and sizes."""
    grids = np.zeros((count, resolution, resolution, resolution), np.float32)
    for i in range(count):
        rng = np.random.default_rng([int(seed), 7, i])
        size = rng.integers(min_size, resolution * 3 // 4 + 1, size=3)
        lo = [rng.integers(0, resolution - s + 1) for s in size]
        _fill(grids[i], lo, [a + s for a, s in zip(lo, size)])
    return Dataset(grids, [0] * count, ["box"])


# ---------------------------------------------------------------- conventions


def dataset_mean(grids):
    return float(np.mean(grids, dtype=np.float64))


def preprocess(dataset: Dataset, mean=None):
    """Subtract the scalar dataset mean (or a given one) from binary grids."""
    if dataset.convention != "binary01":
        raise ValueError(f"preprocess expects binary01 data, got {dataset.convention}")
    m = dataset_mean(dataset.grids) if mean is None else float(mean)
    return Dataset((dataset.grids - np.float32(m)).astype(np.float32), list(dataset.labels), list(dataset.categories), m, "mean-subtracted")


def postprocess(grid, mean=0.0):
    """Add the mean back and threshold at 0.5; exact 0.5 maps to 1."""
    return (np.asarray(grid, dtype=np.float32) + np.float32(mean) >= 0.5).astype(np.float32)


def to_signed_unit(dataset: Dataset):
    if dataset.convention != "binary01":
        raise ValueError(f"signed-unit conversion expects binary01 data, got {dataset.convention}")
    return Dataset(2 * dataset.grids - 1, list(dataset.labels), list(dataset.categories), 0.0, "signed-unit")


def from_signed_unit(grid):
    """Threshold signed-unit values at 0 (the image of 0.5), ties to 1."""
    return (np.asarray(grid) >= 0).astype(np.float32)


def to_binary(grid, convention, mean=0.0):
    if convention == "signed-unit":
        return from_signed_unit(grid)
    if convention == "mean-subtracted":
        return postprocess(grid, mean)
    if convention == "binary01":
        return postprocess(grid, 0.0)
    raise ValueError(f"unknown value convention {convention!r}")


def corrupt(grid, rho, rng, ref_std=0.5):
    """Replace round(ϱ·voxels) uniformly chosen voxels by N(0, s²) noise.

    Returns ``(corrupted, mask)``, mask True on replaced voxels.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("corruption fraction must lie in [0, 1]")
    grid = np.asarray(grid, dtype=np.float32)
    total = grid.size
    k = int(math.floor(rho * total + 0.5))
    idx = rng.choice(total, size=k, replace=False)
    mask = np.zeros(total, dtype=bool)
    mask[idx] = True
    mask = mask.reshape(grid.shape)
    out = grid.copy()
    out[mask] = (ref_std * rng.standard_normal(k)).astype(np.float32)
    return out, mask


# ---------------------------------------------------------------- voxelization


def box_mesh(lo, hi):
    """12 outward-wound triangles of the axis-aligned box [lo, hi], (x, y, z) coords."""
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    v = np.array(
        [[x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0], [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]],
        dtype=np.float64,
    )
    quads = [(0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4), (2, 3, 7, 6), (1, 2, 6, 5), (0, 4, 7, 3)]
    tris = []
    for a, b, c, d in quads:
        tris.append(v[[a, b, c]])
        tris.append(v[[a, c, d]])
    return np.array(tris)


def read_obj(text):
    """Triangles (T, 3, 3) from Wavefront OBJ text; polygons are fan-split."""
    verts, tris = [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            ids = []
            for p in parts[1:]:
                i = int(p.split("/")[0])
                ids.append(i - 1 if i > 0 else len(verts) + i)
            for j in range(1, len(ids) - 1):
                tris.append([ids[0], ids[j], ids[j + 1]])
    if not tris:
        return np.zeros((0, 3, 3))
    v = np.asarray(verts, dtype=np.float64)
    return v[np.asarray(tris)]


def normalize_mesh(tris):
    """Scale and centre into the unit cube, preserving aspect ratio."""
    tris = np.asarray(tris, dtype=np.float64)
    if len(tris) == 0:
        return tris
    lo = tris.reshape(-1, 3).min(0)
    hi = tris.reshape(-1, 3).max(0)
    span = float((hi - lo).max()) or 1.0
    centre = (lo + hi) / 2
    return (tris - centre) / span + 0.5


# fixed irrational offsets keep rays off shared triangle edges
_RAY_JITTER = (math.sqrt(2) * 1e-7, math.sqrt(3) * 1e-7)


def _parity(tris, n, axis):
    """Inside test for voxel centres by counting hits of rays along +axis."""
    u_ax, v_ax = [a for a in range(3) if a != axis]
    c = (np.arange(n) + 0.5) / n
    U, V = np.meshgrid(c + _RAY_JITTER[0], c + _RAY_JITTER[1], indexing="ij")
    hits = np.zeros((n, n, n), dtype=np.int64)  # (u, v, along-axis)
    for t in tris:
        a, b, cc = t
        den = (b[u_ax] - a[u_ax]) * (cc[v_ax] - a[v_ax]) - (cc[u_ax] - a[u_ax]) * (b[v_ax] - a[v_ax])
        if abs(den) < 1e-15:
            continue  # triangle parallel to the ray
        du, dv = U - a[u_ax], V - a[v_ax]
        l1 = (du * (cc[v_ax] - a[v_ax]) - (cc[u_ax] - a[u_ax]) * dv) / den
        l2 = ((b[u_ax] - a[u_ax]) * dv - du * (b[v_ax] - a[v_ax])) / den
        inside = (l1 >= 0) & (l2 >= 0) & (l1 + l2 <= 1)
        if not inside.any():
            continue
        depth = a[axis] + l1 * (b[axis] - a[axis]) + l2 * (cc[axis] - a[axis])
        # crossings strictly ahead of each voxel centre along the ray
        ahead = depth[..., None] > c[None, None, :]
        hits += (inside[..., None] & ahead).astype(np.int64)
    occ = hits % 2 == 1
    # reorder (u, v, axis) into (x, y, z) then into (z, y, x)
    order = [0, 0, 0]
    order[u_ax], order[v_ax], order[axis] = 0, 1, 2
    xyz = np.transpose(occ, order)
    return np.transpose(xyz, (2, 1, 0))


def voxelize_mesh(triangles, resolution):
    """Binary occupancy of voxel centres inside a closed mesh in the unit cube.

    Ray parity is evaluated along x, y and z; voxels take the majority vote
    and a :class:`WatertightWarning` is raised if the axes disagree.
    """
    n = int(resolution)
    if n < 1:
        raise ValueError("resolution must be >= 1")
    tris = np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    if len(tris) == 0:
        return np.zeros((n, n, n), np.float32)
    votes = [_parity(tris, n, ax) for ax in range(3)]
    total = votes[0].astype(np.int8) + votes[1] + votes[2]
    disagree = int(np.count_nonzero((total > 0) & (total < 3)))
    if disagree:
        warnings.warn(f"ray parity disagrees across axes on {disagree} voxels; mesh may not be watertight", WatertightWarning, stacklevel=2)
    return (total >= 2).astype(np.float32)


# ---------------------------------------------------------------- file formats


def save_grid(path, grid):
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValueError(f"a voxel grid is 3-D, got shape {grid.shape}")
    data = np.ascontiguousarray(grid, dtype="<f4")
    header = _GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, *grid.shape, DTYPE_F32)
    Path(path).write_bytes(header + data.tobytes())


def load_grid(path):
    raw = Path(path).read_bytes()
    if len(raw) < _GRID_HEADER.size:
        raise GridFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, D, H, W, dtype = _GRID_HEADER.unpack_from(raw)
    if magic != GRID_MAGIC:
        raise GridFormatError(f"{path}: bad magic {magic!r}")
    if version != GRID_VERSION:
        raise GridFormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise GridFormatError(f"{path}: unsupported dtype tag {dtype}")
    expected = _GRID_HEADER.size + 4 * D * H * W
    if len(raw) != expected:
        raise GridFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_GRID_HEADER.size)
    return data.reshape(D, H, W).astype(np.float32)


_CUBE_CORNERS = [(dx, dy, dz) for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)]
# per face: outward neighbour offset (z, y, x) and two triangles on corner ids
_CUBE_FACES = [
    ((0, 0, -1), [(0, 4, 6), (0, 6, 2)]),
    ((0, 0, 1), [(1, 3, 7), (1, 7, 5)]),
    ((0, -1, 0), [(0, 1, 5), (0, 5, 4)]),
    ((0, 1, 0), [(2, 6, 7), (2, 7, 3)]),
    ((-1, 0, 0), [(0, 2, 3), (0, 3, 1)]),
    ((1, 0, 0), [(4, 5, 7), (4, 7, 6)]),
]


def export_obj(grid, threshold=0.5, dedup_faces=False):
    """OBJ text with one unit cube per voxel >= threshold.

    Cube corners shared between voxels become a single vertex. With
    ``dedup_faces`` the faces between two occupied voxels are dropped.
    """
    grid = np.asarray(grid)
    occ = grid >= threshold
    vid = {}
    verts, faces = [], []
    for z, y, x in zip(*np.nonzero(occ)):
        ids = []
        for dx, dy, dz in _CUBE_CORNERS:
            key = (int(x) + dx, int(y) + dy, int(z) + dz)
            if key not in vid:
                vid[key] = len(verts) + 1
                verts.append(key)
            ids.append(vid[key])
        for (oz, oy, ox), tris in _CUBE_FACES:
            if dedup_faces:
                nz, ny, nx = z + oz, y + oy, x + ox
                inside = 0 <= nz < grid.shape[0] and 0 <= ny < grid.shape[1] and 0 <= nx < grid.shape[2]
                if inside and occ[nz, ny, nx]:
                    continue
            for t in tris:
                faces.append(tuple(ids[i] for i in t))
    lines = [f"# voxel export {grid.shape[2]}x{grid.shape[1]}x{grid.shape[0]}, {len(faces)} faces"]
    lines += [f"v {x} {y} {z}" for x, y, z in verts]
    lines += [f"f {a} {b} {c}" for a, b, c in faces]
    return "\n".join(lines) + "\n"


_ENTRY_NAME = re.compile(r"^[\w.-]+\.vgrid$")


def save_dataset(directory, dataset: Dataset):
    """One ``.vgrid`` per shape plus a ``labels.json`` manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (g, lab) in enumerate(zip(dataset.grids, dataset.labels)):
        name = f"shape_{i:05d}.vgrid"
        save_grid(d / name, g)
        entries.append({"file": name, "label": lab, "category": dataset.categories[lab] if dataset.categories else str(lab)})
    manifest = {"categories": dataset.categories, "convention": dataset.convention, "mean": dataset.mean, "entries": entries}
    (d / "labels.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(directory):
    d = Path(directory)
    manifest = json.loads((d / "labels.json").read_text())
    grids, labels = [], []
    for e in manifest["entries"]:
        if not _ENTRY_NAME.match(e["file"]):
            raise GridFormatError(f"suspicious manifest entry {e['file']!r}")
        grids.append(load_grid(d / e["file"]))
        labels.append(e["label"])
    if not grids:
        raise ValueError(f"{d}: dataset manifest lists no shapes")
    return Dataset(np.stack(grids), labels, manifest.get("categories", []), manifest.get("mean", 0.0), manifest.get("convention", "binary01"))
