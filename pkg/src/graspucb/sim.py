"""Deterministic synthetic bin-picking environment.

A scene is a set of non-overlapping objects lying in a square bin. Rendering
turns it into the top-down observation the learner sees (height, surface
normals and an intensity image). Transparent materials corrupt that
observation with depth holes and depth noise; they never change the physics.
Grasp outcomes are drawn from a hidden success model that the learner never
sees directly.

Coordinates: ``row`` indexes the first grid axis, ``col`` the second. Normal
vectors are stored as ``(nx, ny, nz)`` with ``x`` along columns, ``y`` along
rows and ``z`` pointing up out of the bin.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .rng import stream

SCENE_FORMAT_VERSION = 1
MAX_TILT = math.pi / 4
RIM_TILT = 0.5  # tan of the bevel angle given to footprint boundary normals
DOME_CAP = 0.7  # relative radius of the flat cap on domes


class SceneOverflowError(RuntimeError):
    """Raised when objects cannot be placed without overlap."""


class Shape(str, Enum):
    BOX = "box"
    CYLINDER = "cylinder"
    DOME = "dome"


class Material(str, Enum):
    OPAQUE = "opaque"
    TRANSPARENT = "transparent"
    SEMI_TRANSPARENT = "semi_transparent"
    CURVED_GLOSSY = "curved_glossy"


class Difficulty(str, Enum):
    EASY = "easy"
    HARD = "hard"
    MIXED = "mixed"


@dataclass(frozen=True)
class SimConfig:
    """Hidden-model and sensing constants. All of them may be overridden."""

    grid_size: tuple[int, int] = (64, 64)
    border: int = 2
    flatness_coeff: float = 40.0  # c_f
    alignment_power: float = 4.0  # c_a
    window: int = 2  # half-width w of the flatness window
    p_holes_transparent: float = 0.4
    p_holes_semi: float = 0.2
    depth_noise_transparent: float = 0.15  # fraction of object height
    depth_noise_semi: float = 0.075
    grasp_opaque: float = 0.95
    grasp_transparent: float = 0.9
    grasp_semi: float = 0.85
    grasp_glossy: float = 0.6
    placement_retries: int = 400

    def p_holes(self, material: Material) -> float:
        if material is Material.TRANSPARENT:
            return self.p_holes_transparent
        if material is Material.SEMI_TRANSPARENT:
            return self.p_holes_semi
        return 0.0

    def depth_noise(self, material: Material) -> float:
        if material is Material.TRANSPARENT:
            return self.depth_noise_transparent
        if material is Material.SEMI_TRANSPARENT:
            return self.depth_noise_semi
        return 0.0

    def base_graspability(self, material: Material) -> float:
        return {
            Material.OPAQUE: self.grasp_opaque,
            Material.TRANSPARENT: self.grasp_transparent,
            Material.SEMI_TRANSPARENT: self.grasp_semi,
            Material.CURVED_GLOSSY: self.grasp_glossy,
        }[material]


DEFAULT_CONFIG = SimConfig()


@dataclass(frozen=True)
class ObjectSpec:
    id: int
    shape: Shape
    pose: tuple[float, float, float]  # row, col, yaw
    extent: tuple[float, float, float]  # length, width, height
    material: Material
    base_graspability: float

    def __post_init__(self):
        if min(self.extent) < 1:
            raise ValueError(f"object {self.id}: extents must be >= 1 cell, got {self.extent}")
        if not 0.0 <= self.base_graspability <= 1.0:
            raise ValueError(f"object {self.id}: base_graspability outside [0, 1]")


@dataclass(frozen=True)
class Scene:
    grid_size: tuple[int, int]
    objects: tuple[ObjectSpec, ...]
    rng_seed: int
    border: int = 2

    def __post_init__(self):
        if min(self.grid_size) < 16:
            raise ValueError("grid must be at least 16x16")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique within a scene")

    @property
    def bin_mask(self) -> np.ndarray:
        return _bin_mask(self.grid_size, self.border)

    def __len__(self) -> int:
        return len(self.objects)

    def without(self, object_id: int) -> "Scene":
        return replace(self, objects=tuple(o for o in self.objects if o.id != object_id))


@dataclass(frozen=True, eq=False)
class Observation:
    height: np.ndarray  # (H, W)
    normals: np.ndarray  # (H, W, 3)
    intensity: np.ndarray  # (H, W)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height.shape

    @functools.cached_property
    def _stacked(self) -> np.ndarray:
        return _readonly(np.concatenate(
            [self.height[..., None], self.normals, self.intensity[..., None]], axis=-1
        ))

    def channels(self) -> np.ndarray:
        """Stack as (H, W, 5): height, nx, ny, nz, intensity."""
        return self._stacked

    def equals(self, other: "Observation") -> bool:
        return (
            np.array_equal(self.height, other.height)
            and np.array_equal(self.normals, other.normals)
            and np.array_equal(self.intensity, other.intensity)
        )


@dataclass(frozen=True)
class GraspAction:
    row: int
    col: int
    alpha: float = 0.0
    beta: float = 0.0
    z: float = 0.0  # read from the observed height map; informational only

    def __post_init__(self):
        if abs(self.alpha) > MAX_TILT + 1e-12 or abs(self.beta) > MAX_TILT + 1e-12:
            raise ValueError(f"tilt angles must lie in [-pi/4, pi/4], got {(self.alpha, self.beta)}")


@dataclass(frozen=True)
class GraspOutcome:
    reward: int
    removed_object_id: int | None
    true_success_prob: float = field(repr=False)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@functools.lru_cache(maxsize=32)
def _bin_mask(grid_size: tuple[int, int], border: int) -> np.ndarray:
    h, w = grid_size
    mask = np.zeros((h, w), dtype=bool)
    mask[border : h - border, border : w - border] = True
    return _readonly(mask)


# --------------------------------------------------------------------------
# geometry


def _local_coords(obj: ObjectSpec, grid_size: tuple[int, int]):
    h, w = grid_size
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    r0, c0, yaw = obj.pose
    dr, dc = rows - r0, cols - c0
    cy, sy = math.cos(yaw), math.sin(yaw)
    u = dc * cy + dr * sy
    v = -dc * sy + dr * cy
    return u, v, cy, sy


def object_surface(obj: ObjectSpec, grid_size: tuple[int, int]):
    """Footprint, top-surface height and analytic normals of one object.

    Returns ``(footprint, height, normals)`` over the full grid; height and
    normals are only meaningful inside the footprint.
    """
    u, v, cy, sy = _local_coords(obj, grid_size)
    length, width, top = obj.extent
    hl, hw = length / 2.0, width / 2.0
    if obj.shape is Shape.BOX:
        foot = (np.abs(u) <= hl) & (np.abs(v) <= hw)
        z = np.full(u.shape, float(top))
        dz_du = np.zeros_like(u)
        dz_dv = np.zeros_like(u)
    elif obj.shape is Shape.CYLINDER:
        # lying cylinder, axis along the length direction
        t = v / hw
        foot = (np.abs(u) <= hl) & (np.abs(t) < 1.0)
        root = np.sqrt(np.clip(1.0 - t * t, 1e-12, None))
        z = top * root
        dz_du = np.zeros_like(u)
        dz_dv = -top * t / (hw * root)
    elif obj.shape is Shape.DOME:
        # flat cap inside DOME_CAP, paraboloid shoulders outside
        rho2 = (u / hl) ** 2 + (v / hw) ** 2
        foot = rho2 < 1.0
        cap2 = DOME_CAP**2
        shoulder = rho2 > cap2
        z = top * np.where(shoulder, 1.0 - (rho2 - cap2) / (1.0 - cap2), 1.0)
        k = np.where(shoulder, 2.0 * top / (1.0 - cap2), 0.0)
        dz_du = -k * u / hl**2
        dz_dv = -k * v / hw**2
    else:  # pragma: no cover
        raise ValueError(obj.shape)
    # chain rule back to grid axes: x = col, y = row
    dz_dx = dz_du * cy - dz_dv * sy
    dz_dy = dz_du * sy + dz_dv * cy
    n = np.stack([-dz_dx, -dz_dy, np.ones_like(u)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return foot, np.where(foot, z, 0.0), n


def footprint(obj: ObjectSpec, grid_size: tuple[int, int]) -> np.ndarray:
    return object_surface(obj, grid_size)[0]


def _rim_bevel(foot: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Bevel normals on the footprint boundary towards the outside (about 27 degrees)."""
    h, w = foot.shape
    padded = np.pad(foot, 1, mode="constant", constant_values=False)
    outward = np.zeros((h, w, 3))
    # neighbour outside the footprint -> push the normal that way
    outward[..., 0] += ~padded[1:-1, 2:]  # +x (next column)
    outward[..., 0] -= ~padded[1:-1, :-2]
    outward[..., 1] += ~padded[2:, 1:-1]  # +y (next row)
    outward[..., 1] -= ~padded[:-2, 1:-1]
    norm = np.linalg.norm(outward, axis=-1, keepdims=True)
    rim = foot & (norm[..., 0] > 0)
    out = normals.copy()
    bent = normals + RIM_TILT * np.divide(outward, norm, out=np.zeros_like(outward), where=norm > 0)
    bent /= np.linalg.norm(bent, axis=-1, keepdims=True)
    out[rim] = bent[rim]
    return out


@dataclass(frozen=True, eq=False)
class TrueFields:
    object_index: np.ndarray  # (H, W) index into scene.objects, -1 on floor
    height: np.ndarray
    normals: np.ndarray
    flatness: np.ndarray


def windowed_normal_std(normals: np.ndarray, window: int) -> np.ndarray:
    """Standard deviation of unit normals over a (2w+1)^2 window.

    Uses ``s^2 = mean |n - mean n|^2 = 1 - |mean n|^2`` (unit vectors), with
    edge replication at the grid border.
    """
    size = 2 * window + 1
    mean = np.stack(
        [ndimage.uniform_filter(normals[..., k], size=size, mode="nearest") for k in range(3)],
        axis=-1,
    )
    var = np.clip(1.0 - np.sum(mean * mean, axis=-1), 0.0, None)
    return np.sqrt(var)


@functools.lru_cache(maxsize=512)
def true_fields(scene: Scene, config: SimConfig = DEFAULT_CONFIG) -> TrueFields:
    h, w = scene.grid_size
    index = np.full((h, w), -1, dtype=np.int64)
    height = np.zeros((h, w))
    normals = np.zeros((h, w, 3))
    normals[..., 2] = 1.0
    for k, obj in enumerate(scene.objects):
        foot, z, n = object_surface(obj, scene.grid_size)
        n = _rim_bevel(foot, n)
        top = foot & (z >= height)
        index[top] = k
        height[top] = z[top]
        normals[top] = n[top]
    flat = np.exp(-config.flatness_coeff * windowed_normal_std(normals, config.window) ** 2)
    return TrueFields(_readonly(index), _readonly(height), _readonly(normals), _readonly(flat))


# --------------------------------------------------------------------------
# scene generation

_ALBEDO = {
    Material.OPAQUE: (0.25, 0.6),
    Material.TRANSPARENT: (0.85, 0.95),
    Material.SEMI_TRANSPARENT: (0.7, 0.8),
    Material.CURVED_GLOSSY: (0.6, 0.7),
}
FLOOR_INTENSITY = 0.1


def _sample_object(rng: np.random.Generator, obj_id: int, hard: bool, config: SimConfig,
                   free_cells: np.ndarray) -> ObjectSpec:
    if hard:
        material = Material(rng.choice(
            [Material.TRANSPARENT.value, Material.SEMI_TRANSPARENT.value, Material.CURVED_GLOSSY.value],
            p=[0.4, 0.3, 0.3],
        ))
    else:
        material = Material.OPAQUE
    if material is Material.CURVED_GLOSSY:
        shape = Shape.DOME
    else:
        shape = Shape.BOX if rng.random() < 0.6 else Shape.CYLINDER
    if shape is Shape.BOX:
        extent = (float(rng.integers(8, 13)), float(rng.integers(7, 11)), float(rng.integers(2, 7)))
    elif shape is Shape.CYLINDER:
        # squashed profile: a bottle lying on its side, seen from above
        width = float(rng.integers(7, 11))
        extent = (float(rng.integers(8, 13)), width, 1.0)
    else:
        extent = (float(rng.integers(9, 13)), float(rng.integers(9, 13)), float(rng.uniform(1.0, 2.0)))
    r, c = free_cells[rng.integers(len(free_cells))]
    pose = (float(r + rng.uniform(-0.5, 0.5)), float(c + rng.uniform(-0.5, 0.5)), float(rng.uniform(0.0, math.pi)))
    return ObjectSpec(obj_id, shape, pose, extent, material, config.base_graspability(material))


def generate_scene(seed: int, n_objects: int, difficulty: Difficulty | str = Difficulty.MIXED,
                   config: SimConfig = DEFAULT_CONFIG) -> Scene:
    """Place ``n_objects`` non-overlapping objects; identical arguments give identical scenes.

    Objects keep a one-cell gap from each other so their boundaries stay distinct.

    Raises:
        SceneOverflowError: if an object cannot be placed within the retry budget.
    """
    if not 0 <= n_objects <= 30:
        raise ValueError("n_objects must lie in [0, 30]")
    difficulty = Difficulty(difficulty)
    grid = tuple(config.grid_size)
    mask = _bin_mask(grid, config.border)
    rng = stream(seed, "scene", n_objects, list(Difficulty).index(difficulty))
    blocked = np.zeros(grid, dtype=bool)  # occupied cells grown by one
    objects: list[ObjectSpec] = []
    for obj_id in range(n_objects):
        if difficulty is Difficulty.EASY:
            hard = False
        elif difficulty is Difficulty.HARD:
            hard = True
        else:
            hard = bool(rng.random() < 0.5)
        free_cells = np.argwhere(mask & ~blocked)
        for _ in range(config.placement_retries if len(free_cells) else 0):
            obj = _sample_object(rng, obj_id, hard, config, free_cells)
            foot = footprint(obj, grid)
            if not foot.any() or (foot & ~mask).any():
                continue
            if (foot & blocked).any():
                continue
            blocked |= ndimage.binary_dilation(foot)
            objects.append(obj)
            break
        else:
            raise SceneOverflowError(
                f"scene overflow: placed {len(objects)} of {n_objects} objects (seed={seed})"
            )
    return Scene(grid, tuple(objects), int(seed), config.border)


# --------------------------------------------------------------------------
# sensing


def _normals_from_height(height: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(height)
    n = np.stack([-gx, -gy, np.ones_like(height)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


@functools.lru_cache(maxsize=512)
def render(scene: Scene, config: SimConfig = DEFAULT_CONFIG) -> Observation:
    """Render the observation the learner sees.

    Opaque objects are exact. Transparent and semi-transparent objects drop
    pixels to the floor (height 0, normal up) and get Gaussian depth noise on
    the rest of their footprint; normals there are recomputed from the noisy
    depth. Corruption of an object depends only on ``(scene.rng_seed, object
    id)``, so it stays fixed when other objects are removed.
    """
    tf = true_fields(scene, config)
    height = tf.height.copy()
    normals = tf.normals.copy()
    intensity = np.full(scene.grid_size, FLOOR_INTENSITY)
    corrupted = []
    for k, obj in enumerate(scene.objects):
        mine = tf.object_index == k
        rng = stream(scene.rng_seed, "albedo", obj.id)
        lo, hi = _ALBEDO[obj.material]
        base = rng.uniform(lo, hi)
        intensity[mine] = np.clip(base + rng.normal(0.0, 0.02, size=scene.grid_size)[mine], 0.0, 1.0)
        p_holes = config.p_holes(obj.material)
        if p_holes > 0.0:
            rng = stream(scene.rng_seed, "corrupt", obj.id)
            holes = rng.random(scene.grid_size) < p_holes
            noise = rng.normal(0.0, config.depth_noise(obj.material) * obj.extent[2], size=scene.grid_size)
            height[mine] = np.clip(height[mine] + noise[mine], 0.0, None)
            height[mine & holes] = 0.0
            corrupted.append((mine, mine & holes))
    if corrupted:
        rough = _normals_from_height(height)
        for mine, holes in corrupted:
            normals[mine] = rough[mine]
            normals[holes] = (0.0, 0.0, 1.0)
    return Observation(_readonly(height), _readonly(normals), _readonly(intensity))


# --------------------------------------------------------------------------
# grasping


def approach_vector(alpha: float, beta: float) -> np.ndarray:
    """Unit approach direction of the gripper: R_y(beta) R_x(alpha) (0, 0, -1)."""
    ca, sa, cb, sb = math.cos(alpha), math.sin(alpha), math.cos(beta), math.sin(beta)
    return np.array([-sb * ca, sa, -cb * ca])


def normal_to_tilt(normals: np.ndarray) -> np.ndarray:
    """Tilt angles ``(alpha, beta)`` whose approach axis points along ``-normal``.

    Works on any ``(..., 3)`` array; results are clipped to the action bounds.
    """
    nx, ny, nz = normals[..., 0], normals[..., 1], normals[..., 2]
    alpha = -np.arcsin(np.clip(ny, -1.0, 1.0))
    beta = np.arctan2(nx, nz)
    return np.clip(np.stack([alpha, beta], axis=-1), -MAX_TILT, MAX_TILT)


def alignment(normal: np.ndarray, approach: np.ndarray, power: float = 4.0) -> float:
    """``max(0, cos theta)^power`` between the approach axis and the inward normal ``-normal``."""
    cos_theta = float(np.dot(approach, -np.asarray(normal)))
    return max(0.0, cos_theta) ** power


def _check_inside(scene: Scene, action: GraspAction) -> None:
    h, w = scene.grid_size
    if not (0 <= action.row < h and 0 <= action.col < w) or not scene.bin_mask[action.row, action.col]:
        raise ValueError(f"grasp pixel {(action.row, action.col)} outside the bin")


def true_success_prob(scene: Scene, action: GraspAction, config: SimConfig = DEFAULT_CONFIG) -> float:
    """base_graspability x flatness x alignment at the grasped pixel (0 on the floor)."""
    _check_inside(scene, action)
    tf = true_fields(scene, config)
    k = tf.object_index[action.row, action.col]
    if k < 0:
        return 0.0
    obj = scene.objects[k]
    align = alignment(tf.normals[action.row, action.col], approach_vector(action.alpha, action.beta),
                      config.alignment_power)
    return float(obj.base_graspability * tf.flatness[action.row, action.col] * align)


def execute_grasp(scene: Scene, action: GraspAction, attempt_index: int,
                  config: SimConfig = DEFAULT_CONFIG) -> tuple[GraspOutcome, Scene]:
    """Draw the grasp outcome from the ``(scene.rng_seed, attempt_index)`` stream.

    On success the grasped object is removed and a new Scene is returned; on
    failure the input scene is returned unchanged.
    """
    p = true_success_prob(scene, action, config)
    u = stream(scene.rng_seed, "grasp", attempt_index).random()
    if u < p:
        k = true_fields(scene, config).object_index[action.row, action.col]
        obj_id = scene.objects[k].id
        return GraspOutcome(1, obj_id, p), scene.without(obj_id)
    return GraspOutcome(0, None, p), scene


def clearing_rate(initial_count: int, remaining_count: int) -> float:
    if initial_count <= 0:
        raise ValueError("empty bin")
    if not 0 <= remaining_count <= initial_count:
        raise ValueError("remaining count must lie in [0, initial]")
    return (initial_count - remaining_count) / initial_count


# --------------------------------------------------------------------------
# serialization


def dumps_scene(scene: Scene) -> str:
    """Text format, one object per line::

        graspucb-scene v1
        grid <H> <W>
        border <b>
        seed <s>
        objects <n>
        <id> <shape> <row> <col> <yaw> <length> <width> <height> <material> <base_graspability>
    """
    lines = [
        f"graspucb-scene v{SCENE_FORMAT_VERSION}",
        f"grid {scene.grid_size[0]} {scene.grid_size[1]}",
        f"border {scene.border}",
        f"seed {scene.rng_seed}",
        f"objects {len(scene.objects)}",
    ]
    for o in scene.objects:
        fields = [str(o.id), o.shape.value, *map(repr, o.pose), *map(repr, o.extent),
                  o.material.value, repr(o.base_graspability)]
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def loads_scene(text: str) -> Scene:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if lines[0].split() != ["graspucb-scene", f"v{SCENE_FORMAT_VERSION}"]:
        raise ValueError(f"unsupported scene header: {lines[0]!r}")
    header = {}
    for ln in lines[1:5]:
        key, *vals = ln.split()
        header[key] = [int(v) for v in vals]
    objects = []
    for ln in lines[5 : 5 + header["objects"][0]]:
        p = ln.split()
        objects.append(ObjectSpec(
            int(p[0]), Shape(p[1]), (float(p[2]), float(p[3]), float(p[4])),
            (float(p[5]), float(p[6]), float(p[7])), Material(p[8]), float(p[9]),
        ))
    return Scene(tuple(header["grid"]), tuple(objects), header["seed"][0], header["border"][0])


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(dumps_scene(scene))


def load_scene(path: str | Path) -> Scene:
    return loads_scene(Path(path).read_text())
