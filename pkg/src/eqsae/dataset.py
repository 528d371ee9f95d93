"""Synthetic four-quadrant shape images under the C4 rotation group.

Images are 64x64 binary rasters split into four 32x32 cells, each holding one
of eight glyphs. The group generator is the counterclockwise quarter turn
``(i, j) -> (63 - j, i)``, which moves whole cells between quadrants and
rotates each glyph in place.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .numerics import etns

IMAGE_SIZE = 64
CELL = 32
N_SHAPES = 8
N_POSITIONS = 4
GROUP_ORDER = 4

SHAPE_NAMES = (
    "horizontal_rectangle",
    "diagonal_line",
    "right_triangle",
    "l_shape",
    "t_shape",
    "chevron",
    "half_disk",
    "staircase",
)

# quadrant index after one counterclockwise quarter turn: TL->BL, TR->TL, BL->BR, BR->TR
_QUADRANT_CCW = (2, 0, 3, 1)
_QUADRANT_SLICES = (
    (slice(0, CELL), slice(0, CELL)),
    (slice(0, CELL), slice(CELL, 2 * CELL)),
    (slice(CELL, 2 * CELL), slice(0, CELL)),
    (slice(CELL, 2 * CELL), slice(CELL, 2 * CELL)),
)

Augment = Literal["none", "all_rotations", "random_rotation"]
OrientationLaw = Literal["upright", "uniform"]


class DatasetError(ValueError):
    pass


# -- glyphs -------------------------------------------------------------------


def _base_glyph(shape: int) -> np.ndarray:
    g = np.zeros((CELL, CELL), dtype=np.uint8)
    ii, jj = np.mgrid[0:CELL, 0:CELL]
    if shape == 0:
        g[12:20, 4:28] = 1
    elif shape == 1:
        inside = (ii >= 3) & (ii <= 28) & (jj >= 3) & (jj <= 28)
        g[inside & (np.abs(ii - jj) <= 1)] = 1
    elif shape == 2:
        inside = (ii >= 4) & (ii <= 27) & (jj >= 4) & (jj <= 27)
        g[inside & (ii >= jj)] = 1
    elif shape == 3:
        g[4:28, 6:12] = 1
        g[22:28, 6:26] = 1
    elif shape == 4:
        g[4:10, 4:28] = 1
        g[4:28, 13:19] = 1
    elif shape == 5:
        # chevron pointing right: two thick strokes meeting at the right-hand tip
        for i in range(4, 28):
            tip = 24 - abs(i - 15.5) * 1.2
            j0 = int(round(tip)) - 4
            g[i, max(j0, 4) : int(round(tip)) + 1] = 1
    elif shape == 6:
        disk = (ii - 15.5) ** 2 + (jj - 15.5) ** 2 <= 12.5**2
        g[disk & (ii <= 15)] = 1
    elif shape == 7:
        g[4:12, 4:12] = 1
        g[12:20, 4:20] = 1
        g[20:28, 4:28] = 1
    else:
        raise DatasetError(f"invalid shape id {shape}")
    return g


def orientation_period(shape: int) -> int:
    """Number of distinct orientations a glyph has under quarter turns."""
    if not 0 <= int(shape) < N_SHAPES:
        raise DatasetError(f"invalid shape id {shape}")
    return 2 if shape < 2 else 4


@lru_cache(maxsize=None)
def _glyph_cached(shape: int, orientation: int) -> np.ndarray:
    g = np.rot90(_base_glyph(shape), orientation).copy()
    g.setflags(write=False)
    return g


def render_glyph(shape: int, orientation: int) -> np.ndarray:
    """Binary 32x32 raster of ``shape`` rotated by ``orientation`` quarter turns."""
    period = orientation_period(shape)
    if not 0 <= orientation < period:
        raise DatasetError(f"orientation {orientation} invalid for shape {shape} (period {period})")
    return _glyph_cached(int(shape), int(orientation))


def measured_period(shape: int) -> int:
    base = _base_glyph(shape)
    for p in range(1, GROUP_ORDER + 1):
        if np.array_equal(np.rot90(base, p), base):
            return p
    raise AssertionError("unreachable: rot90^4 is the identity")


def verify_glyph_periods() -> None:
    got = tuple(measured_period(s) for s in range(N_SHAPES))
    expected = tuple(orientation_period(s) for s in range(N_SHAPES))
    if got != expected:
        raise DatasetError(f"glyph periods {got} != {expected}")


# -- specs and images ------------------------------------------------------------


@dataclass(frozen=True)
class ImageSpec:
    """Post-rotation quadrant contents plus the power that produced them.

    ``quadrants[q] = (shape, orientation)`` describes what is visible in
    quadrant q of the final image. ``canonical`` recovers the p=0 layout.
    """

    quadrants: tuple[tuple[int, int], ...]
    power: int = 0

    def __post_init__(self):
        if len(self.quadrants) != N_POSITIONS:
            raise DatasetError("an image has exactly four quadrants")
        for shape, orient in self.quadrants:
            if not 0 <= orient < orientation_period(shape):
                raise DatasetError(f"orientation {orient} invalid for shape {shape}")
        if not 0 <= self.power < GROUP_ORDER:
            raise DatasetError(f"power {self.power} outside [0, 3]")

    def rotated(self, p: int) -> "ImageSpec":
        """Spec of this image after ``p`` further quarter turns."""
        quads = list(self.quadrants)
        for _ in range(p % GROUP_ORDER):
            nxt: list = [None] * N_POSITIONS
            for q, (shape, orient) in enumerate(quads):
                nxt[_QUADRANT_CCW[q]] = (shape, (orient + 1) % orientation_period(shape))
            quads = nxt
        return ImageSpec(tuple(quads), (self.power + p) % GROUP_ORDER)

    def canonical(self) -> "ImageSpec":
        return self.rotated(-self.power % GROUP_ORDER)

    def to_json(self) -> dict:
        return {"quadrants": [list(q) for q in self.quadrants], "power": self.power}

    @classmethod
    def from_json(cls, obj: dict) -> "ImageSpec":
        return cls(tuple((int(s), int(o)) for s, o in obj["quadrants"]), int(obj["power"]))

    @classmethod
    def from_canonical(cls, quadrants: Sequence[tuple[int, int]], power: int = 0) -> "ImageSpec":
        return cls(tuple((int(s), int(o)) for s, o in quadrants), 0).rotated(power)


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (1, 64, 64), values in {0, 1}
    spec: ImageSpec


def rotate_image(img: np.ndarray, p: int) -> np.ndarray:
    """Apply ``p`` counterclockwise quarter turns to the trailing two axes."""
    if not 0 <= p < GROUP_ORDER:
        raise DatasetError(f"power {p} outside [0, 3]")
    return np.ascontiguousarray(np.rot90(img, p, axes=(-2, -1)))


def compose_pixels(spec: ImageSpec, dtype=np.float32) -> np.ndarray:
    img = np.zeros((1, IMAGE_SIZE, IMAGE_SIZE), dtype=dtype)
    for q, (shape, orient) in enumerate(spec.quadrants):
        rows, cols = _QUADRANT_SLICES[q]
        img[0, rows, cols] = render_glyph(shape, orient)
    return img


def compose_image(spec: ImageSpec) -> LabeledImage:
    return LabeledImage(compose_pixels(spec), spec)


# -- generation ---------------------------------------------------------------------


def sample_canonical(rng: np.random.Generator, orientation_law: OrientationLaw = "upright") -> ImageSpec:
    shapes = rng.integers(0, N_SHAPES, size=N_POSITIONS)
    if orientation_law == "upright":
        orients = [0] * N_POSITIONS
    elif orientation_law == "uniform":
        orients = [int(rng.integers(0, orientation_period(s))) for s in shapes]
    else:
        raise DatasetError(f"unknown orientation law {orientation_law!r}")
    return ImageSpec(tuple((int(s), o) for s, o in zip(shapes, orients)), 0)


def generate_specs(
    n_canonical: int,
    seed: int,
    augment: Augment = "none",
    orientation_law: OrientationLaw = "upright",
) -> list[ImageSpec]:
    """Deterministic list of image specs.

    ``all_rotations`` emits each canonical image at p = 0..3 consecutively, so
    rows ``4*i : 4*i + 4`` form orbit i.
    """
    if n_canonical < 1:
        raise DatasetError("n_canonical must be >= 1")
    rng = np.random.default_rng(seed)
    canon = [sample_canonical(rng, orientation_law) for _ in range(n_canonical)]
    if augment == "none":
        return canon
    if augment == "all_rotations":
        return [c.rotated(p) for c in canon for p in range(GROUP_ORDER)]
    if augment == "random_rotation":
        powers = rng.integers(0, GROUP_ORDER, size=n_canonical)
        return [c.rotated(int(p)) for c, p in zip(canon, powers)]
    raise DatasetError(f"unknown augmentation {augment!r}")


def render_specs(specs: Sequence[ImageSpec], dtype=np.float32) -> np.ndarray:
    out = np.empty((len(specs), 1, IMAGE_SIZE, IMAGE_SIZE), dtype=dtype)
    for i, spec in enumerate(specs):
        out[i] = compose_pixels(spec, dtype)
    return out


def generate_dataset(
    n_canonical: int,
    seed: int,
    augment: Augment = "none",
    orientation_law: OrientationLaw = "upright",
) -> list[LabeledImage]:
    specs = generate_specs(n_canonical, seed, augment, orientation_law)
    return [compose_image(s) for s in specs]


# -- probing tasks -------------------------------------------------------------------


@dataclass(frozen=True)
class TaskSpec:
    family: str  # S, SP, SO or SPO
    shape: int
    position: int | None = None
    orientation: int | None = None

    def __post_init__(self):
        needs_pos = self.family in ("SP", "SPO")
        needs_orient = self.family in ("SO", "SPO")
        if self.family not in ("S", "SP", "SO", "SPO"):
            raise DatasetError(f"unknown task family {self.family!r}")
        if needs_pos != (self.position is not None) or needs_orient != (self.orientation is not None):
            raise DatasetError(f"task fields do not match family {self.family}")
        if self.orientation is not None and not 0 <= self.orientation < orientation_period(self.shape):
            raise DatasetError("task orientation outside the shape's period")

    @property
    def name(self) -> str:
        parts = [self.family, f"s{self.shape}"]
        if self.position is not None:
            parts.append(f"p{self.position}")
        if self.orientation is not None:
            parts.append(f"o{self.orientation}")
        return "_".join(parts)

    def to_json(self) -> dict:
        return asdict(self)


FAMILIES = ("S", "SP", "SO", "SPO")


def enumerate_tasks() -> list[TaskSpec]:
    tasks = [TaskSpec("S", s) for s in range(N_SHAPES)]
    tasks += [TaskSpec("SO", s, orientation=o) for s in range(N_SHAPES) for o in range(orientation_period(s))]
    tasks += [TaskSpec("SP", s, position=q) for s in range(N_SHAPES) for q in range(N_POSITIONS)]
    tasks += [
        TaskSpec("SPO", s, position=q, orientation=o)
        for s in range(N_SHAPES)
        for q in range(N_POSITIONS)
        for o in range(orientation_period(s))
    ]
    return tasks


def task_label(img: LabeledImage | ImageSpec, task: TaskSpec) -> bool:
    spec = img.spec if isinstance(img, LabeledImage) else img
    for q, (shape, orient) in enumerate(spec.quadrants):
        if shape != task.shape:
            continue
        if task.position is not None and q != task.position:
            continue
        if task.orientation is not None and orient != task.orientation:
            continue
        return True
    return False


def label_matrix(specs: Sequence[ImageSpec], tasks: Sequence[TaskSpec]) -> np.ndarray:
    """Boolean (n_images, n_tasks) label table."""
    quads = np.array([[q for q in s.quadrants] for s in specs], dtype=np.int64)  # (n, 4, 2)
    shapes, orients = quads[..., 0], quads[..., 1]
    out = np.zeros((len(specs), len(tasks)), dtype=bool)
    pos = np.arange(N_POSITIONS)[None, :]
    for t, task in enumerate(tasks):
        hit = shapes == task.shape
        if task.position is not None:
            hit &= pos == task.position
        if task.orientation is not None:
            hit &= orients == task.orientation
        out[:, t] = hit.any(axis=1)
    return out


# -- persistence -----------------------------------------------------------------------

MANIFEST_SCHEMA = "eqsae.dataset/1"


def save_dataset(directory: str | Path, specs: Sequence[ImageSpec], images: np.ndarray, meta: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    etns.save(directory / "images.etns", images)
    manifest = {"schema": MANIFEST_SCHEMA, **meta, "count": len(specs), "specs": [s.to_json() for s in specs]}
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))


def load_dataset(directory: str | Path) -> tuple[list[ImageSpec], np.ndarray, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise DatasetError(f"{directory}: unexpected manifest schema {manifest.get('schema')!r}")
    specs = [ImageSpec.from_json(o) for o in manifest.pop("specs")]
    images = etns.load(directory / "images.etns")
    if images.shape[0] != len(specs):
        raise DatasetError(f"{directory}: {images.shape[0]} images but {len(specs)} specs")
    return specs, images, manifest


def orbit_rows(n_orbits: int) -> Iterable[np.ndarray]:
    for i in range(n_orbits):
        yield np.arange(GROUP_ORDER * i, GROUP_ORDER * (i + 1))


def class_balance(specs: Sequence[ImageSpec], tasks: Sequence[TaskSpec] | None = None) -> dict[str, float]:
    """Mean share of negative examples per task family."""
    tasks = list(tasks or enumerate_tasks())
    labels = label_matrix(specs, tasks)
    out = {}
    for fam in FAMILIES:
        cols = [i for i, t in enumerate(tasks) if t.family == fam]
        out[fam] = float(1.0 - labels[:, cols].mean())
    return out


