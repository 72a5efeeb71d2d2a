"""Scene records: annotated object boxes with free-text descriptions.

A ``SceneRecord`` is the neutral input format for dataset synthesis and the
toy trainer: a scene id, a list of labeled axis-aligned boxes with one or
more natural-language descriptions each, and optional explicit metric
bounds. Records are stored one JSON object per line (see ``load_scenes``
for the schema). A small deterministic synthetic-corpus generator lives
here too, so every pipeline can run without any external data.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box3

__all__ = [
    "SceneObject",
    "SceneRecord",
    "load_scenes",
    "save_scenes",
    "scene_point_cloud",
    "make_synthetic_scene",
    "make_synthetic_corpus",
    "sample_scene",
]

BOUNDS_PAD_FRACTION = 0.05  # per-side padding when inferring bounds from boxes


@dataclass
class SceneObject:
    object_id: str
    label: str
    box: Box3
    descriptions: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.object_id:
            raise ValueError("object_id must be non-empty")
        if not self.descriptions or any(not d for d in self.descriptions):
            raise ValueError(f"object {self.object_id!r} needs non-empty descriptions")


@dataclass
class SceneRecord:
    scene_id: str
    objects: list[SceneObject]
    bounds: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if not self.scene_id:
            raise ValueError("scene_id must be non-empty")
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate object ids in scene {self.scene_id!r}")
        if self.bounds is not None:
            lo = np.asarray(self.bounds[0], float)
            hi = np.asarray(self.bounds[1], float)
            if lo.shape != (3,) or hi.shape != (3,):
                raise ValueError("bounds must be two length-3 vectors")
            if np.any(hi <= lo):
                raise ValueError(f"degenerate bounds in scene {self.scene_id!r}")
            self.bounds = (lo, hi)
            for obj in self.objects:
                if np.any(obj.box.min_corner < lo - 1e-9) or np.any(
                    obj.box.max_corner > hi + 1e-9
                ):
                    raise ValueError(
                        f"object {obj.object_id!r} outside bounds of "
                        f"scene {self.scene_id!r}"
                    )

    def object_by_id(self, object_id: str) -> SceneObject:
        for obj in self.objects:
            if obj.object_id == object_id:
                return obj
        raise KeyError(f"no object {object_id!r} in scene {self.scene_id!r}")

    def inferred_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Explicit bounds, or the union of object boxes padded 5% per side."""
        if self.bounds is not None:
            return self.bounds
        if not self.objects:
            raise ValueError(f"scene {self.scene_id!r} has no objects and no bounds")
        lo = np.min([o.box.min_corner for o in self.objects], axis=0)
        hi = np.max([o.box.max_corner for o in self.objects], axis=0)
        pad = (hi - lo) * BOUNDS_PAD_FRACTION
        return lo - pad, hi + pad

    def centroids(self) -> np.ndarray:
        return np.stack([o.box.center for o in self.objects])

    def diagonal(self) -> float:
        lo, hi = self.inferred_bounds()
        return float(np.linalg.norm(hi - lo))


# --------------------------------------------------------------------------
# JSONL persistence


def _scene_to_dict(scene: SceneRecord) -> dict:
    rec = {
        "scene_id": scene.scene_id,
        "objects": [
            {
                "id": o.object_id,
                "label": o.label,
                "center": [float(v) for v in o.box.center],
                "extent": [float(v) for v in o.box.extent],
                "descriptions": list(o.descriptions),
            }
            for o in scene.objects
        ],
    }
    if scene.bounds is not None:
        rec["bounds"] = {
            "min": [float(v) for v in scene.bounds[0]],
            "max": [float(v) for v in scene.bounds[1]],
        }
    return rec


def _scene_from_dict(rec: dict) -> SceneRecord:
    objects = [
        SceneObject(
            object_id=o["id"],
            label=o["label"],
            box=Box3(center=o["center"], extent=o["extent"]),
            descriptions=list(o["descriptions"]),
        )
        for o in rec["objects"]
    ]
    bounds = None
    if "bounds" in rec:
        bounds = (np.array(rec["bounds"]["min"]), np.array(rec["bounds"]["max"]))
    return SceneRecord(scene_id=rec["scene_id"], objects=objects, bounds=bounds)


def save_scenes(scenes: list[SceneRecord], path):
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(json.dumps(_scene_to_dict(scene), sort_keys=True))
            fh.write("\n")


def load_scenes(path) -> list[SceneRecord]:
    """Read scene records from a JSONL file (one scene object per line).

    Schema per line::

        {"scene_id": str,
         "bounds": {"min": [x,y,z], "max": [x,y,z]}?,        # optional
         "objects": [{"id": str, "label": str,
                      "center": [x,y,z], "extent": [w,h,l],
                      "descriptions": [str, ...]}, ...]}
    """
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                scenes.append(_scene_from_dict(json.loads(line)))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{line_no}: bad scene record: {exc}") from exc
    return scenes


# --------------------------------------------------------------------------
# point sampling


def scene_point_cloud(
    scene: SceneRecord, points_per_object: int = 64, seed: int = 0
) -> np.ndarray:
    """Sample a deterministic point cloud from a scene's object boxes.

    Points are drawn uniformly inside each (non-degenerate) box, in object
    order, so the same scene and seed always give the same cloud.
    """
    rng = np.random.default_rng(seed)
    clouds = []
    for obj in scene.objects:
        lo, hi = obj.box.min_corner, obj.box.max_corner
        clouds.append(rng.uniform(lo, hi, size=(points_per_object, 3)))
    if not clouds:
        raise ValueError(f"scene {scene.scene_id!r} has no objects to sample")
    return np.vstack(clouds)


# --------------------------------------------------------------------------
# synthetic corpus

_LABELS = [
    "chair",
    "table",
    "cabinet",
    "sofa",
    "bed",
    "desk",
    "bookshelf",
    "lamp",
    "plant",
    "dresser",
    "bench",
    "stool",
]

_DESCRIPTION_TEMPLATES = [
    "this is a {color} {label}. it is {placement}.",
    "the {label} {placement}. it is {color}.",
    "a {color} {label} that sits {placement}.",
    "you will find a {label} {placement}. it looks {color}.",
]

_COLORS = ["brown", "black", "white", "gray", "blue", "red", "green", "beige"]

_PLACEMENTS = [
    "near the window",
    "against the wall",
    "in the corner of the room",
    "next to the door",
    "in the middle of the room",
    "beside the shelf",
    "close to the entrance",
]


def make_synthetic_scene(
    scene_id: str,
    n_objects: int,
    rng: random.Random,
    room_size: tuple[float, float, float] = (6.0, 6.0, 3.0),
) -> SceneRecord:
    """One random room: labeled boxes with synthetic descriptions."""
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    room = np.array(room_size, float)
    objects = []
    for i in range(n_objects):
        label = rng.choice(_LABELS)
        extent = np.array(
            [
                rng.uniform(0.3, 1.4),
                rng.uniform(0.3, 1.4),
                rng.uniform(0.3, min(1.8, room[2] - 0.2)),
            ]
        )
        lo_limit = extent / 2.0
        hi_limit = room - extent / 2.0
        center = np.array(
            [rng.uniform(lo_limit[a], hi_limit[a]) for a in range(3)]
        )
        n_desc = rng.randint(1, 3)
        descriptions = [
            rng.choice(_DESCRIPTION_TEMPLATES).format(
                label=label,
                color=rng.choice(_COLORS),
                placement=rng.choice(_PLACEMENTS),
            )
            for _ in range(n_desc)
        ]
        objects.append(
            SceneObject(
                object_id=f"{scene_id}_obj{i:02d}",
                label=label,
                box=Box3(center=center, extent=extent),
                descriptions=descriptions,
            )
        )
    bounds = (np.zeros(3), room)
    return SceneRecord(scene_id=scene_id, objects=objects, bounds=bounds)


def make_synthetic_corpus(
    n_scenes: int,
    seed: int = 0,
    min_objects: int = 8,
    max_objects: int = 12,
) -> list[SceneRecord]:
    """A reproducible corpus of random rooms for tests and demos."""
    rng = random.Random(seed)
    return [
        make_synthetic_scene(
            f"room{idx:04d}", rng.randint(min_objects, max_objects), rng
        )
        for idx in range(n_scenes)
    ]


def sample_scene() -> SceneRecord:
    """A small hand-built kitchen scene used throughout docs and tests.

    Bounds run 0..255 on every axis so metric coordinates land on the
    quantized grid unchanged, which makes expected token strings easy to
    read off.
    """
    objects = [
        SceneObject(
            object_id="kitchen_cabinets_0",
            label="kitchen_cabinets",
            box=Box3(center=[198.0, 171.0, 47.0], extent=[7.0, 96.0, 81.0]),
            descriptions=[
                "There is a set of bottom kitchen cabinets in the room. "
                "It has a microwave in the middle of it."
            ],
        ),
        SceneObject(
            object_id="chair_0",
            label="chair",
            box=Box3(center=[141.0, 110.0, 58.0], extent=[21.0, 16.0, 96.0]),
            descriptions=[
                "You are looking for a chair on the side of the table facing "
                "the ovens. It will be the chair near the rail."
            ],
        ),
        SceneObject(
            object_id="cabinet_0",
            label="cabinet",
            box=Box3(center=[209.0, 61.0, 160.0], extent=[27.0, 32.0, 153.0]),
            descriptions=[
                "this is a brown cabinet, it sets along the wall, "
                "right next to a window."
            ],
        ),
        SceneObject(
            object_id="chair_1",
            label="chair",
            box=Box3(center=[133.0, 80.0, 57.0], extent=[27.0, 22.0, 96.0]),
            descriptions=["a chair by the kitchen counter, close to the rail."],
        ),
    ]
    bounds = (np.zeros(3), np.full(3, 255.0))
    return SceneRecord(scene_id="demo_kitchen", objects=objects, bounds=bounds)
