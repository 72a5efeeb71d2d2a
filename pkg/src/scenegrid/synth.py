"""Deterministic synthesis of spatial instruction samples.

Three task kinds are generated from scene records, all answered in
quantized grid coordinates:

* ``distance``  -- axis-wise distance between two described objects,
* ``movement``  -- relocate a described object by a grid offset,
* ``placement`` -- predict the center of a masked object in a sub-scene.

Every sample is self-consistent: its answer string parses back into
exactly its structured ground truth. All randomness flows from one root
seed through per-sample child seeds derived by hashing, so the emitted
byte stream is identical across runs and independent of generation order.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .codec import QuantBox, QuantTransform, emit_center, emit_gap, emit_loc
from .scenes import SceneObject, SceneRecord, BOUNDS_PAD_FRACTION

__all__ = [
    "TASKS",
    "DIRECTIONS",
    "InstructionSample",
    "SubScene",
    "DatasetPlan",
    "DatasetResult",
    "synth_distance",
    "synth_movement",
    "extract_subscenes",
    "synth_placement",
    "generate_dataset",
    "write_dataset",
    "load_samples",
    "verify_sample",
]

TASKS = ("distance", "movement", "placement")

# direction -> (axis, sign); right-handed convention with forward = +y
DIRECTIONS = {
    "right": (0, +1),
    "left": (0, -1),
    "forward": (1, +1),
    "backward": (1, -1),
    "up": (2, +1),
    "down": (2, -1),
}

MOVE_MAGNITUDE_RANGE = (10, 150)  # grid units

DISTANCE_QUESTION = (
    "Object A is described as: '{desc_a}' Object B is described as: '{desc_b}' "
    "Please provide the distance between Object A and Object B."
)
DISTANCE_ANSWER = (
    "Object A is a {label_a} located at {loc_a}. "
    "Object B is a {label_b} located at {loc_b}. "
    "The spatial distance from Object A to Object B on the x-axis is {gap_x} units, "
    "on the y-axis is {gap_y} units, and on the z-axis is {gap_z} units."
)
MOVEMENT_QUESTION = (
    "Based on the provided description, '{description}' Move the object that "
    "closely matches this description {direction} by {magnitude} units, and then "
    "describe its new location."
)
MOVEMENT_ANSWER = (
    "It is a {label} located at {loc}. "
    "Its location after moving {direction} by {magnitude} units is {moved_loc}."
)
PLACEMENT_QUESTION = (
    "Add a {label} with size w:{w}, h:{h}, l:{l} to the current indoor scene, "
    "and please output the center coordinates of the object."
)


@dataclass
class InstructionSample:
    task: str
    scene_id: str
    question: str
    answer: str
    gt: dict
    provenance: dict = field(default_factory=dict)
    sample_id: str = ""

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "task": self.task,
            "scene_id": self.scene_id,
            "question": self.question,
            "answer": self.answer,
            "gt": self.gt,
            "provenance": self.provenance,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "InstructionSample":
        return cls(
            task=rec["task"],
            scene_id=rec["scene_id"],
            question=rec["question"],
            answer=rec["answer"],
            gt=rec["gt"],
            provenance=rec.get("provenance", {}),
            sample_id=rec.get("sample_id", ""),
        )


@dataclass
class SubScene:
    """A 3-8 object excerpt of a scene with its own grid transform."""

    parent_scene_id: str
    objects: list[SceneObject]
    bounds: tuple[np.ndarray, np.ndarray]

    def __post_init__(self):
        if not 3 <= len(self.objects) <= 8:
            raise ValueError(
                f"sub-scene needs 3..8 objects, got {len(self.objects)}"
            )

    @property
    def transform(self) -> QuantTransform:
        lo, hi = self.bounds
        return QuantTransform(mins=tuple(lo), maxs=tuple(hi))

    def object_ids(self) -> list[str]:
        return [o.object_id for o in self.objects]


def _padded_union_bounds(objects: list[SceneObject]):
    lo = np.min([o.box.min_corner for o in objects], axis=0)
    hi = np.max([o.box.max_corner for o in objects], axis=0)
    pad = (hi - lo) * BOUNDS_PAD_FRACTION
    return lo - pad, hi + pad


# --------------------------------------------------------------------------
# single-sample synthesizers


def synth_distance(
    scene: SceneRecord, a: str, b: str, rng: random.Random
) -> InstructionSample:
    """Distance-measurement sample for object pair (a, b)."""
    if a == b:
        raise ValueError("distance task needs two distinct objects")
    obj_a = scene.object_by_id(a)
    obj_b = scene.object_by_id(b)
    transform = codec.fit_transform(scene)
    qa = transform.quantize_box(obj_a.box)
    qb = transform.quantize_box(obj_b.box)
    gaps = [abs(ca - cb) for ca, cb in zip(qa.center, qb.center)]

    question = DISTANCE_QUESTION.format(
        desc_a=rng.choice(obj_a.descriptions), desc_b=rng.choice(obj_b.descriptions)
    )
    answer = DISTANCE_ANSWER.format(
        label_a=obj_a.label,
        loc_a=emit_loc(qa),
        label_b=obj_b.label,
        loc_b=emit_loc(qb),
        gap_x=emit_gap(gaps[0]),
        gap_y=emit_gap(gaps[1]),
        gap_z=emit_gap(gaps[2]),
    )
    return InstructionSample(
        task="distance",
        scene_id=scene.scene_id,
        question=question,
        answer=answer,
        gt={
            "boxes": [qa.as_list(), qb.as_list()],
            "gaps": gaps,
            "labels": [obj_a.label, obj_b.label],
        },
        provenance={"objects": [a, b]},
    )


def movement_feasible(
    box: QuantBox, direction: str, min_magnitude: int = MOVE_MAGNITUDE_RANGE[0]
) -> bool:
    """Whether a move of at least ``min_magnitude`` keeps the box on the grid."""
    return _max_magnitude(box, direction) >= min_magnitude


def _max_magnitude(box: QuantBox, direction: str) -> int:
    axis, sign = DIRECTIONS[direction]
    half = box.extent[axis] / 2.0
    if sign > 0:
        room = codec.GRID_MAX - (box.center[axis] + half)
    else:
        room = box.center[axis] - half
    return int(np.floor(room))


def synth_movement(
    scene: SceneRecord,
    obj: str,
    direction: str,
    magnitude: int,
    rng: random.Random,
) -> InstructionSample:
    """Object-movement sample: relocate ``obj`` by ``magnitude`` grid units."""
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    magnitude = int(magnitude)
    if magnitude < 1:
        raise ValueError(f"magnitude must be >= 1, got {magnitude}")
    target = scene.object_by_id(obj)
    transform = codec.fit_transform(scene)
    qbox = transform.quantize_box(target.box)

    axis, sign = DIRECTIONS[direction]
    if magnitude > _max_magnitude(qbox, direction):
        raise ValueError(
            f"moving {obj!r} {direction} by {magnitude} leaves the grid"
        )
    moved_center = list(qbox.center)
    moved_center[axis] += sign * magnitude
    moved = qbox.moved_to(tuple(moved_center))

    question = MOVEMENT_QUESTION.format(
        description=rng.choice(target.descriptions),
        direction=direction,
        magnitude=magnitude,
    )
    answer = MOVEMENT_ANSWER.format(
        label=target.label,
        loc=emit_loc(qbox),
        direction=direction,
        magnitude=magnitude,
        moved_loc=emit_loc(moved),
    )
    return InstructionSample(
        task="movement",
        scene_id=scene.scene_id,
        question=question,
        answer=answer,
        gt={
            "boxes": [qbox.as_list(), moved.as_list()],
            "direction": direction,
            "magnitude": magnitude,
            "label": target.label,
        },
        provenance={"objects": [obj]},
    )


def extract_subscenes(
    scene: SceneRecord, count: int, rng: random.Random
) -> list[SubScene]:
    """Sample sub-scenes: a random anchor plus its nearest objects.

    Sub-scene size is uniform in [3, min(8, n_objects)]; membership is the
    anchor and its (size - 1) nearest objects by center distance with ties
    to the lowest index. Bounds are recomputed from the members.
    """
    n = len(scene.objects)
    if n < 3:
        raise ValueError(f"scene {scene.scene_id!r} needs >= 3 objects, has {n}")
    if count < 1:
        raise ValueError("count must be >= 1")
    centers = scene.centroids()
    subscenes = []
    for _ in range(count):
        anchor = rng.randrange(n)
        size = rng.randint(3, min(8, n))
        dists = np.linalg.norm(centers - centers[anchor], axis=1)
        dists[anchor] = -1.0  # anchor always first
        order = np.argsort(dists, kind="stable")
        members = [scene.objects[i] for i in order[:size]]
        subscenes.append(
            SubScene(
                parent_scene_id=scene.scene_id,
                objects=members,
                bounds=_padded_union_bounds(members),
            )
        )
    return subscenes


def synth_placement(
    sub: SubScene, rng: random.Random, mask_object_id: str | None = None
) -> InstructionSample:
    """Placement sample: mask one object, ask for its center by size."""
    if mask_object_id is None:
        masked = rng.choice(sub.objects)
    else:
        matches = [o for o in sub.objects if o.object_id == mask_object_id]
        if not matches:
            raise ValueError(f"no object {mask_object_id!r} in sub-scene")
        masked = matches[0]
    transform = sub.transform
    qbox = transform.quantize_box(masked.box)
    w, h, l = qbox.extent

    question = PLACEMENT_QUESTION.format(label=masked.label, w=w, h=h, l=l)
    answer = emit_center(qbox.center)
    return InstructionSample(
        task="placement",
        scene_id=sub.parent_scene_id,
        question=question,
        answer=answer,
        gt={
            "box": qbox.as_list(),
            "center": list(qbox.center),
            "size": [w, h, l],
            "label": masked.label,
        },
        provenance={
            "objects": [masked.object_id],
            "subscene": sub.object_ids(),
        },
    )


# --------------------------------------------------------------------------
# dataset generation

# full-size per-task sample counts that --scale multiplies down
FULL_COUNTS = {
    "train": {"distance": 171_000, "movement": 36_000, "placement": 34_000},
    "val": {"distance": 2_000, "movement": 9_000, "placement": 9_000},
}


@dataclass
class DatasetPlan:
    train_counts: dict[str, int]
    val_counts: dict[str, int]
    val_scene_fraction: float = 0.1

    def __post_init__(self):
        for counts in (self.train_counts, self.val_counts):
            for task in counts:
                if task not in TASKS:
                    raise ValueError(f"unknown task {task!r}")
                if counts[task] < 0:
                    raise ValueError("sample counts must be >= 0")

    @classmethod
    def scaled(cls, scale: float, tasks=TASKS) -> "DatasetPlan":
        if scale <= 0:
            raise ValueError("scale must be positive")
        return cls(
            train_counts={
                t: int(round(FULL_COUNTS["train"][t] * scale)) for t in tasks
            },
            val_counts={t: int(round(FULL_COUNTS["val"][t] * scale)) for t in tasks},
        )

    def counts(self, split: str) -> dict[str, int]:
        return self.train_counts if split == "train" else self.val_counts


@dataclass
class DatasetResult:
    splits: dict[str, list[InstructionSample]]
    manifest: dict


def _child_seed(root_seed: int, *parts) -> int:
    key = "|".join(str(p) for p in (root_seed, *parts))
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _scene_capacity(scene: SceneRecord, task: str) -> int | None:
    """Distinct-sample capacity per scene; None means effectively unbounded."""
    n = len(scene.objects)
    if task == "distance":
        return n * (n - 1) if n >= 2 else 0
    if task == "movement":
        transform = codec.fit_transform(scene)
        feasible = 0
        for obj in scene.objects:
            qbox = transform.quantize_box(obj.box)
            feasible += sum(
                1 for d in DIRECTIONS if movement_feasible(qbox, d)
            )
        return feasible
    return None if n >= 3 else 0  # placement resamples sub-scenes freely


def _assign_quotas(
    scenes: list[SceneRecord], task: str, total: int, split: str
) -> dict[str, int]:
    """Spread ``total`` samples over scenes round-robin, capped by capacity."""
    caps = {s.scene_id: _scene_capacity(s, task) for s in scenes}
    available = sum(c for c in caps.values() if c is not None)
    unbounded = any(c is None for c in caps.values())
    if not unbounded and total > available:
        raise ValueError(
            f"plan unsatisfiable: {split}/{task} needs {total} samples but the "
            f"{len(scenes)} {split} scenes support only {available}"
        )
    if unbounded and not scenes:
        raise ValueError(f"plan unsatisfiable: no {split} scenes for task {task}")

    quotas = {s.scene_id: 0 for s in scenes}
    remaining = total
    while remaining > 0:
        progressed = False
        for s in scenes:
            if remaining == 0:
                break
            cap = caps[s.scene_id]
            if cap is None or quotas[s.scene_id] < cap:
                quotas[s.scene_id] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise ValueError(
                f"plan unsatisfiable: {split}/{task} short by {remaining} samples"
            )
    return quotas


def _scene_distance_samples(scene, quota, root_seed):
    ids = [o.object_id for o in scene.objects]
    pairs = [(a, b) for a in ids for b in ids if a != b]
    random.Random(_child_seed(root_seed, scene.scene_id, "distance", "order")).shuffle(
        pairs
    )
    out = []
    for i in range(quota):
        a, b = pairs[i]
        seed = _child_seed(root_seed, scene.scene_id, "distance", i)
        sample = synth_distance(scene, a, b, random.Random(seed))
        sample.provenance["seed"] = seed
        out.append(sample)
    return out


def _scene_movement_samples(scene, quota, root_seed):
    transform = codec.fit_transform(scene)
    combos = []
    for obj in scene.objects:
        qbox = transform.quantize_box(obj.box)
        for direction in DIRECTIONS:
            if movement_feasible(qbox, direction):
                combos.append((obj.object_id, direction, _max_magnitude(qbox, direction)))
    random.Random(_child_seed(root_seed, scene.scene_id, "movement", "order")).shuffle(
        combos
    )
    out = []
    for i in range(quota):
        obj_id, direction, max_mag = combos[i]
        seed = _child_seed(root_seed, scene.scene_id, "movement", i)
        rng = random.Random(seed)
        # uniform over the feasible magnitudes (same law as resampling the
        # full [10, 150] range until the move stays on the grid)
        magnitude = rng.randint(
            MOVE_MAGNITUDE_RANGE[0], min(MOVE_MAGNITUDE_RANGE[1], max_mag)
        )
        sample = synth_movement(scene, obj_id, direction, magnitude, rng)
        sample.provenance["seed"] = seed
        out.append(sample)
    return out


def _scene_placement_samples(scene, quota, root_seed):
    sub_rng = random.Random(_child_seed(root_seed, scene.scene_id, "placement", "subs"))
    subscenes = extract_subscenes(scene, quota, sub_rng)
    out = []
    for i, sub in enumerate(subscenes):
        seed = _child_seed(root_seed, scene.scene_id, "placement", i)
        sample = synth_placement(sub, random.Random(seed))
        sample.provenance["seed"] = seed
        out.append(sample)
    return out


_SCENE_SAMPLERS = {
    "distance": _scene_distance_samples,
    "movement": _scene_movement_samples,
    "placement": _scene_placement_samples,
}


def generate_dataset(
    scenes: list[SceneRecord], plan: DatasetPlan, seed: int = 0
) -> DatasetResult:
    """Generate train/val instruction samples plus a content-hashed manifest.

    Scenes are split scene-disjoint between train and val; samples stream in
    canonical (scene_id, task, per-scene index) order, so identical inputs
    always produce identical bytes and hashes.
    """
    if not scenes:
        raise ValueError("need at least one scene")
    ids = [s.scene_id for s in scenes]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate scene ids")
    ordered = sorted(scenes, key=lambda s: s.scene_id)

    want_val = any(v > 0 for v in plan.val_counts.values())
    shuffled = [s.scene_id for s in ordered]
    random.Random(_child_seed(seed, "scene-split")).shuffle(shuffled)
    n_val = max(1, round(len(ordered) * plan.val_scene_fraction)) if want_val else 0
    if want_val and len(ordered) < 2:
        raise ValueError("need >= 2 scenes for a scene-disjoint train/val split")
    val_ids = set(shuffled[:n_val])
    split_scenes = {
        "train": [s for s in ordered if s.scene_id not in val_ids],
        "val": [s for s in ordered if s.scene_id in val_ids],
    }

    splits: dict[str, list[InstructionSample]] = {}
    for split in ("train", "val"):
        counts = plan.counts(split)
        quotas = {
            task: _assign_quotas(split_scenes[split], task, counts.get(task, 0), split)
            for task in TASKS
            if counts.get(task, 0) > 0
        }
        samples = []
        for scene in split_scenes[split]:
            for task in TASKS:
                quota = quotas.get(task, {}).get(scene.scene_id, 0)
                if quota == 0:
                    continue
                scene_samples = _SCENE_SAMPLERS[task](scene, quota, seed)
                for i, sample in enumerate(scene_samples):
                    sample.sample_id = f"{scene.scene_id}/{task}/{i:05d}"
                samples.append((scene.scene_id, scene_samples))
        splits[split] = [s for _, group in samples for s in group]

    hashes = {split: _content_hash(samples) for split, samples in splits.items()}
    manifest = {
        "schema_version": 1,
        "seed": seed,
        "plan": {
            "train_counts": plan.train_counts,
            "val_counts": plan.val_counts,
            "val_scene_fraction": plan.val_scene_fraction,
        },
        "counts": {
            split: {
                task: sum(1 for s in samples if s.task == task) for task in TASKS
            }
            for split, samples in splits.items()
        },
        "scenes": {
            "train": [s.scene_id for s in split_scenes["train"]],
            "val": [s.scene_id for s in split_scenes["val"]],
        },
        "sha256": {
            **hashes,
            "combined": hashlib.sha256(
                (hashes["train"] + hashes["val"]).encode()
            ).hexdigest(),
        },
    }
    return DatasetResult(splits=splits, manifest=manifest)


def sample_lines(samples: list[InstructionSample]) -> str:
    return "".join(
        json.dumps(s.to_record(), sort_keys=True, ensure_ascii=False) + "\n"
        for s in samples
    )


def _content_hash(samples: list[InstructionSample]) -> str:
    return hashlib.sha256(sample_lines(samples).encode("utf-8")).hexdigest()


def write_dataset(result: DatasetResult, out_dir):
    """Write train.jsonl, val.jsonl and manifest.json under ``out_dir``."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    for split, samples in result.splits.items():
        with open(os.path.join(out_dir, f"{split}.jsonl"), "w", encoding="utf-8") as fh:
            fh.write(sample_lines(samples))
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(result.manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_samples(path) -> list[InstructionSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                samples.append(InstructionSample.from_record(json.loads(line)))
    return samples


def verify_sample(sample: InstructionSample):
    """Check that the answer text parses back into exactly the ground truth.

    Raises ValueError on any mismatch; used by the codec round-trip checker.
    """
    payload = codec.parse_answer(sample.answer)
    if sample.task == "distance":
        boxes = [list(b.as_list()) for b in payload.boxes]
        if boxes != sample.gt["boxes"]:
            raise ValueError(f"{sample.sample_id}: boxes mismatch")
        if payload.gaps != list(sample.gt["gaps"]):
            raise ValueError(f"{sample.sample_id}: gaps mismatch")
        recomputed = [
            abs(a - b)
            for a, b in zip(sample.gt["boxes"][0][:3], sample.gt["boxes"][1][:3])
        ]
        if recomputed != list(sample.gt["gaps"]):
            raise ValueError(f"{sample.sample_id}: gaps inconsistent with boxes")
    elif sample.task == "movement":
        boxes = [list(b.as_list()) for b in payload.boxes]
        if boxes != sample.gt["boxes"]:
            raise ValueError(f"{sample.sample_id}: boxes mismatch")
    elif sample.task == "placement":
        if payload.centers != [tuple(sample.gt["center"])]:
            raise ValueError(f"{sample.sample_id}: center mismatch")
    else:
        raise ValueError(f"{sample.sample_id}: unknown task {sample.task!r}")
