"""Seeded scene generation: receptacle layout, task draw, object placement."""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from . import expert
from .catalog import Catalog, default_catalog
from .world import (
    ObjectInstance,
    ReceptacleInstance,
    TaskSpec,
    TASK_TYPES,
    WorldState,
    goal_satisfied,
)

GOAL_TEMPLATES = {
    "pick_and_place": "put a {obj} in {recep}",
    "pick_two_and_place": "put two {obj} in {recep}",
    "heat_and_place": "heat some {obj} and put it in {recep}",
    "cool_and_place": "cool some {obj} and put it in {recep}",
    "clean_and_place": "clean some {obj} and put it in {recep}",
    "examine_in_light": "look at {obj} under the {recep}",
}

_CONDITION_FLAGS = {
    "heat_and_place": ("heatable", "heat_source"),
    "cool_and_place": ("coolable", "cool_source"),
    "clean_and_place": ("cleanable", "clean_source"),
}

MAX_REJECTIONS = 100


class SceneGenerationError(RuntimeError):
    def __init__(self, seed: int, reason: str):
        super().__init__(f"could not generate a solvable scene for seed {seed}: {reason}")
        self.seed = seed


@dataclass(frozen=True)
class SceneConfig:
    min_receptacles: int = 12
    max_receptacles: int = 18
    max_objects_per_receptacle: int = 3
    anomaly_rate: float = 0.05
    task_seed: int | None = None          # defaults to the scene seed
    task_types: tuple[str, ...] = TASK_TYPES
    catalog: Catalog = field(default_factory=default_catalog, compare=False)

    def validate(self):
        if not (5 <= self.min_receptacles <= self.max_receptacles <= 30):
            raise ValueError("receptacle bounds must satisfy 5 <= min <= max <= 30")
        if not (0 <= self.max_objects_per_receptacle <= 15):
            raise ValueError("max_objects_per_receptacle must be in [0, 15]")
        if not (0.0 <= self.anomaly_rate <= 1.0):
            raise ValueError("anomaly_rate must be in [0, 1]")
        for t in self.task_types:
            if t not in TASK_TYPES:
                raise ValueError(f"unknown task type {t}")

    def to_dict(self) -> dict:
        return {
            "min_receptacles": self.min_receptacles,
            "max_receptacles": self.max_receptacles,
            "max_objects_per_receptacle": self.max_objects_per_receptacle,
            "anomaly_rate": self.anomaly_rate,
            "task_seed": self.task_seed,
            "task_types": list(self.task_types),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "SceneConfig":
        return cls(
            min_receptacles=raw["min_receptacles"],
            max_receptacles=raw["max_receptacles"],
            max_objects_per_receptacle=raw["max_objects_per_receptacle"],
            anomaly_rate=raw["anomaly_rate"],
            task_seed=raw.get("task_seed"),
            task_types=tuple(raw.get("task_types", TASK_TYPES)),
        )


def _draw_task(cat: Catalog, rng: random.Random, config: SceneConfig, seed: int) -> TaskSpec:
    ttype = rng.choice(list(config.task_types))
    if ttype == "examine_in_light":
        obj = rng.choice(cat.objects_with("examinable"))
        recep = rng.choice(cat.receptacles_with("light_source"))
    elif ttype in _CONDITION_FLAGS:
        obj_flag, _ = _CONDITION_FLAGS[ttype]
        obj = rng.choice(cat.objects_with(obj_flag))
        recep = rng.choice(cat.spawn_receptacles())
    else:
        obj = rng.choice(cat.object_names())
        recep = rng.choice(cat.spawn_receptacles())
    goal = GOAL_TEMPLATES[ttype].format(obj=obj, recep=recep)
    return TaskSpec(ttype, obj, recep, goal, seed)


def _required_classes(cat: Catalog, task: TaskSpec) -> list[str]:
    required = [task.target_receptacle_class]
    if task.task_type in _CONDITION_FLAGS:
        _, source_flag = _CONDITION_FLAGS[task.task_type]
        required.append(cat.receptacles_with(source_flag)[0])
    return required


def _build_attempt(seed_key: str, seed: int, config: SceneConfig) -> tuple[WorldState, TaskSpec]:
    cat = config.catalog
    rng = random.Random(seed_key)
    task_seed = config.task_seed if config.task_seed is not None else seed
    task = _draw_task(cat, random.Random(f"task:{task_seed}"), config, seed)

    # Receptacle layout: fixed count, classes drawn with replacement, then the
    # task's required classes swapped in so the count stays within bounds.
    count = rng.randint(config.min_receptacles, config.max_receptacles)
    pool = cat.receptacle_names()
    classes = [rng.choice(pool) for _ in range(count)]
    for need in _required_classes(cat, task):
        if need not in classes:
            replace_at = rng.randrange(count)
            while classes[replace_at] in _required_classes(cat, task):
                replace_at = (replace_at + 1) % count
            classes[replace_at] = need

    receptacles: list[ReceptacleInstance] = []
    per_class: dict[str, int] = {}
    for cls in classes:
        per_class[cls] = per_class.get(cls, 0) + 1
        is_open = False if cat.receptacles[cls].has("openable") else None
        receptacles.append(ReceptacleInstance(cls, per_class[cls], is_open))

    spawn_classes = set(cat.spawn_receptacles())
    spawn_sites = [r for r in receptacles if r.cls in spawn_classes]
    anomaly_sites = [r for r in receptacles if r.cls in cat.anomaly_receptacles]
    if not spawn_sites:
        raise SceneGenerationError(seed, "no eligible spawn receptacles")

    objects: list[ObjectInstance] = []
    obj_counts: dict[str, int] = {}
    load: dict[str, int] = {}

    def spawn(cls: str, site: ReceptacleInstance):
        obj_counts[cls] = obj_counts.get(cls, 0) + 1
        load[site.name] = load.get(site.name, 0) + 1
        objects.append(ObjectInstance(cls, obj_counts[cls], site.name))

    def has_room(r: ReceptacleInstance) -> bool:
        return load.get(r.name, 0) < config.max_objects_per_receptacle

    def pick_site(cls: str, avoid_class: str | None = None) -> ReceptacleInstance:
        def ok(r):
            return has_room(r) and (avoid_class is None or r.cls != avoid_class)
        if anomaly_sites and rng.random() < config.anomaly_rate:
            roomy = [r for r in anomaly_sites if ok(r)]
            if roomy:
                return rng.choice(roomy)
        likely = [r for r in spawn_sites if r.cls in cat.likely_for(cls) and ok(r)]
        eligible = likely or [r for r in spawn_sites if ok(r)]
        if not eligible:
            raise SceneGenerationError(seed, "no spawn site has room for the target object")
        return rng.choice(eligible)

    object_pool = cat.object_names()
    for site in spawn_sites:
        for _ in range(rng.randint(0, config.max_objects_per_receptacle)):
            cls = rng.choice(object_pool)
            try:
                spawn(cls, pick_site(cls))
            except SceneGenerationError:
                break  # room is saturated; stop filling

    # Guarantee target objects exist; keep pick-style scenes unsolved at spawn.
    needed = 2 if task.task_type == "pick_two_and_place" else 1
    avoid = task.target_receptacle_class if task.task_type in (
        "pick_and_place", "pick_two_and_place") else None
    if avoid is not None:
        kept = []
        for o in objects:
            recep = next(r for r in receptacles if r.name == o.location)
            if o.cls == task.target_object_class and recep.cls == avoid:
                continue
            kept.append(o)
        objects = kept
        obj_counts[task.target_object_class] = max(
            (o.index for o in objects if o.cls == task.target_object_class), default=0)
        load = {}
        for o in objects:
            load[o.location] = load.get(o.location, 0) + 1
    have = sum(1 for o in objects if o.cls == task.target_object_class)
    for _ in range(max(0, needed - have)):
        spawn(task.target_object_class, pick_site(task.target_object_class, avoid))

    state = WorldState(receptacles=receptacles, objects=objects, task=task, catalog=cat)
    if goal_satisfied(state, task):
        raise SceneGenerationError(seed, "scene solved at spawn")
    return state, task


def generate_scene(seed: int, config: SceneConfig | None = None) -> tuple[WorldState, TaskSpec]:
    """Deterministic solvable scene + task for (seed, config)."""
    config = config or SceneConfig()
    config.validate()
    last_reason = "unknown"
    for attempt in range(MAX_REJECTIONS):
        try:
            state, task = _build_attempt(f"scene:{seed}:{attempt}", seed, config)
            expert.solve(state, task)
            return state, task
        except (SceneGenerationError, expert.UnsolvableError) as exc:
            last_reason = str(exc)
    raise SceneGenerationError(seed, f"{MAX_REJECTIONS} rejected attempts; last: {last_reason}")
