"""Rule-based expert: canonical sub-task plans and demonstration roll-outs."""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from .world import (
    Action,
    INVENTORY,
    Observation,
    TaskSpec,
    WorldState,
    goal_satisfied,
    permissible_actions,
    render_observation,
    step,
)

DEFAULT_STEP_BUDGET = 100

# Verb synonyms accepted when interpreting sub-task strings (generated plans
# may paraphrase the canonical verbs).
VERB_SYNONYMS = {
    "grab": "take", "get": "take", "pick": "take",
    "warm": "heat",
    "chill": "cool",
    "rinse": "clean", "wash": "clean",
    "return": "place", "put": "place",
    "inspect": "examine", "look": "examine",
}


class UnsolvableError(RuntimeError):
    pass


@dataclass(frozen=True)
class SubTaskPlan:
    subtasks: tuple[str, ...]
    source: str = "oracle"  # "oracle" | "generated"

    def __post_init__(self):
        if not self.subtasks:
            raise ValueError("plan must contain at least one sub-task")
        for s in self.subtasks:
            if not s or len(s) > 128:
                raise ValueError(f"invalid sub-task string: {s!r}")

    def render(self) -> str:
        return ", ".join(self.subtasks)


def article(noun: str) -> str:
    return "an" if noun[:1] in "aeiou" else "a"


def ground_truth_plan(task: TaskSpec) -> SubTaskPlan:
    obj, recep = task.target_object_class, task.target_receptacle_class
    take = f"take {article(obj)} {obj}"
    place = f"place the {obj} in/on {recep}"
    ttype = task.task_type
    if ttype == "pick_and_place":
        subtasks = (take, place)
    elif ttype == "pick_two_and_place":
        subtasks = (take, place, take, place)
    elif ttype == "heat_and_place":
        subtasks = (take, f"heat the {obj}", place)
    elif ttype == "cool_and_place":
        subtasks = (take, f"cool the {obj}", place)
    elif ttype == "clean_and_place":
        subtasks = (take, f"clean the {obj}", place)
    elif ttype == "examine_in_light":
        subtasks = (take, f"examine the {obj} with the {recep}")
    else:
        raise ValueError(f"unknown task type {ttype}")
    return SubTaskPlan(subtasks)


_SUBTASK_PATTERNS = [
    (re.compile(r"^(?:take|grab|get|pick up) (?:a|an|the|some) (\w+)$"), "take"),
    (re.compile(r"^(?:place|put|return) (?:the|a|an) (\w+) (?:in/on|in|on|to) (?:the )?(\w+)$"), "place"),
    (re.compile(r"^(?:heat|warm|warm up) (?:the|a|an) (\w+)$"), "heat"),
    (re.compile(r"^(?:cool|chill) (?:the|a|an) (\w+)$"), "cool"),
    (re.compile(r"^(?:clean|rinse|wash) (?:the|a|an) (\w+)$"), "clean"),
    (re.compile(r"^(?:examine|inspect|look at) (?:the|a|an) (\w+) (?:with|under) (?:the )?(\w+)$"), "examine"),
]


def parse_subtask(text: str) -> tuple[str, tuple[str, ...]] | None:
    """Canonical (verb, arguments) reading of a sub-task string, or None."""
    norm = " ".join(text.lower().strip().rstrip(".").split())
    for pattern, verb in _SUBTASK_PATTERNS:
        m = pattern.match(norm)
        if m:
            return verb, m.groups()
    return None


def subtask_satisfied(subtask: str, state: WorldState, occurrence: int = 1) -> bool:
    """Whether the sub-task's own goal predicate holds in ``state``.

    ``occurrence`` counts how many times this exact sub-task has already been
    completed plus one; the k-th "place" requires k target objects in place.
    """
    parsed = parse_subtask(subtask)
    if parsed is None:
        return False
    verb, args = parsed
    if verb == "take":
        held = state.inventory()
        return held is not None and held.cls == args[0]
    if verb == "place":
        obj_cls, rec_cls = args
        count = sum(
            1 for o in state.objects
            if o.cls == obj_cls
            and (r := state.receptacle(o.location)) is not None
            and r.cls == rec_cls
        )
        return count >= occurrence
    if verb in ("heat", "cool", "clean"):
        flag = {"heat": "heated", "cool": "cooled", "clean": "cleaned"}[verb]
        return any(getattr(o, flag) for o in state.objects if o.cls == args[0])
    if verb == "examine":
        obj_cls, lamp_cls = args
        here = state.receptacle(state.agent_at)
        held = state.inventory()
        return (
            here is not None and here.cls == lamp_cls and here.lamp_on
            and held is not None and held.cls == obj_cls
        )
    return False


@dataclass
class DemoStep:
    observation: Observation
    permissible: list[str]
    action: str
    subtask_index: int  # 1-based index into the plan, active when acting


@dataclass
class Demonstration:
    task: TaskSpec
    initial_state: WorldState
    steps: list[DemoStep]
    subtask_plan: SubTaskPlan
    touched: set[str]
    final_observation: Observation
    states: list[WorldState] = field(default_factory=list, repr=False)
    # states[t] is the world state in which steps[t] was chosen; the terminal
    # state is appended last (len(states) == len(steps) + 1).


TOUCH_VERBS = ("goto", "open", "take", "put", "heat", "cool", "clean")


def touched_entities(demo: Demonstration) -> set[str]:
    out: set[str] = set()
    for s in demo.steps:
        from .world import parse_command
        action = parse_command(s.action)
        if action.verb in TOUCH_VERBS:
            out.update(action.arguments)
    return out


def _search_order(state: WorldState, object_class: str) -> list[str]:
    """Deterministic receptacle visit order when hunting for an object class."""
    likely = state.catalog.likely_for(object_class)
    rank = {cls: i for i, cls in enumerate(likely)}

    def key(r):
        return (rank.get(r.cls, len(likely)), r.cls, r.index)

    ordered = sorted(state.receptacles, key=key)
    # Skip pure light sources; nothing spawns there.
    return [r.name for r in ordered if not state.rclass(r).has("light_source")]


class _Episode:
    """Imperative executor that records a demonstration while acting."""

    def __init__(self, state: WorldState, task: TaskSpec, plan: SubTaskPlan, budget: int):
        self.state = state.clone()
        self.task = task
        self.plan = plan
        self.budget = budget
        self.steps: list[DemoStep] = []
        self.states: list[WorldState] = []
        self.feedback = ""
        self.done = goal_satisfied(state, task)
        self.p = 1
        self.completed: dict[str, int] = {}
        self.seen_objects: dict[str, str] = {}  # object name -> receptacle name
        self.excluded: set[str] = set()         # objects this expert already placed

    def observe(self) -> Observation:
        obs = render_observation(self.state, self.feedback)
        here = self.state.receptacle(self.state.agent_at)
        if here is not None and self.state.observable(here):
            for o in self.state.objects_at(here.name):
                self.seen_objects[o.name] = here.name
        return obs

    def do(self, action: Action):
        if len(self.steps) >= self.budget:
            raise UnsolvableError(
                f"step budget {self.budget} exhausted on task {self.task.goal_text!r} "
                f"(seed {self.task.scene_seed})"
            )
        obs = self.observe()
        permissible = [a.text for a in permissible_actions(self.state)]
        assert action.text in permissible, f"expert chose non-permissible {action.text}"
        self.states.append(self.state)
        self.steps.append(DemoStep(obs, permissible, action.text, self.p))
        self.state, self.feedback, self.done = step(self.state, action)
        if action.verb == "take":
            self.seen_objects.pop(action.arguments[0], None)
        self.advance()

    def advance(self):
        while self.p <= len(self.plan.subtasks):
            sub = self.plan.subtasks[self.p - 1]
            occ = self.completed.get(sub, 0) + 1
            if not subtask_satisfied(sub, self.state, occ):
                break
            self.completed[sub] = occ
            self.p += 1

    # --- sub-task executors -------------------------------------------------

    def goto(self, name: str):
        if self.state.agent_at != name:
            self.do(Action("goto", (name,)))

    def open_if_closed(self, name: str) -> bool:
        r = self.state.receptacle(name)
        if r.is_open is False:
            self.do(Action("open", (name,)))
            return True
        return False

    def find_and_take(self, object_class: str):
        # Known location from earlier observations wins over fresh search.
        known = [
            (recep, obj) for obj, recep in sorted(self.seen_objects.items())
            if obj.split(" ")[0] == object_class and obj not in self.excluded
        ]
        order = [known[0][0]] if known else _search_order(self.state, object_class)
        for recep_name in order:
            self.goto(recep_name)
            opened = self.open_if_closed(recep_name)
            candidates = [
                o for o in self.state.objects_at(recep_name)
                if o.cls == object_class and o.name not in self.excluded
            ]
            if candidates:
                target = min(candidates, key=lambda o: o.index)
                self.do(Action("take", (target.name, recep_name)))
                return
            if opened:
                self.do(Action("close", (recep_name,)))
        raise UnsolvableError(
            f"no reachable {object_class} in scene (seed {self.task.scene_seed})"
        )

    def place_held(self, recep_class: str):
        held = self.state.inventory()
        assert held is not None
        recep = min(
            (r for r in self.state.receptacles if r.cls == recep_class),
            key=lambda r: r.index,
        )
        self.goto(recep.name)
        self.open_if_closed(recep.name)
        self.do(Action("put", (held.name, recep.name)))
        self.excluded.add(held.name)
        if not self.done and self.state.receptacle(recep.name).is_open:
            self.do(Action("close", (recep.name,)))

    def apply_condition(self, verb: str):
        flag = {"heat": "heat_source", "cool": "cool_source", "clean": "clean_source"}[verb]
        sources = sorted(
            (r for r in self.state.receptacles if self.state.rclass(r).has(flag)),
            key=lambda r: (r.cls, r.index),
        )
        if not sources:
            raise UnsolvableError(f"no {flag} receptacle in scene (seed {self.task.scene_seed})")
        held = self.state.inventory()
        self.goto(sources[0].name)
        self.do(Action(verb, (held.name, sources[0].name)))

    def examine_with(self, lamp_class: str):
        lamps = sorted(
            (r for r in self.state.receptacles if r.cls == lamp_class),
            key=lambda r: r.index,
        )
        if not lamps:
            raise UnsolvableError(f"no {lamp_class} in scene (seed {self.task.scene_seed})")
        self.goto(lamps[0].name)
        self.do(Action("use", (lamps[0].name,)))


def solve(state: WorldState, task: TaskSpec | None = None,
          step_budget: int = DEFAULT_STEP_BUDGET) -> Demonstration:
    task = task or state.task
    plan = ground_truth_plan(task)
    ep = _Episode(state, task, plan, step_budget)

    if ep.done:
        ep.do(Action("look"))  # degenerate start: register completion and stop
    while not ep.done:
        if ep.p > len(plan.subtasks):
            raise UnsolvableError(
                f"plan exhausted without completion on task {task.goal_text!r} "
                f"(seed {task.scene_seed})"
            )
        verb, args = parse_subtask(plan.subtasks[ep.p - 1])
        if verb == "take":
            ep.find_and_take(args[0])
        elif verb == "place":
            ep.place_held(args[1])
        elif verb in ("heat", "cool", "clean"):
            ep.apply_condition(verb)
        elif verb == "examine":
            ep.examine_with(args[1])

    final_obs = ep.observe()
    ep.states.append(ep.state)
    demo = Demonstration(
        task=task,
        initial_state=state.clone(),
        steps=ep.steps,
        subtask_plan=plan,
        touched=set(),
        final_observation=final_obs,
        states=ep.states,
    )
    demo.touched = touched_entities(demo)
    return demo
