"""Single-room household text environment: state, parser, transitions, rendering."""
from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field

from .catalog import Catalog, default_catalog

TASK_TYPES = (
    "pick_and_place",
    "pick_two_and_place",
    "heat_and_place",
    "cool_and_place",
    "clean_and_place",
    "examine_in_light",
)

VERBS = ("goto", "open", "close", "take", "put", "heat", "cool", "clean", "use", "look")

START_LOCATION = "start"
INVENTORY = "inventory"


class ParseError(ValueError):
    def __init__(self, text: str, token: str):
        super().__init__(f"cannot parse command {text!r} (offending token: {token!r})")
        self.token = token


@dataclass(frozen=True)
class Action:
    verb: str
    arguments: tuple[str, ...] = ()

    @property
    def text(self) -> str:
        v, a = self.verb, self.arguments
        if v == "look":
            return "look"
        if v == "goto":
            return f"go to {a[0]}"
        if v in ("open", "close", "use"):
            return f"{v} {a[0]}"
        if v == "take":
            return f"take {a[0]} from {a[1]}"
        if v == "put":
            return f"put {a[0]} in/on {a[1]}"
        return f"{v} {a[0]} with {a[1]}"  # heat / cool / clean


_INSTANCE = r"([a-z]+ \d+)"
_PATTERNS = [
    (re.compile(r"^look$"), "look", 0),
    (re.compile(rf"^(?:go to|goto) {_INSTANCE}$"), "goto", 1),
    (re.compile(rf"^open {_INSTANCE}$"), "open", 1),
    (re.compile(rf"^close {_INSTANCE}$"), "close", 1),
    (re.compile(rf"^use {_INSTANCE}$"), "use", 1),
    (re.compile(rf"^take {_INSTANCE} from {_INSTANCE}$"), "take", 2),
    (re.compile(rf"^put {_INSTANCE} (?:in/on|in|on) {_INSTANCE}$"), "put", 2),
    (re.compile(rf"^heat {_INSTANCE} with {_INSTANCE}$"), "heat", 2),
    (re.compile(rf"^cool {_INSTANCE} with {_INSTANCE}$"), "cool", 2),
    (re.compile(rf"^clean {_INSTANCE} with {_INSTANCE}$"), "clean", 2),
]


def parse_command(text: str) -> Action:
    norm = " ".join(text.lower().split())
    for pattern, verb, _ in _PATTERNS:
        m = pattern.match(norm)
        if m:
            return Action(verb, m.groups())
    token = norm.split(" ", 1)[0] if norm else ""
    raise ParseError(text, token)


@dataclass(frozen=True)
class TaskSpec:
    task_type: str
    target_object_class: str
    target_receptacle_class: str
    goal_text: str
    scene_seed: int


@dataclass
class ReceptacleInstance:
    cls: str
    index: int
    is_open: bool | None = None   # None for non-openable classes
    lamp_on: bool = False

    @property
    def name(self) -> str:
        return f"{self.cls} {self.index}"


@dataclass
class ObjectInstance:
    cls: str
    index: int
    location: str                 # receptacle name or INVENTORY
    heated: bool = False
    cooled: bool = False
    cleaned: bool = False

    @property
    def name(self) -> str:
        return f"{self.cls} {self.index}"

    @property
    def conditions(self) -> set[str]:
        out = set()
        if self.heated:
            out.add("heated")
        if self.cooled:
            out.add("cooled")
        if self.cleaned:
            out.add("cleaned")
        return out


@dataclass
class WorldState:
    receptacles: list[ReceptacleInstance]
    objects: list[ObjectInstance]
    task: TaskSpec
    agent_at: str = START_LOCATION
    step_count: int = 0
    catalog: Catalog = field(default_factory=default_catalog, repr=False, compare=False)

    def clone(self) -> "WorldState":
        out = copy.copy(self)
        out.receptacles = [copy.copy(r) for r in self.receptacles]
        out.objects = [copy.copy(o) for o in self.objects]
        return out

    def receptacle(self, name: str) -> ReceptacleInstance | None:
        for r in self.receptacles:
            if r.name == name:
                return r
        return None

    def object(self, name: str) -> ObjectInstance | None:
        for o in self.objects:
            if o.name == name:
                return o
        return None

    def objects_at(self, location: str) -> list[ObjectInstance]:
        return [o for o in self.objects if o.location == location]

    def inventory(self) -> ObjectInstance | None:
        held = self.objects_at(INVENTORY)
        return held[0] if held else None

    def observable(self, recep: ReceptacleInstance) -> bool:
        return recep.is_open is not False

    def entity_names(self) -> set[str]:
        return {r.name for r in self.receptacles} | {o.name for o in self.objects}

    def rclass(self, recep: ReceptacleInstance):
        return self.catalog.receptacles[recep.cls]


def _listing_order(names: list[str]) -> list[str]:
    """Class ascending, instance index descending (matches transcript convention)."""
    def key(name: str):
        cls, idx = name.rsplit(" ", 1)
        return (cls, -int(idx))
    return sorted(names, key=key)


def format_entity_list(names: list[str]) -> str:
    if not names:
        return "nothing"
    items = [f"a {n}" for n in names]
    if len(items) == 1:
        return items[0]
    return ", ".join(items[:-1]) + ", and " + items[-1]


def _contents_listing(state: WorldState, recep: ReceptacleInstance) -> list[str]:
    return _listing_order([o.name for o in state.objects_at(recep.name)])


def _arrival_feedback(state: WorldState, recep: ReceptacleInstance) -> str:
    if recep.is_open is False:
        return f"The {recep.name} is closed."
    listing = format_entity_list(_contents_listing(state, recep))
    if recep.is_open is True:
        return f"The {recep.name} is open. In it, you see {listing}."
    return f"On the {recep.name}, you see {listing}."


def initial_feedback(state: WorldState) -> str:
    listing = format_entity_list(_listing_order([r.name for r in state.receptacles]))
    return f"Looking quickly around you, you see {listing}."


def goal_satisfied(state: WorldState, task: TaskSpec | None = None) -> bool:
    """Pure goal predicate; recomputed from state alone each step."""
    task = task or state.task
    obj_cls, rec_cls = task.target_object_class, task.target_receptacle_class
    in_target = [
        o for o in state.objects
        if o.cls == obj_cls and (r := state.receptacle(o.location)) is not None and r.cls == rec_cls
    ]
    ttype = task.task_type
    if ttype == "pick_and_place":
        return len(in_target) >= 1
    if ttype == "pick_two_and_place":
        return len(in_target) >= 2
    if ttype in ("heat_and_place", "cool_and_place", "clean_and_place"):
        flag = {"heat_and_place": "heated", "cool_and_place": "cooled", "clean_and_place": "cleaned"}[ttype]
        return any(getattr(o, flag) for o in in_target)
    if ttype == "examine_in_light":
        here = state.receptacle(state.agent_at)
        held = state.inventory()
        return (
            here is not None and here.cls == rec_cls and here.lamp_on
            and held is not None and held.cls == obj_cls
        )
    raise ValueError(f"unknown task type {ttype}")


def permissible_actions(state: WorldState) -> list[Action]:
    actions: list[Action] = [Action("look")]
    for r in state.receptacles:
        if r.name != state.agent_at:
            actions.append(Action("goto", (r.name,)))

    here = state.receptacle(state.agent_at)
    held = state.inventory()
    if here is not None:
        rcls = state.rclass(here)
        if rcls.has("openable"):
            if here.is_open:
                actions.append(Action("close", (here.name,)))
            else:
                actions.append(Action("open", (here.name,)))
        if state.observable(here) and held is None:
            for o in state.objects_at(here.name):
                actions.append(Action("take", (o.name, here.name)))
        if held is not None and state.observable(here):
            actions.append(Action("put", (held.name, here.name)))
        if held is not None:
            for verb, flag in (("heat", "heat_source"), ("cool", "cool_source"), ("clean", "clean_source")):
                if rcls.has(flag):
                    actions.append(Action(verb, (held.name, here.name)))
        if rcls.has("light_source"):
            actions.append(Action("use", (here.name,)))
    return actions


def step(state: WorldState, action: Action) -> tuple[WorldState, str, bool]:
    """Apply an action. Non-permissible actions leave the state unchanged."""
    permitted = {a for a in permissible_actions(state)}
    new = state.clone()
    new.step_count = state.step_count + 1
    if action not in permitted:
        return new, "Nothing happens.", goal_satisfied(new)

    verb, args = action.verb, action.arguments
    if verb == "look":
        here = new.receptacle(new.agent_at)
        feedback = initial_feedback(new) if here is None else _arrival_feedback(new, here)
    elif verb == "goto":
        new.agent_at = args[0]
        feedback = _arrival_feedback(new, new.receptacle(args[0]))
    elif verb == "open":
        r = new.receptacle(args[0])
        r.is_open = True
        listing = format_entity_list(_contents_listing(new, r))
        feedback = f"The {r.name} is open. In it, you see {listing}."
    elif verb == "close":
        new.receptacle(args[0]).is_open = False
        feedback = f"You close the {args[0]}."
    elif verb == "take":
        new.object(args[0]).location = INVENTORY
        feedback = f"You pick up the {args[0]} from the {args[1]}."
    elif verb == "put":
        new.object(args[0]).location = args[1]
        feedback = f"You put the {args[0]} in/on the {args[1]}."
    elif verb == "heat":
        o = new.object(args[0])
        o.heated, o.cooled = True, False
        feedback = f"You heat the {args[0]} using the {args[1]}."
    elif verb == "cool":
        o = new.object(args[0])
        o.cooled, o.heated = True, False
        feedback = f"You cool the {args[0]} using the {args[1]}."
    elif verb == "clean":
        new.object(args[0]).cleaned = True
        feedback = f"You clean the {args[0]} using the {args[1]}."
    elif verb == "use":
        new.receptacle(args[0]).lamp_on = True
        feedback = f"You turn on the {args[0]}."
    else:
        raise ValueError(f"unknown verb {verb}")

    return new, feedback, goal_satisfied(new)


@dataclass
class Observation:
    """Structured step record plus its rendered text form.

    ``prefix``/``listed`` split the feedback into a fixed sentence head and the
    enumerated entities so masking can re-render the text from reduced lists.
    """
    feedback: str
    prefix: str | None
    listed: list[str]
    receptacles: list[str]
    objects: list[str]

    @property
    def text(self) -> str:
        if self.prefix is None:
            return self.feedback
        return f"{self.prefix} {format_entity_list(self.listed)}."

    def entity_names(self) -> list[str]:
        return self.receptacles + self.objects


_SEE_SPLIT = ", you see "


def _parse_listing(tail: str) -> list[str]:
    tail = tail.rstrip(".")
    if tail == "nothing":
        return []
    parts = re.split(r", and |, ", tail)
    return [re.sub(r"^a ", "", p).strip() for p in parts if p.strip()]


def extract_entity_names(state: WorldState, text: str) -> tuple[list[str], list[str]]:
    """All instance names occurring in ``text``, split by kind, in name order."""
    receps, objs = [], []
    for r in state.receptacles:
        if re.search(rf"\b{re.escape(r.name)}\b", text):
            receps.append(r.name)
    for o in state.objects:
        if re.search(rf"\b{re.escape(o.name)}\b", text):
            objs.append(o.name)
    return sorted(receps), sorted(objs)


def render_observation(state: WorldState, feedback: str) -> Observation:
    if state.step_count == 0 and not feedback:
        feedback = initial_feedback(state)
    if _SEE_SPLIT in feedback:
        head, tail = feedback.split(_SEE_SPLIT, 1)
        prefix = head + _SEE_SPLIT.rstrip()
        listed = _parse_listing(tail)
    else:
        prefix, listed = None, []
    receps, objs = extract_entity_names(state, feedback)
    return Observation(feedback=feedback, prefix=prefix, listed=listed,
                       receptacles=receps, objects=objs)
