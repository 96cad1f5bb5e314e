"""Episode runner, dataset splits, goal perturbation, trajectory persistence."""
from __future__ import annotations

import hashlib
import json
import random
import statistics
from dataclasses import dataclass, field, replace

from .eliminator import DEFAULT_TAU, mask_with_bridge
from .expert import Demonstration, SubTaskPlan
from .lmbridge import GroundTruth, LmCapabilities
from .planner import ExampleBank, generate_plan
from .scene import SceneConfig, generate_scene
from .tracker import TrackerState, tracker_init, tracker_step
from .world import (
    Observation,
    TaskSpec,
    WorldState,
    parse_command,
    permissible_actions,
    render_observation,
    step as world_step,
)

DEFAULT_STEP_BUDGET = 50

# Synonym tables for the goal-paraphrase generator. Values are chosen not to
# collide with catalog class names so the substitutions stay invertible.
PERTURB_VERBS = {
    "heat": "warm",
    "cool": "chill",
    "clean": "rinse",
    "put": "place",
    "look": "gaze",
}
PERTURB_NOUNS = {
    "apple": "fruit",
    "bread": "loaf",
    "mug": "cup",
    "cup": "glass",
    "plate": "dish",
    "knife": "blade",
    "soapbar": "soap",
    "spraybottle": "sprayer",
    "cloth": "rag",
    "towel": "washcloth",
    "book": "novel",
    "pencil": "crayon",
    "cellphone": "phone",
    "creditcard": "card",
    "alarmclock": "clock",
    "remotecontrol": "remote",
    "glassbottle": "flask",
    "pillow": "cushion",
    "statue": "sculpture",
    "vase": "urn",
    "watch": "wristwatch",
    "keychain": "keyring",
    "tissuebox": "tissues",
    "potato": "spud",
    "lettuce": "greens",
    "cabinet": "cupboard",
    "fridge": "refrigerator",
    "countertop": "counter",
    "garbagecan": "trashcan",
    "microwave": "oven",
    "sofa": "couch",
    "diningtable": "table",
    "desklamp": "lamp",
    "floorlamp": "torchiere",
    "shelf": "rack",
    "dresser": "bureau",
    "toilet": "commode",
    "sinkbasin": "sink",
    "bathtubbasin": "bathtub",
    "coffeemachine": "coffeemaker",
    "sidetable": "nightstand",
}
PERTURB_TABLE = {**PERTURB_VERBS, **PERTURB_NOUNS}

# Inverse mapping lets the ground-truth oracle resolve paraphrased goals the
# way a large LM resolves unseen human phrasings.
PERTURB_INVERSE = {v: k for k, v in PERTURB_TABLE.items()}


def perturb_goal(goal_text: str, seed: int, table: dict[str, str] | None = None) -> str:
    """Deterministic synonym paraphrase of a template goal."""
    table = PERTURB_TABLE if table is None else table
    rng = random.Random(f"perturb:{goal_text}:{seed}")
    tokens = goal_text.split()
    applicable = [i for i, t in enumerate(tokens) if t in table]
    if not applicable:
        return goal_text
    chosen = [i for i in applicable if rng.random() < 0.8]
    if not chosen:
        chosen = [applicable[0]]
    for i in chosen:
        tokens[i] = table[tokens[i]]
    return " ".join(tokens)


def make_ground_truth(entries: list[tuple[WorldState, TaskSpec]]) -> GroundTruth:
    gt = GroundTruth(synonyms=dict(PERTURB_INVERSE))
    for state, task in entries:
        gt.register(task, state)
    return gt


# --- splits ------------------------------------------------------------------

@dataclass(frozen=True)
class SplitEntry:
    scene_seed: int
    task_seed: int

    def materialize(self, config: SceneConfig) -> tuple[WorldState, TaskSpec]:
        return generate_scene(self.scene_seed, replace(config, task_seed=self.task_seed))


@dataclass
class SplitSet:
    train: list[SplitEntry]
    seen: list[SplitEntry]
    unseen: list[SplitEntry]
    config: SceneConfig


@dataclass(frozen=True)
class SplitConfig:
    n_train: int = 140
    n_seen: int = 40
    n_unseen: int = 40
    unseen_seed_offset: int = 100_000
    scene: SceneConfig = field(default_factory=SceneConfig)


class SplitError(RuntimeError):
    pass


def build_splits(config: SplitConfig | None = None) -> SplitSet:
    """Train / seen-eval / unseen-eval task instances.

    Seen-eval reuses training scene seeds (same rooms) with novel
    object/receptacle combinations; unseen-eval uses disjoint scene seeds.
    """
    config = config or SplitConfig()
    train = [SplitEntry(i, i) for i in range(config.n_train)]
    train_combos = set()
    for entry in train:
        _, task = entry.materialize(config.scene)
        train_combos.add((task.task_type, task.target_object_class,
                          task.target_receptacle_class))

    def novel_entry(scene_seed: int, base_task_seed: int) -> SplitEntry:
        for j in range(60):
            entry = SplitEntry(scene_seed, base_task_seed + j)
            try:
                _, task = entry.materialize(config.scene)
            except Exception:
                continue
            combo = (task.task_type, task.target_object_class,
                     task.target_receptacle_class)
            if combo not in train_combos:
                return entry
        raise SplitError(
            f"no novel class combination found for scene seed {scene_seed}")

    seen = [novel_entry(i % config.n_train, 50_000 + 100 * i)
            for i in range(config.n_seen)]
    unseen = [novel_entry(config.unseen_seed_offset + i, 70_000 + 100 * i)
              for i in range(config.n_unseen)]
    return SplitSet(train, seen, unseen, config.scene)


# --- episode runner ----------------------------------------------------------

@dataclass
class PipelineFlags:
    plan: bool = False
    eliminate: bool = False
    track: bool = False

    def __post_init__(self):
        if self.track and not self.plan:
            raise ValueError("track requires plan")

    def to_dict(self) -> dict:
        return {"plan": self.plan, "eliminate": self.eliminate, "track": self.track}


@dataclass
class EpisodeComponents:
    bridge: LmCapabilities
    actor: object                     # .act(conditioning, history, obs, actions) -> str
    flags: PipelineFlags = field(default_factory=PipelineFlags)
    bank: ExampleBank | None = None
    plan_override: SubTaskPlan | None = None
    tau_r: float = DEFAULT_TAU
    tau_o: float = DEFAULT_TAU
    step_budget: int = DEFAULT_STEP_BUDGET
    goal_text_override: str | None = None  # e.g. a perturbed human-style goal


@dataclass
class TrajectoryStep:
    t: int
    obs_text: str
    masked_text: str
    receptacles: list[str]
    objects: list[str]
    kept: list[str]
    permissible: list[str]
    action: str
    subtask_index: int
    tracker_decision: bool | None
    done: bool


@dataclass
class Trajectory:
    header: dict
    steps: list[TrajectoryStep]
    done: bool
    final_obs_text: str = ""
    final_tracker_p: int | None = None


class RandomActor:
    def __init__(self, seed: int = 0):
        self.rng = random.Random(seed)

    def act(self, conditioning, history, obs_text, actions):
        return self.rng.choice(actions)


class ScriptedActor:
    """Replays a fixed action list (e.g. an expert demonstration)."""

    def __init__(self, actions: list[str], fallback: str = "look"):
        self.actions = list(actions)
        self.i = 0
        self.fallback = fallback

    def act(self, conditioning, history, obs_text, actions):
        if self.i < len(self.actions):
            action = self.actions[self.i]
            self.i += 1
            return action
        return self.fallback


def _config_hash(scene_config: SceneConfig, flags: PipelineFlags) -> str:
    blob = json.dumps({"scene": scene_config.to_dict(), "flags": flags.to_dict()},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_episode(state: WorldState, task: TaskSpec, components: EpisodeComponents,
                scene_config: SceneConfig | None = None) -> Trajectory:
    """Compose worldsim + assist modules + actor into one recorded episode."""
    c = components
    bridge = c.bridge
    goal_text = c.goal_text_override or task.goal_text
    if hasattr(bridge, "bind_task"):
        bridge.bind_task(task)

    tracker: TrackerState | None = None
    if c.flags.plan:
        if c.plan_override is not None:
            plan = c.plan_override
        elif c.bank is not None:
            plan = generate_plan(bridge, c.bank, goal_text)
        else:
            plan = SubTaskPlan((goal_text,), source="generated")
        if c.flags.track:
            tracker = tracker_init(plan, goal_text)

    header = {
        "type": "header",
        "goal_text": task.goal_text,
        "episode_goal_text": goal_text,
        "task_type": task.task_type,
        "target_object_class": task.target_object_class,
        "target_receptacle_class": task.target_receptacle_class,
        "scene_seed": task.scene_seed,
        "scene_config": (scene_config or SceneConfig()).to_dict(),
        "flags": c.flags.to_dict(),
        "config_hash": _config_hash(scene_config or SceneConfig(), c.flags),
        "step_budget": c.step_budget,
    }

    steps: list[TrajectoryStep] = []
    history: list[str] = []
    feedback = ""
    done = False

    def process_observation(obs: Observation) -> tuple[Observation, str, bool | None]:
        mask_cond = tracker.conditioning_text() if tracker is not None else goal_text
        masked = obs
        if c.flags.eliminate:
            masked, _ = mask_with_bridge(bridge, mask_cond, obs, c.tau_r, c.tau_o)
        decision = None
        if tracker is not None:
            p_before = tracker.p
            _, conditioning = tracker_step(tracker, masked.text, bridge)
            decision = tracker.p > p_before
        else:
            conditioning = goal_text
        return masked, conditioning, decision

    for t in range(c.step_budget):
        obs = render_observation(state, feedback)
        if hasattr(bridge, "bind_state"):
            bridge.bind_state(state)
        masked, conditioning, decision = process_observation(obs)
        actions = [a.text for a in permissible_actions(state)]
        action = c.actor.act(conditioning, history, masked.text, actions)
        state, feedback, done = world_step(state, parse_command(action))
        steps.append(TrajectoryStep(
            t=t, obs_text=obs.text, masked_text=masked.text,
            receptacles=obs.receptacles, objects=obs.objects,
            kept=masked.entity_names(), permissible=actions, action=action,
            subtask_index=(tracker.p if tracker is not None else 0),
            tracker_decision=decision, done=done,
        ))
        history.append(masked.text)
        if done:
            break

    traj = Trajectory(header, steps, done)
    # Terminal observation: lets the tracker confirm the last sub-task.
    final_obs = render_observation(state, feedback)
    traj.final_obs_text = final_obs.text
    if tracker is not None:
        if hasattr(bridge, "bind_state"):
            bridge.bind_state(state)
        process_observation(final_obs)
        traj.final_tracker_p = tracker.p
    return traj


# --- trajectory persistence --------------------------------------------------

def save_trajectory(path: str, traj: Trajectory):
    with open(path, "w") as fh:
        fh.write(json.dumps(traj.header, sort_keys=True) + "\n")
        for s in traj.steps:
            rec = {"type": "step", **s.__dict__}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write(json.dumps({
            "type": "final", "done": traj.done, "steps": len(traj.steps),
            "final_obs_text": traj.final_obs_text,
            "final_tracker_p": traj.final_tracker_p,
        }, sort_keys=True) + "\n")


def load_trajectory(path: str) -> Trajectory:
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    header = lines[0]
    final = lines[-1]
    steps = []
    for rec in lines[1:-1]:
        rec = dict(rec)
        rec.pop("type")
        steps.append(TrajectoryStep(**rec))
    return Trajectory(header, steps, final["done"], final["final_obs_text"],
                      final.get("final_tracker_p"))


class ReplayMismatchError(RuntimeError):
    pass


def replay_trajectory(traj: Trajectory) -> bool:
    """Re-simulate the recorded actions; observations must match byte-exact."""
    config = SceneConfig.from_dict(traj.header["scene_config"])
    state, _ = generate_scene(traj.header["scene_seed"], config)
    feedback = ""
    for s in traj.steps:
        obs = render_observation(state, feedback)
        if obs.text != s.obs_text:
            raise ReplayMismatchError(
                f"observation mismatch at step {s.t}: {obs.text!r} != {s.obs_text!r}")
        state, feedback, done = world_step(state, parse_command(s.action))
        if done != s.done:
            raise ReplayMismatchError(f"done flag mismatch at step {s.t}")
    final_obs = render_observation(state, feedback)
    if final_obs.text != traj.final_obs_text:
        raise ReplayMismatchError("terminal observation mismatch")
    return True


# --- evaluation --------------------------------------------------------------

@dataclass
class EvalReport:
    completion_rate: float
    episodes: int
    mean_steps: float
    median_steps: float
    flags: dict
    per_episode: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "completion_rate": self.completion_rate,
            "episodes": self.episodes,
            "mean_steps": self.mean_steps,
            "median_steps": self.median_steps,
            "flags": self.flags,
            "per_episode": self.per_episode,
        }


def evaluate_split(entries: list[SplitEntry], scene_config: SceneConfig,
                   make_components, save_dir: str | None = None) -> EvalReport:
    """Run one episode per split entry; ``make_components(state, task)`` builds
    the per-episode component bundle."""
    if not entries:
        raise ValueError("cannot evaluate an empty split")
    per_episode = []
    trajs = []
    for entry in entries:
        state, task = entry.materialize(scene_config)
        components = make_components(state, task)
        traj = run_episode(state, task, components,
                           replace(scene_config, task_seed=entry.task_seed))
        trajs.append(traj)
        per_episode.append({
            "scene_seed": entry.scene_seed,
            "task_seed": entry.task_seed,
            "goal_text": task.goal_text,
            "done": traj.done,
            "steps": len(traj.steps),
        })
    if save_dir is not None:
        import os
        os.makedirs(save_dir, exist_ok=True)
        for i, traj in enumerate(trajs):
            save_trajectory(os.path.join(save_dir, f"episode_{i:04d}.jsonl"), traj)
    return report_from_records(per_episode, trajs[0].header["flags"])


def report_from_records(per_episode: list[dict], flags: dict) -> EvalReport:
    steps = [r["steps"] for r in per_episode]
    return EvalReport(
        completion_rate=sum(1 for r in per_episode if r["done"]) / len(per_episode),
        episodes=len(per_episode),
        mean_steps=float(statistics.mean(steps)),
        median_steps=float(statistics.median(steps)),
        flags=flags,
        per_episode=per_episode,
    )


def report_from_trajectory_files(paths: list[str]) -> EvalReport:
    per_episode = []
    flags = {}
    for p in paths:
        traj = load_trajectory(p)
        flags = traj.header["flags"]
        per_episode.append({
            "scene_seed": traj.header["scene_seed"],
            "task_seed": traj.header["scene_config"].get("task_seed"),
            "goal_text": traj.header["goal_text"],
            "done": traj.done,
            "steps": len(traj.steps),
        })
    return report_from_records(per_episode, flags)


# --- ablation ----------------------------------------------------------------

ABLATION_ROWS = ("base", "eliminate", "plan_track", "full")

ROW_FLAGS = {
    "base": PipelineFlags(plan=False, eliminate=False, track=False),
    "eliminate": PipelineFlags(plan=False, eliminate=True, track=False),
    "plan_track": PipelineFlags(plan=True, eliminate=False, track=True),
    "full": PipelineFlags(plan=True, eliminate=True, track=True),
}


def demo_mask_fn(bridge: LmCapabilities, condition_on: str,
                 tau_r: float = DEFAULT_TAU, tau_o: float = DEFAULT_TAU):
    """Observation rewriter applying eliminate-masking to training demos."""

    def fn(demo: Demonstration, t: int, obs: Observation) -> str:
        if hasattr(bridge, "bind_task"):
            bridge.bind_task(demo.task)
        if condition_on == "subtask":
            idx = min(demo.steps[t].subtask_index, len(demo.subtask_plan.subtasks))
            cond = demo.subtask_plan.subtasks[idx - 1]
        else:
            cond = demo.task.goal_text
        masked, _ = mask_with_bridge(bridge, cond, obs, tau_r, tau_o)
        return masked.text

    return fn
