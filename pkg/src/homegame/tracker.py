"""Progress tracking over the sub-task list via windowed Yes/No QA."""
from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field

from .expert import Demonstration, SubTaskPlan
from .lmbridge import LmCapabilities, TRACK_QUERY
from .metrics import precision_recall
from .world import step as world_step
from .world import parse_command, render_observation

log = logging.getLogger(__name__)

MAX_WINDOW = 3


@dataclass
class TrackerState:
    plan: SubTaskPlan
    task_text: str
    p: int = 1                      # 1-based index of the active sub-task
    d: int = 1                      # QA context window length, grows to 3
    window: list[str] = field(default_factory=list)
    fallback_active: bool = False

    @property
    def exhausted(self) -> bool:
        return self.p > len(self.plan.subtasks)

    def conditioning_text(self) -> str:
        if self.exhausted:
            return self.task_text
        return self.plan.subtasks[self.p - 1]


def tracker_init(plan: SubTaskPlan, task_text: str) -> TrackerState:
    if not plan.subtasks:
        raise ValueError("cannot track an empty plan")
    return TrackerState(plan=plan, task_text=task_text)


def tracker_prompt(state: TrackerState) -> str:
    if state.fallback_active:
        raise ValueError("no tracker prompt in fallback mode")
    question = TRACK_QUERY.format(subtask=state.plan.subtasks[state.p - 1])
    context = state.window[-state.d:]
    return "\n".join([*context, question])


def tracker_step(state: TrackerState, observation_text: str,
                 bridge: LmCapabilities) -> tuple[TrackerState, str]:
    """Consume one observation; returns (state, conditioning text for this step).

    The sub-task index advances only on a strict Yes > No answer; backend
    errors count as No. Once the plan is exhausted before the episode ends,
    conditioning falls back to the full task text.
    """
    state.window.append(observation_text)
    if state.exhausted:
        state.fallback_active = True
        return state, state.task_text

    try:
        p_yes, p_no = bridge.yes_no(tracker_prompt(state))
    except Exception as exc:
        log.warning("tracker QA failed (%s); treating as No", exc)
        p_yes, p_no = 0.0, 1.0

    if p_yes > p_no:
        state.p += 1
        state.d = 1
        state.window = []
        if state.exhausted:
            state.fallback_active = True
    else:
        state.d = min(state.d + 1, MAX_WINDOW)
    return state, state.conditioning_text()


def run_tracker_over_demo(demo: Demonstration, bridge: LmCapabilities,
                          plan: SubTaskPlan | None = None,
                          truncate_at: int | None = None) -> TrackerState:
    """Replay a demonstration through the tracker, re-simulating world states
    so a ground-truth oracle can be consulted step by step."""
    plan = plan or demo.subtask_plan
    tracker = tracker_init(plan, demo.task.goal_text)
    if hasattr(bridge, "bind_task"):
        bridge.bind_task(demo.task)

    state = demo.initial_state.clone()
    feedback = ""
    actions = [s.action for s in demo.steps]
    if truncate_at is not None:
        actions = actions[:truncate_at]
    for action in actions:
        obs = render_observation(state, feedback)
        if hasattr(bridge, "bind_state"):
            bridge.bind_state(state)
        tracker, _ = tracker_step(tracker, obs.text, bridge)
        state, feedback, _ = world_step(state, parse_command(action))
    # Terminal observation: the step that can confirm the last sub-task.
    obs = render_observation(state, feedback)
    if hasattr(bridge, "bind_state"):
        bridge.bind_state(state)
    tracker, _ = tracker_step(tracker, obs.text, bridge)
    return tracker


def evaluate_tracker(demos: list[Demonstration], bridge: LmCapabilities,
                     truncation_seed: int = 0) -> tuple[float, float]:
    """Agreement between "last sub-task finished" and "episode fully solved".

    Positives are complete expert demos; negatives are the same demos cut
    short at a random interior step.
    """
    if not demos:
        raise ValueError("need at least one demonstration")
    rng = random.Random(truncation_seed)
    predicted, actual = [], []
    for demo in demos:
        tracker = run_tracker_over_demo(demo, bridge)
        predicted.append(tracker.exhausted)
        actual.append(True)
    for demo in demos:
        cut = rng.randint(1, max(1, len(demo.steps) - 1))
        tracker = run_tracker_over_demo(demo, bridge, truncate_at=cut)
        predicted.append(tracker.exhausted)
        actual.append(False)
    return precision_recall(predicted, actual)
