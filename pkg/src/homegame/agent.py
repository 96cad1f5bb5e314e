"""Behavior cloning and action selection on top of the attention policy."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .expert import Demonstration
from .lmbridge import LmCapabilities
from .policy import (
    AgentInput,
    NumericalError,
    PolicyParams,
    backward,
    forward,
    loss_from_cache,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class Sample:
    inp: AgentInput
    expert_index: int


@dataclass
class TrainConfig:
    learning_rate: float = 3e-2
    momentum: float = 0.9
    epochs: int = 20
    shuffle_seed: int = 0
    clip_norm: float = 1.0   # global gradient-norm ceiling; 0 disables
    lr_decay: float = 1.0    # per-epoch multiplier
    log_every: int = 0       # epochs between progress lines; 0 disables


def build_training_set(demos: list[Demonstration], bridge: LmCapabilities,
                       condition_on: str = "subtask",
                       mask_fn=None) -> list[Sample]:
    """Flatten demos into (input, expert action) pairs.

    ``condition_on`` selects the conditioning embedding: the active ground
    truth sub-task or the full goal text. ``mask_fn(demo, t, observation)``
    may rewrite observation text (observation filtering during training).
    """
    if condition_on not in ("subtask", "task"):
        raise ValueError("condition_on must be 'subtask' or 'task'")
    samples = []
    embed_cache: dict[str, np.ndarray] = {}

    def embed(text: str) -> np.ndarray:
        if text not in embed_cache:
            embed_cache[text] = bridge.embed(text)
        return embed_cache[text]

    for demo in demos:
        history: list[np.ndarray] = []
        for t, step in enumerate(demo.steps):
            obs_text = step.observation.text
            if mask_fn is not None:
                obs_text = mask_fn(demo, t, step.observation)
            if condition_on == "subtask":
                idx = min(step.subtask_index, len(demo.subtask_plan.subtasks))
                conditioning = demo.subtask_plan.subtasks[idx - 1]
            else:
                conditioning = demo.task.goal_text
            inp = AgentInput(
                task_embedding=embed(conditioning),
                history=list(history),
                obs_embedding=embed(obs_text),
                action_embeddings=[embed(a) for a in step.permissible],
                action_texts=list(step.permissible),
            )
            samples.append(Sample(inp, step.permissible.index(step.action)))
            history.append(embed(obs_text))
    return samples


def train_bc(samples: list[Sample], params: PolicyParams,
             config: TrainConfig | None = None) -> list[dict]:
    """SGD with momentum over cross-entropy on expert actions.

    Mutates ``params`` in place; returns the per-epoch loss/accuracy curve.
    """
    if not samples:
        raise ValueError("need at least one training sample")
    config = config or TrainConfig()
    rng = np.random.default_rng(config.shuffle_seed)
    velocity = params.zeros_like()
    curve = []
    step_no = 0
    t0 = time.time()
    lr = config.learning_rate
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        losses = []
        correct = 0
        for i in order:
            s = samples[i]
            step_no += 1
            try:
                pi, cache = forward(params, s.inp)
            except NumericalError as exc:
                raise TrainingError(
                    f"training diverged at step {step_no}: {exc}") from exc
            loss = loss_from_cache(cache, s.expert_index)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at training step {step_no}")
            losses.append(loss)
            if int(np.argmax(pi)) == s.expert_index:
                correct += 1
            grads = backward(params, s.inp, s.expert_index, cache)
            if config.clip_norm > 0:
                total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if total > config.clip_norm:
                    scale = config.clip_norm / total
                    for g in grads.values():
                        g *= scale
            for name, g in grads.items():
                v = velocity[name]
                v *= config.momentum
                v += g
                params.tensors[name] -= lr * v
        curve.append({
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "accuracy": correct / len(samples),
        })
        lr *= config.lr_decay
        if config.log_every and (epoch + 1) % config.log_every == 0:
            log.info("epoch %d loss %.4f acc %.3f (%.1fs)", epoch,
                     curve[-1]["loss"], curve[-1]["accuracy"], time.time() - t0)
    return curve


def training_accuracy(samples: list[Sample], params: PolicyParams) -> float:
    correct = 0
    for s in samples:
        pi, _ = forward(params, s.inp)
        if int(np.argmax(pi)) == s.expert_index:
            correct += 1
    return correct / len(samples)


@dataclass
class PolicyAgent:
    """Greedy or sampling actor over permissible action texts."""
    params: PolicyParams
    bridge: LmCapabilities
    mode: str = "greedy"  # "greedy" | "sample"
    sample_seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)
    _embed_cache: dict[str, np.ndarray] = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise ValueError("mode must be 'greedy' or 'sample'")
        self._rng = np.random.default_rng(self.sample_seed)

    def _embed(self, text: str) -> np.ndarray:
        if text not in self._embed_cache:
            self._embed_cache[text] = self.bridge.embed(text)
        return self._embed_cache[text]

    def policy(self, conditioning_text: str, history_texts: list[str],
               observation_text: str, action_texts: list[str]) -> np.ndarray:
        inp = AgentInput(
            task_embedding=self._embed(conditioning_text),
            history=[self._embed(t) for t in history_texts],
            obs_embedding=self._embed(observation_text),
            action_embeddings=[self._embed(a) for a in action_texts],
            action_texts=list(action_texts),
        )
        pi, _ = forward(self.params, inp)
        return pi

    def act(self, conditioning_text: str, history_texts: list[str],
            observation_text: str, action_texts: list[str]) -> str:
        pi = self.policy(conditioning_text, history_texts, observation_text, action_texts)
        if self.mode == "greedy":
            return action_texts[int(np.argmax(pi))]  # argmax takes lowest index on ties
        return action_texts[int(self._rng.choice(len(pi), p=pi))]
