"""Sub-task planning: example retrieval, prompt construction, plan parsing."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .expert import SubTaskPlan
from .lmbridge import LmCapabilities, PLAN_QUERY


class BankTooSmallError(ValueError):
    pass


@dataclass
class BankEntry:
    task_text: str
    plan: SubTaskPlan
    embedding: np.ndarray


@dataclass
class ExampleBank:
    entries: list[BankEntry] = field(default_factory=list)

    def add(self, task_text: str, plan: SubTaskPlan, bridge: LmCapabilities):
        self.entries.append(BankEntry(task_text, plan, bridge.embed(task_text)))

    def __len__(self) -> int:
        return len(self.entries)


def retrieve_examples(bank: ExampleBank, task_text: str, bridge: LmCapabilities,
                      k: int = 5) -> list[BankEntry]:
    """Top-k bank entries by cosine similarity, ties broken by insertion order."""
    if len(bank) < k:
        raise BankTooSmallError(f"bank has {len(bank)} entries, need {k}")
    query = bridge.embed(task_text)
    sims = [float(np.dot(query, e.embedding)) for e in bank.entries]
    order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))
    return [bank.entries[i] for i in order[:k]]


def build_prompt(examples: list[BankEntry], task_text: str) -> str:
    if not examples:
        raise ValueError("need at least one example")
    lines = []
    for ex in examples:
        lines.append(PLAN_QUERY.format(task=ex.task_text))
        lines.append(ex.plan.render())
    lines.append(PLAN_QUERY.format(task=task_text))
    return "\n".join(lines)


def split_prompt(prompt: str) -> tuple[list[tuple[str, str]], str]:
    """Inverse of build_prompt: (question, answer) pairs plus the open query."""
    lines = prompt.split("\n")
    if len(lines) % 2 != 1:
        raise ValueError("prompt does not end with an open question")
    pairs = [(lines[i], lines[i + 1]) for i in range(0, len(lines) - 1, 2)]
    return pairs, lines[-1]


def parse_plan_text(text: str) -> list[str]:
    parts = []
    for chunk in text.replace("\n", ",").split(","):
        sub = chunk.strip().rstrip(".")
        if sub:
            parts.append(sub)
    return parts


def generate_plan(bridge: LmCapabilities, bank: ExampleBank, task_text: str,
                  k: int = 5, max_tokens: int = 128) -> SubTaskPlan:
    """Plan a task with in-context examples; falls back to the task itself."""
    k = min(k, len(bank)) or 1
    examples = retrieve_examples(bank, task_text, bridge, k)
    prompt = build_prompt(examples, task_text)
    text = bridge.generate(prompt, max_tokens=max_tokens, stop="\n")
    subtasks = parse_plan_text(text)
    if not subtasks:
        return SubTaskPlan((task_text,), source="generated")
    return SubTaskPlan(tuple(s[:128] for s in subtasks), source="generated")


def _norm_sequence(plan: SubTaskPlan) -> tuple[str, ...]:
    return tuple(" ".join(s.lower().split()) for s in plan.subtasks)


def evaluate_plans(generated: list[SubTaskPlan], ground_truth: list[SubTaskPlan],
                   bridge: LmCapabilities) -> tuple[float, float]:
    """Exact-sequence accuracy and mean embedding cosine similarity."""
    if len(generated) != len(ground_truth):
        raise ValueError("plan lists must have equal length")
    if not generated:
        raise ValueError("need at least one plan pair")
    exact = 0
    sims = []
    for gen, ref in zip(generated, ground_truth):
        if _norm_sequence(gen) == _norm_sequence(ref):
            exact += 1
        sims.append(float(np.dot(bridge.embed(gen.render()), bridge.embed(ref.render()))))
    return exact / len(generated), float(np.mean(sims))
