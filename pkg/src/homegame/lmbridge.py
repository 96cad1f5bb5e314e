"""Single seam for language-model capabilities.

Three interchangeable backends implement the same four capabilities
(generate, score_choice, yes_no, embed): a deterministic ground-truth
oracle, a remote HTTP completion service, and a record/replay cache.
"""
from __future__ import annotations

import hashlib
import json
import math
import random
import re
import threading
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np
import requests

from . import expert as expert_mod
from .expert import ground_truth_plan, subtask_satisfied
from .world import TaskSpec, WorldState

DEFAULT_EMBED_DIM = 64

PLAN_QUERY = "What are the middle steps required to {task}?"
TRACK_QUERY = "Did you finish the task of {subtask}?"


class BackendError(RuntimeError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class ReplayMissError(KeyError):
    def __init__(self, key: str):
        super().__init__(f"replay cache has no entry for key {key}")
        self.key = key


@runtime_checkable
class LmCapabilities(Protocol):
    def generate(self, prompt: str, max_tokens: int = 128, stop: str | None = None) -> str: ...
    def score_choice(self, prompt: str, candidate: str) -> float: ...
    def yes_no(self, prompt: str) -> tuple[float, float]: ...
    def embed(self, text: str) -> np.ndarray: ...


# --- hashed embeddings -------------------------------------------------------

_token_cache: dict[tuple[str, int], np.ndarray] = {}


def _token_vector(token: str, dim: int) -> np.ndarray:
    key = (token, dim)
    vec = _token_cache.get(key)
    if vec is None:
        digest = hashlib.sha256(f"tok:{token}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vec = rng.standard_normal(dim)
        _token_cache[key] = vec
    return vec


def hash_embed(text: str, dim: int = DEFAULT_EMBED_DIM) -> np.ndarray:
    """Deterministic bag-of-tokens embedding, L2-normalized."""
    tokens = re.findall(r"[a-z0-9/]+", text.lower())
    if not tokens:
        out = np.zeros(dim)
        out[0] = 1.0  # reserved vector for empty text
        return out
    acc = np.zeros(dim)
    for tok in tokens:
        acc += _token_vector(tok, dim)
    acc /= len(tokens)
    norm = np.linalg.norm(acc)
    if norm == 0.0:
        out = np.zeros(dim)
        out[0] = 1.0
        return out
    return acc / norm


# --- ground-truth oracle -----------------------------------------------------

@dataclass
class GroundTruth:
    """Registry resolving task text to specs and expert-derived facts."""

    tasks: dict[str, TaskSpec] = field(default_factory=dict)
    _states: dict[str, WorldState] = field(default_factory=dict)
    _touched: dict[str, set[str]] = field(default_factory=dict)
    synonyms: dict[str, str] = field(default_factory=dict)  # surface -> canonical token

    def register(self, task: TaskSpec, state: WorldState | None = None):
        key = _normalize(task.goal_text)
        self.tasks[key] = task
        if state is not None:
            self._states[key] = state

    def resolve(self, text: str) -> TaskSpec | None:
        raw_key = _normalize(text)
        if raw_key in self.tasks:
            return self.tasks[raw_key]
        tokens = self._canonical_tokens(text)
        key = " ".join(tokens)
        if key in self.tasks:
            return self.tasks[key]
        best, best_score = None, 0.0
        query = set(tokens)
        for k, task in self.tasks.items():
            ref = set(k.split())
            if not ref:
                continue
            score = len(query & ref) / len(query | ref)
            if score > best_score:
                best, best_score = task, score
        return best if best_score >= 0.5 else None

    def state_for(self, task: TaskSpec) -> WorldState | None:
        return self._states.get(_normalize(task.goal_text))

    def resolve_exact(self, text: str) -> TaskSpec | None:
        """Resolve only by exact raw or synonym-canonicalized goal match."""
        raw_key = _normalize(text)
        if raw_key in self.tasks:
            return self.tasks[raw_key]
        key = " ".join(self._canonical_tokens(text))
        return self.tasks.get(key)

    def touched_for(self, task: TaskSpec) -> set[str]:
        key = _normalize(task.goal_text)
        if key not in self._touched:
            state = self._states.get(key)
            if state is None:
                return set()
            self._touched[key] = expert_mod.solve(state, task).touched
        return self._touched[key]

    def _canonical_tokens(self, text: str) -> list[str]:
        tokens = re.findall(r"[a-z0-9/]+", text.lower())
        return [self.synonyms.get(t, t) for t in tokens]


def _normalize(text: str) -> str:
    return " ".join(re.findall(r"[a-z0-9/]+", text.lower()))


# Verb substitutions the noisy oracle uses to emulate paraphrased generations.
GENERATION_SYNONYMS = {
    "take": "grab",
    "heat": "warm",
    "cool": "chill",
    "clean": "rinse",
    "place": "return",
    "examine": "inspect",
}


# Appliance flag a task type, or a sub-task verb, depends on.
_TASK_FLAG = {
    "heat_and_place": "heat_source",
    "cool_and_place": "cool_source",
    "clean_and_place": "clean_source",
    "examine_in_light": "light_source",
}
_VERB_FLAG = {
    "heat": "heat_source",
    "cool": "cool_source",
    "clean": "clean_source",
    "examine": "light_source",
}


def goal_relevant_entities(state: WorldState, task: TaskSpec) -> set[str]:
    """Entities whose class the goal implies: target object and receptacle
    classes plus any appliance class the task type depends on."""
    classes = {task.target_object_class, task.target_receptacle_class}
    flag = _TASK_FLAG.get(task.task_type)
    if flag:
        classes |= {name for name, rc in state.catalog.receptacles.items()
                    if rc.has(flag)}
    return {e for e in state.entity_names()
            if e.rsplit(" ", 1)[0] in classes}


@dataclass
class OracleConfig:
    noise_epsilon: float = 0.0
    rng_seed: int = 0
    embed_dim: int = DEFAULT_EMBED_DIM


class OracleBackend:
    """Deterministic ground-truth stand-in for every LM capability.

    With ``noise_epsilon == 0`` answers agree exactly with the simulator's
    predicates. Noise semantics per capability: generate paraphrases one verb
    with probability epsilon; score_choice answers with a fair coin with
    probability epsilon; yes_no misses a true completion with probability
    epsilon (it never reports a false completion).
    """

    def __init__(self, ground_truth: GroundTruth, config: OracleConfig | None = None):
        self.gt = ground_truth
        self.config = config or OracleConfig()
        self.rng = random.Random(self.config.rng_seed)
        self._task: TaskSpec | None = None
        self._state: WorldState | None = None
        self._confirmed: dict[str, int] = {}

    # Episode context: the oracle consults live simulator state, mirroring a
    # QA model that could actually observe the environment.
    def bind_task(self, task: TaskSpec):
        self._task = task
        self._confirmed = {}

    def bind_state(self, state: WorldState):
        self._state = state

    def generate(self, prompt: str, max_tokens: int = 128, stop: str | None = None) -> str:
        matches = re.findall(r"What are the middle steps required to (.+?)\?", prompt)
        if not matches:
            return ""
        task = self.gt.resolve(matches[-1])
        if task is None:
            return ""
        subtasks = list(ground_truth_plan(task).subtasks)
        if self.config.noise_epsilon > 0 and self.rng.random() < self.config.noise_epsilon:
            swappable = [
                i for i, s in enumerate(subtasks)
                if s.split(" ", 1)[0] in GENERATION_SYNONYMS
            ]
            if swappable:
                i = self.rng.choice(swappable)
                verb, rest = subtasks[i].split(" ", 1)
                subtasks[i] = f"{GENERATION_SYNONYMS[verb]} {rest}"
        text = ", ".join(subtasks)
        if stop and stop in text:
            text = text.split(stop, 1)[0]
        return text

    def _prompt_conditioning(self, prompt: str) -> str | None:
        m = re.search(r"Your task is to: (.*?)\. (?:Where|Which)", prompt)
        if m:
            return m.group(1)
        return self._task.goal_text if self._task is not None else None

    def _flag_classes(self, task: TaskSpec | None, flag: str) -> set[str]:
        state = self.gt.state_for(task) if task is not None else None
        if state is None:
            return set()
        return {name for name, rc in state.catalog.receptacles.items()
                if rc.has(flag)}

    def _relevant_classes(self, conditioning: str) -> set[str] | None:
        """Entity classes a text-only judge would call relevant.

        Relevance is class-level: it reflects what the conditioning text
        implies, never which instances the expert actually visits. A full
        goal implies every class any phase of the task needs; a single
        sub-task implies only its own, so sub-task conditioning masks more.
        """
        task = self.gt.resolve_exact(conditioning)
        if task is None:
            parsed = expert_mod.parse_subtask(conditioning)
            if parsed is not None:
                verb, args = parsed
                classes = set(args)
                flag = _VERB_FLAG.get(verb)
                if flag:
                    classes |= self._flag_classes(self._task, flag)
                return classes
            task = self.gt.resolve(conditioning) or self._task
        if task is None:
            return None
        classes = {task.target_object_class, task.target_receptacle_class}
        flag = _TASK_FLAG.get(task.task_type)
        if flag:
            classes |= self._flag_classes(task, flag)
        return classes

    def score_choice(self, prompt: str, candidate: str) -> float:
        conditioning = self._prompt_conditioning(prompt)
        classes = self._relevant_classes(conditioning) if conditioning else None
        relevant = (classes is not None
                    and candidate.rsplit(" ", 1)[0] in classes)
        if self.config.noise_epsilon > 0 and self.rng.random() < self.config.noise_epsilon:
            return float(self.rng.random() < 0.5)
        return 1.0 if relevant else 0.0

    def yes_no(self, prompt: str) -> tuple[float, float]:
        m = re.findall(r"Did you finish the task of (.+?)\?", prompt)
        if not m or self._state is None:
            return (0.0, 1.0)
        subtask = m[-1]
        occ = self._confirmed.get(subtask, 0) + 1
        done = subtask_satisfied(subtask, self._state, occ)
        if done and self.config.noise_epsilon > 0 and self.rng.random() < self.config.noise_epsilon:
            return (0.0, 1.0)  # missed detection
        if done:
            self._confirmed[subtask] = occ
            return (1.0, 0.0)
        return (0.0, 1.0)

    def embed(self, text: str) -> np.ndarray:
        return hash_embed(text, self.config.embed_dim)


# --- HTTP backend ------------------------------------------------------------

@dataclass
class HttpConfig:
    endpoint: str
    retries: int = 2
    timeout_ms: int = 10_000
    max_inflight: int = 4
    auth_token: str | None = None
    embed_dim: int = DEFAULT_EMBED_DIM


class HttpBackend:
    """Remote completion service speaking a small JSON protocol.

    Every call POSTs ``{"capability": ..., ...}`` and expects a JSON object
    back; classification capabilities request per-candidate log-probabilities
    which are exponentiated (and renormalized for yes/no) locally.
    """

    def __init__(self, config: HttpConfig, session: requests.Session | None = None):
        self.config = config
        self.session = session or requests.Session()
        self._gate = threading.Semaphore(config.max_inflight)

    def _post(self, payload: dict) -> dict:
        headers = {}
        if self.config.auth_token:
            headers["Authorization"] = f"Bearer {self.config.auth_token}"
        last_status = None
        for attempt in range(self.config.retries + 1):
            try:
                with self._gate:
                    resp = self.session.post(
                        self.config.endpoint, json=payload, headers=headers,
                        timeout=self.config.timeout_ms / 1000.0,
                    )
            except requests.RequestException as exc:
                last_status = None
                last_error = str(exc)
                continue
            last_status = resp.status_code
            last_error = f"HTTP {resp.status_code}"
            if resp.status_code >= 500:
                continue
            if resp.status_code != 200:
                break
            try:
                return resp.json()
            except ValueError as exc:
                raise BackendError(f"malformed JSON from backend: {exc}", resp.status_code)
        raise BackendError(
            f"backend request failed after {self.config.retries + 1} attempts: {last_error}",
            last_status,
        )

    def generate(self, prompt: str, max_tokens: int = 128, stop: str | None = None) -> str:
        out = self._post({
            "capability": "generate",
            "prompt": prompt,
            "max_tokens": max_tokens,
            "stop": stop,
            "temperature": 0,
        })
        text = str(out.get("text", ""))
        if stop and stop in text:
            text = text.split(stop, 1)[0]
        return text

    def _logprobs(self, prompt: str, candidates: list[str]) -> dict[str, float]:
        out = self._post({
            "capability": "logprobs",
            "prompt": prompt,
            "candidates": candidates,
        })
        try:
            return {c: float(out["logprobs"][c]) for c in candidates}
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"malformed logprobs response: {exc}")

    def score_choice(self, prompt: str, candidate: str) -> float:
        lp = self._logprobs(prompt, [candidate])[candidate]
        return min(1.0, max(0.0, math.exp(lp)))

    def yes_no(self, prompt: str) -> tuple[float, float]:
        lp = self._logprobs(prompt, ["Yes", "No"])
        py, pn = math.exp(lp["Yes"]), math.exp(lp["No"])
        total = py + pn
        return (py / total, pn / total)

    def embed(self, text: str) -> np.ndarray:
        out = self._post({"capability": "embed", "text": text})
        vec = np.asarray(out.get("vector", []), dtype=float)
        if vec.size == 0:
            raise BackendError("embed response missing vector")
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec


# --- record/replay cache -----------------------------------------------------

def _request_key(capability: str, request: dict) -> str:
    blob = json.dumps({"capability": capability, "request": request}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


class CacheBackend:
    """Caches inner-backend responses in an append-only JSONL store.

    ``replay=True`` forbids inner calls: a miss raises ReplayMissError.
    """

    def __init__(self, inner: LmCapabilities | None, store_path: str, replay: bool = False):
        if inner is None and not replay:
            raise ValueError("record mode requires an inner backend")
        self.inner = inner
        self.store_path = store_path
        self.replay = replay
        self._lock = threading.Lock()
        self._entries: dict[str, dict] = {}
        try:
            with open(store_path) as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._entries[rec["key"]] = rec["response"]
        except FileNotFoundError:
            pass

    def _lookup(self, capability: str, request: dict, compute) -> dict:
        key = _request_key(capability, request)
        with self._lock:
            if key in self._entries:
                return self._entries[key]
        if self.replay:
            raise ReplayMissError(key)
        response = compute()
        record = {"key": key, "capability": capability, "request": request,
                  "response": response}
        with self._lock:
            if key not in self._entries:
                self._entries[key] = response
                with open(self.store_path, "a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
        return self._entries[key]

    def generate(self, prompt: str, max_tokens: int = 128, stop: str | None = None) -> str:
        request = {"prompt": prompt, "max_tokens": max_tokens, "stop": stop}
        out = self._lookup("generate", request,
                           lambda: {"text": self.inner.generate(prompt, max_tokens, stop)})
        return out["text"]

    def score_choice(self, prompt: str, candidate: str) -> float:
        request = {"prompt": prompt, "candidate": candidate}
        out = self._lookup("score_choice", request,
                           lambda: {"score": self.inner.score_choice(prompt, candidate)})
        return out["score"]

    def yes_no(self, prompt: str) -> tuple[float, float]:
        request = {"prompt": prompt}
        out = self._lookup("yes_no", request, lambda: dict(
            zip(("p_yes", "p_no"), self.inner.yes_no(prompt))))
        return (out["p_yes"], out["p_no"])

    def embed(self, text: str) -> np.ndarray:
        request = {"text": text}
        out = self._lookup("embed", request,
                           lambda: {"vector": [float(x) for x in self.inner.embed(text)]})
        return np.asarray(out["vector"], dtype=float)
