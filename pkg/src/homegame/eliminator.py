"""Relevance scoring and observation masking."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

from .lmbridge import LmCapabilities
from .world import Observation

log = logging.getLogger(__name__)

RECEPTACLE_PROMPT = "Your task is to: {task}. Where should you go to?"
OBJECT_PROMPT = "Your task is to: {task}. Which objects will be relevant?"

DEFAULT_TAU = 0.4


def relevance_prompts(task_text: str) -> tuple[str, str]:
    return (RECEPTACLE_PROMPT.format(task=task_text),
            OBJECT_PROMPT.format(task=task_text))


@dataclass(frozen=True)
class MaskDecision:
    entity: str
    kind: str           # "receptacle" | "object"
    score: float
    kept: bool
    threshold: float


def score_entities(bridge: LmCapabilities, conditioning_text: str,
                   observation: Observation,
                   tau_r: float = DEFAULT_TAU, tau_o: float = DEFAULT_TAU,
                   ) -> list[MaskDecision]:
    """One keep/mask decision per visible entity; scoring errors fail open."""
    recep_prompt, obj_prompt = relevance_prompts(conditioning_text)
    decisions = []
    for kind, names, prompt, tau in (
        ("receptacle", observation.receptacles, recep_prompt, tau_r),
        ("object", observation.objects, obj_prompt, tau_o),
    ):
        for name in names:
            try:
                score = float(bridge.score_choice(prompt, name))
            except Exception as exc:
                log.warning("relevance scoring failed for %s: %s; keeping entity", name, exc)
                decisions.append(MaskDecision(name, kind, 1.0, True, tau))
                continue
            decisions.append(MaskDecision(name, kind, score, score >= tau, tau))
    return decisions


def mask_observation(observation: Observation, decisions: list[MaskDecision],
                     conditioning_text: str = "") -> Observation:
    """Remove masked entities from the listed lists and re-render the text.

    Entities named in the fixed feedback sentence (outside the enumerated
    listing) are never removed, nor are instances of classes named by the
    conditioning text itself.
    """
    decided = {d.entity for d in decisions}
    missing = set(observation.entity_names()) - decided
    if missing:
        raise ValueError(f"decisions do not cover entities: {sorted(missing)}")

    protected = set(observation.entity_names()) - set(observation.listed)
    cond_tokens = set(conditioning_text.lower().split())
    masked = set()
    for d in decisions:
        if d.kept or d.entity in protected:
            continue
        if d.entity.rsplit(" ", 1)[0] in cond_tokens:
            continue
        masked.add(d.entity)

    if not masked:
        return observation
    return replace(
        observation,
        listed=[n for n in observation.listed if n not in masked],
        receptacles=[n for n in observation.receptacles if n not in masked],
        objects=[n for n in observation.objects if n not in masked],
    )


def evaluate_auc(decisions_or_scores, relevant: set[str] | None = None):
    """AUC of relevance scores against a ground-truth relevant-entity set.

    Accepts either (scores, labels) arrays via metrics.auc_roc semantics or a
    list of MaskDecision plus the set of entities that should score high.
    """
    from .metrics import auc_roc

    if relevant is not None:
        scores = [d.score for d in decisions_or_scores]
        labels = [1 if d.entity in relevant else 0 for d in decisions_or_scores]
        return auc_roc(scores, labels)
    scores, labels = decisions_or_scores
    return auc_roc(scores, labels)


def mask_with_bridge(bridge: LmCapabilities, conditioning_text: str,
                     observation: Observation,
                     tau_r: float = DEFAULT_TAU, tau_o: float = DEFAULT_TAU,
                     ) -> tuple[Observation, list[MaskDecision]]:
    decisions = score_entities(bridge, conditioning_text, observation, tau_r, tau_o)
    return mask_observation(observation, decisions, conditioning_text), decisions
