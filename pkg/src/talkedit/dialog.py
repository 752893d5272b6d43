"""Dialog controller: a small finite-state machine that routes each user
utterance through the context-aware encoder, drives field traversals, and
answers with templated feedback.

Feedback categories follow the three-way policy (degree check, suggestion,
ask-next); clarification, apology, and farewell messages cover the paths
where no edit happened.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from importlib import resources

import numpy as np

from .backend import ATTRIBUTE_NAMES, MAX_DEGREE
from .field import FieldConfig, TrajectoryRecord, attribute_logits, traverse
from .language import CONTEXTS, EditingEncoding, encode_request

FSM_STATES = ("start", "edit", "no_edit", "end")
# start->end extends the specified transition set: a user may end the session
# in the very first round.
LEGAL_TRANSITIONS = {
    ("start", "edit"), ("start", "no_edit"), ("start", "end"),
    ("edit", "edit"), ("edit", "no_edit"), ("edit", "end"),
    ("no_edit", "edit"), ("no_edit", "no_edit"), ("no_edit", "end"),
}

POLICY_CATEGORIES = ("degree_check", "suggestion", "ask_next")
FEEDBACK_CATEGORIES = POLICY_CATEGORIES + ("clarification", "apology", "farewell")

SUGGESTION_BASE_P = 0.2
SUGGESTION_SLOPE = 0.6


class DialogError(RuntimeError):
    pass


def load_feedback_templates() -> dict:
    return json.loads(resources.files("talkedit.data").joinpath("feedback_templates.json").read_text())


_TEMPLATES = None


def _templates() -> dict:
    global _TEMPLATES
    if _TEMPLATES is None:
        _TEMPLATES = load_feedback_templates()
    return _TEMPLATES


@dataclass
class FeedbackMessage:
    text: str
    category: str
    template_id: str

    def __post_init__(self):
        if self.category not in FEEDBACK_CATEGORIES:
            raise ValueError(f"bad feedback category {self.category!r}")
        if not self.text:
            raise ValueError("feedback text must be nonempty")


@dataclass
class EditRecord:
    attribute: int
    from_degree: int
    to_degree: int
    round_index: int

    def to_dict(self):
        return {
            "attribute": self.attribute,
            "from_degree": self.from_degree,
            "to_degree": self.to_degree,
            "round_index": self.round_index,
        }

    @staticmethod
    def from_dict(doc):
        return EditRecord(doc["attribute"], doc["from_degree"], doc["to_degree"], doc["round_index"])


@dataclass
class DialogState:
    fsm: str
    latent: np.ndarray
    degrees: np.ndarray
    history: list = dc_field(default_factory=list)
    last_feedback_category: str | None = None
    last_suggested_attribute: int | None = None
    pending_check_attribute: int | None = None
    round_index: int = 0
    seed: int = 0
    rng: np.random.Generator = None

    def to_dict(self) -> dict:
        return {
            "fsm": self.fsm,
            "latent": self.latent.tolist(),
            "degrees": self.degrees.tolist(),
            "history": [h.to_dict() for h in self.history],
            "last_feedback_category": self.last_feedback_category,
            "last_suggested_attribute": self.last_suggested_attribute,
            "pending_check_attribute": self.pending_check_attribute,
            "round_index": self.round_index,
            "seed": self.seed,
            "rng_state": self.rng.bit_generator.state,
        }

    @staticmethod
    def from_dict(doc: dict) -> "DialogState":
        rng = np.random.default_rng(0)
        rng.bit_generator.state = doc["rng_state"]
        return DialogState(
            fsm=doc["fsm"],
            latent=np.array(doc["latent"], dtype=np.float64),
            degrees=np.array(doc["degrees"], dtype=int),
            history=[EditRecord.from_dict(h) for h in doc["history"]],
            last_feedback_category=doc["last_feedback_category"],
            last_suggested_attribute=doc["last_suggested_attribute"],
            pending_check_attribute=doc["pending_check_attribute"],
            round_index=doc["round_index"],
            seed=doc["seed"],
            rng=rng,
        )


@dataclass
class DialogModels:
    """Everything a session needs: the image world, one field per attribute,
    the traversal predictor, the bookkeeping predictor, and the encoder."""

    backend: object
    fields: dict
    step_predictor: object
    degree_predictor: object
    encoder: object
    config: FieldConfig = FieldConfig()

    def encode(self, text: str, context: str) -> EditingEncoding:
        if callable(self.encoder):
            return self.encoder(text, context)
        return encode_request(self.encoder, text, context)


def read_degrees(models: DialogModels, latent) -> np.ndarray:
    logits = attribute_logits(models.degree_predictor, models.backend.generate(latent))
    return logits.argmax(axis=1)


def new_session(models: DialogModels, seed: int | None = None, latent=None) -> DialogState:
    seed = int(np.random.SeedSequence().entropy % (2**31)) if seed is None else int(seed)
    rng = np.random.default_rng(seed)
    if latent is None:
        latent = models.backend.sample_latents(1, np.random.default_rng(seed ^ 0x5EED))[0]
    latent = np.asarray(latent, dtype=np.float64)
    return DialogState(
        fsm="start",
        latent=latent,
        degrees=read_degrees(models, latent),
        seed=seed,
        rng=rng,
    )


def dialog_context(state: DialogState) -> str:
    if state.last_feedback_category == "degree_check":
        return "after_degree_check"
    if state.last_feedback_category == "suggestion":
        return "after_suggestion"
    if state.last_feedback_category == "clarification" and state.pending_check_attribute is not None:
        return "after_degree_check"  # mid-refinement clarification keeps the check open
    return "open_request"


def feedback_policy(state: DialogState, rng=None) -> tuple:
    """Category for the next feedback plus the suggested attribute, if any.

    A just-finished direction-unspecified edit always gets a degree check;
    otherwise the suggestion probability grows with how many attributes are
    still untouched, and suggested attributes never repeat an edited one
    while unedited ones remain.
    """
    rng = rng if rng is not None else state.rng
    if state.pending_check_attribute is not None:
        return "degree_check", state.pending_check_attribute
    k = len(ATTRIBUTE_NAMES)
    edited = {h.attribute for h in state.history}
    unedited = [a for a in range(k) if a not in edited]
    p = SUGGESTION_BASE_P + SUGGESTION_SLOPE * len(unedited) / k
    if rng.random() < p:
        pool = unedited if unedited else list(range(k))
        return "suggestion", int(pool[rng.integers(len(pool))])
    return "ask_next", None


def render_feedback(category: str, state: DialogState, seed: int, attribute=None, pool: str | None = None) -> FeedbackMessage:
    """Sample a template from the category pool and substitute names."""
    doc = _templates()
    rng = np.random.default_rng(seed)
    key = pool or category
    entries = doc[key]
    if isinstance(entries, dict):  # per-attribute pools (degree checks)
        entries = entries[ATTRIBUTE_NAMES[attribute]]
    if not entries:
        raise DialogError(f"empty feedback pool {key!r}")
    idx = int(rng.integers(len(entries)))
    text = entries[idx]
    if "{display}" in text:
        text = text.replace("{display}", doc["display_names"][ATTRIBUTE_NAMES[attribute]])
    return FeedbackMessage(text=text, category=category, template_id=f"{key}[{idx}]")


@dataclass
class RoundResult:
    state: DialogState
    feedback: FeedbackMessage
    trajectory: TrajectoryRecord | None
    encoding: EditingEncoding
    edit: EditRecord | None


def _clamp(v: int) -> int:
    return max(0, min(MAX_DEGREE, v))


def dialog_round(state: DialogState, user_text: str, models: DialogModels) -> RoundResult:
    """Run one round: encode, maybe edit, update bookkeeping, respond."""
    if state.fsm == "end":
        raise DialogError("session already ended")
    enc = models.encode(user_text, dialog_context(state))
    state.round_index += 1
    fb_seed = int(state.rng.integers(2**31))

    def respond(new_fsm, feedback, trajectory=None, edit=None):
        old = state.fsm
        if (old, new_fsm) not in LEGAL_TRANSITIONS:
            raise DialogError(f"illegal transition {old} -> {new_fsm}")
        state.fsm = new_fsm
        state.degrees = read_degrees(models, state.latent)  # re-verified, never cached
        state.last_feedback_category = feedback.category
        return RoundResult(state, feedback, trajectory, enc, edit)

    def policy_feedback():
        category, attr = feedback_policy(state)
        if category == "suggestion":
            state.last_suggested_attribute = attr
            return render_feedback("suggestion", state, fb_seed, attribute=attr)
        state.last_suggested_attribute = None
        return render_feedback("ask_next", state, fb_seed)

    # terminal and non-edit intents
    if enc.request_type == "end":
        state.pending_check_attribute = None
        return respond("end", render_feedback("farewell", state, fb_seed))
    if enc.request_type == "other":
        state.pending_check_attribute = None
        state.last_suggested_attribute = None
        return respond("no_edit", render_feedback("clarification", state, fb_seed))
    if enc.request_type == "confirm":
        if state.pending_check_attribute is not None:
            state.pending_check_attribute = None
            return respond("no_edit", policy_feedback())
        state.last_suggested_attribute = None
        return respond("no_edit", render_feedback("clarification", state, fb_seed))
    if enc.request_type == "reject":
        if state.pending_check_attribute is not None:
            if enc.direction == "none":
                # keep the check open and ask which way to move
                return respond(
                    "no_edit",
                    render_feedback("clarification", state, fb_seed, pool="clarification_direction"),
                )
            attr = state.pending_check_attribute
            return _run_edit(state, models, enc, attr, direction=enc.direction, check_after=True, fb_seed=fb_seed, respond=respond, policy_feedback=policy_feedback)
        state.last_suggested_attribute = None
        return respond("no_edit", policy_feedback() if dialog_context(state) == "after_suggestion" else render_feedback("clarification", state, fb_seed))

    # edit intents: resolve the attribute
    attr = enc.attribute
    suggestion_accept = False
    if attr is None:
        context = dialog_context(state)
        if context == "after_suggestion" and state.last_suggested_attribute is not None:
            attr = state.last_suggested_attribute
            suggestion_accept = True
        elif state.pending_check_attribute is not None:
            attr = state.pending_check_attribute
        else:
            return respond(
                "no_edit", render_feedback("clarification", state, fb_seed, pool="clarification_attribute")
            )
    check_after = enc.request_type == "direction_only" or suggestion_accept
    return _run_edit(state, models, enc, attr, direction=None, check_after=check_after, fb_seed=fb_seed, respond=respond, policy_feedback=policy_feedback)


def _run_edit(state, models, enc, attr, direction, check_after, fb_seed, respond, policy_feedback):
    current = int(state.degrees[attr])
    if direction is not None:  # degree-check refinement
        target = _clamp(current + (1 if direction == "increase" else -1))
    elif enc.request_type == "target_degree":
        target = enc.degree
    elif enc.request_type == "relative_change":
        target = _clamp(current + enc.degree)
    else:  # direction_only
        target = _clamp(current + (1 if enc.direction == "increase" else -1))

    if target == current and enc.request_type != "target_degree":
        # a clamped relative/directional request that cannot move further
        state.pending_check_attribute = None
        return respond(
            "no_edit", render_feedback("clarification", state, fb_seed, pool="clarification_limit")
        )

    field_model = models.fields.get(attr)
    if field_model is None:
        raise DialogError(f"no field model for attribute {ATTRIBUTE_NAMES[attr]}")
    trajectory = traverse(
        field_model, models.step_predictor, models.backend, state.latent, target, models.config
    )
    if trajectory.outcome == "saturated":
        state.pending_check_attribute = None
        state.last_suggested_attribute = None
        return respond("no_edit", render_feedback("apology", state, fb_seed), trajectory)

    state.latent = trajectory.end_latent.copy()
    new_degrees = read_degrees(models, state.latent)
    edit = EditRecord(
        attribute=attr,
        from_degree=current,
        to_degree=int(new_degrees[attr]),
        round_index=state.round_index,
    )
    state.history.append(edit)
    state.last_suggested_attribute = None
    if check_after:
        state.pending_check_attribute = attr
        return respond("edit", render_feedback("degree_check", state, fb_seed, attribute=attr), trajectory, edit)
    state.pending_check_attribute = None
    return respond("edit", policy_feedback(), trajectory, edit)
