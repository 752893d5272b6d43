"""Evaluation: identity/attribute preservation metrics, trajectory-curvature
analysis, and the three-way method comparison harness.

Absolute scores here are toy-world quantities; reports reproduce orderings
and qualitative shapes only, and say so in their headers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .backend import MAX_DEGREE, ToyWorld
from .field import (
    FieldConfig,
    TrajectoryRecord,
    attribute_logits,
    traverse,
    traverse_fixed_direction,
    traverse_multiboundary,
)
from .predictor import softmax_rows

REPORT_NOTE = (
    "Toy-scale report: reproduces orderings and qualitative shapes only; "
    "absolute values are not comparable to photographic-face baselines."
)


class EvaluationError(ValueError):
    pass


@dataclass
class MetricReport:
    method: str
    attribute: int
    identity_score: float
    attribute_score: float
    n_trajectories: int
    latents_hash: str
    config: dict = field(default_factory=dict)
    note: str = REPORT_NOTE

    def to_dict(self):
        return asdict(self)


@dataclass
class CurvatureReport:
    attribute: int
    class_changes: list
    mean_cosines: list
    counts: list
    n_trajectories: int
    non_increasing: bool
    final_cosine: float

    def to_dict(self):
        return asdict(self)


# -- preservation metrics ------------------------------------------------------


def _step_images(trajectory: TrajectoryRecord, backend: ToyWorld):
    latents = [s.latent for s in trajectory.steps[1:]] + [trajectory.end_latent]
    return backend.generate_batch(np.stack(latents)) if latents else np.empty((0,))


def identity_preservation(trajectory: TrajectoryRecord, backend: ToyWorld) -> float:
    """Mean embedding distance between each edited image and the original."""
    if not trajectory.steps:
        return 0.0
    base = backend.identity_embed(backend.generate(trajectory.start_latent))
    total = 0.0
    for image in _step_images(trajectory, backend):
        total += float(np.linalg.norm(backend.identity_embed(image) - base))
    return total / len(trajectory.steps)


def attribute_preservation(
    trajectory: TrajectoryRecord, eval_predictor, backend: ToyWorld, edited_attribute: int
) -> float:
    """Mean cross-entropy of the non-edited attributes against the evaluation
    predictor's labels for the original image."""
    if not trajectory.steps:
        return 0.0
    base_logits = attribute_logits(eval_predictor, backend.generate(trajectory.start_latent))
    y = base_logits.argmax(axis=1)
    total = 0.0
    for image in _step_images(trajectory, backend):
        p = softmax_rows(attribute_logits(eval_predictor, image))
        for j in range(len(y)):
            if j == edited_attribute:
                continue
            total -= float(np.log(max(p[j, y[j]], 1e-12)))
    return total / len(trajectory.steps)


# -- curvature ---------------------------------------------------------------------


def curvature_analysis(trajectories: list) -> CurvatureReport:
    """Mean cosine between each step direction and the trajectory's first step,
    grouped by how many classes have been crossed when the step is taken."""
    if not trajectories:
        raise EvaluationError("need at least one trajectory")
    attrs = {t.attribute for t in trajectories}
    if len(attrs) > 1:
        raise EvaluationError(f"mixed attributes {sorted(attrs)}: curvature would be meaningless")
    per_change: dict = {}
    for t in trajectories:
        if len(t.steps) < 2 or abs(t.steps[-1].class_before - t.start_class) < 2:
            raise EvaluationError("each trajectory must span at least 2 class changes")
        first = t.steps[0].field_vector
        first = first / np.linalg.norm(first)
        local: dict = {}
        for s in t.steps:
            change = abs(s.class_before - t.start_class)
            d = s.field_vector / np.linalg.norm(s.field_vector)
            local.setdefault(change, []).append(float(first @ d))
        for change, vals in local.items():
            per_change.setdefault(change, []).append(float(np.mean(vals)))
    changes = sorted(per_change)
    means = [float(np.mean(per_change[c])) for c in changes]
    counts = [len(per_change[c]) for c in changes]
    non_increasing = all(means[i + 1] <= means[i] + 1e-12 for i in range(len(means) - 1))
    return CurvatureReport(
        attribute=trajectories[0].attribute,
        class_changes=changes,
        mean_cosines=means,
        counts=counts,
        n_trajectories=len(trajectories),
        non_increasing=non_increasing,
        final_cosine=means[-1],
    )


# -- method comparison ----------------------------------------------------------------


def _latents_hash(latents) -> str:
    return hashlib.sha256(np.ascontiguousarray(latents).tobytes()).hexdigest()[:16]


def comparison_start_latents(
    backend: ToyWorld, attribute: int, n: int, seed: int, class_change: int = 2
) -> np.ndarray:
    """Start latents for matched comparisons: degree > 0 (degree-0 starts are
    degenerate for increase edits) and headroom for the full class change."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        z = backend.sample_latents(256, rng)
        deg = backend.degrees_batch(z)[:, attribute]
        keep = (deg >= 1) & (deg + class_change <= MAX_DEGREE)
        out.extend(z[keep])
    return np.stack(out[:n])


def compare_methods(
    backend: ToyWorld,
    field_model,
    baselines: dict,
    step_predictor,
    eval_predictor,
    n: int = 100,
    seed: int = 0,
    config: FieldConfig = FieldConfig(),
    class_change: int = 2,
) -> list:
    """Run the semantic field and every baseline from identical starts to the
    same target classes; saturated starts are excluded pairwise."""
    attribute = field_model.attribute
    starts = comparison_start_latents(backend, attribute, n, seed, class_change)
    lhash = _latents_hash(starts)

    runs: dict = {"semantic_field": []}
    for z in starts:
        logits = attribute_logits(step_predictor, backend.generate(z))
        target = min(MAX_DEGREE, int(np.argmax(logits[attribute])) + class_change)
        runs["semantic_field"].append(traverse(field_model, step_predictor, backend, z, target, config))
    for name, baseline in baselines.items():
        kind, payload = baseline
        out = []
        for z in starts:
            logits = attribute_logits(step_predictor, backend.generate(z))
            target = min(MAX_DEGREE, int(np.argmax(logits[attribute])) + class_change)
            if kind == "fixed":
                out.append(
                    traverse_fixed_direction(payload, step_predictor, backend, z, attribute, target, config)
                )
            elif kind == "multiboundary":
                out.append(
                    traverse_multiboundary(payload, step_predictor, backend, z, attribute, target, config)
                )
            else:
                raise EvaluationError(f"unknown baseline kind {kind!r}")
        runs[name] = out

    ok = [
        i
        for i in range(len(starts))
        if all(trajs[i].reached for trajs in runs.values())
    ]
    reports = []
    for name, trajs in runs.items():
        failed_frac = 1.0 - len([t for t in trajs if t.reached]) / len(trajs)
        note = REPORT_NOTE
        if failed_frac > 0.5:
            note += f" UNRELIABLE: method failed on {failed_frac:.0%} of starts."
        ident = float(np.mean([identity_preservation(trajs[i], backend) for i in ok])) if ok else float("nan")
        attr_s = (
            float(np.mean([attribute_preservation(trajs[i], eval_predictor, backend, attribute) for i in ok]))
            if ok
            else float("nan")
        )
        reports.append(
            MetricReport(
                method=name,
                attribute=attribute,
                identity_score=ident,
                attribute_score=attr_s,
                n_trajectories=len(ok),
                latents_hash=lhash,
                config={
                    "seed": seed,
                    "n_requested": n,
                    "class_change": class_change,
                    "alpha": config.alpha,
                    "max_steps_per_class": config.max_steps_per_class,
                },
                note=note,
            )
        )
    return reports


def render_table(reports: list, attribute_names=None) -> str:
    """Plain-text table, one method per row, Identity / Attribute columns."""
    lines = [REPORT_NOTE, ""]
    header = f"{'Method':<24} {'Identity':>10} / {'Attribute':>10}   n"
    lines.append(header)
    lines.append("-" * len(header))
    for r in reports:
        lines.append(
            f"{r.method:<24} {r.identity_score:>10.4f} / {r.attribute_score:>10.4f}   {r.n_trajectories}"
        )
    return "\n".join(lines) + "\n"


def reports_to_json(reports: list) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=1)
