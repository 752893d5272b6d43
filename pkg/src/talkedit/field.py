"""Semantic field: a location-specific editing direction for every latent.

One mapping network per attribute is trained so that a single step
z' = z + alpha*F(z) moves the rendered image up one attribute degree while an
identity term keeps the background texture (and a frozen predictor keeps the
other attributes) unchanged. Traversal iterates steps until the predictor
confirms the requested degree. Fixed-direction and per-class-boundary SVM
baselines share the same traversal engine for comparisons.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from .backend import MAX_DEGREE, NUM_DEGREES, ToyWorld
from .predictor import ACCURACY_FLOOR, PredictorModel, predict_logits, softmax_rows


class FieldError(RuntimeError):
    pass


class UnsupportedOperation(RuntimeError):
    pass


@dataclass(frozen=True)
class FieldConfig:
    alpha: float = 1.0
    max_steps_per_class: int = 100
    lambda_pred: float = 1.0
    lambda_id: float = 1.0
    lambda_disc: float = 0.0
    lr: float = 1e-4
    batch_size: int = 32
    use_regularized_step: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.max_steps_per_class < 1:
            raise ValueError("alpha must be >= 0 and max_steps_per_class >= 1")
        if min(self.lambda_pred, self.lambda_id, self.lambda_disc) < 0:
            raise ValueError("loss weights must be >= 0")


class FieldNet(nn.Module):
    """Eight 512-wide fully-connected layers, leaky-rectified between them."""

    def __init__(self, d: int, width: int = 512, depth: int = 8, slope: float = 0.2):
        super().__init__()
        layers = []
        sizes = [d] + [width] * (depth - 1) + [d]
        for i in range(depth):
            layers.append(nn.Linear(sizes[i], sizes[i + 1]))
            if i < depth - 1:
                layers.append(nn.LeakyReLU(slope))
        self.body = nn.Sequential(*layers)
        # orthogonal hidden layers keep this deep plain stack well-conditioned
        # at the small training rate; the near-zero output layer lets steps
        # grow along the loss gradient instead of unlearning a random field
        with torch.no_grad():
            gain = nn.init.calculate_gain("leaky_relu", slope)
            for m in self.body:
                if isinstance(m, nn.Linear):
                    nn.init.orthogonal_(m.weight, gain=gain)
                    m.bias.zero_()
            self.body[-1].weight.mul_(0.05)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.body(z)


@dataclass
class SemanticFieldModel:
    attribute: int
    net: FieldNet
    seed: int
    meta: dict = field(default_factory=dict)


@dataclass
class TrajectoryStep:
    latent: np.ndarray  # latent before the step
    field_vector: np.ndarray  # effective step vector (latent_next - latent)/alpha
    softmax: np.ndarray  # predictor softmax for the attribute, after the step
    class_before: int
    class_after: int


@dataclass
class TrajectoryRecord:
    attribute: int
    start_latent: np.ndarray
    end_latent: np.ndarray
    start_class: int
    target_class: int
    steps: list
    outcome: str  # "reached" | "saturated"

    @property
    def reached(self) -> bool:
        return self.outcome == "reached"


def attribute_logits(classifier, image) -> np.ndarray:
    """Logits from either a trained PredictorModel or any object exposing
    predict_logits(image), such as the oracle classifier."""
    if isinstance(classifier, PredictorModel):
        return predict_logits(classifier, image)
    return np.asarray(classifier.predict_logits(image), dtype=np.float64)


# -- stepping ------------------------------------------------------------------


def field_vector(model, z) -> np.ndarray:
    if hasattr(model, "field_vector"):  # verification stand-ins duck-type here
        out = np.asarray(model.field_vector(z), dtype=np.float64)
    else:
        dtype = next(model.net.parameters()).dtype
        zt = torch.as_tensor(np.asarray(z, dtype=np.float64), dtype=dtype)
        with torch.no_grad():
            out = model.net(zt[None])[0].double().numpy()
    if not np.all(np.isfinite(out)):
        raise FieldError("field produced non-finite output")
    return out


def field_step(model: SemanticFieldModel, z, config: FieldConfig) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) + config.alpha * field_vector(model, z)


def regularized_step(model: SemanticFieldModel, z, config: FieldConfig, backend) -> np.ndarray:
    """z' = z + alpha * (M(F(z)) - M(0)) for a backend latent-mapping M."""
    hook = getattr(backend, "mapping_hook", None)
    if hook is None:
        raise UnsupportedOperation("backend does not expose a mapping hook")
    f = field_vector(model, z)
    delta = np.asarray(hook(f), dtype=np.float64) - np.asarray(
        hook(np.zeros_like(f)), dtype=np.float64
    )
    return np.asarray(z, dtype=np.float64) + config.alpha * delta


# -- training --------------------------------------------------------------------


def field_total_loss(
    backend: ToyWorld,
    predictor_net: nn.Module,
    field_net: nn.Module,
    attribute: int,
    z_batch: torch.Tensor,
    config: FieldConfig,
    discriminator=None,
) -> torch.Tensor:
    """Weighted sum of predictor, identity, and discriminator losses for one
    batch, differentiable with respect to the field parameters."""
    z = z_batch
    f = field_net(z)
    z_edit = z + config.alpha * f

    images = backend.generate_batch_t(z.detach())
    images_edit = backend.generate_batch_t(z_edit)

    total = z.new_zeros(())
    if config.lambda_pred > 0:
        degrees = backend.degrees_batch(z.detach().double().numpy())
        degrees[:, attribute] += 1
        if degrees[:, attribute].max() > MAX_DEGREE:
            raise FieldError("batch contains latents already at the maximum degree")
        target = torch.as_tensor(degrees)
        logits = predictor_net(images_edit)
        logp = torch.log_softmax(logits, dim=2)
        picked = logp.gather(2, target[:, :, None]).squeeze(2)
        total = total + config.lambda_pred * (-picked.sum(dim=1)).mean()
    if config.lambda_id > 0:
        emb = backend.identity_embed_batch_t(images)
        emb_edit = backend.identity_embed_batch_t(images_edit)
        total = total + config.lambda_id * (emb_edit - emb).abs().sum(dim=1).mean()
    if config.lambda_disc > 0:
        if discriminator is None:
            raise FieldError("lambda_disc > 0 requires a discriminator")
        total = total + config.lambda_disc * (-discriminator(images_edit)).mean()
    return total


def _class_pools(
    backend: ToyWorld, attribute: int, rng, pool_size: int = 256, interior_margin: float = 0.15
):
    """Latent pools for classes 0..MAX_DEGREE-1 (max degree excluded: its
    increment target is undefined).

    Samples hugging a class boundary get ambiguous increment targets, so each
    pool keeps the central band of its class (margin in bin-width units).
    """
    pools = [[] for _ in range(MAX_DEGREE)]
    while min(len(p) for p in pools) < pool_size:
        z = backend.sample_latents(4096, rng)
        scores = backend.scores_batch(z)[:, attribute] * NUM_DEGREES / 5.0
        cls = np.minimum(MAX_DEGREE, np.floor(scores)).astype(int)
        frac = scores - cls
        ok = (frac >= interior_margin) & (frac <= 1.0 - interior_margin)
        for c in range(MAX_DEGREE):
            need = pool_size - len(pools[c])
            if need > 0:
                hit = z[(cls == c) & ok]
                pools[c].extend(hit[:need])
    return [np.array(p) for p in pools]


def train_field(
    backend: ToyWorld,
    predictor: PredictorModel,
    attribute: int,
    config: FieldConfig = FieldConfig(),
    n_iters: int = 4000,
    seed: int = 0,
    discriminator=None,
) -> SemanticFieldModel:
    """Optimize the mapping network so one step raises the attribute by one
    degree; the predictor and backend stay frozen."""
    if predictor.accuracy and min(predictor.accuracy.values()) < ACCURACY_FLOOR:
        raise FieldError(
            f"predictor accuracy {predictor.accuracy} below {ACCURACY_FLOOR}; refusing to train"
        )
    attribute = backend._check_attr(attribute)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)

    pools = _class_pools(backend, attribute, rng)
    pred32 = copy.deepcopy(predictor.net).float()
    pred32.requires_grad_(False)

    net = FieldNet(backend.d)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    losses = []
    for it in range(n_iters):
        cls_pick = rng.integers(0, MAX_DEGREE, size=config.batch_size)
        batch = np.stack([pools[c][rng.integers(len(pools[c]))] for c in cls_pick])
        z = torch.as_tensor(batch, dtype=torch.float32)
        loss = field_total_loss(backend, pred32, net, attribute, z, config, discriminator)
        if not torch.isfinite(loss):
            raise FieldError(f"non-finite loss {float(loss)} at iteration {it}")
        if loss.requires_grad:  # all-zero weights yield a constant loss
            opt.zero_grad()
            loss.backward()
            opt.step()
        losses.append(float(loss.detach()))

    net = net.double()
    net.eval()
    net.requires_grad_(False)
    window = max(1, n_iters // 10)
    meta = {
        "attribute": attribute,
        "seed": seed,
        "n_iters": n_iters,
        "config": asdict(config),
        "loss_curve": losses,
        "initial_loss": float(np.mean(losses[:window])),
        "final_loss": float(np.mean(losses[-window:])),
    }
    return SemanticFieldModel(attribute=attribute, net=net, seed=seed, meta=meta)


# -- traversal ---------------------------------------------------------------------


def traverse_direction(
    step_fn,
    classifier,
    backend: ToyWorld,
    z,
    attribute: int,
    target_degree: int,
    config: FieldConfig = FieldConfig(),
) -> TrajectoryRecord:
    """Shared traversal engine.

    step_fn(z, current_class, want_increase) returns the un-scaled step
    vector; the engine applies alpha, re-reads the predictor after every step,
    and stops on target confirmation or budget exhaustion.
    """
    if not 0 <= target_degree <= MAX_DEGREE:
        raise FieldError(f"target degree {target_degree} outside 0..{MAX_DEGREE}")
    z = np.asarray(z, dtype=np.float64).copy()
    start = z.copy()

    probs = softmax_rows(attribute_logits(classifier, backend.generate(z)))
    cls = int(np.argmax(probs[attribute]))
    start_class = cls

    steps = []
    budget = config.max_steps_per_class * abs(target_degree - start_class)
    outcome = "reached" if cls == target_degree else None
    while outcome is None:
        vec = np.asarray(step_fn(z, cls, target_degree > cls), dtype=np.float64)
        z_next = z + config.alpha * vec
        if not np.all(np.isfinite(z_next)):
            raise FieldError("traversal produced a non-finite latent")
        probs = softmax_rows(attribute_logits(classifier, backend.generate(z_next)))
        cls_next = int(np.argmax(probs[attribute]))
        steps.append(
            TrajectoryStep(
                latent=z.copy(),
                field_vector=vec,
                softmax=probs[attribute].copy(),
                class_before=cls,
                class_after=cls_next,
            )
        )
        z, cls = z_next, cls_next
        if cls == target_degree:
            outcome = "reached"
        elif len(steps) >= budget:
            outcome = "saturated"
    return TrajectoryRecord(
        attribute=attribute,
        start_latent=start,
        end_latent=z,
        start_class=start_class,
        target_class=target_degree,
        steps=steps,
        outcome=outcome,
    )


def traverse(
    model,
    classifier,
    backend: ToyWorld,
    z,
    target_degree: int,
    config: FieldConfig = FieldConfig(),
) -> TrajectoryRecord:
    """Traverse along the (possibly regularized) semantic field; decreases ride
    the negated field."""

    def step_fn(zz, _cls, want_increase):
        if config.use_regularized_step:
            base = regularized_step(model, zz, config, backend)
            vec = (base - np.asarray(zz, dtype=np.float64)) / max(config.alpha, 1e-300)
        else:
            vec = field_vector(model, zz)
        return vec if want_increase else -vec

    return traverse_direction(
        step_fn, classifier, backend, z, model.attribute, target_degree, config
    )


def traverse_fixed_direction(direction, classifier, backend, z, attribute, target_degree, config=FieldConfig()):
    direction = np.asarray(direction, dtype=np.float64)

    def step_fn(_zz, _cls, want_increase):
        return direction if want_increase else -direction

    return traverse_direction(step_fn, classifier, backend, z, attribute, target_degree, config)


def traverse_multiboundary(normals, classifier, backend, z, attribute, target_degree, config=FieldConfig()):
    """Switch to the boundary normal of the current class pair each step."""
    normals = [np.asarray(n, dtype=np.float64) for n in normals]

    def step_fn(_zz, cls, want_increase):
        if want_increase:
            return normals[min(cls, len(normals) - 1)]
        return -normals[max(cls - 1, 0)]

    return traverse_direction(step_fn, classifier, backend, z, attribute, target_degree, config)


# -- SVM baselines ---------------------------------------------------------------------


def _classified_latents(backend, classifier, n_samples, rng):
    z = backend.sample_latents(n_samples, rng)
    if isinstance(classifier, PredictorModel):
        from .predictor import predict_logits_batch

        cls = predict_logits_batch(classifier, backend.generate_batch(z)).argmax(axis=2)
    else:
        cls = np.stack(
            [
                np.argmax(attribute_logits(classifier, img), axis=1)
                for img in backend.generate_batch(z)
            ]
        )
    return z, cls


def linear_baseline_direction(backend, classifier, attribute, n_samples=2000, seed=0) -> np.ndarray:
    """Unit normal of a binary linear separator between low {0,1,2} and high
    {3,4,5} degrees, as judged by the classifier; kept fixed during editing."""
    from sklearn import svm

    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    rng = np.random.default_rng(seed)
    z, cls = _classified_latents(backend, classifier, n_samples, rng)
    y = (cls[:, attribute] >= 3).astype(int)
    if len(np.unique(y)) < 2:
        raise FieldError("degenerate sample set: only one side of the boundary present")
    clf = svm.LinearSVC(C=1.0, random_state=0, max_iter=20000)
    clf.fit(z, y)
    normal = clf.coef_[0].astype(np.float64)
    return normal / np.linalg.norm(normal)


def multiboundary_baseline(backend, classifier, attribute, n_samples=2000, seed=0) -> list:
    """One unit normal per neighbouring class pair (0|1 .. 4|5)."""
    from sklearn import svm

    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    rng = np.random.default_rng(seed)
    per_class = [[] for _ in range(NUM_DEGREES)]
    floor = max(60, n_samples // 12)
    for _ in range(100):
        z, cls = _classified_latents(backend, classifier, n_samples, rng)
        for c in range(NUM_DEGREES):
            per_class[c].extend(z[cls[:, attribute] == c])
        if min(len(p) for p in per_class) >= floor:
            break
    normals = []
    for c in range(NUM_DEGREES - 1):
        lo, hi = np.array(per_class[c]), np.array(per_class[c + 1])
        if len(lo) == 0 or len(hi) == 0:
            raise FieldError(f"degenerate sample set for boundary {c}|{c + 1}")
        x = np.concatenate([lo, hi])
        y = np.concatenate([np.zeros(len(lo), int), np.ones(len(hi), int)])
        clf = svm.LinearSVC(C=1.0, random_state=0, max_iter=20000)
        clf.fit(x, y)
        normal = clf.coef_[0].astype(np.float64)
        normals.append(normal / np.linalg.norm(normal))
    return normals


# -- persistence ---------------------------------------------------------------------


def save_field(model: SemanticFieldModel, path) -> None:
    blob = {
        "format": "talkedit-field-v1",
        "meta": model.meta,
        "attribute": model.attribute,
        "seed": model.seed,
        "d": model.net.body[0].in_features,
        "state": model.net.state_dict(),
    }
    torch.save(blob, path)


def load_field(path) -> SemanticFieldModel:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != "talkedit-field-v1":
        raise ValueError(f"not a field checkpoint: {path}")
    net = FieldNet(blob["d"]).double()
    net.load_state_dict(blob["state"])
    net.eval()
    net.requires_grad_(False)
    return SemanticFieldModel(
        attribute=blob["attribute"], net=net, seed=blob["seed"], meta=blob["meta"]
    )


def trajectory_to_jsonl(record: TrajectoryRecord) -> str:
    lines = [
        json.dumps(
            {
                "type": "header",
                "attribute": record.attribute,
                "start_latent": record.start_latent.tolist(),
                "end_latent": record.end_latent.tolist(),
                "start_class": record.start_class,
                "target_class": record.target_class,
                "outcome": record.outcome,
                "n_steps": len(record.steps),
            }
        )
    ]
    for i, s in enumerate(record.steps):
        lines.append(
            json.dumps(
                {
                    "type": "step",
                    "index": i,
                    "latent": s.latent.tolist(),
                    "field_vector": s.field_vector.tolist(),
                    "softmax": s.softmax.tolist(),
                    "class_before": s.class_before,
                    "class_after": s.class_after,
                }
            )
        )
    return "\n".join(lines) + "\n"


def trajectory_from_jsonl(text: str) -> TrajectoryRecord:
    lines = [json.loads(line) for line in text.strip().splitlines()]
    header = lines[0]
    if header.get("type") != "header":
        raise ValueError("trajectory stream must start with a header line")
    steps = [
        TrajectoryStep(
            latent=np.array(l["latent"]),
            field_vector=np.array(l["field_vector"]),
            softmax=np.array(l["softmax"]),
            class_before=l["class_before"],
            class_after=l["class_after"],
        )
        for l in lines[1:]
    ]
    return TrajectoryRecord(
        attribute=header["attribute"],
        start_latent=np.array(header["start_latent"]),
        end_latent=np.array(header["end_latent"]),
        start_class=header["start_class"],
        target_class=header["target_class"],
        steps=steps,
        outcome=header["outcome"],
    )
