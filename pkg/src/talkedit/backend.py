"""Analytic toy image world used as the editing backend.

The world maps a d-dimensional latent code to a 32x32 grayscale image made of
five horizontal bars, one per attribute. Bar i has a filled width proportional
to an analytic attribute score S_i(z) in [0, 5], and the rows between bars
carry an identity texture driven by a low-rank projection of z. Every score
field is smooth and non-axis-aligned, so its exact gradient is available as a
test oracle, and the whole render path is differentiable with respect to z.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

ATTRIBUTE_NAMES = ("bangs", "eyeglasses", "beard", "smiling", "young")
NUM_DEGREES = 6
MAX_DEGREE = NUM_DEGREES - 1

# Score-field construction constants. The hidden expansion (m tanh units) and
# the per-attribute rescale target were chosen so that degree classes of
# standard-normal latents land within roughly +-15% of uniform occupancy.
_HIDDEN_UNITS = 64
_HIDDEN_GAIN = 1.4
_SCORE_SIGMA = 0.84
_CALIBRATION_SEED = 20210901
_CALIBRATION_SAMPLES = 4096

# The identity texture responds to every latent direction (as a face embedder
# would), but the designated nuisance subspace dominates by 1/_TEXTURE_LEAK.
# The texture lift is built through the embedder's pseudo-inverse so that the
# embedding-space cost of a latent step is isotropic within the nuisance null
# space; without that, random-map distortion skews which step is "cheapest"
# and the minimal-identity-cost editing direction stops tracking the score
# gradient. _TEXTURE_STD keeps the sigmoid near its linear range so the cost
# metric stays position-independent.
_TEXTURE_LEAK = 0.25
_TEXTURE_STD = 0.8
_EMBED_GAIN = 20.0

SCHEMA_VERSION = 1


class BackendError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered attribute identifiers plus the shared degree count."""

    names: tuple = ATTRIBUTE_NAMES
    degrees_per_attribute: int = NUM_DEGREES

    @property
    def k(self):
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise BackendError(f"unknown attribute {name!r}") from None


@dataclass(frozen=True)
class ToyWorldConfig:
    d: int = 16
    seed: int = 7
    height: int = 32
    width: int = 32
    nuisance_dim: int = 2
    kind: str = "toy"

    def __post_init__(self):
        if self.height < 30 or self.width < 8:
            raise BackendError("image too small for the five-band layout")
        if not 1 <= self.nuisance_dim < self.d:
            raise BackendError("nuisance_dim must be in [1, d)")

    def to_json(self) -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "seed": self.seed,
            "d": self.d,
            "height": self.height,
            "width": self.width,
            "nuisance_dim": self.nuisance_dim,
            "band_rows": [list(b) for b in band_layout(self.height)[0]],
        }
        return json.dumps(doc, indent=2)

    @staticmethod
    def from_json(text: str) -> "ToyWorldConfig":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise BackendError(f"unsupported backend schema {doc.get('schema_version')!r}")
        return ToyWorldConfig(
            d=doc["d"],
            seed=doc["seed"],
            height=doc["height"],
            width=doc["width"],
            nuisance_dim=doc.get("nuisance_dim", 4),
            kind=doc.get("kind", "toy"),
        )


def band_layout(height: int):
    """Row indices of the five bar bands and of the background rows."""
    bands = [list(range(6 * i + 1, 6 * i + 5)) for i in range(len(ATTRIBUTE_NAMES))]
    covered = {r for band in bands for r in band}
    background = [r for r in range(height) if r not in covered]
    return bands, background


def degree_of_score(score) -> int:
    """Equal-width binning of a score in [0, 5] into degrees {0..5}."""
    return int(min(MAX_DEGREE, np.floor(np.asarray(score) * NUM_DEGREES / 5.0)))


class ToyWorld:
    """Deterministic analytic backend; immutable after construction."""

    def __init__(self, config: ToyWorldConfig = ToyWorldConfig()):
        self.config = config
        self.schema = AttributeSchema()
        self.d = config.d
        self.height = config.height
        self.width = config.width
        self.band_rows, self.background_rows = band_layout(config.height)
        self.ramp_tau = 0.05 * config.width
        self.embed_dim = 64

        rng = np.random.default_rng(config.seed)
        k, d, m = self.schema.k, config.d, _HIDDEN_UNITS
        self.score_A = np.empty((k, m, d))
        self.score_w = np.empty((k, m))
        calib = np.random.default_rng(_CALIBRATION_SEED).normal(size=(_CALIBRATION_SAMPLES, d))
        for i in range(k):
            A = rng.normal(0.0, _HIDDEN_GAIN / np.sqrt(d), size=(m, d))
            w = rng.normal(size=m)
            u = np.tanh(calib @ A.T) @ w
            self.score_A[i] = A
            self.score_w[i] = w * (_SCORE_SIGMA / u.std())

        # Identity texture: a small nuisance subspace dominates, with a weak
        # full-rank leak so that no latent motion is entirely free. Moves
        # inside the nuisance null space change identity only through the
        # leak, which is what keeps minimal-identity-cost edits short.
        n_bg = len(self.background_rows) * config.width
        dn = config.nuisance_dim
        basis = np.linalg.qr(rng.normal(size=(d, d)))[0]
        self.nuisance_proj = basis[:, :dn].T  # orthonormal rows, the strong directions
        self.nuisance_complement = basis[:, dn:].T

        E = rng.normal(0.0, 1.0 / np.sqrt(n_bg), size=(self.embed_dim, n_bg))
        E_pinv = E.T @ np.linalg.inv(E @ E.T)
        frame = np.linalg.qr(rng.normal(size=(self.embed_dim, d)))[0]  # orthonormal columns
        latent_to_embed = frame[:, :dn] @ self.nuisance_proj + _TEXTURE_LEAK * frame[:, dn:] @ self.nuisance_complement
        raw_map = E_pinv @ latent_to_embed
        calib_std = (calib @ raw_map.T).std()
        self.texture_map = (_TEXTURE_STD / calib_std) * raw_map
        self.embed_matrix = _EMBED_GAIN * (calib_std / _TEXTURE_STD) * E

        self._tensor_cache: dict = {}

    # -- parameter access -------------------------------------------------

    def _tensors(self, dtype, names=("score_A", "score_w", "texture_map", "embed_matrix")):
        key = dtype
        if key not in self._tensor_cache:
            self._tensor_cache[key] = {
                n: torch.as_tensor(getattr(self, n), dtype=dtype) for n in names
            }
        return self._tensor_cache[key]

    def _check_attr(self, attribute: int):
        if not 0 <= int(attribute) < self.schema.k:
            raise BackendError(f"attribute index {attribute} out of range")
        return int(attribute)

    def _as_batch(self, z) -> np.ndarray:
        arr = np.asarray(z, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.shape[-1] != self.d:
            raise BackendError(f"latent length {arr.shape[-1]} != d={self.d}")
        if not np.all(np.isfinite(arr)):
            raise BackendError("latent has non-finite entries")
        return arr

    # -- scores ------------------------------------------------------------

    def score_batch_t(self, z: torch.Tensor) -> torch.Tensor:
        """Attribute scores for a (B, d) tensor; returns (B, k) in [0, 5]."""
        p = self._tensors(z.dtype)
        hidden = torch.tanh(torch.einsum("kmd,bd->bkm", p["score_A"], z))
        u = torch.einsum("bkm,km->bk", hidden, p["score_w"])
        return 2.5 * (1.0 + torch.tanh(u))

    def toy_score(self, z, attribute: int) -> float:
        attribute = self._check_attr(attribute)
        zt = torch.as_tensor(self._as_batch(z))
        return float(self.score_batch_t(zt)[0, attribute])

    def scores(self, z) -> np.ndarray:
        zt = torch.as_tensor(self._as_batch(z))
        return self.score_batch_t(zt)[0].numpy()

    def scores_batch(self, z) -> np.ndarray:
        zt = torch.as_tensor(self._as_batch(z))
        return self.score_batch_t(zt).numpy()

    def toy_score_gradient(self, z, attribute: int) -> np.ndarray:
        """Closed-form gradient of toy_score; a test oracle, not used in training."""
        attribute = self._check_attr(attribute)
        zv = self._as_batch(z)[0]
        A = self.score_A[attribute]
        w = self.score_w[attribute]
        t = np.tanh(A @ zv)
        u = w @ t
        return 2.5 * (1.0 - np.tanh(u) ** 2) * (A.T @ (w * (1.0 - t**2)))

    def degree(self, z, attribute: int) -> int:
        return degree_of_score(self.toy_score(z, attribute))

    def degrees(self, z) -> np.ndarray:
        s = self.scores(z)
        return np.minimum(MAX_DEGREE, np.floor(s * NUM_DEGREES / 5.0)).astype(int)

    def degrees_batch(self, z) -> np.ndarray:
        s = self.scores_batch(z)
        return np.minimum(MAX_DEGREE, np.floor(s * NUM_DEGREES / 5.0)).astype(int)

    # -- rendering ----------------------------------------------------------

    def generate_batch_t(self, z: torch.Tensor) -> torch.Tensor:
        """Render a (B, d) latent batch to (B, H, W) images in [0, 1]."""
        p = self._tensors(z.dtype)
        B = z.shape[0]
        scores = self.score_batch_t(z)  # (B, k)
        cols = torch.arange(self.width, dtype=z.dtype) + 0.5
        fill_width = scores * (self.width / 5.0)  # (B, k)
        # (B, k, W) sigmoid ramp per bar
        fills = torch.sigmoid((fill_width[:, :, None] - cols[None, None, :]) / self.ramp_tau)

        texture = torch.sigmoid(z @ p["texture_map"].T)  # (B, n_bg)

        image = torch.zeros(B, self.height, self.width, dtype=z.dtype)
        image[:, self.background_rows, :] = texture.reshape(B, len(self.background_rows), self.width)
        for i, rows in enumerate(self.band_rows):
            image[:, rows, :] = fills[:, i, None, :].expand(B, len(rows), self.width)
        return image

    def generate(self, z) -> np.ndarray:
        zt = torch.as_tensor(self._as_batch(z))
        return self.generate_batch_t(zt)[0].numpy()

    def generate_batch(self, z) -> np.ndarray:
        zt = torch.as_tensor(self._as_batch(z))
        return self.generate_batch_t(zt).numpy()

    # -- identity embedding ---------------------------------------------------

    def _check_image(self, image) -> np.ndarray:
        arr = np.asarray(image, dtype=np.float64)
        if arr.shape != (self.height, self.width):
            raise BackendError(f"image shape {arr.shape} != {(self.height, self.width)}")
        return arr

    def identity_embed_batch_t(self, images: torch.Tensor) -> torch.Tensor:
        p = self._tensors(images.dtype)
        bg = images[:, self.background_rows, :].reshape(images.shape[0], -1)
        return bg @ p["embed_matrix"].T

    def identity_embed(self, image) -> np.ndarray:
        arr = self._check_image(image)
        t = torch.as_tensor(arr)[None]
        return self.identity_embed_batch_t(t)[0].numpy()

    # -- misc hooks -----------------------------------------------------------

    def mapping_hook(self, v):
        """Latent mapping used by the regularized step; identity in the toy world."""
        return v

    def sample_latents(self, n: int, rng) -> np.ndarray:
        """Standard-normal latent codes (the assumed sampling prior)."""
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        return rng.normal(size=(n, self.d))

    # -- renderer inversion (verification helper) ------------------------------

    def read_bar_scores(self, image) -> np.ndarray:
        """Recover the k attribute scores from a rendered image.

        Inverts the sigmoid ramp at the most informative column of each bar,
        so the recovered score matches the generating score to float precision.
        """
        arr = self._check_image(image)
        out = np.empty(self.schema.k)
        for i, rows in enumerate(self.band_rows):
            vals = np.clip(arr[rows[0]], 1e-9, 1.0 - 1e-9)
            j = int(np.argmin(np.abs(vals - 0.5)))
            w0 = (j + 0.5) + self.ramp_tau * np.log(vals[j] / (1.0 - vals[j]))
            out[i] = np.clip(w0 * 5.0 / self.width, 0.0, 5.0)
        return out


class LinearWorld(ToyWorld):
    """Toy world variant with planted linear score fields S(z) = clip(<w,z> + 2.5).

    Used to validate direction-recovery baselines: the true editing direction
    for every attribute is the fixed planted vector.
    """

    def __init__(self, config: ToyWorldConfig = ToyWorldConfig(kind="linear")):
        if config.kind != "linear":
            config = ToyWorldConfig(
                d=config.d, seed=config.seed, height=config.height,
                width=config.width, nuisance_dim=config.nuisance_dim, kind="linear",
            )
        super().__init__(config)
        rng = np.random.default_rng(config.seed + 104729)
        dirs = rng.normal(size=(self.schema.k, self.d))
        self.planted = 1.25 * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    def score_batch_t(self, z: torch.Tensor) -> torch.Tensor:
        w = torch.as_tensor(self.planted, dtype=z.dtype)
        return torch.clamp(z @ w.T + 2.5, 0.0, 5.0)

    def toy_score_gradient(self, z, attribute: int) -> np.ndarray:
        attribute = self._check_attr(attribute)
        zv = self._as_batch(z)[0]
        raw = self.planted[attribute] @ zv + 2.5
        if 0.0 < raw < 5.0:
            return self.planted[attribute].copy()
        return np.zeros(self.d)

    def planted_direction(self, attribute: int) -> np.ndarray:
        attribute = self._check_attr(attribute)
        w = self.planted[attribute]
        return w / np.linalg.norm(w)


def make_backend(config: ToyWorldConfig) -> ToyWorld:
    if config.kind == "toy":
        return ToyWorld(config)
    if config.kind == "linear":
        return LinearWorld(config)
    raise BackendError(f"unknown backend kind {config.kind!r}")


class OracleClassifier:
    """Noiseless degree classifier that reads bar widths off the image.

    Duck-types the trained predictor's logits interface, which makes dialog,
    service, and fuzz tests independent of predictor training.
    """

    logit_scale = 12.0

    def __init__(self, backend: ToyWorld):
        self.backend = backend

    def predict_logits(self, image) -> np.ndarray:
        scores = self.backend.read_bar_scores(image)
        k = self.backend.schema.k
        logits = np.zeros((k, NUM_DEGREES))
        for i in range(k):
            logits[i, degree_of_score(scores[i])] = self.logit_scale
        return logits


class OracleField:
    """Ground-truth editing field: follows the exact analytic gradient.

    Step length is normalized to raise the score by half a degree if the field
    were locally linear; the curved regions of the toy world overshoot a full
    degree step too easily. A verification stand-in for a trained field.
    """

    max_norm = 4.0
    score_step = 0.5 * 5.0 / NUM_DEGREES

    def __init__(self, backend: ToyWorld, attribute: int):
        self.backend = backend
        self.attribute = backend._check_attr(attribute)

    def field_vector(self, z) -> np.ndarray:
        g = self.backend.toy_score_gradient(z, self.attribute)
        sq = float(g @ g)
        if sq < 1e-12:
            return np.zeros_like(g)
        step = self.score_step / sq * g
        norm = np.linalg.norm(step)
        if norm > self.max_norm:
            step *= self.max_norm / norm
        return step
