"""Synthetic detector features under continually changing domains.

Instead of images, the simulator emits what a detector's backbone and RoI
head would produce: one image-level feature per scene and one feature per
object. Source features are class clusters around prototypes that share a
large positive common component (channel means of post-ReLU activations);
a domain is an affine corruption of those features.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .alignment import RoiPrediction
from .numerics import ShapeError, make_rng

MAX_OBJECTS = 32


@dataclass
class SourceModel:
    prototypes: np.ndarray  # (C, d), common offset included
    offset: np.ndarray      # (d,) component shared by all prototypes
    class_var: float
    head_temperature: float
    bg_bias: float
    class_probs: np.ndarray  # (C,) object class frequencies of the world

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


def class_frequencies(n_classes: int, imbalance: float = 1.0) -> np.ndarray:
    """Geometric class frequencies whose most/least frequent ratio is ``imbalance``."""
    if imbalance < 1.0:
        raise ValueError("imbalance must be >= 1")
    if n_classes == 1:
        return np.ones(1)
    w = imbalance ** (-np.arange(n_classes) / (n_classes - 1))
    return w / w.sum()


def _fg_logits(F: np.ndarray, source: SourceModel) -> np.ndarray:
    return F @ source.prototypes.T / source.head_temperature


def generate_source_model(rng: np.random.Generator, n_classes: int = 8, d: int = 64,
                          separation: float = 6.0, class_var: float = 1.0,
                          offset_level: float = 0.0, imbalance: float = 1.0,
                          head_temperature: float = 1.0, max_tries: int = 1000,
                          calibration_samples: int = 4000,
                          bg_quantile: float = 0.01) -> SourceModel:
    """Draw class prototypes at least ``separation`` standard deviations apart.

    Class-specific parts of the prototypes are orthogonal to the common
    offset and share one norm, so every class has the same prototype norm
    and the dot-product head has no built-in class preference. ``bg_bias``
    is then set so that ``1 - bg_quantile`` of clean objects score below
    the background threshold.
    """
    if n_classes < 2 or d < 2:
        raise ValueError("need at least 2 classes and 2 dimensions")
    sigma = float(np.sqrt(class_var))
    if not sigma > 0:
        raise ValueError("class_var must be positive")
    offset = offset_level * rng.uniform(0.5, 1.5, size=d) if offset_level > 0 else np.zeros(d)
    unit_off = offset / np.linalg.norm(offset) if offset_level > 0 else None
    radius = 1.1 * separation * sigma / np.sqrt(2.0)
    for _ in range(max_tries):
        c = rng.standard_normal((n_classes, d))
        if unit_off is not None:
            c -= np.outer(c @ unit_off, unit_off)
        c *= radius / np.linalg.norm(c, axis=1, keepdims=True)
        gaps = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
        if gaps[np.triu_indices(n_classes, 1)].min() >= separation * sigma:
            break
    else:
        raise ValueError(f"could not place {n_classes} prototypes {separation} sigma apart "
                         f"in {d} dimensions after {max_tries} tries")
    source = SourceModel(prototypes=offset + c, offset=offset, class_var=class_var,
                         head_temperature=head_temperature, bg_bias=0.0,
                         class_probs=class_frequencies(n_classes, imbalance))
    labels = rng.integers(0, n_classes, size=calibration_samples)
    clean = source.prototypes[labels] + sigma * rng.standard_normal((calibration_samples, d))
    # p_bg < 0.5  <=>  bg_bias < logsumexp(foreground logits)
    source.bg_bias = float(np.quantile(logsumexp(_fg_logits(clean, source), axis=1), bg_quantile))
    return source


def head_probs(F: np.ndarray, source: SourceModel) -> np.ndarray:
    """Softmax over the C foreground logits and the background logit, rows of ``F``."""
    F = np.asarray(F, dtype=np.float64)
    logits = np.empty((F.shape[0], source.n_classes + 1))
    logits[:, :-1] = _fg_logits(F, source)
    logits[:, -1] = source.bg_bias
    return softmax(logits, axis=1)


def head_predict(feature, source: SourceModel) -> RoiPrediction:
    f = np.asarray(feature, dtype=np.float64)
    if f.shape != (source.dim,):
        raise ShapeError(f"feature must have length {source.dim}")
    return RoiPrediction(feature=f, probs=head_probs(f[None, :], source)[0])


def evaluate_accuracy(probs: np.ndarray, true_classes: np.ndarray, bg_threshold: float = 0.5) -> float:
    """Fraction of objects kept as foreground and given their true class."""
    probs = np.asarray(probs)
    true_classes = np.asarray(true_classes)
    if len(true_classes) == 0:
        return float("nan")
    hit = (probs[:, -1] < bg_threshold) & (np.argmax(probs[:, :-1], axis=1) == true_classes)
    return float(hit.mean())


# ---------------------------------------------------------------- domains

@dataclass
class DomainTransform:
    shift: np.ndarray
    scale: float = 1.0
    rotation: np.ndarray | None = None  # None is the identity
    noise_std: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.rotation is not None:
            d = self.shift.shape[0]
            R = self.rotation
            if R.shape != (d, d) or not np.allclose(R.T @ R, np.eye(d), atol=1e-9):
                raise ValueError("rotation must be an orthogonal d x d matrix")

    @classmethod
    def identity(cls, d: int) -> "DomainTransform":
        return cls(shift=np.zeros(d))

    @property
    def rotation_matrix(self) -> np.ndarray:
        d = self.shift.shape[0]
        return np.eye(d) if self.rotation is None else self.rotation

    def apply(self, F: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        out = F if self.rotation is None else F @ self.rotation.T
        out = self.scale * out + self.shift
        if self.noise_std > 0:
            out = out + self.noise_std * rng.standard_normal(F.shape)
        return out


def plane_rotation(rng: np.random.Generator, d: int, angle: float, n_planes: int = 1) -> np.ndarray:
    """Rotation by ``angle`` radians inside ``n_planes`` random orthogonal 2-D planes."""
    if 2 * n_planes > d:
        raise ValueError("too many planes for the dimension")
    basis, _ = np.linalg.qr(rng.standard_normal((d, 2 * n_planes)))
    R = np.eye(d)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(n_planes):
        u, v = basis[:, 2 * i], basis[:, 2 * i + 1]
        R += (c - 1.0) * (np.outer(u, u) + np.outer(v, v)) + s * (np.outer(v, u) - np.outer(u, v))
    return R


@dataclass
class DomainSchedule:
    mode: str  # "discrete" | "continuous"
    segments: list[tuple[DomainTransform, int]]
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("discrete", "continuous"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if not self.segments:
            raise ValueError("schedule needs at least one segment")
        if any(n <= 0 for _, n in self.segments):
            raise ValueError("segment durations must be positive")
        if not self.names:
            self.names = [f"seg{i}" for i in range(len(self.segments))]
        self._starts = np.cumsum([0] + [n for _, n in self.segments])

    @property
    def total_steps(self) -> int:
        return int(self._starts[-1])

    @property
    def boundaries(self) -> list[int]:
        return [int(s) for s in self._starts[:-1]]

    def segment_of(self, t: int) -> int:
        return min(int(np.searchsorted(self._starts, t, side="right")) - 1, len(self.segments) - 1)


def transform_at(schedule: DomainSchedule, t: int) -> DomainTransform:
    if t < 0:
        raise ValueError("t must be nonnegative")
    i = schedule.segment_of(t)
    current, duration = schedule.segments[i]
    if schedule.mode == "discrete" or i == len(schedule.segments) - 1 or t >= schedule.total_steps:
        return current
    nxt = schedule.segments[i + 1][0]
    u = (t - schedule.boundaries[i]) / duration
    return DomainTransform(shift=(1 - u) * current.shift + u * nxt.shift,
                           scale=(1 - u) * current.scale + u * nxt.scale,
                           rotation=current.rotation,
                           noise_std=(1 - u) * current.noise_std + u * nxt.noise_std)


# ---------------------------------------------------------------- scenes

@dataclass
class Scene:
    image_feature: np.ndarray
    objects: list[tuple[np.ndarray, int]]


@dataclass
class SceneBatch:
    """Several scenes stored as flat arrays, the form the adaptation loop consumes."""

    image_features: np.ndarray   # (B, d)
    object_features: np.ndarray  # (n, d)
    object_classes: np.ndarray   # (n,)
    scene_index: np.ndarray      # (n,) owning scene of each object

    def scenes(self) -> list[Scene]:
        return [Scene(self.image_features[b],
                      [(f, int(c)) for f, c in zip(self.object_features[self.scene_index == b],
                                                   self.object_classes[self.scene_index == b])])
                for b in range(len(self.image_features))]


def sample_batch(source: SourceModel, transform: DomainTransform, rng: np.random.Generator,
                 batch_size: int, n_obj_range: tuple[int, int] = (2, 8),
                 class_probs: np.ndarray | None = None) -> SceneBatch:
    lo, hi = n_obj_range
    if not 1 <= lo <= hi <= MAX_OBJECTS:
        raise ValueError(f"n_obj_range must lie within [1, {MAX_OBJECTS}], got {n_obj_range}")
    probs = source.class_probs if class_probs is None else np.asarray(class_probs, dtype=np.float64)
    counts = rng.integers(lo, hi + 1, size=batch_size)
    scene_index = np.repeat(np.arange(batch_size), counts)
    classes = rng.choice(source.n_classes, size=scene_index.size, p=probs)
    clean = source.prototypes[classes] + np.sqrt(source.class_var) * rng.standard_normal(
        (scene_index.size, source.dim))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    clean_image = np.add.reduceat(clean, starts, axis=0) / counts[:, None]
    return SceneBatch(image_features=transform.apply(clean_image, rng),
                      object_features=transform.apply(clean, rng),
                      object_classes=classes, scene_index=scene_index)


def sample_scene(source: SourceModel, transform: DomainTransform, rng: np.random.Generator,
                 n_obj_range: tuple[int, int] = (2, 8), class_probs: np.ndarray | None = None) -> Scene:
    return sample_batch(source, transform, rng, 1, n_obj_range, class_probs).scenes()[0]


def scene_stream(seed: int, source: SourceModel, schedule: DomainSchedule, batch_size: int,
                 n_obj_range: tuple[int, int] = (2, 8), class_probs: np.ndarray | None = None,
                 steps: int | None = None):
    """Yield ``(t, batch)``; each step draws from its own keyed stream, so step t is
    reproducible without replaying steps 0..t-1."""
    total = schedule.total_steps if steps is None else steps
    for t in range(total):
        rng = make_rng(seed, "scenes", t)
        yield t, sample_batch(source, transform_at(schedule, t), rng, batch_size,
                              n_obj_range, class_probs)
