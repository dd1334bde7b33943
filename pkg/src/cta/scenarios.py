"""Scenario presets: named sequences of corruption specs turned into schedules.

A segment spec is a plain mapping (the same shape the config file uses)::

    {name: fog, steps: 600, bg: 3.0, drift: 12.0, toward_class: null,
     class_shift: 0.0, scale: 1.0, noise: 0.3, rotate: 0.0, planes: 0}

``bg``      shift against the common feature component, in standard deviations
            of the foreground score; positive values push objects toward background.
``drift``   norm of a shift along a random direction (changes the feature
            statistics strongly but barely touches the head).
``toward_class`` / ``class_shift``  shift along one class's prototype direction.
``scale``   multiplicative contrast change; ``noise`` additive per-dimension noise std.
``rotate``  angle in radians inside ``planes`` random 2-D planes.
"""
from __future__ import annotations

import copy

import numpy as np

from .numerics import make_rng
from .simulator import DomainSchedule, DomainTransform, SourceModel, plane_rotation

SEGMENT_KEYS = {"name", "steps", "bg", "drift", "toward_class", "class_shift",
                "scale", "noise", "rotate", "planes"}

CLEAN = {"name": "clean", "bg": 0.0, "drift": 0.0}

PRESETS: dict[str, dict] = {
    "shift-discrete-like": {
        "mode": "discrete",
        "segment_steps": 2000,
        "segments": [
            dict(CLEAN, name="clear"),
            {"name": "cloudy", "bg": 2.3, "drift": 8.0, "noise": 0.2},
            {"name": "overcast", "bg": 2.2, "drift": 10.0, "noise": 0.3},
            {"name": "foggy", "bg": 1.6, "drift": 12.0, "scale": 0.998, "noise": 0.3},
            {"name": "rainy", "bg": 2.1, "drift": 10.0, "noise": 0.3},
            {"name": "night", "bg": 1.7, "drift": 16.0, "noise": 0.3},
            dict(CLEAN, name="clear"),
        ],
    },
    "coco-c-like": {
        "mode": "discrete",
        "segment_steps": 1000,
        "segments": [
            {"name": "gaussian-noise", "bg": 2.1, "drift": 10.0, "noise": 0.5},
            {"name": "shot-noise", "bg": 2.3, "drift": 10.0, "noise": 0.5},
            {"name": "impulse-noise", "bg": 2.0, "drift": 11.0, "noise": 0.5},
            {"name": "defocus-blur", "bg": 1.6, "drift": 12.0, "scale": 0.998},
            {"name": "glass-blur", "bg": 2.2, "drift": 12.0, "noise": 0.3},
            {"name": "motion-blur", "bg": 1.9, "drift": 13.0, "toward_class": 1, "class_shift": 2.0},
            {"name": "zoom-blur", "bg": 2.4, "drift": 14.0, "noise": 0.2},
            {"name": "snow", "bg": 2.2, "drift": 12.0, "noise": 0.2},
            {"name": "frost", "bg": 2.0, "drift": 10.0, "toward_class": 2, "class_shift": 2.0},
            {"name": "fog", "bg": 1.4, "drift": 8.0, "scale": 0.998},
            {"name": "brightness", "bg": 2.3, "drift": 8.0, "toward_class": 3, "class_shift": 1.5},
            {"name": "contrast", "bg": 0.9, "drift": 12.0, "scale": 0.998},
            {"name": "elastic", "bg": 2.2, "drift": 10.0, "rotate": 0.3, "planes": 8},
            {"name": "pixelate", "bg": 3.3, "drift": 14.0, "noise": 0.2},
            {"name": "jpeg", "bg": 2.2, "drift": 11.0, "noise": 0.3},
            dict(CLEAN, name="original"),
        ],
    },
    "shift-continuous-like": {
        "mode": "continuous",
        "segment_steps": 2000,
        "segments": [
            dict(CLEAN, name="clear"),
            {"name": "foggy", "bg": 2.2, "drift": 12.0, "noise": 0.3},
            dict(CLEAN, name="clear", steps=1),
        ],
    },
}


def preset(name: str) -> dict:
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown scenario preset {name!r}; choose from {sorted(PRESETS)}") from None


def _validate_segment(spec: dict):
    unknown = set(spec) - SEGMENT_KEYS
    if unknown:
        raise ValueError(f"unknown segment keys: {sorted(unknown)}")


def build_transform(spec: dict, source: SourceModel, rng: np.random.Generator) -> DomainTransform:
    _validate_segment(spec)
    d = source.dim
    shift = np.zeros(d)
    bg = float(spec.get("bg", 0.0))
    if bg and np.any(source.offset):
        unit = source.offset / np.linalg.norm(source.offset)
        # one unit along the offset moves a foreground score by ~|prototype|, i.e. ~1 std
        scale_to_std = np.linalg.norm(source.prototypes, axis=1).mean() * np.sqrt(source.class_var) \
            / np.linalg.norm(source.offset)
        shift -= bg * scale_to_std * unit
    drift = float(spec.get("drift", 0.0))
    direction = rng.standard_normal(d)
    if drift:
        shift += drift * direction / np.linalg.norm(direction)
    k = spec.get("toward_class")
    if k is not None and spec.get("class_shift", 0.0):
        c = source.prototypes[int(k)] - source.offset
        shift += float(spec["class_shift"]) * c / np.linalg.norm(c)
    rotation = None
    if spec.get("rotate", 0.0) and spec.get("planes", 0):
        rotation = plane_rotation(rng, d, float(spec["rotate"]), int(spec["planes"]))
    return DomainTransform(shift=shift, scale=float(spec.get("scale", 1.0)), rotation=rotation,
                           noise_std=float(spec.get("noise", 0.0)))


def build_schedule(scenario: dict, source: SourceModel, seed: int) -> DomainSchedule:
    """Turn a preset-shaped mapping into a schedule; each segment has its own keyed rng."""
    mode = scenario.get("mode", "discrete")
    default_steps = int(scenario.get("segment_steps", 500))
    segments, names = [], []
    for i, spec in enumerate(scenario["segments"]):
        rng = make_rng(seed, "domain", i)
        segments.append((build_transform(spec, source, rng), int(spec.get("steps", default_steps))))
        names.append(str(spec.get("name", f"seg{i}")))
    return DomainSchedule(mode=mode, segments=segments, names=names)
