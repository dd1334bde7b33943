"""Read and write the ``ctastats v1`` text container.

Layout::

    ctastats v1 d=<d> k=<classes>
    <name> <v_1> <v_2> ...        # one line per vector
    <name>[<i>] <v_1> ...         # matrices are written one row per line

Floats are written with ``repr`` so a save/load round trip is exact and a
rerun with the same inputs produces a byte-identical file.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .stats import GaussianStats

MAGIC = "ctastats"
VERSION = "v1"
_HEADER = re.compile(r"^ctastats v1 d=(\d+) k=(\d+)$")
_ROW = re.compile(r"^(.+)\[(\d+)\]$")


class FormatError(ValueError):
    pass


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


def write_container(path, d: int, k: int, entries: list[tuple[str, np.ndarray | float | int]]):
    lines = [f"{MAGIC} {VERSION} d={d} k={k}"]
    for name, value in entries:
        if " " in name or "[" in name:
            raise ValueError(f"invalid entry name {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 2:
            lines.extend(f"{name}[{i}] {_fmt(row)}" for i, row in enumerate(arr))
        else:
            lines.append(f"{name} {_fmt(arr)}")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write statistics file {path}: {exc}") from exc


def read_container(path) -> tuple[int, int, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read statistics file {path}: {exc}") from exc
    lines = text.splitlines()
    m = _HEADER.match(lines[0].strip()) if lines else None
    if m is None:
        raise FormatError(f"{path}: missing 'ctastats v1 d=<d> k=<k>' header")
    d, k = int(m.group(1)), int(m.group(2))
    rows: dict[str, dict[int, np.ndarray]] = {}
    out: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        name, *vals = line.split()
        try:
            vec = np.array([float(v) for v in vals])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        rm = _ROW.match(name)
        if rm:
            rows.setdefault(rm.group(1), {})[int(rm.group(2))] = vec
        else:
            out[name] = vec
    for name, byrow in rows.items():
        out[name] = np.stack([byrow[i] for i in range(len(byrow))])
    return d, k, out


@dataclass
class ReferenceStats:
    """Everything precomputed from clean source data before deployment."""

    image: GaussianStats
    classes: list[GaussianStats]
    dkl_in: float

    @property
    def dim(self) -> int:
        return self.image.dim

    def save(self, path):
        entries = [("image.mean", self.image.mean), ("image.var", self.image.var),
                   ("image.count", self.image.count)]
        for i, s in enumerate(self.classes):
            entries += [(f"class{i}.mean", s.mean), (f"class{i}.var", s.var),
                        (f"class{i}.count", s.count)]
        entries.append(("dkl_in", self.dkl_in))
        write_container(path, self.dim, len(self.classes), entries)

    @classmethod
    def load(cls, path) -> "ReferenceStats":
        d, k, e = read_container(path)

        def block(prefix):
            try:
                mean, var, count = e[f"{prefix}.mean"], e[f"{prefix}.var"], e[f"{prefix}.count"]
            except KeyError as exc:
                raise FormatError(f"{path}: missing entry {exc}") from None
            if mean.shape != (d,) or var.shape != (d,):
                raise FormatError(f"{path}: {prefix} vectors must have length {d}")
            return GaussianStats(mean=mean, var=var, count=int(count[0]))

        if "dkl_in" not in e:
            raise FormatError(f"{path}: missing entry 'dkl_in'")
        return cls(image=block("image"), classes=[block(f"class{i}") for i in range(k)],
                   dkl_in=float(e["dkl_in"][0]))
