"""Synthetic surface corpora standing in for scanned shape datasets.

Every family is sampled (approximately) uniformly by area: parameter-space
draws are thinned by rejection against the local area element.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from crcir.errors import InvalidInputError
from crcir.geometry import normalize_unit_cube

FAMILIES = ("sphere", "torus", "superquadric", "quadric_patch")


def _spow(x, e):
    return np.sign(x) * np.abs(x) ** e


def _superquadric(u, v, a, b, c, e1, e2):
    cu, su, cv, sv = np.cos(u), np.sin(u), np.cos(v), np.sin(v)
    return np.stack(
        [a * _spow(cv, e1) * _spow(cu, e2), b * _spow(cv, e1) * _spow(su, e2), c * _spow(sv, e1)], axis=-1
    )


def _area_element(fn, u, v, h=1e-5):
    du = (fn(u + h, v) - fn(u - h, v)) / (2 * h)
    dv = (fn(u, v + h) - fn(u, v - h)) / (2 * h)
    return np.linalg.norm(np.cross(du, dv), axis=-1)


@dataclass(frozen=True)
class SurfaceSampler:
    family: str
    params: dict = field(default_factory=dict)
    n_points: int = 8192

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidInputError(f"unknown surface family {self.family!r}; choose from {FAMILIES}")
        if self.n_points < 1:
            raise InvalidInputError("sample count must be positive")

    def _param(self, key, default):
        return float(self.params.get(key, default))

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        """Points on the surface in its own frame (no normalisation)."""
        n = self.n_points if n is None else int(n)
        fam = self.family
        if fam == "sphere":
            v = rng.normal(size=(n, 3))
            return self._param("radius", 1.0) * v / np.linalg.norm(v, axis=1, keepdims=True)
        if fam == "torus":
            R, r = self._param("R", 1.0), self._param("r", 0.3)
            out = []
            while sum(len(o) for o in out) < n:
                th, ph = rng.uniform(0, 2 * np.pi, (2, 2 * n))
                keep = rng.uniform(0, R + r, 2 * n) < R + r * np.cos(ph)
                th, ph = th[keep], ph[keep]
                ring = R + r * np.cos(ph)
                out.append(np.stack([ring * np.cos(th), ring * np.sin(th), r * np.sin(ph)], axis=1))
            return np.concatenate(out)[:n]
        if fam == "superquadric":
            a, b, c = (self._param(k, 1.0) for k in "abc")
            e1, e2 = self._param("e1", 1.0), self._param("e2", 1.0)

            def fn(u, v):
                return _superquadric(u, v, a, b, c, e1, e2)

            return self._rejection(rng, n, fn, (-np.pi, np.pi), (-np.pi / 2, np.pi / 2))
        # quadric patch z = a x^2 + b y^2 + c x y over the unit square
        a, b, c = (self._param(k, 0.0) for k in "abc")

        def fn(x, y):
            return np.stack([x, y, a * x * x + b * y * y + c * x * y], axis=-1)

        return self._rejection(rng, n, fn, (-1.0, 1.0), (-1.0, 1.0))

    @staticmethod
    def _rejection(rng, n, fn, urange, vrange):
        out, have = [], 0
        while have < n:
            u = rng.uniform(*urange, 4 * n)
            v = rng.uniform(*vrange, 4 * n)
            w = _area_element(fn, u, v)
            cap = np.quantile(w, 0.995)
            keep = rng.uniform(0, cap, len(w)) < w
            pts = fn(u[keep], v[keep])
            out.append(pts)
            have += len(pts)
        return np.concatenate(out)[:n]

    def implicit_residual(self, points) -> np.ndarray:
        """Value of the family's implicit equation at ``points`` (zero on the surface)."""
        p = np.asarray(points, dtype=np.float64)
        x, y, z = p[:, 0], p[:, 1], p[:, 2]
        if self.family == "sphere":
            return np.linalg.norm(p, axis=1) - self._param("radius", 1.0)
        if self.family == "torus":
            R, r = self._param("R", 1.0), self._param("r", 0.3)
            return (np.hypot(x, y) - R) ** 2 + z * z - r * r
        if self.family == "superquadric":
            a, b, c = (self._param(k, 1.0) for k in "abc")
            e1, e2 = self._param("e1", 1.0), self._param("e2", 1.0)
            xy = (np.abs(x / a) ** (2 / e2) + np.abs(y / b) ** (2 / e2)) ** (e2 / e1)
            return xy + np.abs(z / c) ** (2 / e1) - 1.0
        a, b, c = (self._param(k, 0.0) for k in "abc")
        return z - (a * x * x + b * y * y + c * x * y)


def random_sampler(rng: np.random.Generator, n_points: int, family: str | None = None) -> SurfaceSampler:
    fam = family or FAMILIES[rng.integers(len(FAMILIES))]
    if fam == "sphere":
        params = {"radius": rng.uniform(0.5, 2.0)}
    elif fam == "torus":
        params = {"R": 1.0, "r": rng.uniform(0.2, 0.5)}
    elif fam == "superquadric":
        params = {"a": rng.uniform(0.5, 1.5), "b": rng.uniform(0.5, 1.5), "c": rng.uniform(0.5, 1.5),
                  "e1": rng.uniform(0.4, 1.6), "e2": rng.uniform(0.4, 1.6)}
    else:
        params = {"a": rng.uniform(-1, 1), "b": rng.uniform(-1, 1), "c": rng.uniform(-0.5, 0.5)}
    return SurfaceSampler(fam, params, n_points)


@dataclass(frozen=True)
class Shape:
    """A normalised cloud plus the surface it came from."""

    points: np.ndarray
    sampler: SurfaceSampler
    rotation: np.ndarray


def make_shape(sampler: SurfaceSampler, rng: np.random.Generator, rotate: bool = True, n: int | None = None) -> Shape:
    pts = sampler.sample(rng, n)
    rot = Rotation.random(random_state=rng).as_matrix() if rotate else np.eye(3)
    normed, _ = normalize_unit_cube(pts @ rot.T)
    return Shape(normed, sampler, rot)


def synth_dataset(samplers, seed: int = 0, rotate: bool = True) -> list[Shape]:
    rng = np.random.default_rng(seed)
    return [make_shape(s, rng, rotate) for s in samplers]


def random_corpus(count: int, n_points: int = 8192, seed: int = 0, families=FAMILIES) -> list[Shape]:
    rng = np.random.default_rng(seed)
    samplers = [random_sampler(rng, n_points, families[i % len(families)]) for i in range(count)]
    return synth_dataset(samplers, seed=seed + 1)
