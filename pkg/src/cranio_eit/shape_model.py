"""Principal-component model for star-shaped scalp crowns.

A crown is the radial graph S(x): x -> r(x) x over the closed upper unit
hemisphere.  Given a library of crown radius fields r_1..r_n, the model
consists of their mean plus the leading principal directions of the
centered fields in the Sobolev H1 sense: the retained basis spans the
subspace minimizing the total squared H1 distance of the centered library
to any subspace of the same dimension.  Radii are in meters throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import sph_harm_y

from .hemisphere import HemisphereGrid, build_grid, surface_mass, surface_stiffness

_H1_CACHE: dict[int, object] = {}


def h1_operator(grid: HemisphereGrid):
    """Sparse operator B with (a, b)_{H1} = a^T B b on the grid (mass + stiffness)."""
    op = _H1_CACHE.get(grid.level)
    if op is None or op.shape[0] != grid.n_vertices:
        op = (
            surface_mass(grid.vertices, grid.triangles)
            + surface_stiffness(grid.vertices, grid.triangles)
        ).tocsr()
        _H1_CACHE[grid.level] = op
    return op


@dataclass(frozen=True)
class LibraryConfig:
    """Synthetic crown library: ellipsoidal base plus smooth random modes."""

    n: int = 50
    grid_level: int = 5
    base_semi_axes: tuple[float, float, float] = (0.095, 0.075, 0.09)
    n_modes: int = 63
    decay: float = 2.0
    target_std: float = 0.005  # pointwise std of the perturbation, meters
    amplitude: float = 1.0  # overall multiplier; 0 gives n copies of the base


@dataclass(frozen=True)
class CrownLibrary:
    grid: HemisphereGrid
    radii: np.ndarray  # (n, nv) strictly positive
    config: LibraryConfig

    @property
    def n(self) -> int:
        return self.radii.shape[0]


@dataclass(frozen=True)
class ShapeModel:
    """Mean crown radius plus H1-orthonormal perturbation basis."""

    grid: HemisphereGrid
    mean: np.ndarray  # (nv,)
    basis: np.ndarray  # (n_keep, nv), H1-orthonormal
    eigenvalues: np.ndarray  # positive spectrum of the Gram matrix, descending
    n_library: int

    @property
    def n_basis(self) -> int:
        return self.basis.shape[0]

    def truncate(self, n_keep: int) -> "ShapeModel":
        if not 0 < n_keep <= self.n_basis:
            raise ValueError(f"cannot keep {n_keep} of {self.n_basis} basis fields")
        return ShapeModel(
            grid=self.grid,
            mean=self.mean,
            basis=self.basis[:n_keep],
            eigenvalues=self.eigenvalues,
            n_library=self.n_library,
        )

    def radius_field(self, alpha: np.ndarray) -> np.ndarray:
        """Nodal crown radius for coefficients alpha (len <= n_basis)."""
        alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
        if alpha.ndim != 1 or alpha.shape[0] > self.n_basis:
            raise ValueError(
                f"expected at most {self.n_basis} shape coefficients, got {alpha.shape}"
            )
        r = self.mean.copy()
        if alpha.size:
            r += alpha @ self.basis[: alpha.size]
        return r

    def prior_radius_std(self, cov_scale: float = 1.0) -> np.ndarray:
        """Pointwise std of the radius field under the sample covariance prior."""
        var = sample_covariance(self.eigenvalues, self.n_library, self.n_basis)
        w = cov_scale * np.diag(var)
        return np.sqrt(np.einsum("k,kv->v", w, self.basis**2))


def ellipsoid_radius(directions: np.ndarray, semi_axes) -> np.ndarray:
    d = np.atleast_2d(directions)
    a, b, c = semi_axes
    q = (d[:, 0] / a) ** 2 + (d[:, 1] / b) ** 2 + (d[:, 2] / c) ** 2
    return 1.0 / np.sqrt(q)


def _real_harmonic_modes(grid: HemisphereGrid, n_modes: int) -> np.ndarray:
    """Fixed smooth angular modes: real spherical harmonics, degree >= 1."""
    theta = np.arccos(np.clip(grid.vertices[:, 2], -1.0, 1.0))
    phi = np.arctan2(grid.vertices[:, 1], grid.vertices[:, 0])
    modes = []
    degree = 1
    while len(modes) < n_modes:
        for order in range(-degree, degree + 1):
            y = sph_harm_y(degree, abs(order), theta, phi)
            if order == 0:
                modes.append(np.real(y))
            elif order > 0:
                modes.append(np.sqrt(2.0) * np.real(y))
            else:
                modes.append(np.sqrt(2.0) * np.imag(y))
            if len(modes) == n_modes:
                break
        degree += 1
    return np.array(modes)


def generate_library(config: LibraryConfig, seed: int) -> CrownLibrary:
    """Draw a synthetic crown library; deterministic in (config, seed)."""
    if config.n < 2:
        raise ValueError("library needs at least 2 members")
    grid = build_grid(config.grid_level)
    base = ellipsoid_radius(grid.vertices, config.base_semi_axes)
    modes = _real_harmonic_modes(grid, config.n_modes)
    amps = np.arange(1, config.n_modes + 1, dtype=float) ** (-config.decay)
    # Scale so the node-averaged pointwise std of the perturbation hits target.
    pointwise_var = np.einsum("q,qv->v", amps**2, modes**2)
    scale = config.amplitude * config.target_std / np.sqrt(pointwise_var.mean())
    rng = np.random.default_rng(seed)
    coeff = rng.standard_normal((config.n, config.n_modes))
    radii = base[None, :] + scale * (coeff * amps[None, :]) @ modes
    bad = np.flatnonzero(radii.min(axis=1) <= 0.0)
    if bad.size:
        raise ValueError(
            f"library member {bad[0]} has non-positive radius "
            f"(min {radii[bad[0]].min():.3e} m); reduce the perturbation amplitude"
        )
    return CrownLibrary(grid=grid, radii=radii, config=config)


def h1_gram(fields: np.ndarray, grid: HemisphereGrid) -> np.ndarray:
    """H1 Gram matrix of row-stacked nodal fields, symmetric by construction."""
    f = np.atleast_2d(np.asarray(fields, dtype=float))
    if f.shape[1] != grid.n_vertices:
        raise ValueError("field length does not match grid")
    g = f @ (h1_operator(grid) @ f.T)
    return 0.5 * (g + g.T)


def principal_basis(
    gram: np.ndarray, fields: np.ndarray, n_keep: int, grid: HemisphereGrid
) -> tuple[np.ndarray, np.ndarray]:
    """Leading H1-orthonormal basis of span(fields) from the Gram spectrum.

    Returns (basis (n_keep, nv), eigenvalues (positive spectrum, descending)).
    The k-th basis field is (v_k / sqrt(l_k))^T fields where (l_k, v_k) are
    the descending eigenpairs of the Gram matrix; the retained span minimizes
    the total squared H1 representation error among all n_keep-dim subspaces.
    """
    gram = np.asarray(gram, dtype=float)
    fields = np.atleast_2d(np.asarray(fields, dtype=float))
    n = gram.shape[0]
    if gram.shape != (n, n) or fields.shape[0] != n:
        raise ValueError("Gram matrix and field stack sizes disagree")
    lam, vec = scipy.linalg.eigh(gram)
    lam, vec = lam[::-1], vec[:, ::-1]
    rank = int(np.sum(lam > 1e-12 * max(np.trace(gram), 0.0)))
    if not 0 < n_keep <= rank:
        raise ValueError(
            f"requested {n_keep} basis fields but the library Gram has rank {rank}"
        )
    lam = lam[:rank]
    vec = vec[:, :rank]
    # Deterministic sign: largest-magnitude component of each eigenvector positive.
    flip = np.sign(vec[np.argmax(np.abs(vec), axis=0), np.arange(rank)])
    vec = vec * flip[None, :]
    weights = vec[:, :n_keep] / np.sqrt(lam[:n_keep])[None, :]
    return weights.T @ fields, lam


def build_model(library: CrownLibrary, n_keep: int) -> ShapeModel:
    """Center the library and keep its n_keep leading principal fields."""
    mean = library.radii.mean(axis=0)
    centered = library.radii - mean[None, :]
    gram = h1_gram(centered, library.grid)
    basis, lam = principal_basis(gram, centered, n_keep, library.grid)
    return ShapeModel(
        grid=library.grid,
        mean=mean,
        basis=basis,
        eigenvalues=lam,
        n_library=library.n,
    )


def representation_error(eigenvalues: np.ndarray, n_keep: int) -> float:
    """Relative total squared H1 error left after keeping n_keep components."""
    lam = np.asarray(eigenvalues, dtype=float)
    if n_keep < 0:
        raise ValueError("n_keep must be non-negative")
    if np.any(lam < 0.0):
        raise ValueError("negative eigenvalue passed to representation_error")
    total = lam.sum()
    if total <= 0.0:
        raise ValueError("empty spectrum")
    return float(lam[n_keep:].sum() / total)


def project_coefficients(model: ShapeModel, fields: np.ndarray) -> np.ndarray:
    """H1 projections of centered fields onto the model basis, rows per field."""
    f = np.atleast_2d(np.asarray(fields, dtype=float))
    op = h1_operator(model.grid)
    return (op @ f.T).T @ model.basis.T


def sample_covariance(
    eigenvalues: np.ndarray, n_library: int, n_keep: int | None = None
) -> np.ndarray:
    """Sample covariance of the projected library coefficients: diag(l_k/(n-1))."""
    lam = np.asarray(eigenvalues, dtype=float)
    if n_library < 2:
        raise ValueError("covariance needs a library of at least 2")
    if n_keep is not None:
        if n_keep > lam.size:
            raise ValueError("n_keep exceeds available spectrum")
        lam = lam[:n_keep]
    return np.diag(lam / (n_library - 1))


def evaluate_surface(
    model: ShapeModel, alpha: np.ndarray, directions: np.ndarray | None = None
) -> np.ndarray:
    """Points of the crown surface r(x; alpha) x at grid nodes or given directions."""
    nodal = model.radius_field(alpha)
    if directions is None:
        d = model.grid.vertices
        r = nodal
    else:
        d = np.atleast_2d(np.asarray(directions, dtype=float))
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        r = model.grid.interpolate(nodal, d)
    if np.min(r) <= 0.0:
        raise ValueError(
            f"degenerate crown: radius {np.min(r):.3e} m at some direction"
        )
    return r[:, None] * d


def model_to_dict(model: ShapeModel) -> dict:
    return {
        "version": 1,
        "kind": "shape-model",
        "grid_level": model.grid.level,
        "n_library": model.n_library,
        "eigenvalues": model.eigenvalues.tolist(),
        "mean": model.mean.tolist(),
        "basis": model.basis.tolist(),
    }


def model_from_dict(data: dict) -> ShapeModel:
    required = {"version", "kind", "grid_level", "n_library", "eigenvalues", "mean", "basis"}
    unknown = set(data) - required
    if unknown:
        raise ValueError(f"unknown shape-model keys: {sorted(unknown)}")
    if data.get("kind") != "shape-model" or data.get("version") != 1:
        raise ValueError("not a version-1 shape-model document")
    grid = build_grid(int(data["grid_level"]))
    mean = np.asarray(data["mean"], dtype=float)
    basis = np.atleast_2d(np.asarray(data["basis"], dtype=float))
    if mean.shape[0] != grid.n_vertices or basis.shape[1] != grid.n_vertices:
        raise ValueError("field lengths do not match the declared grid level")
    return ShapeModel(
        grid=grid,
        mean=mean,
        basis=basis,
        eigenvalues=np.asarray(data["eigenvalues"], dtype=float),
        n_library=int(data["n_library"]),
    )
