"""2D conductivity forward model with many dipole sources.

Discretization: cell-centred finite volumes on a uniform ``N x N`` grid over
the unit square, harmonic averaging of ``mu = exp(m)`` on interior faces and
zero flux through the boundary.  The discrete operator

    K(m) = D^T diag(w(m)) D / h^2

(``D`` the face-difference matrix, ``w`` the face conductivities) is the
negative of the discretized ``div(mu grad .)``; fields solve ``K u = q``
and are normalized to zero mean, which pins the constant null space.

The linear solves use a sparse LU of ``K`` with the last cell removed.  A
``SolveCounter`` tallies logical PDE solves (one per right-hand side),
whatever the solver does internally.
"""

from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from probstop.randprobe import Distribution, ProbeStream, draw_probes

__all__ = [
    "SolveCounter",
    "Grid",
    "ForwardModel",
    "SourceSet",
    "DataSet",
    "DiscrepancyTarget",
    "ExperimentSetup",
    "dipole_sources",
    "solve_forward",
    "predict",
    "misfit",
    "misfit_estimate",
    "probe_block",
    "sampled_residual",
    "two_body_model",
    "make_experiment",
    "write_grid_csv",
    "read_grid_csv",
    "write_matrix_csv",
    "read_matrix_csv",
]

_COMPAT_TOL = 1e-12


class SolveCounter:
    """Thread-safe tally of PDE solves."""

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def add(self, k: int) -> None:
        with self._lock:
            self.count += int(k)


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred grid; cell ``(ix, iy)`` has index ``iy * n + ix``
    and ``iy = 0`` is the bottom row."""

    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("grid needs at least 2 cells per side")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def cells(self) -> int:
        return self.n * self.n

    def index(self, ix, iy):
        return np.asarray(iy) * self.n + np.asarray(ix)

    def centers(self):
        c = (np.arange(self.n) + 0.5) * self.h
        X, Y = np.meshgrid(c, c)  # Y varies along axis 0 -> row iy
        return X.reshape(-1), Y.reshape(-1)

    def faces(self):
        """Cell pairs ``(a, b)`` sharing an interior face."""
        idx = np.arange(self.cells).reshape(self.n, self.n)
        a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
        b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
        return a, b

    def difference_matrix(self) -> sp.csr_matrix:
        a, b = self.faces()
        nf = a.size
        rows = np.concatenate([np.arange(nf), np.arange(nf)])
        cols = np.concatenate([a, b])
        vals = np.concatenate([np.ones(nf), -np.ones(nf)])
        return sp.csr_matrix((vals, (rows, cols)), shape=(nf, self.cells))

    def boundary_cells(self) -> np.ndarray:
        """Boundary cells, counter-clockwise from the bottom-left corner."""
        n = self.n
        ring = (
            [(ix, 0) for ix in range(n)]
            + [(n - 1, iy) for iy in range(1, n)]
            + [(ix, n - 1) for ix in range(n - 2, -1, -1)]
            + [(0, iy) for iy in range(n - 2, 0, -1)]
        )
        return np.array([self.index(ix, iy) for ix, iy in ring])

    def receiver_cells(self) -> np.ndarray:
        """Top row plus the upper half of the left column (corner counted once).

        Covers ``n + n//2 - 1`` of the ``4n - 4`` boundary cells, i.e. less
        than half the boundary.
        """
        n = self.n
        top = [self.index(ix, n - 1) for ix in range(n)]
        left = [self.index(0, iy) for iy in range(n // 2, n - 1)]
        return np.array(top + left)


class ForwardModel:
    """Discrete PDE operator for a fixed log-conductivity ``m``.

    Factorizes once; every right-hand side solved through ``solve`` is one
    logical PDE solve on the attached counter.
    """

    def __init__(self, grid: Grid, m, counter: SolveCounter | None = None):
        self.grid = grid
        self.m = np.asarray(m, dtype=float).reshape(-1).copy()
        if self.m.size != grid.cells:
            raise ValueError(f"model has {self.m.size} cells, grid has {grid.cells}")
        self.m.setflags(write=False)
        self.counter = counter if counter is not None else SolveCounter()
        self.mu = np.exp(self.m)
        self.face_a, self.face_b = grid.faces()
        ma, mb = self.mu[self.face_a], self.mu[self.face_b]
        self.w = 2.0 * ma * mb / (ma + mb)
        self.D = grid.difference_matrix()
        self.K = (self.D.T @ sp.diags(self.w) @ self.D / grid.h**2).tocsc()
        self._lu = spla.splu(self.K[:-1, :-1].tocsc())

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.K @ u

    def solve(self, Q: np.ndarray, project: bool = False) -> np.ndarray:
        """Zero-mean solutions of ``K U = Q`` for the columns of ``Q``.

        With ``project`` the right-hand sides are first made zero-sum (as
        needed for adjoint solves); otherwise they must already be.
        """
        Q = np.asarray(Q, dtype=float)
        vec = Q.ndim == 1
        Q2 = Q[:, None] if vec else Q
        if project:
            Q2 = Q2 - Q2.mean(axis=0)
        else:
            scale = np.maximum(np.abs(Q2).sum(axis=0), 1.0)
            if np.any(np.abs(Q2.sum(axis=0)) > _COMPAT_TOL * scale):
                raise ValueError("incompatible source: Neumann problem needs zero-sum right-hand sides")
        U = np.zeros_like(Q2)
        if Q2.shape[1]:
            U[:-1] = self._lu.solve(np.ascontiguousarray(Q2[:-1]))
            U -= U.mean(axis=0)
        self.counter.add(Q2.shape[1])
        return U[:, 0] if vec else U

    def face_weight_derivs(self):
        """``dw_f/dm_a`` and ``dw_f/dm_b`` for each face."""
        ma, mb = self.mu[self.face_a], self.mu[self.face_b]
        denom = (ma + mb) ** 2
        return 2.0 * mb**2 * ma / denom, 2.0 * ma**2 * mb / denom

    def dK_apply(self, v: np.ndarray, U: np.ndarray) -> np.ndarray:
        """``(dK/dm . v) U`` for a model perturbation ``v``."""
        da, db = self.face_weight_derivs()
        dw = da * v[self.face_a] + db * v[self.face_b]
        DU = self.D @ U
        scaled = DU * (dw[:, None] if DU.ndim == 2 else dw)
        return self.D.T @ scaled / self.grid.h**2

    def dK_adjoint(self, Lam: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Gradient of ``sum_j lam_j^T K(m) u_j`` with respect to ``m``."""
        da, db = self.face_weight_derivs()
        prod = (self.D @ Lam) * (self.D @ U)
        if prod.ndim == 2:
            prod = prod.sum(axis=1)
        g = np.zeros(self.grid.cells)
        np.add.at(g, self.face_a, da * prod)
        np.add.at(g, self.face_b, db * prod)
        return g / self.grid.h**2


@dataclass(frozen=True)
class SourceSet:
    """Source vectors as the columns of a ``cells x s`` array."""

    Q: np.ndarray
    pairs: np.ndarray | None = None

    def __post_init__(self):
        sums = np.abs(self.Q.sum(axis=0))
        if np.any(sums > _COMPAT_TOL * np.maximum(np.abs(self.Q).sum(axis=0), 1.0)):
            raise ValueError("every source must sum to zero")

    @property
    def s(self) -> int:
        return self.Q.shape[1]


def dipole_sources(grid: Grid, s: int, seed: int = 0) -> SourceSet:
    """``s`` distinct +1/-1 dipoles between boundary cells that are not receivers.

    Each pole injects unit current, i.e. ``+-1/h^2`` in the cell density.
    """
    rec = set(grid.receiver_cells().tolist())
    cand = np.array([c for c in grid.boundary_cells() if c not in rec])
    ia, ib = np.triu_indices(cand.size, k=1)
    if s > ia.size:
        raise ValueError(f"only {ia.size} distinct dipoles available, asked for {s}")
    pick = np.sort(np.random.default_rng(seed).choice(ia.size, size=s, replace=False))
    pairs = np.stack([cand[ia[pick]], cand[ib[pick]]], axis=1)
    Q = np.zeros((grid.cells, s))
    Q[pairs[:, 0], np.arange(s)] = 1.0 / grid.h**2
    Q[pairs[:, 1], np.arange(s)] = -1.0 / grid.h**2
    return SourceSet(Q, pairs)


@dataclass(frozen=True)
class DiscrepancyTarget:
    """``rho = safety * sigma^2 l s``.

    ``safety = 1`` is the plain discrepancy value, the expected misfit of the
    true model.  A factor above 1 (Morozov's ``tau``) makes the target
    reachable when the model cannot absorb a noticeable share of the noise.
    """

    sigma: float
    l: int
    s: int
    safety: float = 1.0

    def __post_init__(self):
        if not self.safety > 0:
            raise ValueError("safety factor must be positive")

    @property
    def rho(self) -> float:
        return self.safety * self.sigma**2 * self.l * self.s


@dataclass(frozen=True)
class DataSet:
    """Observations ``D`` (``l x s``) at the receiver cells ``receivers``."""

    D: np.ndarray
    sigma: float
    receivers: np.ndarray

    @property
    def l(self) -> int:
        return self.D.shape[0]

    @property
    def s(self) -> int:
        return self.D.shape[1]

    @property
    def target(self) -> DiscrepancyTarget:
        return DiscrepancyTarget(self.sigma, self.l, self.s)

    @property
    def rho(self) -> float:
        return self.target.rho


def solve_forward(model: ForwardModel, q: np.ndarray) -> np.ndarray:
    """One PDE solve for a zero-sum source ``q``."""
    return model.solve(q)


def predict(model: ForwardModel, sources: SourceSet, receivers: np.ndarray) -> np.ndarray:
    """``F(m)``: column ``i`` is the field of source ``i`` at the receivers (``s`` solves)."""
    return model.solve(sources.Q)[receivers]


def misfit(model: ForwardModel, data: DataSet, sources: SourceSet) -> float:
    """``||F(m) - D||_F^2`` (``s`` solves)."""
    if data.s != sources.s:
        raise ValueError("data and source counts differ")
    R = predict(model, sources, data.receivers) - data.D
    return float(np.sum(R * R))


def probe_block(s: int, distribution, n: int, seed: int) -> np.ndarray:
    """Probe weights ``W`` (``s x n``).

    ``n >= s`` falls back to the deterministic block ``sqrt(s) I``, for which
    ``(1/s) sum ||B w_j||^2 = ||B||_F^2`` exactly.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if n >= s:
        return math.sqrt(s) * np.eye(s)
    return draw_probes(ProbeStream(Distribution.parse(distribution), s, seed), 0, n)


def sampled_residual(model: ForwardModel, data: DataSet, sources: SourceSet, W: np.ndarray):
    """Residual block ``R = P G(m) Q W - D W`` and the fields ``U = G(m) Q W``.

    The sources are combined before solving, so this costs ``W.shape[1]``
    solves rather than ``s``.
    """
    U = model.solve(sources.Q @ W)
    return U[data.receivers] - data.D @ W, U


def misfit_estimate(
    model: ForwardModel,
    data: DataSet,
    sources: SourceSet,
    distribution,
    n: int,
    seed: int,
) -> float:
    """``(1/n) sum_j ||B(m) w_j||^2`` with ``B = F(m) - D`` (``n`` solves)."""
    W = probe_block(sources.s, distribution, n, seed)
    R, _ = sampled_residual(model, data, sources, W)
    return float(np.sum(R * R) / W.shape[1])


def two_body_model(grid: Grid, bodies=((0.2, 0.45, 0.5, 0.8, 1.0), (0.55, 0.85, 0.2, 0.5, -1.0)), background=0.0):
    """Piecewise-constant log-conductivity: rectangles ``(x0, x1, y0, y1, value)``
    on a constant background."""
    X, Y = grid.centers()
    m = np.full(grid.cells, float(background))
    for x0, x1, y0, y1, value in bodies:
        m[(X >= x0) & (X <= x1) & (Y >= y0) & (Y <= y1)] = value
    return m


@dataclass
class ExperimentSetup:
    grid: Grid
    sources: SourceSet
    data: DataSet
    m_true: np.ndarray
    clean: np.ndarray = field(repr=False)


def make_experiment(
    n: int = 16,
    s: int = 64,
    noise: float = 0.02,
    seed: int = 0,
    bodies=None,
    background: float = 0.0,
) -> ExperimentSetup:
    """Synthetic twin experiment.

    Noise is Gaussian with ``sigma = noise * RMS(F(m_true))``; ``noise = 0``
    gives exact data (``sigma`` is then reported as 0).
    """
    grid = Grid(n)
    kw = {} if bodies is None else {"bodies": bodies}
    m_true = two_body_model(grid, background=background, **kw)
    sources = dipole_sources(grid, s, seed)
    receivers = grid.receiver_cells()
    clean = predict(ForwardModel(grid, m_true), sources, receivers)
    sigma = noise * float(np.sqrt(np.mean(clean**2)))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    D = clean + sigma * rng.standard_normal(clean.shape)
    return ExperimentSetup(grid, sources, DataSet(D, sigma, receivers), m_true, clean)


def write_grid_csv(path, m, n: int | None = None, comments=()) -> None:
    """Write a cell field as an ``n x n`` CSV grid, top row first."""
    m = np.asarray(m, dtype=float).reshape(-1)
    n = n or math.isqrt(m.size)
    rows = m.reshape(n, n)[::-1]
    _write_rows(path, rows, comments)


def read_grid_csv(path) -> np.ndarray:
    return read_matrix_csv(path)[::-1].reshape(-1)


def write_matrix_csv(path, A, comments=()) -> None:
    _write_rows(path, np.atleast_2d(np.asarray(A, dtype=float)), comments)


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#")) if r]
    return np.array([[float(x) for x in r] for r in rows])


def _write_rows(path, rows, comments) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        for r in rows:
            w.writerow([repr(float(x)) for x in r])
