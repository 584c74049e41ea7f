"""Grid-graph Laplacian spectra and graph Fourier transforms.

Pixels are nodes (row-major index ``r * width + c``), 4-neighbours are joined
by unit-weight edges. The canonical basis is the analytic one: the grid is the
Cartesian product of two path graphs, so every eigenvector is an outer product
of sampled cosines. Modes are ordered by eigenvalue, degenerate eigenvalues by
``(p, q)`` (vertical mode, then horizontal mode).
"""

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .containers import read_container, write_container
from .errors import (
    CompatibilityError,
    ContractViolation,
    InvalidDimensionError,
    NumericError,
    ShapeError,
)

SPECTRUM_VERSION = "grid-laplacian/v1/order=lambda,p,q/sign=first-positive"
DEGENERACY_TOL = 1e-10
SIGN_TOL = 1e-12
DENSE_WARN_N = 1024
DENSE_MAX_N = 4096


@dataclass(frozen=True)
class GridGraph:
    height: int
    width: int
    edges: np.ndarray = field(repr=False)  # (E, 2), i < j

    @property
    def num_nodes(self):
        return self.height * self.width

    @property
    def num_edges(self):
        return len(self.edges)

    def degrees(self):
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        np.add.at(deg, self.edges[:, 0], 1)
        np.add.at(deg, self.edges[:, 1], 1)
        return deg


def build_grid_graph(height, width):
    """4-connected grid graph with unit weights over a ``height x width`` patch."""
    if int(height) != height or int(width) != width or height < 1 or width < 1:
        raise InvalidDimensionError(f"grid dimensions must be positive integers, got {height}x{width}")
    height, width = int(height), int(width)
    if height * width < 2:
        raise InvalidDimensionError("a grid graph needs at least two nodes")
    idx = np.arange(height * width).reshape(height, width)
    horizontal = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    vertical = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    edges = np.concatenate([horizontal, vertical]).astype(np.int64)
    return GridGraph(height, width, edges)


def laplacian(g, sparse=False):
    """Combinatorial Laplacian ``L = D - A`` of ``g``."""
    n = g.num_nodes
    i, j = g.edges[:, 0], g.edges[:, 1]
    ones = np.ones(len(i))
    adj = sp.coo_matrix((np.concatenate([ones, ones]), (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n))
    lap = sp.diags(g.degrees().astype(float)) - adj.tocsr()
    return lap.tocsr() if sparse else lap.toarray()


def path_eigenvectors(n):
    """Columns are the orthonormal Laplacian eigenvectors of the ``n``-node path.

    Mode ``p`` samples ``cos(pi * p * (i + 1/2) / n)``; its eigenvalue is
    ``2 - 2 cos(pi * p / n)``.
    """
    i = np.arange(n)[:, None] + 0.5
    p = np.arange(n)[None, :]
    vecs = np.cos(np.pi * p * i / n)
    vecs[:, 0] = 1.0 / np.sqrt(n)
    vecs[:, 1:] *= np.sqrt(2.0 / n)
    return vecs


def path_eigenvalues(n):
    return 2.0 - 2.0 * np.cos(np.pi * np.arange(n) / n)


def _apply_sign_convention(vecs):
    out = vecs.copy()
    for k in range(out.shape[1]):
        nz = np.flatnonzero(np.abs(out[:, k]) > SIGN_TOL)
        if len(nz) and out[nz[0], k] < 0:
            out[:, k] = -out[:, k]
    return out


@dataclass(frozen=True, eq=False)
class GridSpectrum:
    """Eigenvalues and eigenbasis of a grid Laplacian.

    ``modes[k] = (p, q)`` is set for analytic spectra; dense spectra carry the
    matrix directly in ``dense_basis``.
    """

    height: int
    width: int
    eigenvalues: np.ndarray = field(repr=False)
    modes: np.ndarray = field(default=None, repr=False)
    dense_basis: np.ndarray = field(default=None, repr=False)

    @property
    def n(self):
        return self.height * self.width

    @property
    def method(self):
        return "analytic" if self.modes is not None else "dense"

    @property
    def version(self):
        return SPECTRUM_VERSION if self.method == "analytic" else "grid-laplacian/v1/dense"

    @cached_property
    def path_h(self):
        return path_eigenvectors(self.height)

    @cached_property
    def path_w(self):
        return path_eigenvectors(self.width)

    @cached_property
    def basis(self):
        """Dense ``N x N`` matrix ``U`` with eigenvectors as columns."""
        if self.dense_basis is not None:
            return self.dense_basis
        p, q = self.modes[:, 0], self.modes[:, 1]
        # u_k[r*W + c] = path_h[r, p_k] * path_w[c, q_k]
        return (self.path_h[:, None, p] * self.path_w[None, :, q]).reshape(self.n, self.n)

    def ordering_table(self):
        """Rows of ``(k, p, q, lambda)``; analytic spectra only."""
        if self.modes is None:
            raise CompatibilityError("dense spectra have no mode table")
        return [(k, int(p), int(q), float(lam)) for k, ((p, q), lam) in enumerate(zip(self.modes, self.eigenvalues))]


def eigendecompose_dense(L, height=None, width=None):
    """Oracle eigensolve of a symmetric Laplacian via LAPACK ``eigh``."""
    L = np.asarray(L, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {L.shape}")
    if np.max(np.abs(L - L.T), initial=0.0) > 1e-12:
        raise ContractViolation("Laplacian is not symmetric")
    n = L.shape[0]
    if n > DENSE_MAX_N:
        raise InvalidDimensionError(f"dense eigensolve limited to N <= {DENSE_MAX_N}, got {n}")
    if n > DENSE_WARN_N:
        warnings.warn(f"dense O(N^3) eigensolve at N={n}; prefer eigenbasis_analytic", RuntimeWarning, stacklevel=2)
    if height is None:
        height, width = 1, n
    try:
        vals, vecs = np.linalg.eigh(L)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigensolver failed: {exc}") from exc
    return GridSpectrum(height, width, np.maximum(vals, 0.0), dense_basis=_apply_sign_convention(vecs))


def _canonical_order(lams, p, q):
    order = np.lexsort((q, p, lams))
    lam_sorted = lams[order]
    # group numerically degenerate eigenvalues, then order each group by (p, q)
    breaks = np.flatnonzero(np.diff(lam_sorted) > DEGENERACY_TOL) + 1
    out_order = []
    out_vals = []
    for group in np.split(np.arange(len(order)), breaks):
        idx = order[group]
        idx = idx[np.lexsort((q[idx], p[idx]))]
        out_order.append(idx)
        out_vals.append(np.full(len(idx), lam_sorted[group].min()))
    return np.concatenate(out_order), np.concatenate(out_vals)


def eigenbasis_analytic(height, width):
    """Closed-form spectrum of the ``height x width`` grid in canonical order."""
    if int(height) != height or int(width) != width or height < 1 or width < 1:
        raise InvalidDimensionError(f"grid dimensions must be positive integers, got {height}x{width}")
    height, width = int(height), int(width)
    pp, qq = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    pp, qq = pp.ravel(), qq.ravel()
    lams = path_eigenvalues(height)[pp] + path_eigenvalues(width)[qq]
    order, vals = _canonical_order(lams, pp, qq)
    vals[0] = 0.0
    modes = np.stack([pp[order], qq[order]], axis=1).astype(np.int64)
    return GridSpectrum(height, width, vals, modes=modes)


def _check_patch(spectrum, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-2:] != (spectrum.height, spectrum.width):
        raise ShapeError(f"patch shape {x.shape[-2:]} does not match spectrum {spectrum.height}x{spectrum.width}")
    return x


def _check_coeffs(spectrum, s):
    s = np.asarray(s, dtype=float)
    if s.ndim == 0 or s.shape[-1] != spectrum.n:
        raise ShapeError(f"expected {spectrum.n} coefficients, got shape {s.shape}")
    return s


def gft_forward(spectrum, x):
    """Spectral coefficients ``S = U^T X`` of one patch or a batch ``(..., H, W)``."""
    x = _check_patch(spectrum, x)
    if spectrum.modes is None:
        return x.reshape(*x.shape[:-2], spectrum.n) @ spectrum.basis
    grid = spectrum.path_h.T @ x @ spectrum.path_w
    return grid[..., spectrum.modes[:, 0], spectrum.modes[:, 1]]


def gft_inverse(spectrum, s):
    """``X = U S``. The result is not clipped to [0, 1]."""
    s = _check_coeffs(spectrum, s)
    lead = s.shape[:-1]
    if spectrum.modes is None:
        return (s @ spectrum.basis.T).reshape(*lead, spectrum.height, spectrum.width)
    grid = np.zeros((*lead, spectrum.height, spectrum.width))
    grid[..., spectrum.modes[:, 0], spectrum.modes[:, 1]] = s
    return spectrum.path_h @ grid @ spectrum.path_w.T


def reconstruct_partial(spectrum, s, keep):
    """Inverse transform after zeroing every coefficient outside ``keep``."""
    s = _check_coeffs(spectrum, s)
    keep = np.asarray(sorted(set(int(k) for k in keep)), dtype=np.int64)
    if len(keep) and (keep[0] < 0 or keep[-1] >= spectrum.n):
        raise IndexError(f"spectral index out of range 0..{spectrum.n - 1}")
    masked = np.zeros_like(s)
    masked[..., keep] = s[..., keep]
    return gft_inverse(spectrum, masked)


def top_k_indices(s, k):
    """Indices of the ``k`` largest-magnitude coefficients (ties by lower index)."""
    return np.argsort(-np.abs(np.asarray(s)), kind="stable")[:k]


def save_spectrum(spectrum, path):
    meta = {"height": spectrum.height, "width": spectrum.width, "method": spectrum.method, "version": spectrum.version}
    arrays = {"eigenvalues": spectrum.eigenvalues}
    if spectrum.modes is not None:
        arrays["modes"] = spectrum.modes
    else:
        arrays["basis"] = spectrum.dense_basis
    write_container(path, "spectrum", meta, arrays)


def load_spectrum(path):
    meta, arrays = read_container(path, kind="spectrum")
    if meta["method"] == "dense":
        return GridSpectrum(meta["height"], meta["width"], arrays["eigenvalues"], dense_basis=arrays["basis"])
    if meta["version"] != SPECTRUM_VERSION:
        raise CompatibilityError(f"spectrum version {meta['version']!r} != {SPECTRUM_VERSION!r}")
    spectrum = eigenbasis_analytic(meta["height"], meta["width"])
    if not np.array_equal(spectrum.modes, arrays["modes"]):
        raise CompatibilityError("stored mode ordering differs from the canonical ordering")
    return spectrum
