"""Kronecker-structured covariance blocks and their conjugate variance updates.

Each block is a small estimated Parametric matrix crossed with a large fixed
Structured matrix (identity in this release). Effect vectors are ordered
group-major (all parametric slots of one group contiguous), so a block's
dense covariance is kron(S, P). Assemblies never materialize the full
matrix: solves and quadratic forms run block-wise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import AssemblyError, NumericError

VARIANCE_FLOOR = 1e-12


def kronecker_product(a, b) -> np.ndarray:
    """Kronecker (direct) product: block (i, j) of the result is a[i, j] * b."""
    return np.kron(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


class IdentityStructure:
    """Fixed Structured part: independence among groups. Kept pluggable."""

    is_identity = True

    def __init__(self, dim: int):
        self.dim = int(dim)

    def dense(self) -> np.ndarray:
        return np.eye(self.dim)

    def solve(self, x):
        return x

    def logdet(self) -> float:
        return 0.0

    def __repr__(self):
        return f"IdentityStructure({self.dim})"


def _check_spd_matrix(mat: np.ndarray, what: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise NumericError(f"{what}: expected a square matrix, got shape {mat.shape}")
    if not np.allclose(mat, mat.T, atol=1e-10):
        raise NumericError(f"{what}: matrix is not symmetric")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise NumericError(f"{what}: matrix is not positive definite") from None
    return 0.5 * (mat + mat.T)


@dataclass(frozen=True, eq=False)
class IwPrior:
    """Inverse-Wishart prior as (limit covariance V, degree of belief nu)."""

    limit: np.ndarray
    belief: float

    def __post_init__(self):
        limit = _check_spd_matrix(self.limit, "IW prior limit covariance")
        object.__setattr__(self, "limit", limit)
        d = limit.shape[0]
        if self.belief <= d - 1:
            raise NumericError(
                f"IW degree of belief {self.belief:g} must exceed dim - 1 = {d - 1}")

    @property
    def dim(self) -> int:
        return self.limit.shape[0]

    @property
    def scale(self) -> np.ndarray:
        """Scale-matrix convention: prior scale is belief * limit."""
        return self.belief * self.limit


class KroneckerBlock:
    """One Parametric (estimated) x Structured (fixed) covariance block."""

    def __init__(self, parametric, structured, shape="unstructured", label="",
                 validate=True):
        if validate:
            parametric = _check_spd_matrix(parametric,
                                           f"parametric matrix of block {label!r}")
            if shape not in ("unstructured", "diagonal", "scalar"):
                raise AssemblyError(f"block {label!r}: unknown shape {shape!r}")
            if shape in ("diagonal", "scalar"):
                off = parametric - np.diag(np.diag(parametric))
                if np.any(off != 0.0):
                    raise AssemblyError(
                        f"block {label!r}: {shape} shape forbids off-diagonal entries")
        if isinstance(structured, (int, np.integer)):
            structured = IdentityStructure(structured)
        self.parametric = np.asarray(parametric, dtype=np.float64)
        self.structured = structured
        self.shape = shape
        self.label = label

    @property
    def d(self) -> int:
        return self.parametric.shape[0]

    @property
    def g(self) -> int:
        return self.structured.dim

    @property
    def dim(self) -> int:
        return self.d * self.g

    def replace(self, parametric: np.ndarray) -> "KroneckerBlock":
        """Swap in an already-checked parametric draw (the samplers validate)."""
        return KroneckerBlock(parametric, self.structured, self.shape, self.label,
                              validate=False)

    def effective_parametric(self) -> np.ndarray:
        """Parametric matrix with near-zero variances clamped for solves only.

        The stored draw is never modified; the floor just keeps the Cholesky
        alive at boundary posteriors.
        """
        p = self.parametric
        small = np.diag(p) < VARIANCE_FLOOR
        if small.any():
            warnings.warn(
                f"block {self.label!r}: variance below {VARIANCE_FLOOR:g} clamped "
                "for this solve", RuntimeWarning, stacklevel=2)
            p = p.copy()
            idx = np.flatnonzero(small)
            p[idx, idx] = VARIANCE_FLOOR
        return p

    def dense(self) -> np.ndarray:
        """Covariance of the block's group-major effect vector: kron(S, P)."""
        return kronecker_product(self.structured.dense(), self.parametric)

    def solve(self, v: np.ndarray) -> np.ndarray:
        """Solve kron(S, P) x = v for a group-major vector v."""
        v = np.asarray(v, dtype=np.float64)
        mat = v.reshape(self.g, self.d)
        p_chol = cho_factor(self.effective_parametric(), lower=True, check_finite=False)
        out = self.structured.solve(cho_solve(p_chol, mat.T, check_finite=False).T)
        return out.reshape(v.shape)

    def quadform(self, v: np.ndarray) -> float:
        """v' kron(S, P)^(-1) v."""
        return float(np.asarray(v) @ self.solve(v))

    def logdet(self) -> float:
        sign, ld = np.linalg.slogdet(self.effective_parametric())
        return self.g * ld + self.d * self.structured.logdet()

    def inverse_parametric(self) -> np.ndarray:
        p = self.effective_parametric()
        return cho_solve(cho_factor(p, lower=True, check_finite=False),
                         np.eye(self.d), check_finite=False)

    def sample_effects(self, rng: np.random.Generator) -> np.ndarray:
        """Draw a group-major effect vector from N(0, kron(S, P)); identity S only."""
        if not getattr(self.structured, "is_identity", False):
            raise AssemblyError(
                f"block {self.label!r}: sampling requires an identity structured part")
        chol = np.linalg.cholesky(self.effective_parametric())
        z = rng.standard_normal((self.g, self.d))
        return (z @ chol.T).reshape(-1)

    def __repr__(self):
        return (f"KroneckerBlock({self.label!r}, d={self.d}, g={self.g}, "
                f"shape={self.shape})")


@dataclass(eq=False)
class CovarianceAssembly:
    """Block-diagonal assembly of Kronecker blocks; solves stay block-wise."""

    blocks: list[KroneckerBlock]
    spans: list[tuple[int, int]] = field(init=False)
    dim: int = field(init=False)

    def __post_init__(self):
        spans = []
        start = 0
        for block in self.blocks:
            spans.append((start, start + block.dim))
            start += block.dim
        self.spans = spans
        self.dim = start

    def _check(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.dim:
            raise AssemblyError(
                f"vector of length {v.shape[0]} does not match assembly dimension {self.dim}")
        return v

    def solve(self, v: np.ndarray) -> np.ndarray:
        v = self._check(v)
        out = np.empty_like(v)
        for block, (a, b) in zip(self.blocks, self.spans):
            out[a:b] = block.solve(v[a:b])
        return out

    def quadform(self, v: np.ndarray) -> float:
        v = self._check(v)
        return float(sum(block.quadform(v[a:b])
                         for block, (a, b) in zip(self.blocks, self.spans)))

    def logdet(self) -> float:
        return float(sum(block.logdet() for block in self.blocks))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return np.concatenate([block.sample_effects(rng) for block in self.blocks]) \
            if self.blocks else np.empty(0)

    def dense(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        for block, (a, b) in zip(self.blocks, self.spans):
            out[a:b, a:b] = block.dense()
        return out


def assemble_block_diagonal(blocks, expected_dim: int | None = None) -> CovarianceAssembly:
    """Assemble blocks in order; optionally check the total dimension."""
    assembly = CovarianceAssembly(list(blocks))
    if expected_dim is not None and assembly.dim != expected_dim:
        raise AssemblyError(
            f"assembly dimension {assembly.dim} does not match design dimension {expected_dim}")
    return assembly


def scatter_matrix(phi: np.ndarray, structured=None) -> np.ndarray:
    """Sum-of-squares matrix of realized effects: phi' S^(-1) phi.

    phi has one row per group (row of S) and one column per parametric slot.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    if structured is None or getattr(structured, "is_identity", False):
        if structured is not None and phi.shape[0] != structured.dim:
            raise ValueError(
                f"phi has {phi.shape[0]} rows but the structured part has "
                f"dimension {structured.dim}")
        return phi.T @ phi
    s = np.asarray(structured.dense(), dtype=np.float64)
    if phi.shape[0] != s.shape[0]:
        raise ValueError(
            f"phi has {phi.shape[0]} rows but the structured part has dimension {s.shape[0]}")
    return phi.T @ np.linalg.solve(s, phi)


def sample_inverse_wishart(scale: np.ndarray, df: float, rng: np.random.Generator) -> np.ndarray:
    """Draw from IW with density proportional to |X|^-(df+d+1)/2 exp(-tr(scale X^-1)/2).

    Under this scale-matrix convention E[X] = scale / (df - d - 1). Uses the
    Bartlett construction on the inverse, which needs only df > d - 1.
    """
    scale = np.asarray(scale, dtype=np.float64)
    if scale.ndim != 2 or scale.shape[0] != scale.shape[1]:
        raise NumericError(f"IW scale: expected a square matrix, got shape {scale.shape}")
    d = scale.shape[0]
    if not np.allclose(scale, scale.T, atol=1e-10):
        raise NumericError("IW scale: matrix is not symmetric")
    if df <= d - 1:
        raise ValueError(f"IW degrees of freedom {df:g} must exceed dim - 1 = {d - 1}")
    try:
        scale_chol = np.linalg.cholesky(scale)
    except np.linalg.LinAlgError:
        raise NumericError("IW scale: matrix is not positive definite") from None
    # X^-1 ~ Wishart(df, scale^-1); build its Bartlett factor K with K K' = X^-1.
    eye = np.eye(d)
    inv_scale = cho_solve((scale_chol, True), eye)
    t = np.linalg.cholesky(0.5 * (inv_scale + inv_scale.T))
    a = np.zeros((d, d))
    for i in range(d):
        a[i, i] = np.sqrt(rng.chisquare(df - i))
    if d > 1:
        idx = np.tril_indices(d, k=-1)
        a[idx] = rng.standard_normal(len(idx[0]))
    k = t @ a
    draw = cho_solve((k, True), eye)  # (K K')^-1
    draw = 0.5 * (draw + draw.T)
    try:
        np.linalg.cholesky(draw)
    except np.linalg.LinAlgError:
        raise NumericError("inverse-Wishart draw is not positive definite") from None
    return draw


def update_parametric_block(
    block: KroneckerBlock,
    phi: np.ndarray | None,
    prior: IwPrior,
    rng: np.random.Generator,
) -> np.ndarray:
    """Full-conditional draw of a block's Parametric matrix.

    Posterior scale is nu*V + H with H = phi' S^-1 phi, posterior degrees of
    freedom nu + n_phi. Diagonal blocks update each variance independently by
    the one-dimensional case; scalar blocks pool all slots into one variance.
    A draw that fails the SPD check is a hard failure, never repaired.
    """
    d = block.d
    if prior.dim != d:
        raise AssemblyError(
            f"block {block.label!r}: prior dimension {prior.dim} != block dimension {d}")
    if phi is None or np.size(phi) == 0:
        phi = np.zeros((0, d))
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    if phi.shape[1] != d:
        raise ValueError(
            f"block {block.label!r}: phi has {phi.shape[1]} columns, expected {d}")
    n_phi = phi.shape[0]
    h = scatter_matrix(phi, block.structured if n_phi else None)

    if block.shape == "unstructured":
        return sample_inverse_wishart(prior.scale + h, prior.belief + n_phi, rng)
    if block.shape == "diagonal":
        out = np.zeros((d, d))
        for k in range(d):
            scale_k = prior.belief * prior.limit[k, k] + h[k, k]
            out[k, k] = sample_inverse_wishart(
                np.array([[scale_k]]), prior.belief + n_phi, rng)[0, 0]
        return out
    # scalar: one pooled variance across all slots
    scale = prior.belief * prior.limit[0, 0] + np.trace(h)
    var = sample_inverse_wishart(np.array([[scale]]), prior.belief + n_phi * d, rng)[0, 0]
    return var * np.eye(d)
