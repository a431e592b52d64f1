"""The sampler: single-block Gibbs location update, Metropolis latent update
for non-gaussian families, Inverse-Wishart variance updates, and chain
orchestration.

Update order per iteration is fixed for reproducibility: latent (when the
family needs it), then the joint location draw, then every G-side block,
then the residual block, then the deviance record. One chain is strictly
sequential; chains are independent and may run in parallel.
"""

from __future__ import annotations

import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
from scipy.linalg import cho_factor, cho_solve, ldl
from scipy.sparse.linalg import splu

from . import diagnostics
from .covariance import IdentityStructure, KroneckerBlock, update_parametric_block
from .design import ModelInputs
from .errors import NumericError
from .modelspec import Slot

DENSE_LIMIT = 500


@dataclass(frozen=True)
class McmcOptions:
    iterations: int = 50000
    burnin: int = 10000
    thin: int = 25
    chains: int = 1
    seed: int = 0
    adapt_window: int = 50
    store_effects: bool = True
    update_variances: bool = True
    serial: bool = False
    snapshot_dir: str | None = None

    def __post_init__(self):
        if self.burnin >= self.iterations:
            raise ValueError("burn-in must be smaller than the iteration count")
        if self.thin < 1:
            raise ValueError("thinning interval must be at least 1")
        if self.chains < 1:
            raise ValueError("at least one chain is required")

    @property
    def n_stored(self) -> int:
        return (self.iterations - self.burnin) // self.thin

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations, "burnin": self.burnin, "thin": self.thin,
            "chains": self.chains, "seed": self.seed, "adapt_window": self.adapt_window,
            "store_effects": self.store_effects, "update_variances": self.update_variances,
            "serial": self.serial,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "McmcOptions":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(eq=False)
class ChainState:
    gamma: np.ndarray
    eps: np.ndarray
    eta: np.ndarray
    g_blocks: list[KroneckerBlock]
    r_block: KroneckerBlock
    iteration: int = 0
    steps: np.ndarray | None = None
    window_attempts: int = 0
    window_accepts: int = 0
    total_attempts: int = 0
    total_accepts: int = 0

    @property
    def rho(self) -> np.ndarray:
        return np.concatenate([self.gamma, self.eps])


def chain_rng(seed: int, chain_index: int) -> np.random.Generator:
    """Chain c's generator: child c of SeedSequence(seed). Independent of the
    total chain count, so serial and parallel runs see identical streams."""
    child = np.random.SeedSequence(seed).spawn(chain_index + 1)[chain_index]
    return np.random.default_rng(child)


class LocationSolver:
    """Factor/solve machinery for A = M'R^-1 M + blockdiag(Gamma^-1, G^-1).

    The response-pair cross-products M_a' M_b are precomputed once, so each
    iteration's assembly costs O(p^2 k^2) plus the factorization. Dense
    Cholesky below DENSE_LIMIT unknowns, SuperLU in symmetric mode above.
    """

    def __init__(self, inputs: ModelInputs):
        x = inputs.fixed.matrix
        w = inputs.random.matrix
        self.q = x.shape[1]
        self.m = w.shape[1]
        self.k = self.q + self.m
        self.p = inputs.p
        self.n = inputs.n_subjects
        self.layouts = inputs.random.layouts
        self.fixed_labels = inputs.fixed.labels
        self.dense = self.k < DENSE_LIMIT
        resp = inputs.stacked.response_index
        rows = [np.flatnonzero(resp == j) for j in range(self.p)]
        # M stays sparse for matvecs and cross-products regardless of the
        # factorization path; only A is densified below the size limit.
        self.matrix = sparse.hstack(
            [sparse.csr_matrix(np.asarray(x)), w], format="csr")
        self.cross = {}
        for a in range(self.p):
            ma = self.matrix[rows[a]].T.tocsr()
            for b in range(a, self.p):
                c = (ma @ self.matrix[rows[b]]).tocsc()
                self.cross[(a, b)] = c.toarray() if self.dense else c
        if not self.dense:
            rows_idx: list[np.ndarray] = [np.arange(self.q)]
            cols_idx: list[np.ndarray] = [np.arange(self.q)]
            for layout in self.layouts:
                d, g = layout.d, layout.g
                base = self.q + layout.col_start
                tile = np.arange(d)
                r = (base + (np.arange(g)[:, None, None] * d
                             + tile[None, :, None] * np.ones(d, dtype=int))).reshape(-1)
                c = (base + (np.arange(g)[:, None, None] * d
                             + np.ones(d, dtype=int)[:, None] * tile[None, None, :])).reshape(-1)
                rows_idx.append(r)
                cols_idx.append(c)
            self._prior_rows = np.concatenate(rows_idx)
            self._prior_cols = np.concatenate(cols_idx)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        return self.matrix.T @ v

    def _slot_of(self, index: int) -> str:
        if index < self.q:
            return f"fixed-effect slot {self.fixed_labels[index]!r}"
        for layout in self.layouts:
            if self.q + layout.col_start <= index < self.q + layout.col_stop:
                return f"random block {layout.label!r}"
        return f"column {index}"

    def _cross_sum(self, r_inv: np.ndarray):
        total = None
        for a in range(self.p):
            for b in range(a, self.p):
                c = self.cross[(a, b)]
                piece = r_inv[a, b] * c
                if a != b:
                    piece = piece + piece.T
                total = piece if total is None else total + piece
        return total

    def factor(self, r_inv: np.ndarray, g_blocks, gamma_prec: np.ndarray, iteration=None):
        if self.dense:
            a_mat = self._cross_sum(r_inv)
            a_mat[np.arange(self.q), np.arange(self.q)] += gamma_prec
            for layout, block in zip(self.layouts, g_blocks):
                p_inv = block.inverse_parametric()
                d = layout.d
                for gi in range(layout.g):
                    s = self.q + layout.col_start + gi * d
                    a_mat[s:s + d, s:s + d] += p_inv
            try:
                cho = cho_factor(a_mat, lower=True, check_finite=False)
            except np.linalg.LinAlgError:
                _, d_mat, _ = ldl(a_mat, lower=True)
                pivots = np.diag(d_mat)
                i = int(np.argmin(pivots))
                raise NumericError(
                    f"location system is not positive definite: smallest pivot "
                    f"{pivots[i]:.6e} at {self._slot_of(i)}", iteration=iteration) from None
            return _DenseFactor(cho)
        data = [gamma_prec]
        for layout, block in zip(self.layouts, g_blocks):
            data.append(np.tile(block.inverse_parametric().reshape(-1), layout.g))
        prior = sparse.coo_matrix(
            (np.concatenate(data), (self._prior_rows, self._prior_cols)),
            shape=(self.k, self.k))
        a_mat = (self._cross_sum(r_inv) + prior).tocsc()
        try:
            lu = splu(a_mat, permc_spec="MMD_AT_PLUS_A",
                      options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise NumericError(f"sparse factorization failed: {exc}",
                               iteration=iteration) from None
        u_diag = lu.U.diagonal()
        if not np.all(np.isfinite(u_diag)) or np.min(np.abs(u_diag)) < 1e-300:
            i = int(np.argmin(np.abs(u_diag)))
            raise NumericError(
                f"location system is numerically singular: pivot {u_diag[i]:.6e} "
                f"near {self._slot_of(int(lu.perm_c[i]))}", iteration=iteration)
        return _SparseFactor(lu)


class _DenseFactor:
    def __init__(self, cho):
        self._cho = cho

    def solve(self, v: np.ndarray) -> np.ndarray:
        return cho_solve(self._cho, v, check_finite=False)


class _SparseFactor:
    def __init__(self, lu):
        self._lu = lu

    def solve(self, v: np.ndarray) -> np.ndarray:
        out = self._lu.solve(v)
        if not np.all(np.isfinite(out)):
            raise NumericError("sparse location solve produced non-finite values")
        return out


def _residual_inverse(r_block: KroneckerBlock) -> np.ndarray:
    return r_block.inverse_parametric()


def update_location(state: ChainState, inputs: ModelInputs, solver: LocationSolver,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Joint draw of (gamma, eps) from the full conditional.

    Draws rho* from the prior and a synthetic data vector around M rho*, then
    solves A rho~ = M'R^-1 (t - M rho* - e*) and returns rho~ + rho*. The
    working vector t is the observed stacked response for gaussian families
    and the current latent predictor otherwise.
    """
    q = solver.q
    prior = inputs.spec.priors
    gamma_prec = np.full(q, 1.0 / prior.location_variance)
    gamma_star = prior.location_mean + rng.standard_normal(q) * np.sqrt(prior.location_variance)
    eps_star = (np.concatenate([b.sample_effects(rng) for b in state.g_blocks])
                if state.g_blocks else np.empty(0))
    rho_star = np.concatenate([gamma_star, eps_star])

    n, p = inputs.n_subjects, inputs.p
    r_eff = state.r_block.effective_parametric()
    e_star = (rng.standard_normal((n, p)) @ np.linalg.cholesky(r_eff).T).reshape(-1)

    t = inputs.y_work if inputs.family.is_gaussian else state.eta
    v = t - solver.matvec(rho_star) - e_star
    r_inv = _residual_inverse(state.r_block)
    rhs = solver.rmatvec((v.reshape(n, p) @ r_inv).reshape(-1))
    factor = solver.factor(r_inv, state.g_blocks, gamma_prec, iteration=state.iteration)
    rho = rho_star + factor.solve(rhs)
    return rho[:q], rho[q:]


def update_latent(state: ChainState, inputs: ModelInputs, solver: LocationSolver,
                  rng: np.random.Generator) -> None:
    """Metropolis random-walk update of the latent predictor, one subject block
    at a time (the P stacked rows of a subject share residual covariance).

    Gaussian families are an identity path: the latent equals the working
    response and nothing is updated.
    """
    if inputs.family.is_gaussian:
        return
    n, p = inputs.n_subjects, inputs.p
    y = inputs.y_work.reshape(n, p)
    eta = state.eta.reshape(n, p)
    mu = solver.matvec(state.rho).reshape(n, p)
    r_inv = _residual_inverse(state.r_block)

    def block_logpost(e2: np.ndarray) -> np.ndarray:
        resid = e2 - mu
        quad = np.einsum("ij,jk,ik->i", resid, r_inv, resid)
        lik = inputs.family.loglik(y, e2).sum(axis=1)
        return lik - 0.5 * quad

    current = block_logpost(eta)
    if not np.all(np.isfinite(current)):
        row = int(np.flatnonzero(~np.isfinite(current))[0])
        raise NumericError(
            f"non-finite likelihood at the current latent state (subject row {row})",
            iteration=state.iteration)
    proposal = eta + rng.standard_normal((n, p)) * state.steps
    accept = np.log(rng.uniform(size=n)) < (block_logpost(proposal) - current)
    eta[accept] = proposal[accept]
    state.eta = eta.reshape(-1)
    state.window_attempts += n
    state.window_accepts += int(accept.sum())
    state.total_attempts += n
    state.total_accepts += int(accept.sum())


def _adapt_steps(state: ChainState, p: int) -> None:
    if state.window_attempts == 0:
        return
    target = 0.44 if p == 1 else 0.23
    rate = state.window_accepts / state.window_attempts
    state.steps = np.clip(state.steps * np.exp(rate - target), 1e-3, 1e3)
    state.window_attempts = 0
    state.window_accepts = 0


def vech_pairs(d: int) -> list[tuple[int, int]]:
    """Upper-triangle slot pairs in row-major order: (0,0), (0,1), ..., (d-1,d-1)."""
    return [(i, j) for i in range(d) for j in range(i, d)]


def gamma_label(slot: Slot) -> str:
    return f"gamma:{slot.response}:{slot.term}"


def block_pair_label(prefix: str, slots: tuple[Slot, ...], i: int, j: int) -> str:
    return f"{prefix}:[{slots[i].name}]x[{slots[j].name}]"


@dataclass(eq=False)
class ChainOutput:
    """Thinned post-burn-in draws of one chain, with labels bijective to slots."""

    chain_index: int
    seed: int
    options: McmcOptions
    gamma_labels: list[str]
    gamma_draws: np.ndarray  # (n_stored, q)
    block_labels: dict[str, list[str]]
    block_draws: dict[str, np.ndarray]
    block_pairs: dict[str, list[tuple[int, int]]]
    residual_labels: list[str]
    residual_draws: np.ndarray
    deviance: np.ndarray
    eps_labels: list[str]
    eps_draws: np.ndarray | None
    gamma_mean: np.ndarray
    eps_mean: np.ndarray
    eta_mean: np.ndarray
    residual_mean: np.ndarray
    deviance_at_mean: float
    data_hash: str
    mh_step_sizes: np.ndarray | None

    @property
    def n_stored(self) -> int:
        return self.gamma_draws.shape[0]


def _initial_state(inputs: ModelInputs) -> ChainState:
    spec = inputs.spec
    q = inputs.fixed.q
    m = inputs.random.m
    g_blocks = [
        KroneckerBlock(layout.spec.limit, IdentityStructure(layout.g),
                       layout.spec.shape, layout.label)
        for layout in inputs.random.layouts
    ]
    r_block = KroneckerBlock(spec.residual_block.limit,
                             IdentityStructure(inputs.n_subjects),
                             spec.residual_block.shape, "residual")
    eta = (inputs.y_work.copy() if inputs.family.is_gaussian
           else inputs.family.initial_latent(inputs.y_work))
    return ChainState(
        gamma=np.full(q, spec.priors.location_mean, dtype=np.float64),
        eps=np.zeros(m),
        eta=eta,
        g_blocks=g_blocks,
        r_block=r_block,
        steps=np.full(inputs.p, 0.5),
    )


def _current_deviance(state: ChainState, inputs: ModelInputs, solver: LocationSolver) -> float:
    if inputs.family.is_gaussian:
        mean = solver.matvec(state.rho)
        return diagnostics.gaussian_deviance(inputs.y_work, mean,
                                             state.r_block.parametric)
    return diagnostics.pointwise_deviance(inputs.y_work, state.eta, inputs.family)


def _write_snapshot(state: ChainState, inputs: ModelInputs, solver: LocationSolver,
                    options: McmcOptions, chain_index: int) -> str:
    """Single-row dump of the current state with the draw-file column schema."""
    labels: list[str] = [gamma_label(s) for s in inputs.fixed.slots]
    values: list[float] = list(state.gamma)
    for layout, block in zip(inputs.random.layouts, state.g_blocks):
        for i, j in vech_pairs(layout.d):
            labels.append(block_pair_label(f"G:{layout.label}", layout.spec.slots, i, j))
            values.append(block.parametric[i, j])
    r_slots = inputs.spec.residual_block.slots
    for i, j in vech_pairs(inputs.p):
        labels.append(block_pair_label("R", r_slots, i, j))
        values.append(state.r_block.parametric[i, j])
    labels.append("deviance")
    try:
        values.append(_current_deviance(state, inputs, solver))
    except Exception:
        values.append(float("nan"))
    directory = options.snapshot_dir or tempfile.mkdtemp(prefix="careload-abort-")
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"chain{chain_index:02d}_state.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(labels) + "\n")
        fh.write(",".join(format(v, ".17g") for v in values) + "\n")
    return path


def run_chain(inputs: ModelInputs, options: McmcOptions, chain_index: int = 0) -> ChainOutput:
    """Run one chain; draws are stored thinned after burn-in.

    The generator is child `chain_index` of SeedSequence(options.seed), so
    chains never share state and results do not depend on scheduling.
    """
    rng = chain_rng(options.seed, chain_index)
    solver = LocationSolver(inputs)
    state = _initial_state(inputs)
    n_stored = options.n_stored
    q = inputs.fixed.q
    m = inputs.random.m
    n, p = inputs.n_subjects, inputs.p
    block_priors = [layout.prior for layout in inputs.random.layouts]
    residual_prior = inputs.residual_prior

    gamma_draws = np.empty((n_stored, q))
    layouts = inputs.random.layouts
    pairs = {layout.label: vech_pairs(layout.d) for layout in layouts}
    block_draws = {layout.label: np.empty((n_stored, len(pairs[layout.label])))
                   for layout in layouts}
    r_pairs = vech_pairs(p)
    residual_draws = np.empty((n_stored, len(r_pairs)))
    deviance = np.empty(n_stored)
    eps_draws = np.empty((n_stored, m)) if options.store_effects else None

    gamma_sum = np.zeros(q)
    eps_sum = np.zeros(m)
    eta_sum = np.zeros(inputs.y_work.shape[0])
    resid_sum = np.zeros((p, p))

    stored = 0
    try:
        for it in range(1, options.iterations + 1):
            state.iteration = it
            in_burnin = it <= options.burnin
            update_latent(state, inputs, solver, rng)
            if in_burnin and not inputs.family.is_gaussian and it % options.adapt_window == 0:
                _adapt_steps(state, p)
            state.gamma, state.eps = update_location(state, inputs, solver, rng)
            if options.update_variances:
                for idx, layout in enumerate(layouts):
                    phi = state.eps[layout.col_start:layout.col_stop].reshape(layout.g, layout.d)
                    new_p = update_parametric_block(state.g_blocks[idx], phi,
                                                    block_priors[idx], rng)
                    state.g_blocks[idx] = state.g_blocks[idx].replace(new_p)
                t = inputs.y_work if inputs.family.is_gaussian else state.eta
                resid = (t - solver.matvec(state.rho)).reshape(n, p)
                new_r = update_parametric_block(state.r_block, resid,
                                                residual_prior, rng)
                state.r_block = state.r_block.replace(new_r)
            if not in_burnin and (it - options.burnin) % options.thin == 0:
                dev = _current_deviance(state, inputs, solver)
                if not np.isfinite(dev):
                    raise NumericError("stored draw has non-finite deviance", iteration=it)
                gamma_draws[stored] = state.gamma
                for layout, block in zip(layouts, state.g_blocks):
                    block_draws[layout.label][stored] = [
                        block.parametric[i, j] for i, j in pairs[layout.label]]
                residual_draws[stored] = [state.r_block.parametric[i, j] for i, j in r_pairs]
                deviance[stored] = dev
                if eps_draws is not None:
                    eps_draws[stored] = state.eps
                gamma_sum += state.gamma
                eps_sum += state.eps
                eta_sum += state.eta
                resid_sum += state.r_block.parametric
                stored += 1
    except NumericError as exc:
        path = _write_snapshot(state, inputs, solver, options, chain_index)
        raise NumericError(str(exc), iteration=state.iteration, snapshot_path=path) from None
    except np.linalg.LinAlgError as exc:
        path = _write_snapshot(state, inputs, solver, options, chain_index)
        raise NumericError(f"linear-algebra failure: {exc}", iteration=state.iteration,
                           snapshot_path=path) from None

    assert stored == n_stored
    gamma_mean = gamma_sum / max(stored, 1)
    eps_mean = eps_sum / max(stored, 1)
    eta_mean = eta_sum / max(stored, 1)
    residual_mean = resid_sum / max(stored, 1)
    if inputs.family.is_gaussian:
        mean_vec = solver.matvec(np.concatenate([gamma_mean, eps_mean]))
        dev_at_mean = diagnostics.gaussian_deviance(inputs.y_work, mean_vec, residual_mean)
    else:
        dev_at_mean = diagnostics.pointwise_deviance(inputs.y_work, eta_mean, inputs.family)

    eps_labels = []
    for layout in layouts:
        for group, term, resp in layout.column_meaning():
            slot = Slot(term, resp)
            eps_labels.append(f"eps:{layout.label}:{group}:{slot.name}")
    return ChainOutput(
        chain_index=chain_index,
        seed=options.seed,
        options=options,
        gamma_labels=[gamma_label(s) for s in inputs.fixed.slots],
        gamma_draws=gamma_draws,
        block_labels={
            layout.label: [block_pair_label(f"G:{layout.label}", layout.spec.slots, i, j)
                           for i, j in pairs[layout.label]]
            for layout in layouts},
        block_draws=block_draws,
        block_pairs={layout.label: pairs[layout.label] for layout in layouts},
        residual_labels=[block_pair_label("R", inputs.spec.residual_block.slots, i, j)
                         for i, j in r_pairs],
        residual_draws=residual_draws,
        deviance=deviance,
        eps_labels=eps_labels,
        eps_draws=eps_draws,
        gamma_mean=gamma_mean,
        eps_mean=eps_mean,
        eta_mean=eta_mean,
        residual_mean=residual_mean,
        deviance_at_mean=float(dev_at_mean),
        data_hash=inputs.data_hash,
        mh_step_sizes=None if inputs.family.is_gaussian else state.steps.copy(),
    )


def _chain_worker(args) -> ChainOutput:
    inputs, options, index = args
    return run_chain(inputs, options, index)


@dataclass(eq=False)
class FitResult:
    """All chains of one model fit plus everything needed to reuse the design."""

    spec: object
    info: object
    fixed_slots: tuple[Slot, ...]
    layouts: tuple
    options: McmcOptions
    data_hash: str
    chains: list[ChainOutput]
    dic_stats: dict
    config_text: str | None = None

    @property
    def gamma_labels(self) -> list[str]:
        return self.chains[0].gamma_labels

    def gamma_draws(self) -> np.ndarray:
        return np.vstack([c.gamma_draws for c in self.chains])

    def block_draws(self, label: str) -> np.ndarray:
        return np.vstack([c.block_draws[label] for c in self.chains])

    def residual_draws(self) -> np.ndarray:
        return np.vstack([c.residual_draws for c in self.chains])

    def deviance_draws(self) -> np.ndarray:
        return np.concatenate([c.deviance for c in self.chains])

    def eps_draws(self) -> np.ndarray | None:
        if any(c.eps_draws is None for c in self.chains):
            return None
        return np.vstack([c.eps_draws for c in self.chains])

    @property
    def dic(self) -> float:
        return self.dic_stats["dic"]


def fit_model(inputs: ModelInputs, options: McmcOptions,
              config_text: str | None = None) -> FitResult:
    """Run all chains (parallel unless options.serial) and assemble a FitResult."""
    indices = list(range(options.chains))
    if options.chains == 1 or options.serial:
        chains = [run_chain(inputs, options, i) for i in indices]
    else:
        ctx_args = [(inputs, options, i) for i in indices]
        with ProcessPoolExecutor(max_workers=options.chains) as pool:
            chains = list(pool.map(_chain_worker, ctx_args))

    n_total = sum(c.n_stored for c in chains)
    gamma_mean = sum(c.gamma_mean * c.n_stored for c in chains) / n_total
    eps_mean = sum(c.eps_mean * c.n_stored for c in chains) / n_total
    eta_mean = sum(c.eta_mean * c.n_stored for c in chains) / n_total
    residual_mean = sum(c.residual_mean * c.n_stored for c in chains) / n_total
    solver = LocationSolver(inputs)
    if inputs.family.is_gaussian:
        mean_vec = solver.matvec(np.concatenate([gamma_mean, eps_mean]))
        d_at_mean = diagnostics.gaussian_deviance(inputs.y_work, mean_vec, residual_mean)
    else:
        d_at_mean = diagnostics.pointwise_deviance(inputs.y_work, eta_mean, inputs.family)
    dev_all = np.concatenate([c.deviance for c in chains])
    dic = diagnostics.dic(dev_all, d_at_mean)

    return FitResult(
        spec=inputs.spec,
        info=inputs.info,
        fixed_slots=inputs.fixed.slots,
        layouts=inputs.random.layouts,
        options=options,
        data_hash=inputs.data_hash,
        chains=chains,
        dic_stats={"dbar": float(np.mean(dev_all)), "d_at_mean": float(d_at_mean),
                   "dic": float(dic)},
        config_text=config_text,
    )
