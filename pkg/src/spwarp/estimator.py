"""Restricted-maximum-likelihood fitting of the warped spatial regression.

On the transformed (working) scale the model is a Gaussian mixed model

    z = X beta + sum_j Z_j b_j + eps,   b_j ~ N(0, sigma2 * rho_j * W_j),
    eps ~ N(0, sigma2 * I),

where each random block j is either a spatial process on the Moran
eigenvector basis (W_j = diag(lambda^alpha) * sum(lambda)/sum(lambda^alpha),
one pair (rho, alpha) per process), a sum-to-zero group effect, or a
non-spatial coefficient expansion in a natural cubic spline of the
covariate's own value.  beta and sigma2 are profiled out; the remaining
variance-ratio parameters and the transformation-chain parameters are
maximized jointly by quasi-Newton on the restricted log-likelihood plus
the chain's log-Jacobian.  All computations run on cross-product matrices,
so the per-evaluation cost is independent of the sample size.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.linalg import cho_factor, cho_solve, qr
from scipy.optimize import minimize
from scipy.stats import norm

from .basis import EigenBasis
from .errors import DataError, NumericError
from .transforms import (
    DEFAULT_DELTA,
    TransformSpec,
    build_chain,
    chain_param_template,
    chain_params_of,
    fit_chain,
    work_forward,
)

LOG2PI = np.log(2.0 * np.pi)
RHO_FLOOR = 1e-10          # optimizer lower bound for variance ratios
RHO_COLLAPSE = 1e-8        # below this a process collapses to zero variance
ALPHA_BOUNDS = (-8.0, 8.0)

INTERCEPT = "(Intercept)"


@dataclass(frozen=True)
class ModelSpec:
    """Covariate roles, grouping, offset and transformation regime."""

    svc_columns: tuple = ()
    const_columns: tuple = ()
    nvc: bool = False
    group_column: str | None = None
    offset_column: str | None = None
    transform: TransformSpec = field(default_factory=TransformSpec)

    def __post_init__(self):
        object.__setattr__(self, "svc_columns", tuple(self.svc_columns))
        object.__setattr__(self, "const_columns", tuple(self.const_columns))
        overlap = set(self.svc_columns) & set(self.const_columns)
        if overlap:
            raise DataError(f"columns cannot be both varying and constant: {sorted(overlap)}")


# ---------------------------------------------------------------------------
# natural cubic spline expansion for non-spatially varying coefficients


class NvcExpander:
    """Curvature basis of a natural cubic spline in a covariate's value.

    Five interior knots at quantiles plus boundary knots at the data range;
    the curvature columns are orthogonalized against (1, x) so the fixed
    coefficient keeps its average-slope meaning, then scaled to unit
    standard deviation.  Beyond the boundary knots the expansion is linear,
    so out-of-range prediction extrapolates linearly.
    """

    N_INTERIOR = 5

    def __init__(self, x):
        x = np.asarray(x, dtype=float)
        qs = np.linspace(0, 1, self.N_INTERIOR + 2)[1:-1]
        knots = np.unique(np.concatenate(([x.min()], np.quantile(x, qs), [x.max()])))
        self.knots = knots
        self.valid = knots.size >= 4
        if not self.valid:
            return
        raw = self._raw(x)
        lin = np.column_stack([np.ones_like(x), x])
        self.proj, *_ = np.linalg.lstsq(lin, raw, rcond=None)
        resid = raw - lin @ self.proj
        scale = resid.std(axis=0)
        scale[scale == 0] = 1.0
        self.scale = scale
        self.range = (knots[0], knots[-1])

    @property
    def n_cols(self):
        return self.knots.size - 2 if self.valid else 0

    def _raw(self, x):
        k = self.knots
        km = k[-1]

        def d(j, x):
            num = np.maximum(x - k[j], 0.0) ** 3 - np.maximum(x - km, 0.0) ** 3
            return num / (km - k[j])

        dm1 = d(len(k) - 2, x)
        return np.column_stack([d(j, x) - dm1 for j in range(len(k) - 2)])

    def _raw_deriv(self, x):
        k = self.knots
        km = k[-1]

        def dd(j, x):
            num = 3.0 * np.maximum(x - k[j], 0.0) ** 2 - 3.0 * np.maximum(x - km, 0.0) ** 2
            return num / (km - k[j])

        dm1 = dd(len(k) - 2, x)
        return np.column_stack([dd(j, x) - dm1 for j in range(len(k) - 2)])

    def transform(self, x):
        x = np.asarray(x, dtype=float)
        lin = np.column_stack([np.ones_like(x), x])
        return (self._raw(x) - lin @ self.proj) / self.scale

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        lin = np.column_stack([np.zeros_like(x), np.ones_like(x)])
        return (self._raw_deriv(x) - lin @ self.proj) / self.scale

    def out_of_range(self, x):
        return (np.asarray(x) < self.range[0]) | (np.asarray(x) > self.range[1])


# ---------------------------------------------------------------------------
# random-effect blocks


@dataclass
class RandomBlock:
    name: str
    kind: str                       # "spatial" | "group" | "nvc"
    z: np.ndarray
    eigvals: np.ndarray | None = None
    rho: float = 0.0                # fitted variance ratio v^2 / sigma^2
    alpha: float = 0.0              # spatial scale exponent (spatial only)

    @property
    def n_cols(self):
        return self.z.shape[1]

    def weights(self, alpha=None):
        """Diagonal of the block's relative prior covariance (unit rho)."""
        if self.kind != "spatial":
            return np.ones(self.n_cols)
        a = self.alpha if alpha is None else alpha
        lam = self.eigvals
        w = lam ** a
        return w * (lam.sum() / w.sum())


def group_projection(n_levels: int) -> np.ndarray:
    """Orthonormal basis of the sum-to-zero subspace for group effects.

    Mapping iid coefficients through this basis gives effects with the
    exchangeable sum-to-zero prior, so estimates are invariant to which
    level is listed last.
    """
    q, _ = np.linalg.qr(np.column_stack(
        [np.ones(n_levels), np.eye(n_levels)[:, : n_levels - 1]]))
    return q[:, 1:]


# ---------------------------------------------------------------------------
# fitted model containers


@dataclass
class _FitState:
    """Numeric internals shared by the predictor and inference modules."""

    x: np.ndarray                  # internally scaled design (power-of-two)
    x_names: list
    x_scale: np.ndarray            # per-column scale factors, 1.0 for intercept
    blocks: list
    collapsed: list
    coef: np.ndarray               # stacked (beta, b-hat) on the scaled design
    hinv: np.ndarray               # inverse mixed-model matrix
    sigma2: float
    z_work: np.ndarray
    log_jac_sum: float
    offset: np.ndarray | None
    y: np.ndarray
    evec: np.ndarray
    group_levels: list | None
    group_proj: np.ndarray | None
    nvc_expanders: dict
    svc_names: list
    theta_opt: np.ndarray
    theta_names: list
    reml_neg2: float
    delta: float = DEFAULT_DELTA
    include_noise_var: bool = True

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def k(self):
        return self.x.shape[1]

    def beta_hat(self):
        """Fixed coefficients on the scaled design."""
        return self.coef[: self.k]

    def beta_user(self):
        """Fixed coefficients on the user's covariate scale."""
        return self.coef[: self.k] / self.x_scale

    def x_raw(self):
        """User-scale design matrix (exact: scales are powers of two)."""
        return self.x * self.x_scale[None, :]

    def block_coefs(self):
        out, pos = {}, self.k
        for b in self.blocks:
            out[b.name, b.kind] = self.coef[pos: pos + b.n_cols]
            pos += b.n_cols
        return out


@dataclass
class FittedModel:
    """Fitted warped spatial regression with coefficient and fit tables."""

    spec: ModelSpec
    response: str
    basis: EigenBasis
    chain: object
    beta: pd.DataFrame
    b_vc: pd.DataFrame | None
    b_vc_se: pd.DataFrame | None
    b_vc_p: pd.DataFrame | None
    group_effects: pd.DataFrame | None
    variance: dict
    sigma2: float
    fit_stats: dict
    null_stats: dict
    pred: pd.DataFrame
    pred_quantile: pd.DataFrame | None
    _state: _FitState

    @property
    def rlogLik(self):
        return self.fit_stats["rlogLik"]

    @property
    def is_svc(self):
        return self.b_vc is not None


# ---------------------------------------------------------------------------
# REML machinery on cross products


class _RemlWork:
    """Cross-product workspace; objective cost is independent of N.

    ``design_logdet_shift`` undoes the internal covariate scaling in the
    reported restricted likelihood, so values refer to the user's design.
    """

    def __init__(self, x, blocks, y, spec, offset, delta, design_logdet_shift=0.0):
        self.x = x
        self.blocks = blocks
        self.y = y
        self.spec = spec
        self.offset = offset
        self.delta = delta
        self.design_logdet_shift = design_logdet_shift
        self.n, self.k = x.shape
        z_mat = (np.concatenate([b.z for b in blocks], axis=1)
                 if blocks else np.zeros((self.n, 0)))
        self.z_mat = z_mat
        self.c = np.concatenate([x, z_mat], axis=1)
        self.ctc = self.c.T @ self.c
        self.q = z_mat.shape[1]
        self._chain_cache = {}

    def chain_forward(self, chain_params):
        key = chain_params.tobytes()
        hit = self._chain_cache.get(key)
        if hit is not None:
            return hit
        chain = build_chain(chain_params, self.spec.transform, self.y,
                            offset=self.offset, delta=self.delta)
        z, lj = work_forward(chain, self.y, offset=self.offset)
        out = (chain, z, float(lj.sum()), self.c.T @ z, float(z @ z))
        if len(self._chain_cache) > 8:
            self._chain_cache.clear()
        self._chain_cache[key] = out
        return out

    def components(self, rhos, alphas, chain_params):
        """Profiled REML pieces for one parameter vector.

        Returns None when the candidate is numerically unusable.
        """
        chain, z, lj_sum, ctz, ztz = self.chain_forward(chain_params)
        if not (np.isfinite(ztz) and np.all(np.isfinite(ctz))):
            return None
        k, n, q = self.k, self.n, self.q
        axx = self.ctc[:k, :k]
        xtz_c = ctz[:k]
        if q == 0:
            xtvx, xtvz, ztvz = axx, xtz_c, ztz
            logdet_vstar = 0.0
        else:
            azx = self.ctc[k:, :k]
            azz = self.ctc[k:, k:]
            dinv, logdet_g = [], 0.0
            for b, rho, alpha in zip(self.blocks, rhos, alphas):
                w = rho * b.weights(alpha)
                dinv.append(1.0 / w)
                logdet_g += float(np.log(w).sum())
            dinv = np.concatenate(dinv)
            m = azz.copy()
            m[np.diag_indices_from(m)] += dinv
            try:
                cf = cho_factor(m, lower=True, check_finite=False)
            except np.linalg.LinAlgError:
                return None
            logdet_m = 2.0 * float(np.log(np.diag(cf[0])).sum())
            logdet_vstar = logdet_g + logdet_m
            rhs = np.concatenate([azx, ctz[k:, None]], axis=1)
            sol = cho_solve(cf, rhs, check_finite=False)
            xtvx = axx - azx.T @ sol[:, :k]
            xtvz = xtz_c - sol[:, :k].T @ ctz[k:]
            ztvz = ztz - float(ctz[k:] @ sol[:, k])
        try:
            cfx = cho_factor(xtvx, lower=True)
        except np.linalg.LinAlgError:
            return None
        beta = cho_solve(cfx, xtvz)
        logdet_xtvx = 2.0 * float(np.log(np.diag(cfx[0])).sum())
        rvr = ztvz - float(beta @ xtvz)
        if not np.isfinite(rvr) or rvr <= 0:
            return None
        sigma2 = rvr / (n - k)
        neg2rll = ((n - k) * (LOG2PI + 1.0 + np.log(sigma2))
                   + logdet_vstar + logdet_xtvx + self.design_logdet_shift)
        return {"neg2rll": neg2rll, "sigma2": sigma2, "beta": beta,
                "log_jac": lj_sum, "chain": chain, "z": z}

    def objective(self, theta, layout):
        """Negative restricted log-likelihood with the scale-coherent
        Jacobian weight (N - K) / N.

        Under a restricted likelihood the full log-Jacobian over-credits
        shrinking the working scale by K log(scale) per unit, an
        unbounded drift once the chain contains a data-dependent
        standardization; weighting by (N - K) / N (the geometric-mean
        rescaled transformation) cancels that drift exactly.  The
        reported criterion still adds the full Jacobian so that values
        are comparable across transformation families.
        """
        rhos, alphas, chain_params = layout.unpack(theta)
        with np.errstate(all="ignore"):
            try:
                comp = self.components(rhos, alphas, chain_params)
            except (DataError, NumericError, ValueError):
                return 1e30
        if comp is None:
            return 1e30
        weight = (self.n - self.k) / self.n
        val = 0.5 * comp["neg2rll"] - weight * comp["log_jac"]
        return val if np.isfinite(val) else 1e30


class _ThetaLayout:
    """Packing of (log-rho, alpha) pairs and chain parameters."""

    def __init__(self, blocks, chain_template):
        self.blocks = blocks
        self.chain_x0, self.chain_bounds, self.chain_names = chain_template
        self.names, self.bounds = [], []
        for b in blocks:
            self.names.append(f"log_rho[{b.name}|{b.kind}]")
            self.bounds.append((np.log(RHO_FLOOR), np.log(1e8)))
            if b.kind == "spatial":
                self.names.append(f"alpha[{b.name}]")
                self.bounds.append(ALPHA_BOUNDS)
        self.n_var = len(self.names)
        self.names += list(self.chain_names)
        self.bounds += list(self.chain_bounds)

    def pack(self, rhos, alphas, chain_params):
        theta = []
        for b, rho, alpha in zip(self.blocks, rhos, alphas):
            theta.append(np.log(rho))
            if b.kind == "spatial":
                theta.append(alpha)
        return np.concatenate([theta, chain_params]) if len(self.names) else np.array([])

    def unpack(self, theta):
        rhos, alphas, pos = [], [], 0
        for b in self.blocks:
            rhos.append(float(np.exp(theta[pos])))
            pos += 1
            if b.kind == "spatial":
                alphas.append(float(theta[pos]))
                pos += 1
            else:
                alphas.append(0.0)
        return rhos, alphas, np.asarray(theta[pos:], dtype=float)


# ---------------------------------------------------------------------------
# design assembly


def _column(data, name):
    if name not in data.columns:
        raise DataError(f"column {name!r} not found in data")
    col = pd.to_numeric(data[name], errors="coerce").to_numpy(dtype=float)
    if np.isnan(col).any():
        row = int(np.argmax(np.isnan(col)))
        raise DataError(f"non-numeric value in column {name!r} at row {row}")
    return col


def _check_rank(x, names):
    r = np.linalg.qr(x, mode="r")
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(x.shape) * np.finfo(float).eps
    if (diag < tol).any():
        _, _, piv = qr(x, pivoting=True, mode="economic")
        n_ok = int((diag >= tol).sum())
        bad = sorted(names[i] for i in piv[n_ok:])
        raise DataError(f"design matrix is rank deficient; collinear columns: {bad}")


def _prepare(data, response, spec, basis, svc, site_id_column=None):
    y = _column(data, response)
    n = len(y)

    if site_id_column is not None:
        if basis.site_ids is None:
            raise DataError("site_id_column given but basis carries no site ids")
        lookup = {sid: i for i, sid in enumerate(basis.site_ids)}
        labels = data[site_id_column].tolist()
        missing = [l for l in labels if l not in lookup]
        if missing:
            raise DataError(f"zone id {missing[0]!r} not present in basis site ids")
        rows = np.array([lookup[l] for l in labels])
    else:
        if basis.n_sites != n:
            raise DataError(
                f"basis has {basis.n_sites} sites but data has {n} rows")
        rows = np.arange(n)
    evec = basis.vectors[rows]

    svc_names = [INTERCEPT] + list(spec.svc_columns) if svc else []
    x_cols, x_names = [np.ones(n)], [INTERCEPT]
    for name in (spec.svc_columns if svc else ()):
        x_cols.append(_column(data, name))
        x_names.append(name)
    for name in spec.const_columns:
        x_cols.append(_column(data, name))
        x_names.append(name)
    x = np.column_stack(x_cols)
    if n <= x.shape[1] + 1:
        raise DataError(f"need at least K + 2 = {x.shape[1] + 2} observations, got {n}")
    _check_rank(x, x_names)

    # Internal covariate scaling by powers of two: exact in floating point,
    # so reported coefficients are strictly equivariant under covariate
    # rescaling, and the optimizer sees well-conditioned columns.
    x_scale = np.ones(x.shape[1])
    for j in range(1, x.shape[1]):
        sd = float(x[:, j].std())
        if sd > 0:
            x_scale[j] = 2.0 ** np.round(np.log2(sd))
    x = x / x_scale[None, :]

    offset = None
    if spec.offset_column is not None:
        offset = _column(data, spec.offset_column)
        if np.any(offset <= 0):
            row = int(np.argmax(offset <= 0))
            raise DataError(f"non-positive offset at row {row}")
        if not spec.transform.is_count:
            warnings.warn("offset supplied for a continuous regime; "
                          "log(offset) enters the linear predictor")

    blocks = []
    if basis.n_components > 0:
        if svc:
            for name in svc_names:
                xk = np.ones(n) if name == INTERCEPT else x[:, x_names.index(name)]
                blocks.append(RandomBlock(name=name, kind="spatial",
                                          z=evec * xk[:, None],
                                          eigvals=basis.eigenvalues))
        else:
            blocks.append(RandomBlock(name=INTERCEPT, kind="spatial",
                                      z=evec, eigvals=basis.eigenvalues))

    nvc_expanders = {}
    if svc and spec.nvc:
        for name in spec.svc_columns:
            j = x_names.index(name)
            xk_raw = x[:, j] * x_scale[j]
            expander = NvcExpander(xk_raw)
            if expander.valid:
                nvc_expanders[name] = expander
                blocks.append(RandomBlock(name=name, kind="nvc",
                                          z=expander.transform(xk_raw) * x[:, j][:, None]))
            else:
                warnings.warn(f"covariate {name!r} has too few distinct values "
                              "for a non-spatial coefficient expansion; skipped")

    group_levels = group_proj = None
    if spec.group_column is not None:
        if spec.group_column not in data.columns:
            raise DataError(f"group column {spec.group_column!r} not found")
        labels = data[spec.group_column].tolist()
        group_levels = list(dict.fromkeys(labels))
        if len(group_levels) < 2:
            raise DataError("group column must have at least 2 levels")
        group_proj = group_projection(len(group_levels))
        level_idx = {l: i for i, l in enumerate(group_levels)}
        ind = np.zeros((n, len(group_levels)))
        ind[np.arange(n), [level_idx[l] for l in labels]] = 1.0
        blocks.append(RandomBlock(name=spec.group_column, kind="group",
                                  z=ind @ group_proj))

    return {"y": y, "x": x, "x_names": x_names, "x_scale": x_scale,
            "offset": offset, "blocks": blocks, "svc_names": svc_names,
            "nvc_expanders": nvc_expanders, "group_levels": group_levels,
            "group_proj": group_proj, "basis_rows": rows, "evec": evec}


# ---------------------------------------------------------------------------
# fitting driver


def fit_resf(data, response, spec: ModelSpec, basis: EigenBasis,
             site_id_column=None, delta: float = DEFAULT_DELTA,
             max_iter: int = 500, include_noise_var: bool = True,
             compute_quantile: bool = True) -> FittedModel:
    """Fit the model with constant coefficients and a residual spatial process."""
    if spec.svc_columns:
        raise DataError("fit_resf does not accept svc_columns; use fit_resf_vc")
    return _fit(data, response, spec, basis, svc=False,
                site_id_column=site_id_column, delta=delta, max_iter=max_iter,
                include_noise_var=include_noise_var,
                compute_quantile=compute_quantile)


def fit_resf_vc(data, response, spec: ModelSpec, basis: EigenBasis,
                site_id_column=None, delta: float = DEFAULT_DELTA,
                max_iter: int = 500, include_noise_var: bool = True,
                compute_quantile: bool = True) -> FittedModel:
    """Fit the model with spatially varying intercept and coefficients."""
    return _fit(data, response, spec, basis, svc=True,
                site_id_column=site_id_column, delta=delta, max_iter=max_iter,
                include_noise_var=include_noise_var,
                compute_quantile=compute_quantile)


def _optimize(work, layout, theta_starts, max_iter):
    best = None
    for start in theta_starts:
        res = minimize(work.objective, start, args=(layout,), method="L-BFGS-B",
                       bounds=layout.bounds,
                       options={"maxiter": max_iter, "ftol": 1e-10})
        if best is None or res.fun < best.fun:
            best = res
    if best is None or not np.isfinite(best.fun) or best.fun >= 1e30:
        raise NumericError("restricted-likelihood optimization failed; "
                           f"best objective {None if best is None else best.fun}")
    return best


def _fit(data, response, spec, basis, svc, site_id_column, delta, max_iter,
         include_noise_var, compute_quantile, _depth_seed=None):
    prep = _prepare(data, response, spec, basis, svc,
                    site_id_column=site_id_column)
    y, x, x_names = prep["y"], prep["x"], prep["x_names"]
    offset, blocks = prep["offset"], prep["blocks"]
    tspec = spec.transform
    from .transforms import _grow_params, _validate_response
    _validate_response(y, tspec)
    if tspec.y_nonneg and not tspec.is_count and np.any(y < 0):
        raise DataError("non-negative regime requires a non-negative response")

    chain_template = chain_param_template(tspec, y=y)
    logdet_shift = 2.0 * float(np.sum(np.log(prep["x_scale"])))
    work = _RemlWork(x, blocks, y, spec, offset, delta,
                     design_logdet_shift=logdet_shift)
    layout = _ThetaLayout(blocks, chain_template)

    # deterministic starts: identity chain, a chain prefit by profile maximum
    # likelihood on the fixed design, and (for deeper warps) the shallower
    # model's optimum grown with an identity layer, which guarantees the
    # maximized likelihood never decreases with depth
    rho0 = [1.0] * len(blocks)
    alpha0 = [1.0 if b.kind == "spatial" else 0.0 for b in blocks]
    starts = [layout.pack(rho0, alpha0, chain_template[0])]
    if len(chain_template[0]):
        prefit = fit_chain(y, tspec, X=x, offset=offset, delta=delta)
        starts.append(layout.pack(rho0, alpha0, chain_params_of(prefit)))
    else:
        starts.append(layout.pack([0.05] * len(blocks),
                                  [0.5 if b.kind == "spatial" else 0.0 for b in blocks],
                                  chain_template[0]))
    if tspec.tr_num >= 2:
        shallow_spec = ModelSpec(
            svc_columns=spec.svc_columns, const_columns=spec.const_columns,
            nvc=spec.nvc, group_column=spec.group_column,
            offset_column=spec.offset_column,
            transform=TransformSpec(y_type=tspec.y_type, y_nonneg=tspec.y_nonneg,
                                    tr_num=tspec.tr_num - 1))
        shallow = _fit(data, response, shallow_spec, basis, svc, site_id_column,
                       delta, max_iter, include_noise_var, False)
        grown_chain = _grow_params(shallow.chain, tspec)
        rho_by_key = {(b.name, b.kind): b.rho for b in shallow._state.blocks}
        alpha_by_key = {(b.name, b.kind): b.alpha for b in shallow._state.blocks}
        rho_grown = [max(rho_by_key.get((b.name, b.kind), 0.0), 10 * RHO_FLOOR)
                     for b in blocks]
        alpha_grown = [alpha_by_key.get((b.name, b.kind), 1.0)
                       if b.kind == "spatial" else 0.0 for b in blocks]
        base = layout.pack(rho_grown, alpha_grown, grown_chain)
        starts.append(base)
        for sign in (1.0, -1.0):   # the exact-identity layer is a saddle
            kicked = base.copy()
            kicked[-2] += 0.15 * sign
            kicked[-1] += 0.30 * sign
            starts.append(kicked)
    if not layout.names:
        theta_opt = np.array([])
    else:
        theta_opt = _optimize(work, layout, starts, max_iter).x

    # collapse near-zero variance processes and re-polish the survivors
    rhos, alphas, chain_params = layout.unpack(theta_opt)
    keep = [i for i, r in enumerate(rhos) if r >= RHO_COLLAPSE]
    collapsed = [blocks[i] for i in range(len(blocks)) if i not in keep]
    for b in collapsed:
        b.rho, b.alpha = 0.0, np.nan
    if collapsed:
        blocks = [blocks[i] for i in keep]
        work = _RemlWork(x, blocks, y, spec, offset, delta,
                         design_logdet_shift=logdet_shift)
        layout = _ThetaLayout(blocks, chain_template)
        start = layout.pack([rhos[i] for i in keep], [alphas[i] for i in keep],
                            chain_params)
        theta_opt = (_optimize(work, layout, [start], max_iter).x
                     if layout.names else np.array([]))
        rhos, alphas, chain_params = layout.unpack(theta_opt)
    for b, rho, alpha in zip(blocks, rhos, alphas):
        b.rho = rho
        b.alpha = alpha if b.kind == "spatial" else 0.0

    comp = work.components(rhos, alphas, chain_params)
    if comp is None:
        raise NumericError("restricted likelihood is degenerate at the optimum")
    chain, z_work, sigma2 = comp["chain"], comp["z"], comp["sigma2"]

    # mixed-model equations at the optimum: coefficients and posterior cov
    k, n = x.shape[1], x.shape[0]
    q = sum(b.n_cols for b in blocks)
    h = np.array(work.ctc, dtype=float)
    if q:
        dinv = np.concatenate([1.0 / (b.rho * b.weights()) for b in blocks])
        h[k:, k:] += np.diag(dinv)
    ctz = work.c.T @ z_work
    cf = cho_factor(h, lower=True)
    coef = cho_solve(cf, ctz)
    hinv = cho_solve(cf, np.eye(k + q))

    state = _FitState(
        x=x, x_names=x_names, x_scale=prep["x_scale"], blocks=blocks,
        collapsed=collapsed, coef=coef,
        hinv=hinv, sigma2=sigma2, z_work=z_work, log_jac_sum=comp["log_jac"],
        offset=offset, y=y, evec=prep["evec"], group_levels=prep["group_levels"],
        group_proj=prep["group_proj"], nvc_expanders=prep["nvc_expanders"],
        svc_names=prep["svc_names"], theta_opt=theta_opt,
        theta_names=list(layout.names), reml_neg2=comp["neg2rll"],
        delta=delta, include_noise_var=include_noise_var,
    )

    # Primary criterion: restricted likelihood of the geometric-mean scaled
    # transformation model (Jacobian weighted by (N-K)/N).  It is what the
    # optimizer maximizes, it is invariant to affine changes of the working
    # scale, and it never decreases when the model grows.  The full-Jacobian
    # variant is carried alongside for comparisons with conventions that
    # add the raw log-Jacobian to the restricted likelihood.
    weight = (n - k) / n
    rll = -0.5 * comp["neg2rll"] + weight * comp["log_jac"]
    rll_full = -0.5 * comp["neg2rll"] + comp["log_jac"]
    p_count = _parameter_count(state, chain)
    aic = -2.0 * rll + 2.0 * p_count
    bic = -2.0 * rll + p_count * np.log(n)

    beta_tab = _beta_table(state, svc)
    b_vc = b_vc_se = b_vc_p = None
    if svc:
        b_vc, b_vc_se, b_vc_p = _svc_tables(state)
    group_tab = _group_table(state)
    variance = _variance_report(state, basis)

    from .predictor import predict_rows
    pred, pred_q = predict_rows(
        state, chain, x0=x, block_designs=[b.z for b in blocks],
        offset0=offset, compute_quantile=compute_quantile)

    fit_stats = {
        "resid_SE": float(np.sqrt(sigma2)),
        "adjR2_cond": _adj_r2(state),
        "rlogLik": float(rll),
        "AIC": float(aic),
        "BIC": float(bic),
        "p_count": int(p_count),
        "n_eff": int(n),
        "rlogLik_fulljac": float(rll_full),
        "AIC_fulljac": float(-2.0 * rll_full + 2.0 * p_count),
        "BIC_fulljac": float(-2.0 * rll_full + p_count * np.log(n)),
    }
    null_stats = _null_model(state, spec, delta)
    if tspec.is_count:
        mu_hat = np.maximum(pred["pred"].to_numpy(), 1e-8)
        fit_stats["dispersion"] = float(sigma2 * n / np.sum(1.0 / mu_hat))
        dev_model = _poisson_deviance(y, mu_hat)
        fit_stats["deviance_explained"] = float(
            100.0 * (1.0 - dev_model / null_stats["deviance"]))

    return FittedModel(
        spec=spec, response=response, basis=basis, chain=chain,
        beta=beta_tab, b_vc=b_vc, b_vc_se=b_vc_se, b_vc_p=b_vc_p,
        group_effects=group_tab, variance=variance, sigma2=float(sigma2),
        fit_stats=fit_stats, null_stats=null_stats,
        pred=pred, pred_quantile=pred_q, _state=state)


# ---------------------------------------------------------------------------
# post-fit summaries


def _block_slices(state):
    out, pos = {}, state.k
    for b in state.blocks:
        out[(b.name, b.kind)] = slice(pos, pos + b.n_cols)
        pos += b.n_cols
    return out


def _parameter_count(state, chain):
    """Declared parameter count for information criteria.

    Fixed coefficients, the residual variance, two parameters per active
    spatial process, one per active group or non-spatial variance, plus
    the free transformation parameters.
    """
    p = state.k + 1
    for b in state.blocks:
        p += 2 if b.kind == "spatial" else 1
    return p + chain.n_free_params


def _beta_table(state, svc):
    names = state.x_names
    if svc:
        keep = [i for i, n in enumerate(names)
                if n != INTERCEPT and n not in state.svc_names]
    else:
        keep = list(range(len(names)))
    beta = state.beta_user()
    se_all = np.sqrt(state.sigma2 * np.diag(state.hinv)[: state.k]) / state.x_scale
    est = beta[keep]
    se = se_all[keep]
    t = est / se
    p = 2.0 * norm.sf(np.abs(t))
    return pd.DataFrame(
        {"Estimate": est, "SE": se, "t_value": t, "p_value": p},
        index=[names[i] for i in keep])


def _svc_tables(state):
    """Per-site estimates, standard errors and p-values of varying coefficients."""
    slices = _block_slices(state)
    n, width = state.n, state.k + sum(b.n_cols for b in state.blocks)
    est, se = {}, {}
    for name in state.svc_names:
        j = state.x_names.index(name)
        u = np.zeros((n, width))
        u[:, j] = 1.0
        sl = slices.get((name, "spatial"))
        if sl is not None:
            u[:, sl] = state.evec
        sl_nvc = slices.get((name, "nvc"))
        if sl_nvc is not None:
            xk_raw = state.x[:, j] * state.x_scale[j]
            u[:, sl_nvc] = state.nvc_expanders[name].transform(xk_raw)
        vals = u @ state.coef
        var = state.sigma2 * np.einsum("ij,ij->i", u @ state.hinv, u)
        est[name] = vals / state.x_scale[j]
        se[name] = np.sqrt(np.maximum(var, 0.0)) / state.x_scale[j]
    b_vc = pd.DataFrame(est)
    b_vc_se = pd.DataFrame(se)
    with np.errstate(divide="ignore", invalid="ignore"):
        tval = b_vc.to_numpy() / b_vc_se.to_numpy()
    b_vc_p = pd.DataFrame(2.0 * norm.sf(np.abs(tval)), columns=b_vc.columns)
    return b_vc, b_vc_se, b_vc_p


def coefficient_fields(state):
    """Per-observation coefficient values on the user scale, by column."""
    fields = {}
    block_coefs = state.block_coefs()
    beta = state.beta_hat()
    for j, name in enumerate(state.x_names):
        vals = np.full(state.n, beta[j])
        gamma = block_coefs.get((name, "spatial"))
        if gamma is not None:
            vals = vals + state.evec @ gamma
        delta_hat = block_coefs.get((name, "nvc"))
        if delta_hat is not None:
            xk_raw = state.x[:, j] * state.x_scale[j]
            vals = vals + state.nvc_expanders[name].transform(xk_raw) @ delta_hat
        fields[name] = vals / state.x_scale[j]
    return fields


def _group_table(state):
    if state.group_levels is None:
        return None
    levels = state.group_levels
    m = len(levels)
    eta = cov_eta = None
    for b in state.blocks:
        if b.kind == "group":
            sl = _block_slices(state)[(b.name, "group")]
            eta = state.coef[sl]
            cov_eta = state.sigma2 * state.hinv[sl, :][:, sl]
    if eta is None:   # collapsed group variance: zero effects
        effects, se = np.zeros(m), np.zeros(m)
    else:
        effects = state.group_proj @ eta
        cov_u = state.group_proj @ cov_eta @ state.group_proj.T
        se = np.sqrt(np.maximum(np.diag(cov_u), 0.0))
    se_rep = se.astype(float).copy()
    se_rep[-1] = np.nan   # the last level is determined by the sum constraint
    with np.errstate(invalid="ignore", divide="ignore"):
        t = effects / se_rep
    return pd.DataFrame({"Estimate": effects, "SE": se_rep, "t_value": t},
                        index=[str(l) for l in levels])


def moran_ratio(gamma, eigvals):
    """Moran's I of an eigenvector-based field relative to its maximum.

    For a field v = E gamma the centered quadratic form reduces exactly to
    gamma' diag(lambda) gamma / (gamma'gamma * lambda_1).
    """
    gamma = np.asarray(gamma, dtype=float)
    denom = float(gamma @ gamma)
    if denom <= 0 or eigvals.size == 0:
        return np.nan
    return float(gamma @ (eigvals * gamma)) / (denom * eigvals[0])


def _variance_report(state, basis):
    slices = _block_slices(state)
    spatial_names = state.svc_names if state.svc_names else [INTERCEPT]
    cols = {}
    for name in spatial_names:
        sl = slices.get((name, "spatial"))
        if sl is None:
            cols[name] = [0.0, np.nan, np.nan]
            continue
        b = next(bb for bb in state.blocks
                 if bb.kind == "spatial" and bb.name == name)
        random_se = float(np.sqrt(b.rho * state.sigma2))
        ratio = moran_ratio(state.coef[sl], basis.eigenvalues)
        cols[name] = [random_se, ratio, b.alpha]
    spatial = pd.DataFrame(cols, index=["random_SE", "Moran.I/max(Moran.I)", "alpha"])

    group_sigma = None
    if state.group_levels is not None:
        g = [b for b in state.blocks if b.kind == "group"]
        group_sigma = float(np.sqrt(g[0].rho * state.sigma2)) if g else 0.0

    nvc = None
    if state.nvc_expanders:
        vals = {}
        for name in state.nvc_expanders:
            bl = [b for b in state.blocks if b.kind == "nvc" and b.name == name]
            vals[name] = float(np.sqrt(bl[0].rho * state.sigma2)) if bl else 0.0
        nvc = pd.Series(vals, name="random_SE")

    return {"spatial": spatial, "group": group_sigma, "nvc": nvc}


def _adj_r2(state):
    var_z = float(np.var(state.z_work, ddof=1))
    return float(1.0 - state.sigma2 / var_z) if var_z > 0 else np.nan


def _poisson_deviance(y, mu):
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(y > 0, y * np.log(y / mu), 0.0)
    return float(2.0 * np.sum(term - (y - mu)))


def _poisson_irls(y, x, offset=None, max_iter=50, tol=1e-10):
    """Poisson GLM with log link fitted by iteratively reweighted LS."""
    log_off = np.log(offset) if offset is not None else np.zeros(len(y))
    mu = np.maximum(y + 0.5, 0.5)
    beta = None
    for _ in range(max_iter):
        eta = np.log(mu)
        w = mu
        zstar = (eta - log_off) + (y - mu) / mu
        wx = x * w[:, None]
        new_beta = np.linalg.solve(x.T @ wx, wx.T @ zstar)
        mu = np.exp(x @ new_beta + log_off)
        if beta is not None and np.max(np.abs(new_beta - beta)) < tol:
            beta = new_beta
            break
        beta = new_beta
    return np.exp(x @ beta + log_off)


def _reml_linear(z, x, log_jac=0.0):
    """Closed-form restricted log-likelihood of a fixed-effects model."""
    n, k = x.shape
    beta, *_ = np.linalg.lstsq(x, z, rcond=None)
    rss = float(np.sum((z - x @ beta) ** 2))
    sigma2 = rss / (n - k)
    sign, logdet = np.linalg.slogdet(x.T @ x)
    rll = -0.5 * ((n - k) * (LOG2PI + 1.0 + np.log(sigma2)) + logdet) + log_jac
    return rll, sigma2


def _null_model(state, spec, delta):
    y, x = state.y, state.x
    n, k = x.shape
    if spec.transform.is_count:
        log_jac = float(-np.sum(np.log(y + delta)))
        z0 = np.log(y + delta)
        if state.offset is not None:
            z0 = z0 - np.log(state.offset)
        rll, _ = _reml_linear(z0, x, log_jac=log_jac * (n - k) / n)
        mu_null = _poisson_irls(y, x, offset=state.offset)
        deviance = _poisson_deviance(y, mu_null)
        desc = ("glm( y ~ x, offset = log( offset ), family = poisson )"
                if state.offset is not None else "glm( y ~ x, family = poisson )")
    else:
        rll, _ = _reml_linear(y, x)
        deviance = None
        desc = "lm( y ~ x )"
    p = k + 1
    out = {"rlogLik": float(rll), "AIC": float(-2 * rll + 2 * p),
           "BIC": float(-2 * rll + p * np.log(n)), "p_count": p,
           "description": desc}
    if deviance is not None:
        out["deviance"] = deviance
    return out


# ---------------------------------------------------------------------------
# public post-fit operations


def restricted_loglik(model: FittedModel, theta=None) -> float:
    """Restricted log-likelihood (with Jacobian) at given parameters.

    ``theta`` follows the fitted layout ``model._state.theta_names``; by
    default the fitted optimum is evaluated.  This is the criterion the
    fit maximizes, so perturbing any coordinate off the optimum must not
    increase the returned value.
    """
    state = model._state
    work = _RemlWork(state.x, state.blocks, state.y, model.spec, state.offset,
                     state.delta,
                     design_logdet_shift=2.0 * float(np.sum(np.log(state.x_scale))))
    layout = _ThetaLayout(state.blocks,
                          chain_param_template(model.spec.transform, y=state.y))
    if theta is None:
        theta = state.theta_opt
    theta = np.asarray(theta, dtype=float)
    val = work.objective(theta, layout)
    if val >= 1e30:
        raise NumericError(f"non-finite restricted likelihood at theta={theta}")
    return -float(val)


def info_criteria(model: FittedModel) -> dict:
    """Information criteria and the declared parameter count of a fit."""
    fs = model.fit_stats
    return {k: fs[k] for k in ("rlogLik", "AIC", "BIC", "p_count", "n_eff")}


def fit_statistics(model: FittedModel) -> dict:
    """Residual scale, conditional fit and count-regime error statistics."""
    keys = ("resid_SE", "adjR2_cond", "dispersion", "deviance_explained")
    return {k: model.fit_stats[k] for k in keys if k in model.fit_stats}
