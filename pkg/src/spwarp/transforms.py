"""Invertible response transformations with log-Jacobian accounting.

The response transformation is a chain of sub-transformations applied in
order: an optional power (Box-Cox) or log-count first layer, then an
optional run of sinh-arcsinh (SAL) warping layers preceded by a single
standardization.  Every layer is strictly increasing, so the chain is
invertible and its per-observation log-Jacobian is the sum of the layer
log-derivatives.  Five regimes are supported:

  a  non-negative continuous          -> Box-Cox
  b  continuous, D >= 1               -> standardize + D SAL layers
  c  non-negative continuous, D >= 1  -> Box-Cox + standardize + D SAL
  d  count                            -> log(y + delta) (minus log offset)
  e  count, D >= 1                    -> log-count + standardize + D SAL

The affine parameters of the final SAL layer are pinned at (0, 1): a
trailing affine map is absorbed by the regression intercept and residual
scale, so freeing it would add a flat (for the scale, likelihood-drifting)
direction to the fit.  Earlier layers keep all four parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import DataError, NumericError

DEFAULT_DELTA = 0.5
SAL_MAXITER = 500
SAL_FTOL = 1e-9


# ---------------------------------------------------------------------------
# elementary transforms


def boxcox_forward(y, lam: float):
    """Box-Cox transform (y^lam - 1)/lam, log(y) at lam = 0."""
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise DataError("Box-Cox requires non-negative input")
    if lam <= 0 and np.any(y == 0):
        raise DataError("Box-Cox with lambda <= 0 requires strictly positive input")
    if lam == 0.0:
        return np.log(y)
    return (np.power(y, lam) - 1.0) / lam


def boxcox_inverse(z, lam: float):
    """Inverse Box-Cox; out-of-range z is clamped to the domain boundary."""
    z = np.asarray(z, dtype=float)
    if lam == 0.0:
        return np.exp(z)
    base = lam * z + 1.0
    if lam > 0:
        base = np.maximum(base, 0.0)
    else:
        # lam < 0: forward range is bounded above by -1/lam; stay inside it.
        base = np.maximum(base, 1e-12)
    return np.power(base, 1.0 / lam)


def boxcox_deriv(y, lam: float):
    y = np.asarray(y, dtype=float)
    return np.power(y, lam - 1.0)


@dataclass(frozen=True)
class SALParams:
    """Parameters of one sinh-arcsinh warp: loc + scale*sinh(tail*arcsinh(y) - skew)."""

    loc: float = 0.0
    scale: float = 1.0
    tail: float = 1.0
    skew: float = 0.0

    def __post_init__(self):
        if not (self.scale > 0 and self.tail > 0):
            raise DataError(
                f"SAL scale and tail must be positive, got ({self.scale}, {self.tail})")


def sal_forward(y, p: SALParams):
    y = np.asarray(y, dtype=float)
    return p.loc + p.scale * np.sinh(p.tail * np.arcsinh(y) - p.skew)


def sal_inverse(z, p: SALParams):
    z = np.asarray(z, dtype=float)
    return np.sinh((np.arcsinh((z - p.loc) / p.scale) + p.skew) / p.tail)


def sal_deriv(y, p: SALParams):
    """dz/dy of the SAL warp; strictly positive for valid parameters."""
    y = np.asarray(y, dtype=float)
    u = p.tail * np.arcsinh(y) - p.skew
    return p.scale * np.cosh(u) * p.tail / np.sqrt(1.0 + y * y)


def count_forward(y, delta: float = DEFAULT_DELTA):
    """Started log for counts: log(y + delta)."""
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise DataError("count transform requires non-negative input")
    return np.log(y + delta)


def count_inverse(z, delta: float = DEFAULT_DELTA):
    """Continuous-valued inverse exp(z) - delta, floored at zero."""
    z = np.asarray(z, dtype=float)
    return np.maximum(np.exp(z) - delta, 0.0)


# ---------------------------------------------------------------------------
# chain layers


@dataclass(frozen=True)
class BoxCoxLayer:
    lam: float

    def forward(self, y):
        return boxcox_forward(y, self.lam)

    def inverse(self, z):
        return boxcox_inverse(z, self.lam)

    def log_deriv(self, y):
        return (self.lam - 1.0) * np.log(np.asarray(y, dtype=float))

    def clamp_mask(self, z):
        z = np.asarray(z, dtype=float)
        if self.lam == 0.0:
            return np.zeros(z.shape, dtype=bool)
        return self.lam * z + 1.0 <= 0.0

    def to_dict(self):
        return {"kind": "boxcox", "lam": float(self.lam)}


@dataclass(frozen=True)
class CountLogLayer:
    delta: float = DEFAULT_DELTA
    use_offset: bool = False

    def forward(self, y, offset=None):
        z = count_forward(y, self.delta)
        if self.use_offset:
            if offset is None:
                raise DataError("count layer fitted with an offset; none supplied")
            z = z - np.log(np.asarray(offset, dtype=float))
        return z

    def inverse(self, z, offset=None):
        z = np.asarray(z, dtype=float)
        if self.use_offset:
            if offset is None:
                raise DataError("count layer fitted with an offset; none supplied")
            z = z + np.log(np.asarray(offset, dtype=float))
        return count_inverse(z, self.delta)

    def log_deriv(self, y):
        return -np.log(np.asarray(y, dtype=float) + self.delta)

    def clamp_mask(self, z, offset=None):
        z = np.asarray(z, dtype=float)
        if self.use_offset and offset is not None:
            z = z + np.log(np.asarray(offset, dtype=float))
        return z < np.log(self.delta)

    def to_dict(self):
        return {"kind": "countlog", "delta": float(self.delta),
                "use_offset": bool(self.use_offset)}


@dataclass(frozen=True)
class StandardizeLayer:
    mean: float
    sd: float

    def forward(self, y):
        return (np.asarray(y, dtype=float) - self.mean) / self.sd

    def inverse(self, z):
        return np.asarray(z, dtype=float) * self.sd + self.mean

    def log_deriv(self, y):
        y = np.asarray(y, dtype=float)
        return np.full(y.shape, -np.log(self.sd))

    def to_dict(self):
        return {"kind": "standardize", "mean": float(self.mean), "sd": float(self.sd)}


@dataclass(frozen=True)
class SALLayer:
    params: SALParams

    def forward(self, y):
        return sal_forward(y, self.params)

    def inverse(self, z):
        return sal_inverse(z, self.params)

    def log_deriv(self, y):
        return np.log(sal_deriv(y, self.params))

    def to_dict(self):
        p = self.params
        return {"kind": "sal", "loc": float(p.loc), "scale": float(p.scale),
                "tail": float(p.tail), "skew": float(p.skew)}


def _layer_from_dict(d):
    kind = d["kind"]
    if kind == "boxcox":
        return BoxCoxLayer(lam=d["lam"])
    if kind == "countlog":
        return CountLogLayer(delta=d["delta"], use_offset=d["use_offset"])
    if kind == "standardize":
        return StandardizeLayer(mean=d["mean"], sd=d["sd"])
    if kind == "sal":
        return SALLayer(SALParams(d["loc"], d["scale"], d["tail"], d["skew"]))
    raise DataError(f"unknown transform layer kind {kind!r}")


# ---------------------------------------------------------------------------
# transform specification and chain


@dataclass(frozen=True)
class TransformSpec:
    """Declarative transformation regime: response type and SAL depth."""

    y_type: str = "continuous"
    y_nonneg: bool = False
    tr_num: int = 0

    def __post_init__(self):
        if self.y_type not in ("continuous", "count"):
            raise DataError(f"y_type must be 'continuous' or 'count', got {self.y_type!r}")
        if self.tr_num < 0 or int(self.tr_num) != self.tr_num:
            raise DataError(f"tr_num must be a non-negative integer, got {self.tr_num}")
        object.__setattr__(self, "tr_num", int(self.tr_num))
        if self.y_type == "count":
            object.__setattr__(self, "y_nonneg", True)

    @property
    def regime(self) -> str:
        if self.y_type == "count":
            return "d" if self.tr_num == 0 else "e"
        if self.y_nonneg:
            return "a" if self.tr_num == 0 else "c"
        return "gaussian" if self.tr_num == 0 else "b"

    @property
    def is_count(self) -> bool:
        return self.y_type == "count"


@dataclass(frozen=True)
class TransformChain:
    """A fitted, invertible transformation chain with Jacobian tracking."""

    layers: tuple
    spec: TransformSpec

    def forward(self, y, offset=None):
        """Transform y, returning (z, per-observation log-Jacobian)."""
        work = np.asarray(y, dtype=float)
        log_jac = np.zeros(work.shape)
        for layer in self.layers:
            log_jac = log_jac + layer.log_deriv(work)
            if isinstance(layer, CountLogLayer):
                work = layer.forward(work, offset)
            else:
                work = layer.forward(work)
        return work, log_jac

    def inverse(self, z, offset=None, return_flags=False):
        """Back-transform z; out-of-range values clamp to the boundary and flag."""
        work = np.asarray(z, dtype=float)
        flags = np.zeros(work.shape, dtype=bool)
        for layer in reversed(self.layers):
            if isinstance(layer, BoxCoxLayer):
                flags |= layer.clamp_mask(work)
                work = layer.inverse(work)
            elif isinstance(layer, CountLogLayer):
                flags |= layer.clamp_mask(work, offset)
                work = layer.inverse(work, offset)
            else:
                work = layer.inverse(work)
        if return_flags:
            return work, flags
        return work

    def forward_deriv(self, y):
        """dz/dy along the chain (offset shifts do not change the slope)."""
        _, log_jac = self.forward(y, offset=self._dummy_offset(y))
        return np.exp(log_jac)

    def inverse_deriv(self, z, offset=None):
        """dy/dz evaluated at z, the factor appearing in marginal effects.

        Zero on the clamped region, where the inverse is flat.
        """
        y, flags = self.inverse(z, offset=offset, return_flags=True)
        with np.errstate(divide="ignore", over="ignore"):
            d = 1.0 / self.forward_deriv(y)
        return np.where(flags, 0.0, d)

    def _dummy_offset(self, y):
        if any(isinstance(l, CountLogLayer) and l.use_offset for l in self.layers):
            return np.ones(np.asarray(y, dtype=float).shape)
        return None

    @property
    def n_sal_layers(self) -> int:
        return sum(isinstance(l, SALLayer) for l in self.layers)

    @property
    def n_free_params(self) -> int:
        """Free transformation parameters for information criteria.

        Box-Cox lambda counts 1.  A run of D SAL layers counts 4D - 2:
        all four parameters per layer except the final layer's affine
        pair, which the regression intercept and residual scale absorb.
        Standardization constants are data moments, not parameters.
        """
        n = sum(isinstance(l, BoxCoxLayer) for l in self.layers)
        d = self.n_sal_layers
        if d > 0:
            n += 4 * d - 2
        return n

    @property
    def boxcox_lambda(self):
        for layer in self.layers:
            if isinstance(layer, BoxCoxLayer):
                return layer.lam
        return None

    def to_dict(self):
        return {
            "version": 1,
            "spec": {"y_type": self.spec.y_type, "y_nonneg": self.spec.y_nonneg,
                     "tr_num": self.spec.tr_num},
            "layers": [l.to_dict() for l in self.layers],
        }


def chain_from_dict(d) -> TransformChain:
    if d.get("version") != 1:
        raise DataError(f"unsupported transform chain version {d.get('version')!r}")
    spec = TransformSpec(**d["spec"])
    return TransformChain(layers=tuple(_layer_from_dict(x) for x in d["layers"]),
                          spec=spec)


# ---------------------------------------------------------------------------
# chain construction and maximum-likelihood fitting


def chain_param_template(spec: TransformSpec, y=None):
    """Initial values, bounds and names of the free chain parameters.

    SAL scale-like parameters are optimized as logs; layer ``i`` of D
    contributes (loc, log_scale, log_tail, skew) when i < D and
    (log_tail, skew) for the final layer.  Bounds are chosen so that the
    objective stays finite on the whole box (no sinh overflow), which
    keeps quasi-Newton line searches well behaved.  A response containing
    zeros restricts the Box-Cox exponent to positive values.
    """
    x0, bounds, names = [], [], []
    if spec.y_type == "continuous" and spec.y_nonneg:
        lam_lo = -5.0
        if y is not None and np.any(np.asarray(y) == 0):
            lam_lo = 0.01
        x0.append(1.0)
        bounds.append((lam_lo, 5.0))
        names.append("boxcox_lambda")
    d = spec.tr_num
    for i in range(1, d + 1):
        if i < d:
            x0 += [0.0, 0.0, 0.0, 0.0]
            bounds += [(-15.0, 15.0), (-3.0, 3.0), (-3.0, 3.0), (-15.0, 15.0)]
            names += [f"sal{i}_loc", f"sal{i}_log_scale", f"sal{i}_log_tail",
                      f"sal{i}_skew"]
        else:
            x0 += [0.0, 0.0]
            bounds += [(-3.0, 3.0), (-15.0, 15.0)]
            names += [f"sal{i}_log_tail", f"sal{i}_skew"]
    return np.array(x0), bounds, names


def build_chain(params, spec: TransformSpec, y, offset=None,
                delta: float = DEFAULT_DELTA) -> TransformChain:
    """Assemble a chain from a parameter vector, freezing standardization.

    The standardization constants before the first SAL layer are the mean
    and standard deviation of the current working response for these
    parameter values, so they profile along with the optimization and are
    frozen into the returned chain.
    """
    params = np.asarray(params, dtype=float)
    y = np.asarray(y, dtype=float)
    layers = []
    pos = 0
    work = y
    if spec.y_type == "count":
        layer = CountLogLayer(delta=delta, use_offset=offset is not None)
        work = layer.forward(work, offset)
        layers.append(layer)
    elif spec.y_nonneg:
        lam = float(params[pos])
        pos += 1
        layer = BoxCoxLayer(lam=lam)
        work = layer.forward(work)
        layers.append(layer)
    d = spec.tr_num
    if d > 0:
        m = float(np.mean(work))
        s = float(np.std(work))
        if not np.isfinite(s) or s <= 0:
            raise NumericError("working response is constant; cannot standardize")
        layers.append(StandardizeLayer(mean=m, sd=s))
        for i in range(1, d + 1):
            if i < d:
                loc, ls2, ls3, skew = params[pos:pos + 4]
                pos += 4
                p = SALParams(loc=float(loc), scale=float(np.exp(ls2)),
                              tail=float(np.exp(ls3)), skew=float(skew))
            else:
                ls3, skew = params[pos:pos + 2]
                pos += 2
                p = SALParams(loc=0.0, scale=1.0, tail=float(np.exp(ls3)),
                              skew=float(skew))
            layers.append(SALLayer(p))
    return TransformChain(layers=tuple(layers), spec=spec)


def _validate_response(y, spec: TransformSpec):
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.size < 2:
        raise DataError("response must be a 1-d vector with at least 2 values")
    if not np.all(np.isfinite(y)):
        raise DataError("response contains non-finite values")
    if spec.y_type == "count":
        if np.any(y < 0):
            raise DataError("count response must be non-negative")
        frac = np.abs(y - np.round(y))
        if np.any(frac > 1e-9):
            idx = int(np.argmax(frac > 1e-9))
            raise DataError(f"count response must be integer, offending row {idx}")
    elif spec.y_nonneg and np.any(y < 0):
        idx = int(np.argmax(y < 0))
        raise DataError(f"non-negative regime but response has negative value at row {idx}")
    return y


def _gauss_profile_objective(params, spec, y, x_design, offset, delta):
    """Negative profile Gaussian log-likelihood including the log-Jacobian."""
    n = y.shape[0]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        try:
            chain = build_chain(params, spec, y, offset=offset, delta=delta)
            z, log_jac = chain.forward(y, offset=offset)
        except (DataError, NumericError):
            return 1e30
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(log_jac))):
            return 1e30
        beta, *_ = np.linalg.lstsq(x_design, z, rcond=None)
        resid = z - x_design @ beta
        rss = float(resid @ resid)
        if not np.isfinite(rss) or rss <= 0:
            return 1e30
        val = 0.5 * n * np.log(rss / n) - float(np.sum(log_jac))
    return val if np.isfinite(val) else 1e30


def fit_chain(y, spec: TransformSpec, X=None, offset=None,
              delta: float = DEFAULT_DELTA, max_iter: int = SAL_MAXITER) -> TransformChain:
    """Fit the transformation chain by profile maximum likelihood.

    The chain parameters maximize the Gaussian likelihood of the
    transformed response regressed on ``X`` (an intercept by default),
    including the transformation log-Jacobian.  Chains with several SAL
    layers are grown from the depth-(D-1) fit with an identity final
    layer, which guarantees the maximized likelihood never decreases
    with depth.
    """
    y = _validate_response(y, spec)
    return _fit_chain_impl(y, spec, X=X, offset=offset, delta=delta,
                           max_iter=max_iter, prev_chain=None)


def _fit_chain_impl(y, spec, X, offset, delta, max_iter, prev_chain):
    n = y.shape[0]
    if X is None:
        x_design = np.ones((n, 1))
    else:
        x_design = np.asarray(X, dtype=float)
        if x_design.ndim == 1:
            x_design = x_design[:, None]
    if offset is not None:
        offset = np.asarray(offset, dtype=float)
        if np.any(offset <= 0):
            raise DataError("offsets must be strictly positive")

    x0, bounds, _ = chain_param_template(spec, y=y)
    if x0.size == 0:
        return build_chain(x0, spec, y, offset=offset, delta=delta)

    # A freshly appended identity SAL layer is a stationary point of the
    # deeper problem (its parameter directions coincide with the previous
    # layer's tangent space at its optimum), so each candidate start is
    # paired with a grid of final-layer kicks to escape the saddle.
    def _with_kicks(base, kicks):
        out = [base]
        for d_tail, d_skew in kicks:
            kicked = base.copy()
            kicked[-2] += d_tail
            kicked[-1] += d_skew
            out.append(kicked)
        return out

    small_kicks = [(0.15, 0.3), (-0.15, -0.3)]
    grid_kicks = [(dt, ds) for dt in (-0.4, 0.0, 0.4) for ds in (-0.6, 0.0, 0.6)
                  if (dt, ds) != (0.0, 0.0)]

    starts = []
    if spec.tr_num > 0:
        starts += _with_kicks(x0, small_kicks)
    else:
        ident = x0.copy()
        perturbed = x0.copy()
        perturbed[0] = 0.5   # Box-Cox only
        starts += [ident, perturbed]
    if spec.tr_num >= 2:
        if prev_chain is None or prev_chain.n_sal_layers != spec.tr_num - 1:
            shallow = TransformSpec(y_type=spec.y_type, y_nonneg=spec.y_nonneg,
                                    tr_num=spec.tr_num - 1)
            prev_chain = _fit_chain_impl(y, shallow, X, offset, delta,
                                         max_iter, None)
        starts += _with_kicks(_grow_params(prev_chain, spec), grid_kicks)

    args = (spec, y, x_design, offset, delta)

    # Two phases: cheap exploration over all starts, then a full-precision
    # polish from the best explorer.  Exploration keeps the exact grown
    # start in the pool, so the polished optimum can never fall below the
    # shallower chain's likelihood.  A capped simplex search complements the
    # gradient explorers: it walks out of the grown saddle's degenerate
    # subspace, which touches every layer's affine parameters at once.
    explored = []
    for start in starts:
        res = minimize(
            _gauss_profile_objective, start, method="L-BFGS-B", bounds=bounds,
            args=args, options={"maxiter": 60, "ftol": 1e-6},
        )
        if np.isfinite(res.fun):
            explored.append(res)
    if len(starts) > 3:   # depth >= 2: grown start present
        lo = np.array([b[0] for b in bounds])
        hi = np.array([b[1] for b in bounds])
        for start in (starts[0], starts[3]):
            res = minimize(
                _gauss_profile_objective, start, method="Nelder-Mead", args=args,
                options={"maxfev": 250 * start.size, "xatol": 1e-6, "fatol": 1e-8},
            )
            # Nelder-Mead ignores bounds; project back and re-score so the
            # candidate's value always belongs to its point.
            x_clipped = np.clip(res.x, lo, hi)
            f_clipped = _gauss_profile_objective(x_clipped, *args)
            if np.isfinite(f_clipped):
                res.x, res.fun = x_clipped, f_clipped
                explored.append(res)
    if not explored:
        raise NumericError("transformation fit failed at every start")
    seed = min(explored, key=lambda r: r.fun)

    best = minimize(
        _gauss_profile_objective, seed.x, method="L-BFGS-B", bounds=bounds,
        args=args, options={"maxiter": max_iter, "ftol": SAL_FTOL},
    )
    if seed.fun < best.fun:
        best = seed
    if not np.isfinite(best.fun) or best.fun >= 1e30:
        err = NumericError("transformation fit failed to reach a finite optimum")
        err.best_params = best.x
        err.grad_norm = float(np.max(np.abs(best.jac))) if best.jac is not None else np.nan
        raise err
    return build_chain(best.x, spec, y, offset=offset, delta=delta)


def _grow_params(prev: TransformChain, spec: TransformSpec) -> np.ndarray:
    """Seed a depth-D parameter vector from a fitted depth-(D-1) chain."""
    params = []
    if spec.y_type == "continuous" and spec.y_nonneg:
        params.append(prev.boxcox_lambda)
    sal = [l.params for l in prev.layers if isinstance(l, SALLayer)]
    for p in sal:   # all previous layers now sit in 4-parameter slots
        params += [p.loc, np.log(p.scale), np.log(p.tail), p.skew]
    params += [0.0, 0.0]   # identity final layer
    return np.array(params)


def chain_params_of(chain: TransformChain) -> np.ndarray:
    """Extract the free-parameter vector of a chain (inverse of build_chain)."""
    params = []
    sal = [l.params for l in chain.layers if isinstance(l, SALLayer)]
    if chain.boxcox_lambda is not None:
        params.append(chain.boxcox_lambda)
    for i, p in enumerate(sal, start=1):
        if i < len(sal):
            params += [p.loc, np.log(p.scale), np.log(p.tail), p.skew]
        else:
            params += [np.log(p.tail), p.skew]
    return np.array(params)


def work_forward(chain: TransformChain, y, offset=None):
    """Map a response to the model's working scale with its log-Jacobian.

    Count chains consume the offset inside the log-count layer; continuous
    chains with an offset subtract log(offset) from the transformed value,
    so the offset always enters the linear predictor with coefficient one.
    """
    z, log_jac = chain.forward(y, offset=offset if chain.spec.is_count else None)
    if offset is not None and not chain.spec.is_count:
        z = z - np.log(np.asarray(offset, dtype=float))
    return z, log_jac


def work_inverse(chain: TransformChain, z, offset=None, return_flags=False):
    """Inverse of :func:`work_forward` on the working scale."""
    if offset is not None and not chain.spec.is_count:
        z = np.asarray(z, dtype=float) + np.log(np.asarray(offset, dtype=float))
        offset = None
    return chain.inverse(z, offset=offset, return_flags=return_flags)


def work_inverse_deriv(chain: TransformChain, z, offset=None):
    """dy/dz on the working scale (offset shifts do not change the slope)."""
    if offset is not None and not chain.spec.is_count:
        z = np.asarray(z, dtype=float) + np.log(np.asarray(offset, dtype=float))
        offset = None
    return chain.inverse_deriv(z, offset=offset)


def sample_moments(x):
    """Skewness and excess kurtosis of a sample (population definitions)."""
    x = np.asarray(x, dtype=float)
    m = x.mean()
    c = x - m
    s2 = np.mean(c * c)
    skew = np.mean(c ** 3) / s2 ** 1.5
    kurt = np.mean(c ** 4) / s2 ** 2 - 3.0
    return float(skew), float(kurt)


def gaussianization_report(y, spec: TransformSpec, depths=(0, 1, 2, 3),
                           X=None, offset=None, delta: float = DEFAULT_DELTA):
    """Fit chains at several depths and report normality of the output.

    Returns a list of dicts with depth, skewness, excess kurtosis and the
    fitted chain, in the order of ``depths``.
    """
    y = np.asarray(y, dtype=float)
    if y.size < 30:
        raise DataError("insufficient data: need at least 30 observations")
    rows = []
    prev_by_depth = {}
    for d in depths:
        dspec = TransformSpec(y_type=spec.y_type, y_nonneg=spec.y_nonneg, tr_num=d)
        yv = _validate_response(y, dspec)
        chain = _fit_chain_impl(yv, dspec, X, offset, delta, SAL_MAXITER,
                                prev_chain=prev_by_depth.get(d - 1))
        prev_by_depth[d] = chain
        z, _ = chain.forward(yv, offset=offset)
        skew, kurt = sample_moments(z)
        rows.append({"tr_num": d, "skewness": skew, "excess_kurtosis": kurt,
                     "chain": chain})
    return rows
