"""Point prediction with transformed-scale uncertainty, in and out of sample.

Predictions decompose as pred_transG = xb + sf_residual (+ group and
non-spatial parts when present) on the working scale.  The standard error
combines the conditional covariance of all estimated coefficients with,
by default, the irreducible residual variance, so quantile bands behave
like predictive rather than confidence intervals.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .basis import ExtendedBasis, extend_basis
from .errors import DataError
from .inference import QUANTILE_PROBS, count_mean, predictive_quantiles
from .transforms import work_inverse

INTERCEPT = "(Intercept)"


@dataclass
class PredictionResult:
    """Per-site predictions, transformed-scale moments and quantiles."""

    pred: pd.DataFrame
    quantiles: pd.DataFrame | None
    len95: pd.Series | None


def predict_rows(state, chain, x0, block_designs, offset0=None,
                 compute_quantile=True, group_part=None):
    """Shared prediction core over explicit design matrices.

    ``block_designs`` must align with ``state.blocks``; the in-sample call
    passes the training designs, the out-of-sample path assembles extended
    ones.  Returns the prediction frame and, optionally, the quantile table.
    """
    x0 = np.asarray(x0, dtype=float)
    m = x0.shape[0]
    parts = [x0] + [np.asarray(zb, dtype=float) for zb in block_designs]
    s0 = np.concatenate(parts, axis=1) if parts else x0
    z_hat = s0 @ state.coef
    var_mean = state.sigma2 * np.einsum("ij,ij->i", s0 @ state.hinv, s0)
    var_mean = np.maximum(var_mean, 0.0)
    noise = state.sigma2 if state.include_noise_var else 0.0
    se = np.sqrt(var_mean + noise)

    xb = x0 @ state.beta_hat()
    sf = np.zeros(m)
    nvc_part = np.zeros(m)
    grp = np.zeros(m)
    pos = 0
    for b, zb in zip(state.blocks, block_designs):
        contrib = np.asarray(zb) @ state.coef[state.k + pos: state.k + pos + b.n_cols]
        if b.kind == "spatial":
            sf += contrib
        elif b.kind == "group":
            grp += contrib
        else:
            nvc_part += contrib
        pos += b.n_cols

    is_count = chain.spec.is_count
    if is_count:
        point = count_mean(z_hat, se, chain, offset=offset0)
    else:
        point = work_inverse(chain, z_hat, offset=offset0)

    data = {"pred": point, "pred_transG": z_hat, "pred_transG_se": se,
            "xb": xb, "sf_residual": sf}
    if any(b.kind == "group" for b in state.blocks):
        data["group_part"] = grp
    if any(b.kind == "nvc" for b in state.blocks):
        data["nvc_part"] = nvc_part
    pred = pd.DataFrame(data)

    quant = None
    if compute_quantile:
        quant = predictive_quantiles(z_hat, se, chain, QUANTILE_PROBS,
                                     offset=offset0)
    return pred, quant


def predict_oos(model, x0, basis0: ExtendedBasis | None = None, coords0=None,
                offset0=None, group0=None,
                compute_quantile: bool = True) -> PredictionResult:
    """Predict at new sites from extended basis vectors and covariates.

    ``x0`` is a data frame holding the model's covariate columns; the
    eigenvector values at the prediction sites come from ``basis0`` (or are
    computed from ``coords0``).  New rows with an unknown or missing group
    level get a zero group effect; covariates outside the non-spatial
    expansion range extrapolate linearly with a warning.
    """
    state = model._state
    if basis0 is None:
        if coords0 is None:
            raise DataError("provide either basis0 or coords0")
        basis0 = extend_basis(model.basis, coords0)
    if model.basis.n_components and basis0.n_components != model.basis.n_components:
        raise DataError(
            f"extended basis has {basis0.n_components} components, "
            f"model expects {model.basis.n_components}")

    needed = [c for c in state.x_names if c != INTERCEPT]
    missing = [c for c in needed if c not in x0.columns]
    if missing:
        raise DataError(f"prediction data is missing columns: {missing}")
    m = len(x0)
    x_raw = np.column_stack(
        [np.ones(m)] + [pd.to_numeric(x0[c], errors="coerce").to_numpy(dtype=float)
                        for c in needed])
    if np.isnan(x_raw).any():
        row = int(np.argwhere(np.isnan(x_raw))[0, 0])
        raise DataError(f"non-numeric covariate value in prediction row {row}")
    x_mat = x_raw / state.x_scale[None, :]   # training-time internal scaling

    if model.spec.offset_column is not None:
        if offset0 is None and model.spec.offset_column in x0.columns:
            offset0 = pd.to_numeric(x0[model.spec.offset_column]).to_numpy(dtype=float)
        if offset0 is None:
            raise DataError("model was fitted with an offset; supply offset0")
        offset0 = np.asarray(offset0, dtype=float)
        if np.any(offset0 <= 0):
            raise DataError("prediction offsets must be strictly positive")

    designs = []
    for b in state.blocks:
        if b.kind == "spatial":
            if b.name == INTERCEPT:
                designs.append(basis0.vectors0)
            else:
                xk = x_mat[:, state.x_names.index(b.name)]
                designs.append(basis0.vectors0 * xk[:, None])
        elif b.kind == "group":
            designs.append(_group_design(state, group0, m))
        else:
            j = state.x_names.index(b.name)
            expander = state.nvc_expanders[b.name]
            oob = expander.out_of_range(x_raw[:, j])
            if oob.any():
                warnings.warn(
                    f"{int(oob.sum())} prediction value(s) of {b.name!r} outside "
                    "the non-spatial expansion range; extrapolating linearly")
            designs.append(expander.transform(x_raw[:, j]) * x_mat[:, j][:, None])

    pred, quant = predict_rows(state, model.chain, x_mat, designs,
                               offset0=offset0, compute_quantile=compute_quantile)
    len95 = None
    if quant is not None:
        len95 = (quant["q0.975"] - quant["q0.025"]).rename("len95")
    return PredictionResult(pred=pred, quantiles=quant, len95=len95)


def _group_design(state, group0, m):
    cols = state.group_proj.shape[1]
    design = np.zeros((m, cols))
    if group0 is None:
        return design
    labels = list(group0)
    if len(labels) != m:
        raise DataError("group0 length does not match prediction rows")
    level_idx = {l: i for i, l in enumerate(state.group_levels)}
    unknown = 0
    for r, lab in enumerate(labels):
        i = level_idx.get(lab)
        if i is None:
            unknown += 1
            continue
        design[r] = state.group_proj[i]
    if unknown:
        warnings.warn(f"{unknown} prediction row(s) carry an unknown group "
                      "level; using the population level (zero effect)")
    return design
