"""Batch front door: config files, CSV ingestion, model archives, reports.

The run configuration is a flat ``key = value`` text file ('#' starts a
comment) whose keys mirror the library's fitting arguments one for one;
command-line flags override file values.  The model archive is a single
self-describing binary file: a JSON header (format version, model
metadata) followed by raw little-endian array payloads, so that saving is
byte-deterministic and loading reproduces predictions bit for bit.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .basis import (EigenBasis, build_contiguity_proximity,
                    build_kernel_proximity, extract_basis)
from .errors import ArchiveVersionError, ConfigError, DataError
from .estimator import (FittedModel, ModelSpec, NvcExpander, RandomBlock,
                        _FitState, fit_resf, fit_resf_vc)
from .inference import (estimated_density, distribution_moments,
                        marginal_effects, significance_summary)
from .predictor import predict_oos
from .transforms import TransformSpec, chain_from_dict, gaussianization_report

ARCHIVE_MAGIC = b"SPWARPMD"
ARCHIVE_VERSION = 1

BOOL_TRUE = {"true", "1", "yes", "on"}
BOOL_FALSE = {"false", "0", "no", "off"}


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Run settings mirroring the fitting API plus file locations."""

    input: str | None = None
    response: str | None = None
    svc_columns: tuple = ()
    const_columns: tuple = ()
    nvc: bool = False
    group_column: str | None = None
    offset_column: str | None = None
    coord_columns: tuple = ()
    adjacency: str | None = None
    zone_id_column: str | None = None
    y_type: str = "continuous"
    y_nonneg: bool = False
    tr_num: int = 0
    threshold: float = 0.25
    basis_count: int | None = None
    delta: float = 0.5
    seed: int = 1
    out: str = "."
    include_noise_var: bool = True
    compute_quantile: bool = True
    max_iter: int = 500
    model: str | None = None
    prediction_input: str | None = None
    column: str | None = None
    geojson: bool = False

    def transform_spec(self) -> TransformSpec:
        return TransformSpec(y_type=self.y_type, y_nonneg=self.y_nonneg,
                             tr_num=self.tr_num)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(svc_columns=self.svc_columns,
                         const_columns=self.const_columns, nvc=self.nvc,
                         group_column=self.group_column,
                         offset_column=self.offset_column,
                         transform=self.transform_spec())

    def validate_fit(self):
        if not self.input:
            raise ConfigError("config key 'input' (training CSV) is required")
        if not self.response:
            raise ConfigError("config key 'response' is required")
        has_coords = bool(self.coord_columns)
        has_adj = self.adjacency is not None
        if has_coords and has_adj:
            raise ConfigError("specify either coord_columns or adjacency, not both")
        if not has_coords and not has_adj:
            raise ConfigError("one of coord_columns or adjacency is required")
        if has_coords and len(self.coord_columns) != 2:
            raise ConfigError("coord_columns must name exactly two columns")
        if has_adj and not self.zone_id_column:
            raise ConfigError("adjacency input requires zone_id_column")
        if self.tr_num < 0:
            raise ConfigError("tr_num must be non-negative")
        if not 0.0 <= self.threshold < 1.0:
            raise ConfigError("threshold must be in [0, 1)")
        if self.y_type not in ("continuous", "count"):
            raise ConfigError(f"y_type must be continuous or count, got {self.y_type!r}")


_TUPLE_KEYS = {"svc_columns", "const_columns", "coord_columns"}
_INT_KEYS = {"tr_num", "seed", "max_iter", "basis_count"}
_FLOAT_KEYS = {"threshold", "delta"}
_BOOL_KEYS = {"nvc", "y_nonneg", "include_noise_var", "compute_quantile", "geojson"}


def parse_config(path, overrides=None) -> RunConfig:
    """Read a flat key = value config file and apply overrides."""
    raw = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in stripped.split("=", 1))
        raw[key] = value
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    return _config_from_dict(raw, source=str(path))


def _config_from_dict(raw, source="<config>"):
    valid = {f.name for f in fields(RunConfig)}
    cfg = {}
    for key, value in raw.items():
        if key not in valid:
            raise ConfigError(f"{source}: unknown config key {key!r}")
        if isinstance(value, str):
            value = _coerce(key, value, source)
        cfg[key] = value
    try:
        return RunConfig(**cfg)
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def _coerce(key, value, source):
    if key in _TUPLE_KEYS:
        return tuple(v.strip() for v in value.split(",") if v.strip())
    if key in _INT_KEYS:
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{source}: key {key!r} must be an integer, got {value!r}")
    if key in _FLOAT_KEYS:
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{source}: key {key!r} must be a number, got {value!r}")
    if key in _BOOL_KEYS:
        low = value.lower()
        if low in BOOL_TRUE:
            return True
        if low in BOOL_FALSE:
            return False
        raise ConfigError(f"{source}: key {key!r} must be boolean, got {value!r}")
    return value


# ---------------------------------------------------------------------------
# ingestion


def ingest(path, config: RunConfig) -> pd.DataFrame:
    """Load and validate the observation CSV against the configured roles."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    df = pd.read_csv(path)
    if len(df) == 0:
        raise DataError("no data rows")

    needed = [config.response, *config.svc_columns, *config.const_columns]
    needed += list(config.coord_columns)
    if config.offset_column:
        needed.append(config.offset_column)
    if config.group_column:
        needed.append(config.group_column)
    if config.zone_id_column:
        needed.append(config.zone_id_column)
    for col in needed:
        if col not in df.columns:
            raise DataError(f"missing column {col!r}")

    numeric = [config.response, *config.svc_columns, *config.const_columns,
               *config.coord_columns]
    if config.offset_column:
        numeric.append(config.offset_column)
    for col in numeric:
        vals = pd.to_numeric(df[col], errors="coerce")
        if vals.isna().any():
            row = int(vals.isna().idxmax())
            raise DataError(f"non-numeric value in column {col!r} at row {row}")
        df[col] = vals.astype(float)

    if config.y_type == "count":
        y = df[config.response].to_numpy()
        if (y < 0).any():
            row = int(np.argmax(y < 0))
            raise DataError(f"negative count in column {config.response!r} at row {row}")
        frac = np.abs(y - np.round(y))
        if (frac > 1e-9).any():
            row = int(np.argmax(frac > 1e-9))
            raise DataError(
                f"non-integer count in column {config.response!r} at row {row}")
    if config.offset_column:
        off = df[config.offset_column].to_numpy()
        if (off <= 0).any():
            row = int(np.argmax(off <= 0))
            raise DataError(
                f"non-positive offset in column {config.offset_column!r} at row {row}")
    return df


def load_adjacency(path, zone_ids=None):
    """Read adjacency as a dense CSV (header = zone ids) or an edge list.

    Edge lists have two columns of zone identifiers, one edge per line;
    zones appear in first-occurrence order.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"adjacency file not found: {path}")
    head = pd.read_csv(path)
    is_binary_square = (head.shape[0] == head.shape[1]
                        and head.map(lambda v: v in (0, 1, 0.0, 1.0)).all().all())
    if head.shape[1] == 2 and not is_binary_square:
        edges = pd.read_csv(path, dtype=str)
        ids = list(dict.fromkeys(edges.iloc[:, 0].tolist() + edges.iloc[:, 1].tolist()))
        idx = {z: i for i, z in enumerate(ids)}
        adj = np.zeros((len(ids), len(ids)))
        for a, b in edges.itertuples(index=False):
            adj[idx[a], idx[b]] = adj[idx[b], idx[a]] = 1.0
        return adj, ids
    ids = [str(c) for c in head.columns]
    adj = head.to_numpy(dtype=float)
    if adj.shape[0] != adj.shape[1]:
        raise DataError(f"dense adjacency must be square, got {adj.shape}")
    return adj, ids


def build_basis_from_config(df, config: RunConfig) -> EigenBasis:
    if config.coord_columns:
        coords = df[list(config.coord_columns)].to_numpy(dtype=float)
        prox = build_kernel_proximity(coords)
    else:
        adj, ids = load_adjacency(config.adjacency)
        prox = build_contiguity_proximity(adj, site_ids=ids)
    return extract_basis(prox, threshold=config.threshold, count=config.basis_count)


# ---------------------------------------------------------------------------
# model archive


def _pack_arrays(arrays):
    payload = io.BytesIO()
    index = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": str(arr.dtype),
                      "shape": list(arr.shape), "nbytes": len(data)})
        payload.write(data)
    return index, payload.getvalue()


def save_model(model: FittedModel, path, fingerprint: str | None = None):
    """Serialize a fitted model to a single deterministic binary file."""
    state = model._state
    arrays = {
        "x": state.x, "x_scale": state.x_scale, "coef": state.coef,
        "hinv": state.hinv,
        "z_work": state.z_work, "y": state.y, "evec": state.evec,
        "basis_vectors": model.basis.vectors,
        "basis_eigenvalues": model.basis.eigenvalues,
    }
    if model.basis.coords is not None:
        arrays["basis_coords"] = model.basis.coords
        arrays["basis_col_means"] = model.basis.col_means
    if state.offset is not None:
        arrays["offset"] = state.offset
    if state.group_proj is not None:
        arrays["group_proj"] = state.group_proj
    for i, b in enumerate(state.blocks):
        arrays[f"block_{i}_z"] = b.z
    for name, ex in state.nvc_expanders.items():
        arrays[f"nvc_{name}_knots"] = ex.knots
        arrays[f"nvc_{name}_proj"] = ex.proj
        arrays[f"nvc_{name}_scale"] = ex.scale

    meta = {
        "format_version": ARCHIVE_VERSION,
        "package_version": __version__,
        "response": model.response,
        "spec": {
            "svc_columns": list(model.spec.svc_columns),
            "const_columns": list(model.spec.const_columns),
            "nvc": model.spec.nvc,
            "group_column": model.spec.group_column,
            "offset_column": model.spec.offset_column,
        },
        "transform": {"y_type": model.spec.transform.y_type,
                      "y_nonneg": model.spec.transform.y_nonneg,
                      "tr_num": model.spec.transform.tr_num},
        "chain": model.chain.to_dict(),
        "basis": {"kind": model.basis.kind, "range": model.basis.range_,
                  "threshold": model.basis.threshold,
                  "site_ids": list(model.basis.site_ids) if model.basis.site_ids else None},
        "x_names": list(state.x_names),
        "svc_names": list(state.svc_names),
        "group_levels": state.group_levels,
        "blocks": [{"name": b.name, "kind": b.kind, "rho": b.rho,
                    "alpha": None if np.isnan(b.alpha) else b.alpha,
                    "n_cols": b.n_cols} for b in state.blocks],
        "collapsed": [{"name": b.name, "kind": b.kind} for b in state.collapsed],
        "nvc_columns": list(state.nvc_expanders),
        "sigma2": state.sigma2,
        "log_jac_sum": state.log_jac_sum,
        "delta": state.delta,
        "include_noise_var": state.include_noise_var,
        "theta_opt": [float(v) for v in state.theta_opt],
        "theta_names": list(state.theta_names),
        "reml_neg2": state.reml_neg2,
        "fit_stats": model.fit_stats,
        "null_stats": model.null_stats,
        "fingerprint": fingerprint,
    }
    index, payload = _pack_arrays(arrays)
    header = json.dumps({"meta": meta, "arrays": index},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def load_model(path) -> FittedModel:
    """Load a model archive, rejecting incompatible format versions."""
    with open(path, "rb") as fh:
        magic = fh.read(len(ARCHIVE_MAGIC))
        if magic != ARCHIVE_MAGIC:
            raise ArchiveVersionError(f"{path} is not a model archive")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        meta = header["meta"]
        if meta.get("format_version") != ARCHIVE_VERSION:
            raise ArchiveVersionError(
                f"archive format version {meta.get('format_version')} is not "
                f"supported by this build (expected {ARCHIVE_VERSION})")
        arrays = {}
        for item in header["arrays"]:
            data = fh.read(item["nbytes"])
            arrays[item["name"]] = np.frombuffer(
                data, dtype=np.dtype(item["dtype"])).reshape(item["shape"]).copy()

    tspec = TransformSpec(**meta["transform"])
    spec = ModelSpec(svc_columns=tuple(meta["spec"]["svc_columns"]),
                     const_columns=tuple(meta["spec"]["const_columns"]),
                     nvc=meta["spec"]["nvc"],
                     group_column=meta["spec"]["group_column"],
                     offset_column=meta["spec"]["offset_column"],
                     transform=tspec)
    chain = chain_from_dict(meta["chain"])
    site_ids = meta["basis"]["site_ids"]
    basis = EigenBasis(
        vectors=arrays["basis_vectors"], eigenvalues=arrays["basis_eigenvalues"],
        kind=meta["basis"]["kind"], range_=meta["basis"]["range"],
        coords=arrays.get("basis_coords"), col_means=arrays.get("basis_col_means"),
        site_ids=tuple(site_ids) if site_ids else None,
        threshold=meta["basis"]["threshold"])

    blocks = []
    for i, binfo in enumerate(meta["blocks"]):
        blocks.append(RandomBlock(
            name=binfo["name"], kind=binfo["kind"], z=arrays[f"block_{i}_z"],
            eigvals=basis.eigenvalues if binfo["kind"] == "spatial" else None,
            rho=binfo["rho"],
            alpha=np.nan if binfo["alpha"] is None else binfo["alpha"]))
    collapsed = [RandomBlock(name=c["name"], kind=c["kind"],
                             z=np.zeros((arrays["x"].shape[0], 0)))
                 for c in meta["collapsed"]]

    expanders = {}
    for name in meta["nvc_columns"]:
        ex = NvcExpander.__new__(NvcExpander)
        ex.knots = arrays[f"nvc_{name}_knots"]
        ex.valid = True
        ex.proj = arrays[f"nvc_{name}_proj"]
        ex.scale = arrays[f"nvc_{name}_scale"]
        ex.range = (float(ex.knots[0]), float(ex.knots[-1]))
        expanders[name] = ex

    state = _FitState(
        x=arrays["x"], x_names=list(meta["x_names"]),
        x_scale=arrays["x_scale"], blocks=blocks,
        collapsed=collapsed, coef=arrays["coef"], hinv=arrays["hinv"],
        sigma2=meta["sigma2"], z_work=arrays["z_work"],
        log_jac_sum=meta["log_jac_sum"], offset=arrays.get("offset"),
        y=arrays["y"], evec=arrays["evec"], group_levels=meta["group_levels"],
        group_proj=arrays.get("group_proj"), nvc_expanders=expanders,
        svc_names=list(meta["svc_names"]),
        theta_opt=np.array(meta["theta_opt"]),
        theta_names=list(meta["theta_names"]), reml_neg2=meta["reml_neg2"],
        delta=meta["delta"], include_noise_var=meta["include_noise_var"])

    from .estimator import (_beta_table, _group_table, _svc_tables,
                            _variance_report)
    from .predictor import predict_rows
    svc = bool(state.svc_names)
    beta_tab = _beta_table(state, svc)
    b_vc = b_vc_se = b_vc_p = None
    if svc:
        b_vc, b_vc_se, b_vc_p = _svc_tables(state)
    variance = _variance_report(state, basis)
    pred, pred_q = predict_rows(state, chain, x0=state.x,
                                block_designs=[b.z for b in state.blocks],
                                offset0=state.offset, compute_quantile=True)
    return FittedModel(
        spec=spec, response=meta["response"], basis=basis, chain=chain,
        beta=beta_tab, b_vc=b_vc, b_vc_se=b_vc_se, b_vc_p=b_vc_p,
        group_effects=_group_table(state), variance=variance,
        sigma2=meta["sigma2"], fit_stats=meta["fit_stats"],
        null_stats=meta["null_stats"], pred=pred, pred_quantile=pred_q,
        _state=state)


def file_fingerprint(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# text report


def _fmt(v, nd=7):
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return "NA"
    return f"{v:.{nd}f}"


def _summary_block(frame):
    rows = ["Min.", "1st Qu.", "Median", "Mean", "3rd Qu.", "Max."]
    out = pd.DataFrame(index=rows)
    for name, vals in frame.items():
        v = vals.to_numpy()
        out[name] = [v.min(), np.quantile(v, 0.25), np.median(v), v.mean(),
                     np.quantile(v, 0.75), v.max()]
    return out


def build_report(model: FittedModel, call: str = "fit") -> str:
    """Plain-text fit report with one block per result group."""
    lines = [f"Call: {call}", ""]
    if model.is_svc:
        title = ("----Spatially and non-spatially varying coefficients "
                 "on x (summary)----" if model.spec.nvc
                 else "----Spatially varying coefficients on x (summary)----")
        lines += [title, "", "Coefficient estimates:",
                  _summary_block(model.b_vc).to_string(), "",
                  "Statistical significance:",
                  significance_summary(model).to_string(), ""]
        if len(model.beta):
            lines += ["----Constant coefficients on xconst-----",
                      model.beta.to_string(), ""]
    else:
        lines += ["----Coefficients-----", model.beta.to_string(), ""]

    lines += ["----Variance parameters-----", ""]
    head = ("Spatial effects (coefficients on x):" if model.is_svc
            else "Spatial effects (residuals):")
    lines += [head, model.variance["spatial"].to_string(), ""]
    if model.variance["group"] is not None:
        lines += ["Group effects:", f"random_SE  {_fmt(model.variance['group'])}", ""]
        lines += ["Estimated group effects:", model.group_effects.to_string(), ""]
    if model.variance["nvc"] is not None:
        lines += ["Non-spatial effects (coefficients on x):",
                  model.variance["nvc"].to_frame().T.to_string(), ""]

    moments = distribution_moments(model)
    lines += ["----Estimated probability distribution of y-----",
              f"skewness         {_fmt(moments['skewness'], 6)}",
              f"excess kurtosis  {_fmt(moments['excess_kurtosis'], 6)}"]
    lam = model.chain.boxcox_lambda
    if lam is not None:
        lines.append(f"(Box-Cox parameter: {lam:.6f})")
    lines.append("")

    fs = model.fit_stats
    lines += ["----Error statistics-----"]
    if "dispersion" in fs:
        lines.append(f"dispersion parameter      {_fmt(fs['dispersion'], 6)}")
        lines.append(f"deviance explained (%)    {_fmt(fs['deviance_explained'], 6)}")
    lines += [f"resid_SE     {_fmt(fs['resid_SE'])}",
              f"adjR2(cond)  {_fmt(fs['adjR2_cond'])}",
              f"rlogLik      {_fmt(fs['rlogLik'])}",
              f"AIC          {_fmt(fs['AIC'])}",
              f"BIC          {_fmt(fs['BIC'])}",
              f"parameter count p = {fs['p_count']} (n_eff = {fs['n_eff']})"]
    if model.spec.transform.is_count:
        lines.append("note: criteria use the Gaussian working-scale likelihood; "
                     "compare across response families with caution")
    lines.append("")
    ns = model.null_stats
    lines += [f"NULL model: {ns['description']}",
              f"  (r)loglik: {_fmt(ns['rlogLik'], 4)} "
              f"( AIC: {_fmt(ns['AIC'], 4)}, BIC: {_fmt(ns['BIC'], 4)} )"]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def run_fit(config: RunConfig) -> dict:
    """Fit a model per config and write all artifacts to the out directory."""
    config.validate_fit()
    df = ingest(config.input, config)
    basis = build_basis_from_config(df, config)
    spec = config.model_spec()
    fit_fn = fit_resf_vc if config.svc_columns else fit_resf
    model = fit_fn(df, config.response, spec, basis,
                   site_id_column=config.zone_id_column, delta=config.delta,
                   max_iter=config.max_iter,
                   include_noise_var=config.include_noise_var,
                   compute_quantile=config.compute_quantile)

    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {}

    report = build_report(model, call=_call_string(config))
    (out / "report.txt").write_text(report)
    artifacts["report"] = out / "report.txt"

    model.beta.to_csv(out / "coefficients.csv", index_label="term")
    artifacts["coefficients"] = out / "coefficients.csv"
    if model.is_svc:
        svc_frame = pd.concat(
            {"estimate": model.b_vc, "se": model.b_vc_se, "p": model.b_vc_p},
            axis=1)
        svc_frame.columns = [f"{stat}_{name}" for stat, name in svc_frame.columns]
        if config.zone_id_column:
            svc_frame.insert(0, "site_id", df[config.zone_id_column].to_numpy())
        svc_frame.to_csv(out / "svc_field.csv", index_label="row")
        artifacts["svc_field"] = out / "svc_field.csv"

    model.variance["spatial"].to_csv(out / "variance.csv", index_label="stat")
    artifacts["variance"] = out / "variance.csv"
    pd.Series(model.fit_stats).to_csv(out / "fit_stats.csv", header=["value"])
    artifacts["fit_stats"] = out / "fit_stats.csv"
    if model.group_effects is not None:
        model.group_effects.to_csv(out / "group_effects.csv", index_label="level")
        artifacts["group_effects"] = out / "group_effects.csv"

    me = marginal_effects(model)
    me.effects.to_csv(out / "marginal_effects.csv", index_label="row")
    me.summary.to_csv(out / "marginal_summary.csv", index_label="stat")
    artifacts["marginal_effects"] = out / "marginal_effects.csv"

    pred_frame = model.pred.copy()
    if model.pred_quantile is not None:
        pred_frame = pd.concat([pred_frame, model.pred_quantile], axis=1)
        pred_frame["len95"] = (model.pred_quantile["q0.975"]
                               - model.pred_quantile["q0.025"])
    pred_frame.to_csv(out / "pred.csv", index_label="row")
    artifacts["pred"] = out / "pred.csv"

    dens = estimated_density(model)
    pd.DataFrame({"y": dens.y, "density": dens.density}).to_csv(
        out / "density.csv", index=False)
    artifacts["density"] = out / "density.csv"

    save_model(model, out / "model.spw",
               fingerprint=file_fingerprint(config.input))
    artifacts["model"] = out / "model.spw"
    return {"model": model, "artifacts": artifacts, "report": report}


def _call_string(config: RunConfig) -> str:
    fn = "resf_vc" if config.svc_columns else "resf"
    bits = [f"y={config.response}"]
    if config.svc_columns:
        bits.append(f"x={','.join(config.svc_columns)}")
    if config.const_columns:
        bits.append(f"xconst={','.join(config.const_columns)}")
    if config.group_column:
        bits.append(f"xgroup={config.group_column}")
    if config.offset_column:
        bits.append(f"offset={config.offset_column}")
    bits.append(f"y_type={config.y_type}, y_nonneg={config.y_nonneg}, "
                f"tr_num={config.tr_num}")
    return f"{fn}({', '.join(bits)})"


def run_predict(config: RunConfig) -> dict:
    """Load an archive, predict at new sites, write the prediction CSV."""
    if not config.model:
        raise ConfigError("config key 'model' (archive path) is required")
    if not config.prediction_input:
        raise ConfigError("config key 'prediction_input' is required")
    model = load_model(config.model)
    df0 = pd.read_csv(config.prediction_input)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    out_path = out / "prediction.csv"

    q_cols = [f"q{p:g}" for p in
              (0.01, 0.025, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5,
               0.6, 0.7, 0.8, 0.9, 0.95, 0.975, 0.99)]
    if len(df0) == 0:
        cols = ["pred", "pred_transG", "pred_transG_se", "xb", "sf_residual"]
        cols += q_cols + ["len95"]
        pd.DataFrame(columns=cols).to_csv(out_path, index=False)
        return {"rows": 0, "path": out_path}

    if model.basis.kind != "exponential_kernel" and model.basis.n_components > 0:
        raise DataError("extension requires kernel basis: this archive was "
                        "trained on an adjacency basis and cannot predict at "
                        "new coordinates")
    coord_cols = list(config.coord_columns) if config.coord_columns else ["x", "y"]
    missing = [c for c in coord_cols if c not in df0.columns]
    if missing:
        raise DataError(f"prediction file lacks coordinate columns {missing}")
    coords0 = df0[coord_cols].to_numpy(dtype=float)

    offset0 = None
    if model.spec.offset_column and model.spec.offset_column in df0.columns:
        offset0 = pd.to_numeric(df0[model.spec.offset_column]).to_numpy(dtype=float)
    group0 = None
    if model.spec.group_column and model.spec.group_column in df0.columns:
        group0 = df0[model.spec.group_column].tolist()

    res = predict_oos(model, df0, coords0=coords0, offset0=offset0,
                      group0=group0, compute_quantile=config.compute_quantile)
    frame = res.pred.copy()
    if res.quantiles is not None:
        frame = pd.concat([frame, res.quantiles], axis=1)
        frame["len95"] = res.len95
    frame.to_csv(out_path, index=False)
    paths = {"rows": len(frame), "path": out_path, "result": res}
    if config.geojson:
        gj_path = out / "prediction.geojson"
        _write_geojson(gj_path, coords0, frame)
        paths["geojson"] = gj_path
    return paths


def _write_geojson(path, coords, frame):
    """Point FeatureCollection with the prediction columns as properties."""
    features = []
    records = frame.to_dict(orient="records")
    for (x, y), props in zip(coords, records):
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [float(x), float(y)]},
            "properties": {k: (None if isinstance(v, float) and not np.isfinite(v)
                               else v) for k, v in props.items()},
        })
    payload = {"type": "FeatureCollection", "features": features}
    Path(path).write_text(json.dumps(payload, sort_keys=True,
                                     separators=(",", ":")))


def run_basis(config: RunConfig) -> dict:
    """Build the eigenvector basis and export vectors plus eigenvalues."""
    if not config.input:
        raise ConfigError("config key 'input' is required")
    has_coords = bool(config.coord_columns)
    if has_coords == (config.adjacency is not None):
        raise ConfigError("specify either coord_columns or adjacency, not both")
    df = pd.read_csv(config.input)
    if len(df) == 0:
        raise DataError("no data rows")
    for col in config.coord_columns:
        if col not in df.columns:
            raise DataError(f"missing column {col!r}")
    basis = build_basis_from_config(df, config)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    vec = pd.DataFrame(basis.vectors,
                       columns=[f"ev_{i+1}" for i in range(basis.n_components)])
    vec.to_csv(out / "basis_vectors.csv", index=False)
    pd.DataFrame({"eigenvalue": basis.eigenvalues}).to_csv(
        out / "basis_eigenvalues.csv", index=False)
    return {"basis": basis,
            "paths": [out / "basis_vectors.csv", out / "basis_eigenvalues.csv"]}


def run_transform_check(config: RunConfig) -> dict:
    """Gaussianization ladder over D in {0,1,2,3} for one numeric column."""
    if not config.input:
        raise ConfigError("config key 'input' is required")
    col = config.column or config.response
    if not col:
        raise ConfigError("config key 'column' (or 'response') is required")
    df = pd.read_csv(config.input)
    if col not in df.columns:
        raise DataError(f"missing column {col!r}")
    y = pd.to_numeric(df[col], errors="coerce").to_numpy(dtype=float)
    if np.isnan(y).any():
        row = int(np.argmax(np.isnan(y)))
        raise DataError(f"non-numeric value in column {col!r} at row {row}")
    if y.size < 30:
        raise DataError("insufficient data: need at least 30 observations")
    spec = config.transform_spec()
    rows = gaussianization_report(y, spec, depths=(0, 1, 2, 3),
                                  delta=config.delta)
    table = pd.DataFrame(
        [{"tr_num": r["tr_num"], "skewness": r["skewness"],
          "excess_kurtosis": r["excess_kurtosis"],
          "layers": json.dumps(r["chain"].to_dict()["layers"])} for r in rows])
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "transform_check.csv", index=False)
    return {"table": table, "path": out / "transform_check.csv"}
