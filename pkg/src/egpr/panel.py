"""Panel ingestion and feature construction.

Timeline conventions (ordinal integer months):

* ``chars`` row ``(m, asset)`` holds a characteristic value released at the
  end of month ``m``; ``apply_lags`` turns these into the values *visible*
  at each month.
* ``returns`` row ``(j, asset)`` is the excess return realized over
  ``[j-1, j]``; ``market_cap`` on that row is the capitalization at the start
  of the period.
* The training slice of month ``j`` pairs features built from information at
  ``j-1`` with the returns of month ``j``.

Feature vectors are ``(z, z kron c)``: the rank-transformed characteristics
followed by their products with the macro vector, laid out k-major
(``z_1 c_1, ..., z_1 c_q, z_2 c_1, ...``).
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.stats import rankdata
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ConfigError, DataError
from .kernel import KernelParams, kernel_matrix

__all__ = [
    "RawPanel",
    "PanelSlice",
    "Panel",
    "SynthConfig",
    "rank_transform",
    "build_features",
    "apply_lags",
    "synthesize",
    "write_panel",
    "read_panel",
    "CharacteristicTransformer",
]

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SCHEMA_LINE = f"# egpr-schema: {SCHEMA_VERSION}"
DEFAULT_LAGS = {"monthly": 1, "quarterly": 4, "annual": 6}
FREQUENCIES = tuple(DEFAULT_LAGS)


# -- transforms -----------------------------------------------------------------

def rank_transform(column):
    """Map a cross-section onto (-1, 1) by rank; missing entries become 0.

    Non-missing values get average ranks ``r`` among the ``n`` observed values
    and map to ``2 r / (n + 1) - 1``, which puts the cross-sectional median at
    exactly 0.
    """
    column = np.asarray(column, dtype=np.float64)
    if column.ndim != 1 or column.size == 0:
        raise ValueError("column must be a non-empty vector")
    out = np.zeros_like(column)
    observed = ~np.isnan(column)
    n_obs = int(observed.sum())
    if n_obs == 0:
        logger.warning("rank_transform: all %d values missing, returning zeros", column.size)
        return out
    ranks = rankdata(column[observed], method="average")
    out[observed] = 2.0 * ranks / (n_obs + 1.0) - 1.0
    return out


def build_features(chars, macro):
    """Rows ``(z_i, z_i kron c)``; ``chars`` is n x p transformed, ``macro`` length q."""
    Z = np.asarray(chars, dtype=np.float64)
    c = np.asarray(macro, dtype=np.float64).ravel()
    if Z.ndim != 2 or Z.shape[1] == 0:
        raise ValueError("chars must be an n x p matrix with p >= 1")
    if c.size == 0:
        return Z.copy()
    inter = (Z[:, :, None] * c[None, None, :]).reshape(Z.shape[0], -1)
    return np.hstack([Z, inter])


class CharacteristicTransformer(TransformerMixin, BaseEstimator):
    """Cross-sectional rank transform plus macro interactions for one month.

    Stateless: each call to ``transform`` treats its rows as one cross-section.
    """

    def __init__(self, macro=None):
        self.macro = macro

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("X must be two-dimensional")
        Z = np.column_stack([rank_transform(X[:, k]) for k in range(X.shape[1])])
        return build_features(Z, [] if self.macro is None else self.macro)


# -- data model -----------------------------------------------------------------

@dataclass
class RawPanel:
    chars: pd.DataFrame
    macro: pd.DataFrame
    returns: pd.DataFrame
    frequencies: dict
    truth: pd.DataFrame = None
    benchmark: pd.Series = None

    def __post_init__(self):
        self.chars = self.chars.sort_values(["month", "asset_id"], kind="stable").reset_index(drop=True)
        self.returns = self.returns.sort_values(["month", "asset_id"], kind="stable").reset_index(drop=True)
        self.macro = self.macro.sort_index()
        self.validate()

    @property
    def char_names(self):
        return [c for c in self.chars.columns if c not in ("month", "asset_id")]

    @property
    def macro_names(self):
        return list(self.macro.columns)

    def validate(self):
        for name, frame in (("characteristics", self.chars), ("returns", self.returns)):
            dup = frame.duplicated(["month", "asset_id"])
            if dup.any():
                row = frame[dup].iloc[0]
                raise DataError(f"duplicate asset {row.asset_id!r} in month {row.month} of {name}")
        r = self.returns["excess_log_return"].to_numpy()
        if not np.all(np.isfinite(r)):
            raise DataError("returns contain non-finite values")
        if (self.returns["market_cap"] <= 0).any():
            raise DataError("market caps must be positive")
        months = np.unique(self.returns["month"])
        if months.size and not np.array_equal(months, np.arange(months[0], months[-1] + 1)):
            raise DataError("return months are not contiguous")
        missing = [c for c in self.char_names if c not in self.frequencies]
        if missing:
            raise ConfigError(f"characteristics without frequency tag: {missing}")


@dataclass
class PanelSlice:
    month_id: int
    asset_ids: np.ndarray
    features: np.ndarray
    returns: np.ndarray
    market_caps: np.ndarray
    simple_returns: np.ndarray = None

    @property
    def n(self):
        return self.features.shape[0]


def apply_lags(raw, lag_config=None):
    """Replace released characteristic values by those visible at each month.

    A value released at month ``m`` with lag ``L`` is visible from ``m + L``
    on and is carried forward until superseded by a later release.
    """
    lags = dict(DEFAULT_LAGS if lag_config is None else lag_config)
    for name in raw.char_names:
        freq = raw.frequencies.get(name)
        if freq not in lags:
            raise ConfigError(f"characteristic {name!r} has unknown frequency {freq!r}")
    chars = raw.chars
    if chars.empty:
        return raw
    last = max(chars["month"].max(), raw.returns["month"].max() if not raw.returns.empty else 0,
               raw.macro.index.max() if len(raw.macro) else 0)
    months = np.arange(chars["month"].min(), last + 1)
    assets = np.unique(chars["asset_id"])
    visible = {}
    for name in raw.char_names:
        wide = chars.pivot(index="month", columns="asset_id", values=name)
        wide = wide.reindex(index=months, columns=assets).ffill()
        visible[name] = wide.shift(lags[raw.frequencies[name]]).stack(future_stack=True)
    out = pd.DataFrame(visible)
    out.index.names = ["month", "asset_id"]
    out = out.dropna(how="all").reset_index()
    return RawPanel(chars=out, macro=raw.macro, returns=raw.returns, frequencies=raw.frequencies,
                    truth=raw.truth, benchmark=raw.benchmark)


class Panel:
    """Model-ready monthly slices built from a RawPanel.

    ``slice(j)`` pairs returns realized in month ``j`` with features observed
    at ``j - 1``. Slices are cached after first construction.
    """

    def __init__(self, raw, lags=None, lagged=False):
        self.raw = raw
        self.lagged = raw if lagged else apply_lags(raw, lags)
        self._chars_by_month = {m: g for m, g in self.lagged.chars.groupby("month", sort=True)}
        self._returns_by_month = {m: g for m, g in raw.returns.groupby("month", sort=True)}
        self._cache = {}

    @property
    def months(self):
        return sorted(self._returns_by_month)

    @property
    def n_features(self):
        p = len(self.raw.char_names)
        return p * (1 + len(self.raw.macro_names))

    def features_at(self, info_month, asset_ids):
        """Feature matrix for ``asset_ids`` using information up to ``info_month``."""
        names = self.raw.char_names
        chars = self._chars_by_month.get(info_month)
        if chars is None:
            values = np.full((len(asset_ids), len(names)), np.nan)
        else:
            values = chars.set_index("asset_id")[names].reindex(asset_ids).to_numpy(dtype=np.float64)
        if info_month not in self.raw.macro.index:
            raise DataError(f"macro data missing for month {info_month}")
        c = self.raw.macro.loc[info_month].to_numpy(dtype=np.float64)
        Z = np.column_stack([rank_transform(values[:, k]) for k in range(values.shape[1])])
        return build_features(Z, c)

    def slice(self, month):
        if month in self._cache:
            return self._cache[month]
        rets = self._returns_by_month.get(month)
        if rets is None:
            raise DataError(f"no return data for month {month}")
        ids = rets["asset_id"].to_numpy()
        simple = rets["excess_simple_return"].to_numpy(dtype=np.float64) \
            if "excess_simple_return" in rets else np.expm1(rets["excess_log_return"].to_numpy(dtype=np.float64))
        sl = PanelSlice(
            month_id=int(month),
            asset_ids=ids,
            features=self.features_at(month - 1, ids),
            returns=rets["excess_log_return"].to_numpy(dtype=np.float64),
            market_caps=rets["market_cap"].to_numpy(dtype=np.float64),
            simple_returns=simple,
        )
        self._cache[month] = sl
        return sl


# -- synthetic generator -----------------------------------------------------------

@dataclass
class SynthConfig:
    n_months: int = 120
    n_assets: int = 300
    # final cross-section size for a linear ramp; None keeps it constant
    n_assets_end: int = None
    n_chars: int = 5
    n_macro: int = 2
    missing_rate: float = 0.02
    char_persistence: float = 0.9
    macro_persistence: float = 0.95
    true_kernel: dict = field(default_factory=lambda: {"sigma": 0.05, "alpha": 0.3, "beta": 1.0})
    # first return month (0-based, relative) of each regime after the first
    regime_starts: list = field(default_factory=list)
    # "independent" draws a fresh function per regime, "flip" negates it
    regime_mode: str = "independent"
    # optional generating kernel per regime (overrides true_kernel)
    regime_kernels: list = None
    n_anchors: int = 400
    # exactly one of noise_std / target_r2_ceiling is used; the ceiling wins
    noise_std: float = 0.0
    target_r2_ceiling: float = None
    quarterly_chars: int = 0
    seed: int = 0

    def to_dict(self):
        from dataclasses import asdict
        return asdict(self)


def _regime_of(rel_month, starts):
    return int(np.searchsorted(np.asarray(sorted(starts)), rel_month, side="right"))


def synthesize(config=None, seed=None):
    """Draw a RawPanel whose conditional mean is a GP-distributed function of the features.

    The function for each regime is the noise-free GP posterior mean through
    ``n_anchors`` points drawn from the prior at anchors sampled from the
    panel's own feature vectors. The ground-truth means are returned in
    ``RawPanel.truth``.
    """
    cfg = config or SynthConfig()
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    M, p, q = cfg.n_months, cfg.n_chars, cfg.n_macro
    U = max(cfg.n_assets, cfg.n_assets_end or 0)
    asset_ids = np.array([f"A{i:05d}" for i in range(U)])
    n_char_months = M + 2
    # returns live at months 2..M+1 so month-2 features see month-0 releases

    names = [f"char_{k + 1}" for k in range(p)]
    freqs = {n: ("quarterly" if k < cfg.quarterly_chars else "monthly") for k, n in enumerate(names)}
    phi = cfg.char_persistence
    raw = np.empty((n_char_months, U, p))
    raw[0] = rng.standard_normal((U, p))
    for m in range(1, n_char_months):
        raw[m] = phi * raw[m - 1] + np.sqrt(1 - phi**2) * rng.standard_normal((U, p))
    released = raw.copy()
    for k, n in enumerate(names):
        if freqs[n] == "quarterly":
            mask = (np.arange(n_char_months) % 3) != 0
            released[mask, :, k] = np.nan
    missing = rng.random(released.shape) < cfg.missing_rate
    released[missing] = np.nan

    macro = np.empty((n_char_months, q))
    if q:
        macro[0] = rng.standard_normal(q)
        for m in range(1, n_char_months):
            macro[m] = cfg.macro_persistence * macro[m - 1] + \
                np.sqrt(1 - cfg.macro_persistence**2) * rng.standard_normal(q)
    macro_df = pd.DataFrame(macro, index=pd.Index(np.arange(n_char_months), name="month"),
                            columns=[f"macro_{l + 1}" for l in range(q)])

    mm, aa = np.meshgrid(np.arange(n_char_months), np.arange(U), indexing="ij")
    chars_df = pd.DataFrame({"month": mm.ravel(), "asset_id": asset_ids[aa.ravel()]})
    for k, n in enumerate(names):
        chars_df[n] = released[:, :, k].ravel()
    chars_df = chars_df.dropna(subset=names, how="all")

    sizes = np.round(np.linspace(cfg.n_assets, cfg.n_assets_end or cfg.n_assets, M)).astype(int)
    log_cap = rng.normal(0.0, 1.5, U) + 0.5 * raw[0, :, 0]
    rows = [pd.DataFrame({"month": j + 2, "asset_id": asset_ids[:sizes[j]],
                          "excess_log_return": 0.0,
                          "market_cap": np.exp(log_cap[:sizes[j]] + 0.1 * raw[j + 1, :sizes[j], 0])})
            for j in range(M)]
    returns_df = pd.concat(rows, ignore_index=True)
    skeleton = RawPanel(chars=chars_df, macro=macro_df, returns=returns_df, frequencies=freqs)
    panel = Panel(skeleton)
    X_by_month = [panel.slice(j + 2).features for j in range(M)]

    n_regimes = len(cfg.regime_starts) + 1
    if cfg.regime_mode not in ("independent", "flip"):
        raise ConfigError(f"unknown regime_mode {cfg.regime_mode!r}")
    kernels = cfg.regime_kernels or [cfg.true_kernel] * n_regimes
    if len(kernels) != n_regimes:
        raise ConfigError(f"regime_kernels needs {n_regimes} entries, got {len(kernels)}")
    regime = np.array([_regime_of(j, cfg.regime_starts) for j in range(M)])
    f_by_month = [None] * M
    base_draw = None
    for g in range(n_regimes):
        kp = KernelParams(noise_var=0.0, **kernels[g])
        months_g = np.flatnonzero(regime == g)
        pool = np.vstack([X_by_month[j] for j in months_g])
        anchors = pool[rng.choice(pool.shape[0], size=min(cfg.n_anchors, pool.shape[0]), replace=False)]
        K_aa = kernel_matrix(kp, anchors)
        K_aa[np.diag_indices_from(K_aa)] += 1e-10 * np.max(np.diag(K_aa))
        L = np.linalg.cholesky(K_aa)
        if cfg.regime_mode == "flip" and base_draw is not None:
            weights_g = -base_draw[1]
            anchors = base_draw[0]
        else:
            f_anchor = L @ rng.standard_normal(anchors.shape[0])
            weights_g = np.linalg.solve(L.T, np.linalg.solve(L, f_anchor))
            if base_draw is None:
                base_draw = (anchors, weights_g)
        for j in months_g:
            f_by_month[j] = kernel_matrix(kp, X_by_month[j], anchors) @ weights_g

    f_all = np.concatenate(f_by_month)
    if cfg.target_r2_ceiling is not None:
        c = cfg.target_r2_ceiling
        if not 0 < c <= 1:
            raise ConfigError("target_r2_ceiling must lie in (0, 1]")
        noise_std = float(np.sqrt(np.mean(f_all**2) * (1 - c) / c))
    else:
        noise_std = float(cfg.noise_std)
    eps = rng.standard_normal(f_all.size) * noise_std
    r_log = f_all + eps
    returns_df["excess_log_return"] = r_log
    returns_df["excess_simple_return"] = np.expm1(r_log)
    truth_df = returns_df[["month", "asset_id"]].copy()
    truth_df["conditional_mean"] = f_all
    truth_df["noise_std"] = noise_std

    w = returns_df["market_cap"] / returns_df.groupby("month")["market_cap"].transform("sum")
    benchmark = (w * returns_df["excess_simple_return"]).groupby(returns_df["month"]).sum()
    benchmark.name = "benchmark_excess_return"
    return RawPanel(chars=chars_df, macro=macro_df, returns=returns_df, frequencies=freqs,
                    truth=truth_df, benchmark=benchmark)


# -- CSV I/O ------------------------------------------------------------------------

_FILES = {
    "chars": "characteristics.csv",
    "macro": "macro.csv",
    "returns": "returns.csv",
    "meta": "characteristics_meta.json",
    "truth": "truth.csv",
    "benchmark": "benchmark.csv",
}


def _write_csv(frame, path, index=False):
    with open(path, "w", newline="") as fh:
        fh.write(SCHEMA_LINE + "\n")
        frame.to_csv(fh, index=index, lineterminator="\n")


def _read_csv(path, **kwargs):
    if not os.path.exists(path):
        raise DataError(f"input file not found: {path}")
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
        if first != SCHEMA_LINE:
            raise DataError(f"{path}: expected schema header {SCHEMA_LINE!r}, got {first!r}")
        return pd.read_csv(fh, float_precision="round_trip", **kwargs)


def write_panel(raw, directory):
    os.makedirs(directory, exist_ok=True)
    _write_csv(raw.chars, os.path.join(directory, _FILES["chars"]))
    _write_csv(raw.macro, os.path.join(directory, _FILES["macro"]), index=True)
    _write_csv(raw.returns, os.path.join(directory, _FILES["returns"]))
    with open(os.path.join(directory, _FILES["meta"]), "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, "frequencies": raw.frequencies},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    if raw.truth is not None:
        _write_csv(raw.truth, os.path.join(directory, _FILES["truth"]))
    if raw.benchmark is not None:
        _write_csv(raw.benchmark.rename_axis("month").reset_index(),
                   os.path.join(directory, _FILES["benchmark"]))


def read_panel(directory):
    path = lambda key: os.path.join(directory, _FILES[key])
    meta_path = path("meta")
    if not os.path.exists(meta_path):
        raise DataError(f"input file not found: {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{meta_path}: unsupported schema version {meta.get('schema_version')!r}")
    chars = _read_csv(path("chars"), dtype={"asset_id": str})
    macro = _read_csv(path("macro"), index_col="month")
    returns = _read_csv(path("returns"), dtype={"asset_id": str})
    for col in ("month", "asset_id", "excess_log_return", "market_cap"):
        if col not in returns:
            raise DataError(f"{path('returns')}: missing column {col!r}")
    truth = _read_csv(path("truth"), dtype={"asset_id": str}) if os.path.exists(path("truth")) else None
    benchmark = None
    if os.path.exists(path("benchmark")):
        b = _read_csv(path("benchmark"))
        benchmark = b.set_index("month")["benchmark_excess_return"]
    return RawPanel(chars=chars, macro=macro, returns=returns, frequencies=meta["frequencies"],
                    truth=truth, benchmark=benchmark)
