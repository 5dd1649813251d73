"""Online rolling/recursive training loop over calendar months.

To predict month ``T`` the loop treats ``t = T - 1`` as "now": it may read
training slices with returns up to ``t`` and the features of ``T`` (built
from information at ``t``). ``PanelSource`` enforces this and logs every
read.

A month's GP depends only on its own slice, the seed, the optimizer config
and its initial parameters. With warm starts the initial parameters are the
previous month's fit, chained from ``SplitConfig.train_start``, so the fit of
a month is the same for every window length and weighting scheme and the
model cache can be shared across a sweep.
"""

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd

from .ensemble import EQUAL, MSE, equal_weights, mix, mse_weights
from .exceptions import ConfigError, DataError, LookAheadError, NumericalError
from .gp import OptimizerConfig, TrainingSet, build_fitted, fit_gp, model_record, model_from_record
from .kernel import KernelParams
from .metrics import information_coefficient, r2_avg, r2_pool

__all__ = [
    "SplitConfig",
    "PanelSource",
    "ModelCache",
    "RunState",
    "MonthPrediction",
    "step",
    "run",
    "sweep",
]

logger = logging.getLogger(__name__)

ROLLING = "rolling"
RECURSIVE = "recursive"


@dataclass(frozen=True)
class SplitConfig:
    train_start: int
    validation_start: int
    test_start: int
    test_end: int
    scheme: str = ROLLING
    window: int = 96
    weight_scheme: str = MSE
    # fixed scheme: window and weights frozen at the first predicted month
    frozen: bool = False

    def __post_init__(self):
        if not (self.train_start < self.validation_start < self.test_start <= self.test_end):
            raise ConfigError("need train_start < validation_start < test_start <= test_end")
        if self.scheme not in (ROLLING, RECURSIVE):
            raise ConfigError(f"unknown split scheme {self.scheme!r}")
        if self.weight_scheme not in (EQUAL, MSE):
            raise ConfigError(f"unknown weight scheme {self.weight_scheme!r}")
        if self.scheme == ROLLING and self.window < 2:
            raise ConfigError("rolling window must be at least 2")

    def window_months(self, target):
        """Training months (calibration month included) used to predict ``target``."""
        t = target - 1
        if self.scheme == RECURSIVE:
            start = self.train_start
        else:
            start = max(self.train_start, t - self.window + 1)
        months = list(range(start, t + 1))
        if not months:
            raise DataError(f"no training months available before month {target}")
        if self.weight_scheme == MSE and len(months) < 2:
            raise DataError(f"MSE weighting for month {target} needs at least two training months")
        return months

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class AccessRecord:
    kind: str
    month: int
    info_month: int
    horizon: int


class PanelSource:
    """Time-guarded view of a Panel.

    ``advance(t)`` sets the information horizon; any read whose information
    postdates ``t`` raises LookAheadError. Every granted read is kept in
    ``log``.
    """

    def __init__(self, panel):
        self.panel = panel
        self.horizon = None
        self.log = []

    @property
    def months(self):
        return self.panel.months

    def advance(self, t):
        if self.horizon is not None and t < self.horizon:
            raise ValueError("horizon cannot move backwards")
        self.horizon = t

    def _check(self, kind, month, info_month):
        if self.horizon is None or info_month > self.horizon:
            raise LookAheadError(f"{kind} read of month {month} needs information at {info_month}, "
                                 f"horizon is {self.horizon}")
        self.log.append(AccessRecord(kind, month, info_month, self.horizon))

    def training_slice(self, month):
        self._check("train", month, month)
        return self.panel.slice(month)

    def test_inputs(self, month):
        """Asset ids, features and market caps of ``month``; no returns."""
        self._check("test", month, month - 1)
        sl = self.panel.slice(month)
        return sl.asset_ids, sl.features, sl.market_caps

    def violations(self):
        return [r for r in self.log if r.info_month > r.horizon]


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


class ModelCache:
    """Fitted-parameter records keyed by (month, seed, optimizer config, init).

    Records are small; a FittedGP is rebuilt from a record and its training
    slice. With ``directory`` set, records also persist as JSON files.
    """

    def __init__(self, directory=None):
        self.directory = directory
        self._records = {}
        self.hits = 0
        self.misses = 0
        if directory:
            os.makedirs(directory, exist_ok=True)

    @staticmethod
    def key(month, seed, opt_config, init):
        return f"m{int(month):06d}-s{int(seed)}-o{opt_config.digest()}-i{_digest(init.to_dict())}"

    def _path(self, key):
        return os.path.join(self.directory, f"{key}.json")

    def get(self, key):
        rec = self._records.get(key)
        if rec is None and self.directory and os.path.exists(self._path(key)):
            with open(self._path(key)) as fh:
                rec = json.load(fh)
            self._records[key] = rec
        if rec is None:
            self.misses += 1
        else:
            self.hits += 1
        return rec

    def put(self, key, record):
        self._records[key] = record
        if self.directory:
            tmp = self._path(key) + ".tmp"
            with open(tmp, "w") as fh:
                json.dump(record, fh, indent=2, sort_keys=True)
            os.replace(tmp, self._path(key))

    def __len__(self):
        return len(self._records)


@dataclass
class MonthPrediction:
    month: int
    asset_ids: np.ndarray
    market_caps: np.ndarray
    mixture: object


@dataclass
class RunState:
    split: SplitConfig
    init: KernelParams = field(default_factory=KernelParams)
    opt_config: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    cache: ModelCache = field(default_factory=ModelCache)
    diagonal: bool = False
    workers: int = 1
    next_month: int = None
    fitted: dict = field(default_factory=dict)
    records: dict = field(default_factory=dict)
    frozen_weights: object = None
    fit_count: int = 0
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.next_month is None:
            self.next_month = self.split.test_start

    def manifest(self):
        months = sorted(self.records)
        return {
            "split": self.split.to_dict(),
            "init": self.init.to_dict(),
            "optimizer": self.opt_config.to_dict(),
            "seed": self.seed,
            "diagonal": self.diagonal,
            "next_month": self.next_month,
            "models": {str(m): {"params": self.records[m]["params"], "mll": self.records[m]["mll"],
                                "jitter": self.records[m]["jitter"]} for m in months},
            "jitter_escalations": {str(m): self.records[m]["jitter"] for m in months
                                   if self.records[m]["jitter"] > self.records[m]["params"]["noise_var"]},
        }

    # -- model access ---------------------------------------------------------

    def _init_for(self, month):
        if self.opt_config.warm_start and month - 1 >= self.split.train_start:
            prev = self.records[month - 1]
            return KernelParams.from_dict(prev["params"])
        return self.init

    def _fit_record(self, source, month):
        init = self._init_for(month)
        key = ModelCache.key(month, self.seed, self.opt_config, init)
        rec = self.cache.get(key)
        if rec is None:
            sl = source.training_slice(month)
            train = TrainingSet(sl.features, sl.returns, month)
            start = time.perf_counter()
            try:
                model = fit_gp(train, init, self.opt_config, seed=self.seed)
            except NumericalError as exc:
                if exc.month_id is None:
                    raise NumericalError(str(exc), month_id=month) from exc
                raise
            self.timings[month] = time.perf_counter() - start
            self.fit_count += 1
            rec = model_record(model)
            self.cache.put(key, rec)
            return rec, model
        return rec, None

    def ensure_records(self, source, months):
        """Fit or look up parameter records for ``months`` (plus warm-start predecessors)."""
        todo = sorted(set(months) - set(self.records))
        if not todo:
            return {}
        built = {}
        if self.opt_config.warm_start:
            chain = range(min(self.split.train_start, todo[0]), todo[-1] + 1)
            chain = [m for m in chain if m >= self.split.train_start and m not in self.records]
            for m in chain:
                self.records[m], model = self._fit_record(source, m)
                if model is not None:
                    built[m] = model
        elif self.workers > 1 and len(todo) > 1:
            for m in todo:
                source.training_slice(m)
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                results = list(pool.map(lambda m: (m, self._fit_record(source, m)), todo))
            for m, (rec, model) in results:
                self.records[m] = rec
                if model is not None:
                    built[m] = model
        else:
            for m in todo:
                self.records[m], model = self._fit_record(source, m)
                if model is not None:
                    built[m] = model
        return built

    def models_for(self, source, months):
        built = self.ensure_records(source, months)
        for m in months:
            if m in self.fitted:
                continue
            if m in built:
                self.fitted[m] = built[m]
            else:
                sl = source.training_slice(m)
                self.fitted[m] = model_from_record(self.records[m], TrainingSet(sl.features, sl.returns, m))
        return {m: self.fitted[m] for m in months}

    def evict(self, keep):
        for m in list(self.fitted):
            if m not in keep:
                del self.fitted[m]


def step(state, source):
    """Predict ``state.next_month`` and advance the state by one month."""
    target = state.next_month
    t = target - 1
    if target not in source.months:
        raise DataError(f"no panel slice for month {target}")
    source.advance(t)
    split = state.split
    if split.frozen and state.frozen_weights is not None:
        weights = state.frozen_weights
        models = state.models_for(source, weights.active)
        state.evict(set(weights.active))
    else:
        window = split.window_months(target)
        missing = [m for m in window if m not in source.months]
        if missing:
            raise DataError(f"no panel slice for months {missing}")
        train_months = window[:-1] if split.weight_scheme == MSE else window
        models = state.models_for(source, train_months)
        state.evict(set(train_months))
        if split.weight_scheme == MSE:
            weights = mse_weights(models, source.training_slice(window[-1]), workers=state.workers)
        else:
            weights = equal_weights(window)
        if split.frozen:
            state.frozen_weights = weights
    asset_ids, X, caps = source.test_inputs(target)
    pred = mix(models, weights, X, diagonal=state.diagonal, workers=state.workers)
    state.next_month = target + 1
    return MonthPrediction(month=target, asset_ids=asset_ids, market_caps=caps, mixture=pred), state


def run(state, source, end=None):
    """Step from ``state.next_month`` through ``end`` (default ``split.test_end``)."""
    end = state.split.test_end if end is None else end
    out = []
    while state.next_month <= end:
        pred, state = step(state, source)
        out.append(pred)
    return out


def score(predictions, panel):
    realized = [panel.slice(p.month).returns for p in predictions]
    preds = [p.mixture.mean for p in predictions]
    ic, _ = information_coefficient(preds, realized)
    return {
        "r2_pool": r2_pool(preds, realized),
        "r2_avg": r2_avg(preds, realized),
        "ic": ic,
    }


def sweep(panel, windows, schemes, span, base_split, init=None, opt_config=None, seed=0,
          cache=None, workers=1):
    """R^2_pool / R^2_avg / IC over ``span`` for every (window, weight scheme).

    ``windows`` holds integers for rolling windows and/or ``"recursive"``.
    All configurations share one model cache, so each month is fitted once.
    Returns ``(table, cache)``.
    """
    start, end = span
    cache = cache or ModelCache()
    rows = []
    for window in windows:
        for scheme in schemes:
            if window == RECURSIVE:
                split = replace(base_split, scheme=RECURSIVE, weight_scheme=scheme)
            else:
                split = replace(base_split, scheme=ROLLING, window=int(window), weight_scheme=scheme)
            state = RunState(split=split, init=init or KernelParams(),
                             opt_config=opt_config or OptimizerConfig(), seed=seed,
                             cache=cache, diagonal=True, workers=workers, next_month=start)
            preds = run(state, PanelSource(panel), end=end)
            rows.append({"K": window, "scheme": scheme, **score(preds, panel)})
    return pd.DataFrame(rows, columns=["K", "scheme", "r2_pool", "r2_avg", "ic"]), cache
