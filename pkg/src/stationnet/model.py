"""Expected-demand model: temporal encoder, multi-graph GCN and prediction head.

Training builds one supervised sample per snapshot date ``t``: stations in
service on ``t`` plus stations that open within the target window (those
enter the graph with an empty history), each labelled with its per-weekday
mean demand over ``(t, t + target_window]``.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Tensor
from .data import Dataset, Station, weekday_means
from .graphs import build_snapshot, graph_function
from .spatial import GcnParameters, encode_network
from .temporal import STEP_SIZE, FeatureScaler, LstmParameters, condition, encode_batch, history_inputs

log = logging.getLogger(__name__)

OUTPUT_DAYS = 7


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    seed: int = 42
    epochs: int = 60
    lr: float = 0.03
    optimizer: str = "sgd"
    clip_norm: Optional[float] = 5.0
    history_window: int = 56
    target_window: int = 28
    holdout_days: int = 56
    snapshot_stride: int = 7
    min_history_days: int = 7
    hidden: int = 32
    gcn_width: int = 64
    gcn_layers: int = 2
    head_hidden: int = 32
    per_graph_weights: bool = False
    transductive: bool = False
    snapshot_dates: Optional[List[dt.date]] = None

    def __post_init__(self):
        if self.target_window < 7:
            raise ValueError("target_window must be at least 7 days so every weekday is observed")
        if self.history_window < 1 or self.snapshot_stride < 1:
            raise ValueError("history_window and snapshot_stride must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if self.snapshot_dates is not None:
            d["snapshot_dates"] = [x.isoformat() for x in self.snapshot_dates]
        return d


class HeadParameters:
    def __init__(self, in_width: int, hidden: int = 32, rng: Optional[np.random.Generator] = None):
        shapes = {"head.w1": (in_width, hidden), "head.b1": (hidden,),
                  "head.w2": (hidden, OUTPUT_DAYS), "head.b2": (OUTPUT_DAYS,)}
        vals = {k: np.zeros(s) for k, s in shapes.items()}
        if rng is not None:
            vals["head.w1"] = rng.uniform(-1, 1, shapes["head.w1"]) * np.sqrt(6.0 / (in_width + hidden))
            vals["head.w2"] = rng.uniform(-1, 1, shapes["head.w2"]) * np.sqrt(6.0 / (hidden + OUTPUT_DAYS))
        self.w1, self.b1, self.w2, self.b2 = (Tensor(vals[k], requires_grad=True, name=k) for k in shapes)

    def tensors(self) -> List[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, h: Tensor) -> Tensor:
        hidden = ad.relu(ad.add_bias(ad.matmul(h, self.w1), self.b1))
        return ad.softplus(ad.add_bias(ad.matmul(hidden, self.w2), self.b2))


class DemandModel:
    """All learned parameters plus the fixed feature scaling they were trained with."""

    def __init__(self, n_poi: int, scaler: FeatureScaler, config: TrainingConfig = TrainingConfig(),
                 rng: Optional[np.random.Generator] = None, poi_categories: Sequence[str] = ()):
        self.n_poi = n_poi
        self.poi_categories = list(poi_categories)
        self.scaler = scaler
        self.config = config
        self.static_width = n_poi + 5
        self.lstm = LstmParameters(config.hidden, STEP_SIZE, rng)
        self.gcn = GcnParameters(config.hidden + self.static_width, config.gcn_width, config.gcn_layers, rng,
                                 per_graph=3 if config.per_graph_weights else 0)
        self.head = HeadParameters(self.gcn.out_width, config.head_hidden, rng)

    def parameters(self) -> List[Tensor]:
        return self.lstm.tensors() + self.gcn.tensors() + self.head.tensors()

    def named_arrays(self) -> Dict[str, np.ndarray]:
        out = {p.name: p.data for p in self.parameters()}
        out.update(self.scaler.arrays())
        return out

    def fingerprint(self) -> Dict[str, str]:
        c = self.config
        return {
            "n_poi": str(self.n_poi),
            "poi_categories": ",".join(self.poi_categories),
            "static_width": str(self.static_width),
            "step_size": str(STEP_SIZE),
            "hidden": str(c.hidden),
            "gcn_width": str(c.gcn_width),
            "gcn_layers": str(c.gcn_layers),
            "head_hidden": str(c.head_hidden),
            "per_graph_weights": str(int(c.per_graph_weights)),
        }

    def forward(self, steps: np.ndarray, mask: np.ndarray, static: np.ndarray, graphs: Sequence) -> Tensor:
        if static.shape[1] != self.static_width:
            raise ValueError(f"static features have width {static.shape[1]}, model expects {self.static_width}")
        f = encode_batch(steps, mask, self.lstm)
        h0 = condition(f, Tensor(static))
        return self.head(encode_network(h0, graphs, self.gcn))

    def save(self, path, extra: Optional[Dict[str, str]] = None) -> None:
        meta = dict(self.fingerprint())
        meta["config"] = json.dumps(self.config.as_dict(), sort_keys=True)
        if extra:
            meta.update(extra)
        ckpt.save(path, meta, self.named_arrays())

    @classmethod
    def load(cls, path, dataset: Optional[Dataset] = None) -> "DemandModel":
        meta, arrays = ckpt.load(path)
        cfg = json.loads(meta["config"])
        if cfg.get("snapshot_dates"):
            cfg["snapshot_dates"] = [dt.date.fromisoformat(x) for x in cfg["snapshot_dates"]]
        config = TrainingConfig(**cfg)
        n_poi = int(meta["n_poi"])
        cats = meta["poi_categories"].split(",") if meta["poi_categories"] else []
        if dataset is not None:
            check_compatible(meta, dataset)
        model = cls(n_poi, FeatureScaler.from_arrays(arrays), config, None, cats)
        for p in model.parameters():
            if p.name not in arrays or arrays[p.name].shape != p.shape:
                raise ckpt.CheckpointError(f"checkpoint lacks a {p.shape} array for {p.name}")
            p.data = arrays[p.name].copy()
        return model


def check_compatible(meta: Dict[str, str], dataset: Dataset) -> None:
    if int(meta["n_poi"]) != dataset.n_poi or meta["poi_categories"] != ",".join(dataset.poi_categories):
        raise ckpt.CheckpointError(
            f"checkpoint expects {meta['n_poi']} POI categories ({meta['poi_categories']}), "
            f"dataset has {dataset.n_poi} ({','.join(dataset.poi_categories)})")


def loss_expected(pred: Tensor, truth, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean over stations of the per-station mean squared weekday error.

    ``weights`` (same shape, rows of 0 or 1/7) excludes unsupervised stations.
    """
    truth_t = truth if isinstance(truth, Tensor) else Tensor(truth)
    if pred.shape != truth_t.shape:
        raise ad.ShapeError(f"prediction {pred.shape} and truth {truth_t.shape} differ")
    diff = pred - truth_t
    if weights is None:
        return ad.mean_all(diff * diff)
    rows = weights.any(axis=1).sum()
    return ad.sum_all(diff * diff * Tensor(weights / max(rows, 1)))


# ---------------------------------------------------------------------------
# snapshot samples


@dataclass
class Sample:
    as_of: dt.date
    station_ids: List[str]
    steps: np.ndarray
    mask: np.ndarray
    static: np.ndarray
    graphs: List[np.ndarray]
    truth: np.ndarray
    supervised: np.ndarray  # bool per station: full weekday coverage in target window
    planned: np.ndarray  # bool per station: not yet in service on as_of


def snapshot_members(stations: Sequence[Station], as_of: dt.date, horizon_days: int) -> List[Station]:
    """Stations in service on ``as_of`` followed by those opening within the horizon."""
    until = as_of + dt.timedelta(days=horizon_days)
    alive = [s for s in stations if s.alive_on(as_of)]
    planned = [s for s in stations if as_of < s.deployed_on <= until]
    return alive + planned


def window_truth(ds: Dataset, stations: Sequence[Station], after: dt.date, days: int, counts: np.ndarray):
    """Per-weekday mean demand over ``(after, after + days]`` restricted to service days."""
    index = ds.station_index()
    lo = ds.day_index(after) + 1
    hi = min(lo + days, ds.weather.n_days)
    truth = np.zeros((len(stations), OUTPUT_DAYS))
    complete = np.zeros(len(stations), dtype=bool)
    for j, s in enumerate(stations):
        a = max(lo, ds.day_index(s.deployed_on))
        b = hi if s.closed_on is None else min(hi, ds.day_index(s.closed_on))
        if a >= b:
            continue
        ed = weekday_means(counts[index[s.id], a:b], ds.date_at(a))
        truth[j] = ed.values
        complete[j] = ed.complete
    return truth, complete


def make_sample(ds: Dataset, scaler: FeatureScaler, as_of: dt.date, horizon_days: int, history_window: int,
                counts: Optional[np.ndarray] = None, sim: Optional[np.ndarray] = None,
                members: Optional[List[Station]] = None) -> Sample:
    if counts is None:
        counts = ds.demand_matrix()
    if members is None:
        members = snapshot_members(ds.stations, as_of, horizon_days)
    snap = build_snapshot(members, as_of, sim, include_all=True)
    steps, mask = history_inputs(ds, members, as_of, history_window, counts)
    truth, complete = window_truth(ds, members, as_of, horizon_days, counts)
    planned = np.array([s.deployed_on > as_of for s in members])
    return Sample(as_of, snap.station_ids, steps, mask, scaler.static_features(members),
                  [graph_function(a) for a in snap.adjacency()], truth, complete, planned)


def training_dates(ds: Dataset, config: TrainingConfig) -> List[dt.date]:
    train_end = ds.end - dt.timedelta(days=config.holdout_days)
    if config.snapshot_dates is not None:
        dates = sorted(config.snapshot_dates)
    else:
        last = train_end - dt.timedelta(days=config.target_window)
        first = ds.start + dt.timedelta(days=config.min_history_days - 1)
        dates = []
        t = last
        while t >= first:
            dates.append(t)
            t -= dt.timedelta(days=config.snapshot_stride)
        dates.reverse()
    for t in dates:
        if t + dt.timedelta(days=config.target_window) > train_end:
            raise ValueError(f"snapshot {t} has a target window past the training cutoff {train_end}")
    if len(dates) < 2:
        raise ValueError("training needs at least two snapshot dates with observable target windows")
    return dates


def training_samples(ds: Dataset, config: TrainingConfig, sim: Optional[np.ndarray] = None):
    """Scaler and per-snapshot samples using no demand after the training cutoff."""
    train_end = ds.end - dt.timedelta(days=config.holdout_days)
    dates = training_dates(ds, config)
    cut = ds.day_index(train_end) + 1
    counts = ds.demand_matrix().copy()
    counts[:, cut:] = 0  # nothing past the cutoff is visible to training
    known = [s for s in ds.stations if s.deployed_on <= train_end]
    # transductive runs also place later stations in every training graph, unlabelled and without history
    unseen = [s for s in ds.stations if s.deployed_on > train_end] if config.transductive else []
    scaler = FeatureScaler.fit(known)
    samples = [make_sample(ds, scaler, t, config.target_window, config.history_window, counts, sim,
                           snapshot_members(known, t, config.target_window) + unseen)
               for t in dates]
    return scaler, samples


def _sample_weights(sample: Sample) -> np.ndarray:
    return np.repeat(sample.supervised[:, None], OUTPUT_DAYS, axis=1) / OUTPUT_DAYS


def _inverse_softplus(y: float) -> float:
    return float(y + np.log(-np.expm1(-y))) if y > 0 else -10.0


@dataclass
class TrainingResult:
    model: DemandModel
    losses: List[float] = field(default_factory=list)


def train(ds: Dataset, config: TrainingConfig = TrainingConfig(), sim: Optional[np.ndarray] = None,
          progress=None) -> TrainingResult:
    """Fit a :class:`DemandModel` end to end on weekly snapshots before the holdout.

    Deterministic for a fixed ``config.seed``. ``progress`` is called with
    ``(epoch, loss)`` after every epoch.
    """
    scaler, samples = training_samples(ds, config, sim)
    samples = [s for s in samples if s.supervised.any()]
    if len(samples) < 2:
        raise ValueError("fewer than two snapshots have supervised stations")
    rng = np.random.default_rng(config.seed)
    model = DemandModel(ds.n_poi, scaler, config, rng, ds.poi_categories)
    mean_target = float(np.mean([s.truth[s.supervised].mean() for s in samples]))
    model.head.b2.data[:] = _inverse_softplus(mean_target)
    params = model.parameters()
    adam = ad.Adam(params, lr=config.lr) if config.optimizer == "adam" else None
    order_rng = np.random.default_rng(config.seed + 1)
    result = TrainingResult(model)
    for epoch in range(config.epochs):
        total = 0.0
        for k in order_rng.permutation(len(samples)):
            s = samples[k]
            pred = model.forward(s.steps, s.mask, s.static, s.graphs)
            loss = loss_expected(pred, s.truth, _sample_weights(s))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, snapshot {s.as_of}; lower the learning rate (lr={config.lr})")
            ad.backward(loss)
            if adam is not None:
                adam.step(config.clip_norm)
            else:
                ad.sgd_step(params, config.lr, config.clip_norm)
            total += value
        mean_loss = total / len(samples)
        result.losses.append(mean_loss)
        log.info("epoch %d loss %.6f", epoch, mean_loss)
        if progress is not None:
            progress(epoch, mean_loss)
    return result


def predict_expected(model: DemandModel, sample: Sample) -> np.ndarray:
    """Predicted per-weekday expected demand for every station of ``sample``."""
    return model.forward(sample.steps, sample.mask, sample.static, sample.graphs).numpy()


def predict_at(model: DemandModel, ds: Dataset, as_of: dt.date, horizon_days: int,
               sim: Optional[np.ndarray] = None, counts: Optional[np.ndarray] = None) -> Sample:
    """Evaluation sample at ``as_of``; demand after ``as_of`` only feeds the truth columns."""
    return make_sample(ds, model.scaler, as_of, horizon_days, model.config.history_window, counts, sim)
