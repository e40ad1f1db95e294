"""Training loop, metrics and the per-run result record."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .adapters import AdapterModel, extract_architecture, parameter_report, variant_to_dict
from .data import Dataset, SplitPlan, setting_label
from .optim import Adam
from .rng import stream

log = logging.getLogger(__name__)


def evaluate(predictions, labels, metric: str = "accuracy") -> float:
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise ValueError(f"predictions {p.shape} vs labels {y.shape}")
    if p.size == 0:
        raise ValueError("cannot evaluate an empty prediction set")
    if metric == "accuracy":
        return float(np.mean(p == y))
    if metric == "matthews":
        return matthews(p, y)
    raise ValueError(f"unknown metric {metric!r}")


def matthews(p: np.ndarray, y: np.ndarray) -> float:
    """Matthews correlation; the multi-class form reduces to the binary one. 0 on a zero denominator."""
    k = int(max(p.max(), y.max())) + 1
    conf = np.zeros((k, k))
    np.add.at(conf, (y, p), 1.0)
    t, pr = conf.sum(axis=1), conf.sum(axis=0)
    c, s = np.trace(conf), conf.sum()
    num = c * s - t @ pr
    den = math.sqrt(s * s - pr @ pr) * math.sqrt(s * s - t @ t)
    return 0.0 if den == 0 else float(min(1.0, max(-1.0, num / den)))


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class RunResult:
    task_id: str
    variant: str
    seed: int
    data_setting: str
    status: str = "ok"
    error: str | None = None
    dev_metrics: list[float] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    dev_metric: float = float("nan")
    test_metric: float = float("nan")
    metric: str = "accuracy"
    selected_layers: list[int] | None = None
    inference_layers: list[int] = field(default_factory=list)
    trainable_param_count: int = 0
    parameters: dict = field(default_factory=dict)
    variant_params: dict = field(default_factory=dict)
    architecture: dict | None = None
    rationals: dict = field(default_factory=dict)
    switches: dict = field(default_factory=dict)
    dataset_fingerprint: str = ""
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def _predict(model: AdapterModel, ids: np.ndarray, mask: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [model.predict(ids[s:s + batch_size], mask[s:s + batch_size]) for s in range(0, len(ids), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def train(model: AdapterModel, dataset: Dataset, split: SplitPlan, cfg: TrainConfig | None = None,
          seed: int = 42, variant_name: str | None = None) -> RunResult:
    """Train the trainable parameters with Adam on cross-entropy.

    Dev is evaluated after each epoch; the reported test metric and all stored
    weights come from the best dev epoch (earliest on ties).
    """
    cfg = cfg or TrainConfig()
    split.check_disjoint()
    t0 = time.perf_counter()
    res = RunResult(dataset.task_id, variant_name or model.variant.kind, seed,
                    setting_label(split.low_data_n), metric=dataset.metric,
                    variant_params=variant_to_dict(model.variant),
                    dataset_fingerprint=dataset.fingerprint())
    ids, mask, labels = dataset.ids, dataset.mask, dataset.labels
    tr, dv, te = (np.asarray(s, dtype=np.int64) for s in (split.train, split.dev, split.test))
    params = model.trainable_parameters()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps) if params else None
    shuffle_rng = stream(seed, "shuffle")
    gumbel_rng = stream(seed, "gumbel")
    drop_rng = stream(seed, "adapterdrop")
    tape = ad.get_tape()

    best_state, best_dev, best_test = model.state_dict(), -math.inf, math.nan
    try:
        for epoch in range(cfg.epochs):
            losses = []
            for b in _batches(len(tr), cfg.batch_size, shuffle_rng):
                rows = tr[b]
                model.begin_step(drop_rng)
                tape.clear()
                logits = model.forward(ids[rows], mask[rows], training=True, rng=gumbel_rng)
                loss = ad.softmax_cross_entropy(logits, labels[rows])
                lv = loss.item()
                if not math.isfinite(lv):
                    raise FloatingPointError(f"loss became {lv} in epoch {epoch}")
                losses.append(lv)
                if opt is not None and loss.requires_grad:
                    ad.backward(loss)
                    opt.step()
            tape.clear()
            dev = evaluate(_predict(model, ids[dv], mask[dv]), labels[dv], dataset.metric) if len(dv) else 0.0
            res.dev_metrics.append(dev)
            res.train_losses.append(float(np.mean(losses)) if losses else float("nan"))
            if dev > best_dev:
                best_dev, res.best_epoch = dev, epoch
                best_state = model.state_dict()
                best_test = evaluate(_predict(model, ids[te], mask[te]), labels[te], dataset.metric)
    except FloatingPointError as e:
        tape.clear()
        res.status, res.error = "failed", str(e)
        res.wall_time = time.perf_counter() - t0
        log.warning("run %s/%s seed %d diverged: %s", res.task_id, res.variant, seed, e)
        return res

    model.load_state_dict(best_state)
    res.dev_metric, res.test_metric = best_dev, best_test
    describe_model(model, res, {"task": dataset.task_id, "seed": seed, "data_setting": res.data_setting})
    res.wall_time = time.perf_counter() - t0
    return res


def describe_model(model: AdapterModel, res: RunResult, provenance: dict) -> None:
    """Fill the architecture, coefficient and parameter-count fields of ``res``."""
    rep = parameter_report(model)
    res.parameters = rep
    res.trainable_param_count = rep["trainable"]
    res.inference_layers = model.inference_layers()
    res.rationals = {str(i): c.to_dict() for i, c in model.rationals().items()}
    switched = model.switched_layers()
    res.switches = {str(i): l.switch.to_dict() for i, l in switched.items()}
    if switched:
        spec = extract_architecture(model, provenance)
        res.architecture = spec.to_dict()
        res.selected_layers = list(spec.selected_layers)
