"""Band-restricted k-space losses, single-example SGD training and test-set evaluation.

Strategies differ only in the acquisition mask stored with each training record
and in whether the loss carries the coverage weight mask:

    kband_weighted     random-angle bands, weighted loss
    kband_unweighted   random-angle bands, plain loss
    kvertical          one fixed vertical band
    ksquare            centred low-resolution rectangle
    supervised_full    full k-space
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import grid, metrics
from .data import Container, DatasetRecord, default_calib, make_vd
from .errors import DivergenceError, InvalidArgument, InvalidRecord
from .grid import WeightMask

STRATEGIES = ("kband_weighted", "kband_unweighted", "kvertical", "ksquare", "supervised_full")
MASK_KIND = {
    "kband_weighted": "band",
    "kband_unweighted": "band",
    "kvertical": "vertical",
    "ksquare": "square",
    "supervised_full": "full",
}
POLICY = {
    "kband_weighted": "uniform",
    "kband_unweighted": "uniform",
    "kvertical": "vertical",
    "ksquare": "square",
    "supervised_full": "full",
}
METRIC_COLUMNS = ("slice_id", "method", "r_band", "r_vd", "nmse", "psnr", "ssim")


@dataclass(frozen=True)
class Strategy:
    name: str
    r_band: float = 4.0
    r_vd: float = 4.0

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise InvalidArgument(f"unknown strategy {self.name!r}; expected one of {STRATEGIES}")
        if not self.r_band >= 1 or not self.r_vd >= 1:
            raise InvalidArgument("r_band and r_vd must be >= 1")

    @property
    def weighted(self) -> bool:
        return self.name == "kband_weighted"

    @property
    def policy(self) -> str:
        return POLICY[self.name]


@dataclass(frozen=True)
class LossSpec:
    supervision_mask: np.ndarray
    kind: str = "l1"
    weight: Optional[WeightMask] = None
    domain: str = "kspace"

    def __post_init__(self):
        if self.kind not in ("l1", "l2"):
            raise InvalidArgument(f"unknown loss kind {self.kind!r}")
        if self.domain != "kspace":
            raise InvalidArgument("only k-space losses are supported")
        if self.weight is not None and self.weight.weights.shape != np.shape(self.supervision_mask):
            raise InvalidArgument("weight mask shape does not match the supervision mask")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.0
    epochs: int = 1
    seed: int = 0
    precision: str = "double"
    loss_kind: str = "l1"
    validate_every: int = 1
    init_output_scale: float = 0.0
    schedule: str = "constant"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InvalidArgument("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise InvalidArgument("momentum must lie in [0, 1)")
        if self.epochs < 1:
            raise InvalidArgument("epochs must be positive")
        if self.precision not in ("single", "double"):
            raise InvalidArgument(f"unknown precision {self.precision!r}")
        if self.loss_kind not in ("l1", "l2"):
            raise InvalidArgument(f"unknown loss kind {self.loss_kind!r}")
        if self.schedule not in ("constant", "cosine"):
            raise InvalidArgument(f"unknown learning-rate schedule {self.schedule!r}")

    def lr_at(self, step: int, total: int) -> float:
        """Step size for iteration ``step`` of ``total``."""
        if self.schedule == "cosine":
            return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total))
        return self.learning_rate

    @property
    def real_dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    @property
    def complex_dtype(self):
        return np.complex128 if self.precision == "double" else np.complex64


@dataclass
class TrainRecord:
    strategy: str
    epochs: list = field(default_factory=list)  # one dict per epoch
    wall_clock: float = 0.0
    checkpoint: Optional[str] = None
    params_checksum: Optional[str] = None
    config: dict = field(default_factory=dict)

    @property
    def train_loss(self) -> list[float]:
        return [e["train_loss"] for e in self.epochs]

    def to_jsonl(self) -> str:
        head = {"type": "run", "strategy": self.strategy, "config": self.config}
        lines = [json.dumps(head)] + [json.dumps({"type": "epoch", **e}) for e in self.epochs]
        lines.append(json.dumps({"type": "final", "wall_clock": self.wall_clock,
                                 "checkpoint": self.checkpoint, "params_checksum": self.params_checksum}))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class TrainingExample:
    input_y: np.ndarray
    input_mask: np.ndarray
    target: np.ndarray
    loss: LossSpec


# ---------------------------------------------------------------------------
# losses and examples

def weighted_band_loss(recon, target_band_kspace, band, weight: Optional[WeightMask] = None, kind: str = "l1") -> float:
    """``sum_{j in band} w_j * l(F(recon)_j - target_j)`` with ``l = |.|`` or ``|.|^2``."""
    bits = band.bits if hasattr(band, "bits") else np.asarray(band)
    recon = np.asarray(recon)
    target = np.asarray(target_band_kspace)
    if recon.shape != bits.shape or target.shape != bits.shape:
        raise InvalidArgument(f"shape mismatch: recon {recon.shape}, target {target.shape}, band {bits.shape}")
    w = None if weight is None else weight.weights
    if w is not None and w.shape != bits.shape:
        raise InvalidArgument("weight mask shape does not match the band")
    node = ad.kspace_loss(ad.fft2c_node(ad.constant(recon)), target, bits, w, kind)
    return float(node.value)


def make_training_example(record: DatasetRecord, weight: Optional[WeightMask] = None,
                          kind: str = "l1") -> TrainingExample:
    """Network input ``(B and V) * k`` with the loss supervised on all of ``B``."""
    if record.band is None or record.vd is None:
        raise InvalidRecord(f"{record.record_id}: training records need both a band and a VD mask")
    band = record.band.bits
    input_mask = (band.astype(bool) & record.vd.bits.astype(bool)).astype(np.uint8)
    y = np.where(input_mask != 0, record.kspace, 0)
    return TrainingExample(y, input_mask, record.kspace, LossSpec(band, kind, weight))


def example_loss_node(theta: ad.Var, arch: ad.Architecture, ex: TrainingExample, ucfg: ad.UnrollConfig,
                      dtype=np.complex128) -> ad.Var:
    y = ex.input_y.astype(dtype)
    recon = ad.unrolled_node(theta, arch, y, ex.input_mask, ucfg)
    w = None if ex.loss.weight is None else ex.loss.weight.weights
    return ad.kspace_loss(ad.fft2c_node(recon), ex.target.astype(dtype), ex.loss.supervision_mask, w, ex.loss.kind)


def sgd_step(values, grad, cfg: TrainConfig, state=None, lr: Optional[float] = None):
    """Classical momentum: ``v' = mu v + g``, ``theta' = theta - lr v'``.

    ``lr`` overrides ``cfg.learning_rate`` (used by the schedule).
    """
    values = np.asarray(values)
    grad = np.asarray(grad)
    if values.shape != grad.shape:
        raise InvalidArgument(f"parameter/gradient length mismatch: {values.shape} vs {grad.shape}")
    v = grad if state is None else cfg.momentum * state + grad
    return values - (cfg.learning_rate if lr is None else lr) * v, v


# ---------------------------------------------------------------------------
# training

def _split(dataset, split: str) -> list[DatasetRecord]:
    if isinstance(dataset, (str, Path)):
        dataset = Container(dataset)
    if isinstance(dataset, Container):
        return list(dataset.records(split))
    return [r for r in dataset if r.split == split]


def strategy_weight(strategy: Strategy, shape) -> Optional[WeightMask]:
    if not strategy.weighted:
        return None
    return grid.kband_weight_mask(shape, strategy.r_band)


def _check_records(records: Sequence[DatasetRecord], strategy: Strategy):
    want = MASK_KIND[strategy.name]
    for r in records:
        if r.band is None:
            raise InvalidRecord(f"{r.record_id}: training record has no acquisition mask")
        if r.band.kind != want:
            raise InvalidArgument(f"strategy {strategy.name} expects {want!r} acquisition masks, "
                                  f"record {r.record_id} holds {r.band.kind!r}")


def train(dataset, strategy: Strategy, arch: ad.Architecture, unroll_cfg: ad.UnrollConfig,
          train_cfg: TrainConfig, params: Optional[ad.ModelParams] = None, validation=None,
          out_dir=None, log=None) -> tuple[ad.ModelParams, TrainRecord]:
    """Single-example SGD over the training split in a seeded random order.

    ``dataset`` is a container path, a :class:`Container` or a list of records.
    Validation metrics use ``validation`` (default: the test split) every
    ``validate_every`` epochs. With ``out_dir`` the run writes ``train.jsonl``,
    ``metrics.csv`` and a final checkpoint.
    """
    records = _split(dataset, "train")
    if not records:
        raise InvalidArgument("dataset has no training records")
    _check_records(records, strategy)
    val = _split(dataset, "test") if validation is None else list(validation)
    shape = records[0].shape
    weight = strategy_weight(strategy, shape)
    examples = [make_training_example(r, weight, train_cfg.loss_kind) for r in records]
    params = ad.init_params(arch, train_cfg.seed, output_scale=train_cfg.init_output_scale) if params is None else params
    values = params.values.astype(train_cfg.real_dtype)
    cdt = train_cfg.complex_dtype
    rng = np.random.default_rng(train_cfg.seed)
    rec = TrainRecord(strategy.name, config={
        "strategy": asdict(strategy), "arch": asdict(arch), "unroll": asdict(unroll_cfg),
        "train": asdict(train_cfg), "n_train": len(records), "n_val": len(val)})
    state = None
    step, n_steps = 0, train_cfg.epochs * len(examples)
    t0 = time.perf_counter()
    for epoch in range(train_cfg.epochs):
        total = 0.0
        for it, idx in enumerate(rng.permutation(len(examples))):
            theta = ad.constant(values)
            loss = example_loss_node(theta, arch, examples[idx], unroll_cfg, cdt)
            g = ad.backward(loss, theta)
            lv = float(loss.value)
            if not math.isfinite(lv) or not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite loss or gradient at epoch {epoch}, iteration {it} "
                                      f"(record {records[idx].record_id}, loss {lv}); lower the learning rate")
            total += lv
            lr = train_cfg.lr_at(step, n_steps)
            values, state = sgd_step(values, g.astype(values.dtype, copy=False), train_cfg, state, lr)
            step += 1
        row = {"epoch": epoch, "train_loss": total / len(examples), "elapsed": time.perf_counter() - t0}
        last = epoch == train_cfg.epochs - 1
        if val and train_cfg.validate_every and ((epoch + 1) % train_cfg.validate_every == 0 or last):
            table = evaluate(params.replace(values.astype(np.float64)), val, unroll_cfg, method=strategy.name,
                             r_band=strategy.r_band, r_vd=strategy.r_vd)
            row["val"] = {k: table.mean[k] for k in ("nmse", "psnr", "ssim")}
        rec.epochs.append(row)
        if log is not None:
            log(row)
    rec.wall_clock = time.perf_counter() - t0
    final = params.replace(values.astype(np.float64))
    rec.params_checksum = final.checksum()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rec.checkpoint = str(ad.save_checkpoint(final, out / "model.json"))
        (out / "train.jsonl").write_text(rec.to_jsonl())
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_nmse", "val_psnr", "val_ssim"])
            for e in rec.epochs:
                v = e.get("val", {})
                w.writerow([e["epoch"], repr(e["train_loss"]), v.get("nmse", ""), v.get("psnr", ""), v.get("ssim", "")])
    return final, rec


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalTable:
    rows: list  # dicts with METRIC_COLUMNS
    mean: dict
    std: dict
    recons: Optional[list] = None

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in METRIC_COLUMNS})

    def as_json(self) -> dict:
        return {"rows": self.rows, "mean": self.mean, "std": self.std}


def evaluate(params: ad.ModelParams, test_set, unroll_cfg: ad.UnrollConfig, r_vd: Optional[float] = None,
             method: str = "model", r_band: Optional[float] = None, vd_kind: str = "2d",
             keep_recons: bool = False) -> EvalTable:
    """Reconstruct every test slice from full-grid VD samples and score magnitudes.

    Each record's stored VD mask is used unless ``r_vd`` asks for a different
    acceleration, in which case a mask is drawn from the record's VD seed.
    """
    records = _split(test_set, "test") if isinstance(test_set, (str, Path, Container)) else list(test_set)
    rows, recons = [], []
    for r in records:
        if r.ground_truth is None:
            raise InvalidRecord(f"{r.record_id}: test records need a ground-truth image")
        vd = r.vd
        if vd is None or (r_vd is not None and vd.r_vd_target != r_vd):
            if r_vd is None:
                raise InvalidRecord(f"{r.record_id}: no VD mask stored and no r_vd given")
            seed = int(r.meta.get("vd_seed", 0))
            calib = vd.calib if vd is not None else default_calib(r.shape)
            vd = make_vd(r.shape, r_vd, vd_kind, calib, 2.0 if vd is None else vd.density_power, seed)
        mask = vd.bits
        y = np.where(mask != 0, r.kspace, 0).astype(np.complex128)
        recon = ad.unrolled_forward(params, y, mask, unroll_cfg)
        m = metrics.metric_row(recon, r.ground_truth)
        rows.append({"slice_id": r.record_id, "method": method,
                     "r_band": "" if r_band is None else r_band, "r_vd": vd.r_vd_target, **m.as_dict()})
        if keep_recons:
            recons.append(recon)
    mean, std = {}, {}
    for k in ("nmse", "psnr", "ssim"):
        mean[k], std[k] = metrics.summarize(r[k] for r in rows) if rows else (math.nan, math.nan)
    return EvalTable(rows, mean, std, recons if keep_recons else None)

