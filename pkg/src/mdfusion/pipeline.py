"""Two-stage training (contrastive pretraining, then target training), model
selection on validation AUROC, patient-level cross-validation and ablations.
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from .data import Dataset, FoldSplit, batch_iter, split_folds
from .errors import ConfigError, ContractError, MdFusionError, ModelSelectionError
from .losses import (
    DropoutKind,
    SubsetSampler,
    loss_base,
    loss_con,
    loss_con_hat,
    loss_md,
    loss_smd,
    pair_labels,
)
from .metrics import EvalReport, auroc, mean_reports, metric_bundle
from .model import (
    ALL_MODES,
    HEAD_NAMES,
    NO_DECAY,
    TOKEN_NAMES,
    Mode,
    ModelParams,
    TokenPolicy,
    forward_logit,
    forward_repr,
    init_params,
    save_model,
)
from .optim import AdamW
from .rng import derive_seed

log = logging.getLogger(__name__)

EventSink = Callable[[dict], None]


class PretrainLoss(str, enum.Enum):
    NONE = "none"
    CON = "con"
    CON_HAT = "con_hat"


class ConNorm(str, enum.Enum):
    RAW = "raw"
    MEAN = "mean"


# JSON key -> attribute name, where they differ
_JSON_ALIASES = {"lambda": "lam"}


@dataclass
class TrainConfig:
    dropout: DropoutKind = DropoutKind.SIMULTANEOUS
    token_policy: TokenPolicy = TokenPolicy.LEARNED
    pretrain_loss: PretrainLoss = PretrainLoss.NONE
    lam: float = 1.0
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 150
    pretrain_epochs: int = 50
    batch_size: int = 8
    d_f: int = 64
    d_p: int = 32
    seed: int = 0
    con_norm: ConNorm = ConNorm.MEAN

    def __post_init__(self):
        try:
            self.dropout = DropoutKind(self.dropout)
            self.token_policy = TokenPolicy(self.token_policy)
            self.pretrain_loss = PretrainLoss(self.pretrain_loss)
            self.con_norm = ConNorm(self.con_norm)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        bad = []
        if self.epochs < 1:
            bad.append("epochs")
        if self.pretrain_epochs < 0:
            bad.append("pretrain_epochs")
        if self.lam < 0:
            bad.append("lambda")
        if self.lr <= 0:
            bad.append("lr")
        if self.weight_decay < 0:
            bad.append("weight_decay")
        if self.batch_size < 1:
            bad.append("batch_size")
        if self.d_f < 1:
            bad.append("d_f")
        if self.d_p < 1:
            bad.append("d_p")
        if bad:
            raise ConfigError(f"invalid values for {', '.join(bad)}", bad)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            key = "lambda" if f.name == "lam" else f.name
            out[key] = v.value if isinstance(v, enum.Enum) else v
        return out

    @classmethod
    def json_keys(cls) -> list[str]:
        return ["lambda" if f.name == "lam" else f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, d: dict, base: TrainConfig | None = None) -> TrainConfig:
        """Build from JSON-style keys; unknown keys are all reported at once."""
        unknown = sorted(k for k in d if k not in cls.json_keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}", unknown)
        defaults = cls().to_dict()
        wrong = []
        for k, v in d.items():
            want = type(defaults[k])
            if want is float:
                ok = isinstance(v, (int, float)) and not isinstance(v, bool)
            else:
                ok = isinstance(v, want) and not (want is int and isinstance(v, bool))
            if not ok:
                wrong.append(k)
        if wrong:
            raise ConfigError(f"wrong value types for config keys: {', '.join(sorted(wrong))}", sorted(wrong))
        merged = (base or cls()).to_dict()
        merged.update(d)
        kwargs = {_JSON_ALIASES.get(k, k): v for k, v in merged.items()}
        return cls(**kwargs)

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def label(self) -> str:
        loss = {"none": "base", "conventional": "md", "simultaneous": "smd"}[self.dropout.value]
        parts = [loss]
        if self.dropout is not DropoutKind.NONE:
            parts.append("token" if self.token_policy is TokenPolicy.LEARNED else "zero")
        if self.pretrain_loss is not PretrainLoss.NONE:
            parts.append(self.pretrain_loss.value)
        return "+".join(parts)


def provenance(cfg: TrainConfig) -> dict:
    return {"config": cfg.to_dict(), "config_hash": cfg.config_hash(), "seed": cfg.seed,
            "version": __version__}


@dataclass(frozen=True)
class Streams:
    """Independent seeds for one fold, derived from ``seed XOR fold_id``."""

    fold_seed: int

    @classmethod
    def for_fold(cls, seed: int, fold_id: int) -> Streams:
        return cls(seed ^ fold_id)

    @property
    def init(self) -> int:
        return derive_seed(self.fold_seed, 1)

    @property
    def shuffle(self) -> int:
        return derive_seed(self.fold_seed, 2)

    @property
    def sampler(self) -> int:
        return derive_seed(self.fold_seed, 3)

    @property
    def pretrain_shuffle(self) -> int:
        return derive_seed(self.fold_seed, 4)


@dataclass
class RunRecord:
    epoch_loss: list[float] = field(default_factory=list)
    batch_loss: list[list[float]] = field(default_factory=list)
    val_auroc: dict[str, list[float | None]] = field(default_factory=lambda: {m.value: [] for m in ALL_MODES})
    best_epoch: int = -1
    best_val_auroc: float = -math.inf
    checkpoint: str | None = None
    pretrain_loss: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def frozen(params: ModelParams) -> ModelParams:
    """Constant view of the parameters (shares storage, builds no graph)."""
    return ModelParams(**{k: ad.constant(v.data) for k, v in params.named().items()})


def _safe_auroc(scores, labels) -> float | None:
    try:
        return auroc(scores, labels)
    except MdFusionError:
        return None


def _probs(params: ModelParams, x_c, x_t, mode: Mode, policy: TokenPolicy) -> np.ndarray:
    return ad.sigmoid(forward_logit(params, x_c, x_t, mode, policy)).data[:, 0]


def _emit(sink: EventSink | None, event: dict) -> None:
    if sink is not None:
        sink(event)


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def contrastive_batch_loss(params: ModelParams, x_c, x_t, y, cfg: TrainConfig) -> ad.Tensor:
    pol = cfg.token_policy
    z_c = forward_repr(params, x_c, x_t, "c", pol)
    z_t = forward_repr(params, x_c, x_t, "t", pol)
    a = pair_labels(y)
    t = ad.exp(params.log_scale)
    b = params.logit_bias
    if cfg.pretrain_loss is PretrainLoss.CON_HAT:
        z_f = forward_repr(params, x_c, x_t, "f", pol)
        loss = loss_con_hat(z_c, z_t, z_f, a, t, b)
    else:
        loss = loss_con(z_c, z_t, a, t, b)
    if cfg.con_norm is ConNorm.MEAN:
        loss = ad.scalar_mul(loss, 1.0 / len(y))
    return loss


def pretrain(ds: Dataset, split: FoldSplit, cfg: TrainConfig, streams: Streams | None = None,
             events: EventSink | None = None) -> tuple[ModelParams, list[float]]:
    """Contrastive pretraining of tokens, fusion and projector.

    Runs a fixed ``pretrain_epochs`` budget with no model selection and
    returns the final parameters with the per-epoch mean losses.
    """
    streams = streams or Streams.for_fold(cfg.seed, split.fold_id)
    params = init_params(ds.dim_c, ds.dim_t, cfg.d_f, cfg.d_p, streams.init)
    if cfg.pretrain_loss is PretrainLoss.NONE:
        return params, []
    if not split.train_ids:
        raise ContractError("pretraining needs a non-empty training set")
    trainable = ["fuse_w", "fuse_b", "proj_w", "proj_b", "log_scale", "logit_bias"]
    if cfg.token_policy is TokenPolicy.LEARNED:
        trainable = list(TOKEN_NAMES) + trainable
    opt = AdamW(params.named(), trainable, cfg.lr, cfg.weight_decay, no_decay=NO_DECAY)

    losses = []
    for epoch in range(cfg.pretrain_epochs):
        batch_losses = []
        for x_c, x_t, y in batch_iter(ds, split.train_ids, cfg.batch_size, streams.pretrain_shuffle, epoch):
            opt.zero_grad()
            loss = contrastive_batch_loss(params, x_c, x_t, y, cfg)
            ad.backward(loss)
            opt.step()
            batch_losses.append(loss.item())
        losses.append(math.fsum(batch_losses) / len(batch_losses))
        _emit(events, {"stage": "pretrain", "fold": split.fold_id, "epoch": epoch, "loss": losses[-1]})
    return params, losses


def _target_loss(params, x_c, x_t, y, cfg: TrainConfig, sampler: SubsetSampler | None):
    if cfg.dropout is DropoutKind.NONE:
        return loss_base(forward_logit(params, x_c, x_t, Mode.BOTH, cfg.token_policy), y)
    if cfg.dropout is DropoutKind.CONVENTIONAL:
        return loss_md(params, x_c, x_t, y, sampler, cfg.token_policy)[0]
    return loss_smd(params, x_c, x_t, y, cfg.lam, cfg.token_policy)


def train_target(ds: Dataset, split: FoldSplit, cfg: TrainConfig, init: ModelParams | None = None,
                 streams: Streams | None = None, checkpoint: str | Path | None = None,
                 events: EventSink | None = None) -> tuple[ModelParams, RunRecord]:
    """Supervised training with the configured dropout loss.

    Tokens and fusion weights are carried over from ``init`` when given;
    the classifier head is always freshly initialised. After each epoch
    the Both-mode validation AUROC is measured and the best epoch kept.
    """
    streams = streams or Streams.for_fold(cfg.seed, split.fold_id)
    x_cv, x_tv, y_val = ds.take(split.val_ids)
    if len(np.unique(y_val)) < 2:
        raise ModelSelectionError(
            f"fold {split.fold_id}: validation set has a single class; "
            "model selection by AUROC is impossible, try a different seed or split")

    params = init_params(ds.dim_c, ds.dim_t, cfg.d_f, cfg.d_p, streams.init)
    if init is not None:
        fresh = params.named()
        params = ModelParams(**{k: (fresh[k] if k in HEAD_NAMES else ad.parameter(v.data))
                                for k, v in init.named().items()})
    trainable = ["fuse_w", "fuse_b", "head_w", "head_b"]
    if cfg.token_policy is TokenPolicy.LEARNED:
        trainable = list(TOKEN_NAMES) + trainable
    opt = AdamW(params.named(), trainable, cfg.lr, cfg.weight_decay, no_decay=NO_DECAY)
    sampler = SubsetSampler(streams.sampler) if cfg.dropout is DropoutKind.CONVENTIONAL else None

    record = RunRecord()
    best = params.copy()
    for epoch in range(cfg.epochs):
        batch_losses = []
        for x_c, x_t, y in batch_iter(ds, split.train_ids, cfg.batch_size, streams.shuffle, epoch):
            opt.zero_grad()
            loss = _target_loss(params, x_c, x_t, y, cfg, sampler)
            ad.backward(loss)
            opt.step()
            batch_losses.append(loss.item())
        record.batch_loss.append(batch_losses)
        record.epoch_loss.append(math.fsum(batch_losses) / len(batch_losses))

        view = frozen(params)
        for mode in ALL_MODES:
            record.val_auroc[mode.value].append(
                _safe_auroc(_probs(view, x_cv, x_tv, mode, cfg.token_policy), y_val))
        val = record.val_auroc[Mode.BOTH.value][-1]
        if val > record.best_val_auroc:
            record.best_val_auroc = val
            record.best_epoch = epoch
            best = params.copy()
            if checkpoint is not None:
                save_model(best, {**provenance(cfg), "fold_id": split.fold_id, "epoch": epoch},
                           checkpoint, extra=opt.state_arrays())
                record.checkpoint = str(checkpoint)
        _emit(events, {"stage": "train", "fold": split.fold_id, "epoch": epoch,
                       "loss": record.epoch_loss[-1], "val_auroc": val})
    return best, record


def evaluate(params: ModelParams, ds: Dataset, ids: Sequence[str], modes: Sequence[Mode] = ALL_MODES,
             policy: TokenPolicy = TokenPolicy.LEARNED, cfg: TrainConfig | None = None,
             fold_id: int | None = None) -> EvalReport:
    if not ids:
        raise ContractError("evaluate needs at least one sample id")
    x_c, x_t, y = ds.take(ids)
    view = frozen(params)
    per_mode = {}
    for mode in modes:
        mode = Mode(mode)
        per_mode[mode.value] = metric_bundle(_probs(view, x_c, x_t, mode, policy), y)
    return EvalReport(
        modes=per_mode, n=len(ids),
        config_hash=cfg.config_hash() if cfg else "",
        seed=cfg.seed if cfg else 0,
        fold_id=fold_id,
        provenance=provenance(cfg) if cfg else {},
    )


# --------------------------------------------------------------------------
# cross-validation and ablation
# --------------------------------------------------------------------------

class FoldError(MdFusionError):
    def __init__(self, fold_id: int, cause: BaseException, stage: str = "?"):
        super().__init__(f"fold {fold_id} failed during {stage}: {cause}")
        self.fold_id = fold_id
        self.cause = cause
        self.stage = stage


@dataclass
class FoldResult:
    split: FoldSplit
    report: EvalReport
    record: RunRecord
    params: ModelParams


@dataclass
class CVResult:
    cfg: TrainConfig
    folds: list[FoldResult]
    aggregate: dict[str, dict[str, float | None]]

    @property
    def reports(self) -> list[EvalReport]:
        return [f.report for f in self.folds]

    def aggregate_dict(self) -> dict:
        return {"aggregate": self.aggregate, "n_folds": len(self.folds), "provenance": provenance(self.cfg)}

    def to_dict(self) -> dict:
        return {**self.aggregate_dict(), "folds": [f.report.to_dict() for f in self.folds]}


def run_fold(ds: Dataset, split: FoldSplit, cfg: TrainConfig, out_dir: Path | None = None,
             events: EventSink | None = None) -> FoldResult:
    streams = Streams.for_fold(cfg.seed, split.fold_id)
    stage = "pretrain"
    try:
        init = None
        pre_losses: list[float] = []
        if cfg.pretrain_loss is not PretrainLoss.NONE:
            init, pre_losses = pretrain(ds, split, cfg, streams, events)
        stage = "train"
        ckpt = out_dir / f"fold{split.fold_id}.mmf" if out_dir is not None else None
        params, record = train_target(ds, split, cfg, init, streams, ckpt, events)
        record.pretrain_loss = pre_losses
        stage = "evaluate"
        report = evaluate(params, ds, split.test_ids, ALL_MODES, cfg.token_policy, cfg, split.fold_id)
    except Exception as exc:
        raise FoldError(split.fold_id, exc, stage) from exc
    return FoldResult(split, report, record, params)


def cross_validate(ds: Dataset, cfg: TrainConfig, n_folds: int = 4, val_frac: float = 0.10,
                   jobs: int = 1, out_dir: str | Path | None = None,
                   events: EventSink | None = None) -> CVResult:
    """Patient-level K-fold CV; any fold failure aborts the whole run."""
    splits = split_folds(ds, n_folds, val_frac, cfg.seed)
    out = Path(out_dir) if out_dir is not None else None

    def one(split: FoldSplit) -> FoldResult:
        return run_fold(ds, split, cfg, out, events)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(one, splits))
    else:
        folds = [one(s) for s in splits]
    result = CVResult(cfg, folds, mean_reports([f.report for f in folds]))
    log.info("cv %s: both-mode AUROC %s", cfg.label(), result.aggregate["both"]["auroc"])
    return result


def ablation_grid(base: TrainConfig | None = None) -> list[TrainConfig]:
    """Seven configurations: base loss, then md/smd x zero/learned tokens, then pretraining."""
    base = base or TrainConfig()
    r = base.replace
    none, md, smd = DropoutKind.NONE, DropoutKind.CONVENTIONAL, DropoutKind.SIMULTANEOUS
    zero, learned = TokenPolicy.ZERO, TokenPolicy.LEARNED
    return [
        r(dropout=none, token_policy=zero, pretrain_loss=PretrainLoss.NONE),
        r(dropout=md, token_policy=zero, pretrain_loss=PretrainLoss.NONE),
        r(dropout=md, token_policy=learned, pretrain_loss=PretrainLoss.NONE),
        r(dropout=smd, token_policy=zero, pretrain_loss=PretrainLoss.NONE),
        r(dropout=smd, token_policy=learned, pretrain_loss=PretrainLoss.NONE),
        r(dropout=smd, token_policy=learned, pretrain_loss=PretrainLoss.CON),
        r(dropout=smd, token_policy=learned, pretrain_loss=PretrainLoss.CON_HAT),
    ]


@dataclass
class AblationRow:
    label: str
    cfg: TrainConfig
    auroc: dict[str, float | None]
    cv: CVResult

    def to_dict(self) -> dict:
        return {"label": self.label, "config": self.cfg.to_dict(), "config_hash": self.cfg.config_hash(),
                "auroc": self.auroc, "aggregate": self.cv.aggregate}


def ablate(ds: Dataset, grid: Sequence[TrainConfig], jobs: int = 1,
           events: EventSink | None = None) -> list[AblationRow]:
    """Cross-validate each config; rows trained without dropout show no unimodal AUROC."""
    rows = []
    for cfg in grid:
        cv = cross_validate(ds, cfg, jobs=jobs, events=events)
        aurocs = {m: cv.aggregate[m]["auroc"] for m in cv.aggregate}
        if cfg.dropout is DropoutKind.NONE:
            aurocs = {m: (v if m == Mode.BOTH.value else None) for m, v in aurocs.items()}
        rows.append(AblationRow(cfg.label(), cfg, aurocs, cv))
    return rows
