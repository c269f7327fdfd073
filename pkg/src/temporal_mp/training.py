"""Cross-entropy + L2 loss, Adam, and the early-stopped training loop."""

from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, NonFiniteError
from .graph import FeatureStats, Splits, TransactionGraph, normalize_features
from .metrics import EvalReport, evaluate
from .model import ModelConfig, ModelParams, init_params, logits_for
from .sampler import Fanout, batch_seeds, iter_chunks, sample_two_hop

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 10
    class_weights: bool = False
    seed: int = 0
    fanout1: int = 100
    fanout2: int = 100
    eval_batch_size: int = 512
    eval_seed: int = 12345

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay (lambda) must be >= 0")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1 or self.eval_batch_size < 1:
            raise ConfigError("patience, batch_size, max_epochs and eval_batch_size must be >= 1")

    @property
    def fanout(self) -> Fanout:
        return Fanout(self.fanout1, self.fanout2)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def l2_penalty(params: ModelParams) -> Tensor:
    """Sum of squared entries of every weight matrix (biases, eps and direction vectors excluded)."""
    terms = [ad.reduce(ad.mul(params[k], params[k]), None, "sum") for k in params.weight_names()]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def loss(logits: Tensor, labels, params: ModelParams | None = None, lam: float = 0.0,
         class_weights: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy over rows (stable log-softmax) plus ``lam`` times the L2 penalty."""
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    n, C = logits.shape
    if y.size != n:
        raise ContractError(f"{y.size} labels for {n} rows")
    if y.size and (y.min() < 0 or y.max() >= C):
        raise ContractError(f"labels must lie in [0, {C})")
    onehot = np.zeros((n, C))
    onehot[np.arange(n), y] = 1.0
    if class_weights is not None:
        w = np.asarray(class_weights, dtype=np.float64)[y]
        onehot *= (w * n / w.sum())[:, None]
    logp = ad.log_softmax_rows(logits)
    ce = ad.scale(ad.reduce(ad.mul(logp, Tensor(onehot)), None, "sum"), -1.0 / n)
    if lam and params is not None:
        ce = ad.add(ce, ad.scale(l2_penalty(params), lam))
    return ce


def inverse_frequency_weights(labels, num_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes).astype(float)
    counts[counts == 0] = 1.0
    return counts.sum() / (num_classes * counts)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ModelParams, state: AdamState, lr: float) -> ModelParams:
    """One bias-corrected Adam update from each parameter's ``grad`` (missing grad = 0).

    Parameters are replaced by fresh leaf tensors; ``params`` is updated in place
    and returned.
    """
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient in {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in list(params.items()):
        g = np.zeros(p.shape) if p.grad is None else p.grad
        m = state.m.get(name, np.zeros(p.shape))
        v = state.v.get(name, np.zeros(p.shape))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params[name] = Tensor(p.data - update, requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------------------
# early stopping and checkpoints
# ---------------------------------------------------------------------------

class EarlyStopping:
    """Track the best validation score; signal a stop after ``patience`` epochs without improvement."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.patience = patience
        self.best: float = -np.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record ``score``; True means it is the new best."""
        if score > self.best:
            self.best, self.best_epoch, self.stale = score, epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    epoch: int
    val_f1_min: float
    model_config: ModelConfig
    train_config: TrainConfig
    stats: FeatureStats | None = None
    extra: dict = field(default_factory=dict)

    def model_params(self) -> ModelParams:
        return ModelParams.from_arrays(self.params)

    def meta(self) -> dict:
        return {
            "epoch": self.epoch,
            "val_f1_min": self.val_f1_min,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "stats": self.stats.to_dict() if self.stats is not None else None,
            "extra": self.extra,
        }


_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write an ``.npz``-compatible zip with fixed timestamps, so equal checkpoints give equal bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(ckpt.params):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(ckpt.params[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"param/{name}.npy", _FIXED_DATE), buf.getvalue())
        meta = json.dumps(ckpt.meta(), sort_keys=True, indent=1).encode()
        zf.writestr(zipfile.ZipInfo("meta.json", _FIXED_DATE), meta)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    params = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        for info in zf.infolist():
            if info.filename.startswith("param/"):
                name = info.filename[len("param/"):-len(".npy")]
                params[name] = np.lib.format.read_array(io.BytesIO(zf.read(info)), allow_pickle=False)
    return Checkpoint(
        params=params, epoch=meta["epoch"], val_f1_min=meta["val_f1_min"],
        model_config=ModelConfig.from_dict(meta["model_config"]),
        train_config=TrainConfig.from_dict(meta["train_config"]),
        stats=FeatureStats.from_dict(meta["stats"]) if meta.get("stats") else None,
        extra=meta.get("extra", {}),
    )


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_f1_min: float
    val_macro_f1: float
    val_pr_auc: float

    HEADER = "epoch,train_loss,val_f1_min,val_macro_f1,val_pr_auc"

    def csv_row(self) -> str:
        return f"{self.epoch},{self.train_loss!r},{self.val_f1_min!r},{self.val_macro_f1!r},{self.val_pr_auc!r}"


def write_trace(trace: list[EpochRecord], path) -> None:
    Path(path).write_text(EpochRecord.HEADER + "\n" + "".join(r.csv_row() + "\n" for r in trace))


def frozen_copy(params: ModelParams) -> ModelParams:
    """Parameters without gradient tracking (cheaper inference)."""
    return ModelParams({k: Tensor(v.data, name=k) for k, v in params.items()})


def predict_items(g: TransactionGraph, ids: np.ndarray, params: ModelParams, cfg: ModelConfig,
                  fanout: Fanout, batch_size: int = 512, seed: int = 12345) -> np.ndarray:
    """Logits for ``ids`` (nodes or edges, by task), in the given order.

    Each chunk is sampled with a generator seeded by ``seed``, so repeated calls
    with the same arguments return identical arrays.
    """
    ids = np.asarray(ids, dtype=np.int64)
    frozen = frozen_copy(params)
    rng = np.random.default_rng(seed)
    out = [logits_for(g, sample_two_hop(g, chunk, fanout, rng, task=cfg.task), frozen, cfg).data
           for chunk in iter_chunks(ids, batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.num_classes))


def evaluate_split(g: TransactionGraph, mask: np.ndarray, params: ModelParams, cfg: ModelConfig,
                   tcfg: TrainConfig) -> EvalReport:
    ids = np.flatnonzero(mask)
    logits = predict_items(g, ids, params, cfg, tcfg.fanout, tcfg.eval_batch_size, tcfg.eval_seed)
    return evaluate(logits, g.labels[ids])


def fit_stats(g: TransactionGraph, splits: Splits, log_features=()) -> FeatureStats:
    """Feature statistics from training items only."""
    if splits.level == "edge":
        emask = splits.train
        nmask = np.zeros(g.num_nodes, bool)
        nmask[g.src[emask]] = True
        nmask[g.dst[emask]] = True
    else:
        nmask = splits.train
        emask = nmask[g.src] | nmask[g.dst]
    return FeatureStats.fit(g, nmask, emask, log_features)


def train(g: TransactionGraph, splits: Splits, cfg: ModelConfig, tcfg: TrainConfig,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[Checkpoint, list[EpochRecord]]:
    """Minibatch training with early stopping on validation F1-min.

    ``g`` is expected to be feature-normalised already. Returns the best
    checkpoint (not the last) and the per-epoch trace.
    """
    if cfg.task != g.task:
        raise ConfigError(f"model task {cfg.task!r} but graph labels are for {g.task!r}")
    train_mask = splits.train
    if not train_mask.any():
        raise ContractError("empty training split")
    y_train = g.labels[train_mask]
    if not (y_train == 1).any():
        raise ContractError("no illicit labels in the training split")

    params = init_params(cfg, tcfg.seed)
    state = AdamState()
    rng = np.random.default_rng(tcfg.seed)
    weights = inverse_frequency_weights(y_train, cfg.num_classes) if tcfg.class_weights else None
    stopper = EarlyStopping(tcfg.patience)
    best = {k: v.numpy() for k, v in params.items()}
    trace: list[EpochRecord] = []
    fanout = tcfg.fanout

    for epoch in range(1, tcfg.max_epochs + 1):
        total, count = 0.0, 0
        for seeds in batch_seeds(g, train_mask, tcfg.batch_size, rng):
            sub = sample_two_hop(g, seeds, fanout, rng, task=cfg.task)
            params.zero_grad()
            value = loss(logits_for(g, sub, params, cfg), g.labels[seeds], params, tcfg.weight_decay, weights)
            ad.backward(value)
            adam_step(params, state, tcfg.lr)
            total += value.item() * seeds.size
            count += seeds.size
        report = evaluate_split(g, splits.val, params, cfg, tcfg)
        rec = EpochRecord(epoch, total / count, report.f1_min, report.macro_f1, report.pr_auc)
        trace.append(rec)
        log.info("epoch %d loss %.5f val f1_min %.4f", epoch, rec.train_loss, rec.val_f1_min)
        if on_epoch:
            on_epoch(rec)
        if stopper.update(epoch, report.f1_min):
            best = {k: v.numpy() for k, v in params.items()}
        if stopper.should_stop:
            break

    ckpt = Checkpoint(best, stopper.best_epoch, stopper.best, cfg, tcfg)
    return ckpt, trace


def prepare(g: TransactionGraph, splits: Splits, log_features=()) -> tuple[TransactionGraph, FeatureStats]:
    stats = fit_stats(g, splits, log_features)
    return normalize_features(g, stats), stats
