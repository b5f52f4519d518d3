"""Training loop: Adam on the negative bound, dev-set early stopping.

Recipe is fixed by config: Adam(beta1 0.95, beta2 0.999, eps 1e-8), lr 1e-3,
L2 1e-4 folded into the gradient inside the step, batch 128, no clipping.
After every epoch the dev bound is evaluated with a fixed evaluation stream;
training stops once the dev bound has not strictly improved for `patience`
epochs and the best-epoch checkpoint is the result.

Determinism contract: given the same data and config, every tensor, log value
and checkpoint byte reproduces; wall-clock seconds exist only in the CSV log.
Checkpoints are cut at epoch boundaries and carry optimizer, RNG, batch-norm
and normalization state, so resuming from last.ckpt continues the interrupted
run bit-for-bit.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import (Checkpoint, checkpoint_from_model, load_checkpoint,
                         restore_adam, restore_model, save_checkpoint)
from .errors import DataError, NumericalError, UsageError
from .model import KIND_AE, KIND_VAE, ae_loss, elbo_parts, vae_loss
from .nn import tensor as T
from .nn.adam import Adam
from .rng import Rng

BEST_NAME = "best.ckpt"
LAST_NAME = "last.ckpt"


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.95
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l2: float = 1e-4
    patience: int = 10
    max_epochs: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise UsageError("batch_size must be >= 2 (batch norm)")
        if self.lr <= 0 or self.patience < 1 or self.max_epochs < 1:
            raise UsageError("lr, patience, max_epochs must be positive")

    def make_adam(self, params) -> Adam:
        return Adam(params, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                    eps=self.adam_eps, l2=self.l2)


@dataclass
class LogRow:
    epoch: int
    train_bound: float
    dev_bound: float
    kl: float
    recon: float
    seconds: float


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    HEADER = "epoch,train_bound,dev_bound,kl,recon,seconds"

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.HEADER + "\n")
            for r in self.rows:
                f.write(f"{r.epoch},{r.train_bound!r},{r.dev_bound!r},"
                        f"{r.kl!r},{r.recon!r},{r.seconds!r}\n")

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path) as f:
            head = f.readline().strip()
            if head != cls.HEADER:
                raise DataError(f"{path}: unexpected log header")
            for line in f:
                parts = line.strip().split(",")
                if len(parts) != 6:
                    raise DataError(f"{path}: malformed log row")
                log.rows.append(LogRow(int(parts[0]), *(float(v) for v in parts[1:])))
        return log


class EarlyStopper:
    """Stop after `patience` epochs without a strictly better dev value."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record an epoch's dev value; returns True if it improved the best."""
        if not np.isfinite(value):
            raise NumericalError(f"non-finite dev value at epoch {epoch}")
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return epoch - self.best_epoch >= self.patience


def batch_plan(perm: np.ndarray, batch_size: int) -> list:
    """Contiguous batches over a permutation; a trailing singleton is merged
    into the previous batch so train-mode batch norm always sees >= 2 rows."""
    n = perm.shape[0]
    plan = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(plan) > 1 and plan[-1].shape[0] == 1:
        plan[-2] = np.concatenate([plan[-2], plan[-1]])
        plan.pop()
    return plan


def evaluate_bound(model, x_db: np.ndarray, seed: int, batch: int = 256):
    """Mean per-segment dev metric in infer mode: the single-sample bound for
    a VAE (fresh seeded epsilon per item, stream independent of training
    state), negative squared error for an AE.  Returns (metric, kl, recon).
    """
    n = x_db.shape[0]
    if n == 0:
        raise DataError("cannot evaluate an empty split")
    xn = model.normalize(x_db)[:, None]
    if model.cfg.kind == KIND_AE:
        tot = 0.0
        for i in range(0, n, batch):
            xb = T.Tensor(np.ascontiguousarray(xn[i:i + batch]))
            _, parts = ae_loss(model, xb, train=False)
            tot += parts["sq_err"] * xb.shape[0]
        return -tot / n, 0.0, -tot / n
    eps = Rng.from_seed(seed, "eval").normal((n, model.cfg.latent_dim), model.cfg.np_dtype)
    tot = np.zeros(3)
    for i in range(0, n, batch):
        xb = T.Tensor(np.ascontiguousarray(xn[i:i + batch]))
        elbo, kl, recon = elbo_parts(model, xb, [T.Tensor(eps[i:i + batch])], train=False)
        tot += [elbo.data.sum(), kl.data.sum(), recon.data.sum()]
    return tuple(float(v / n) for v in tot)


@dataclass
class TrainResult:
    best: Checkpoint
    log: TrainLog
    best_epoch: int
    last_epoch: int
    best_dev: float


def _snapshot(model, adam, rng, cfg, epoch, stopper, rows) -> Checkpoint:
    # max_epochs is a property of the invocation, not of the trajectory; keep
    # it out so an interrupted-and-resumed run writes identical bytes
    cfg_h = {k: v for k, v in asdict(cfg).items() if k != "max_epochs"}
    extra = {"train": {"epoch": epoch, "best_epoch": stopper.best_epoch,
                       "best_dev": float(stopper.best), "seed": cfg.seed,
                       "cfg": cfg_h,
                       "log_rows": [[r.epoch, r.train_bound, r.dev_bound, r.kl, r.recon]
                                    for r in rows]}}
    return checkpoint_from_model(model, adam, rng, extra)


def train(model, train_db: np.ndarray, dev_db: np.ndarray, cfg: TrainConfig,
          out_dir=None, resume: bool = False) -> TrainResult:
    """Fit the model; returns the best-dev-epoch checkpoint and the log.

    With resume=True, out_dir/last.ckpt is loaded and training continues at
    the next epoch; all randomness picks up from the serialized stream, so an
    interrupted run and an uninterrupted one produce identical artifacts.
    """
    if train_db.shape[0] < 2 or dev_db.shape[0] < 1:
        raise DataError("train split needs >= 2 segments and dev >= 1")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    log = TrainLog()
    stopper = EarlyStopper(cfg.patience)
    start_epoch = 1
    best_ckpt = None

    if resume:
        if out is None:
            raise UsageError("resume requires out_dir")
        last = load_checkpoint(out / LAST_NAME)
        saved_cfg = dict(last.header["train"]["cfg"])
        want = asdict(cfg)
        for k in want:
            if k != "max_epochs" and saved_cfg.get(k) != want[k]:
                raise DataError(f"resume config mismatch on {k!r}: "
                                f"{saved_cfg.get(k)} != {want[k]}")
        model = restore_model(last)
        adam = restore_adam(last, model, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                            eps=cfg.adam_eps, l2=cfg.l2)
        rng = Rng.from_state(last.rng_state)
        tr = last.header["train"]
        stopper.best = tr["best_dev"]
        stopper.best_epoch = tr["best_epoch"]
        start_epoch = tr["epoch"] + 1
        for row in tr["log_rows"]:
            log.rows.append(LogRow(int(row[0]), row[1], row[2], row[3], row[4], 0.0))
        best_path = out / BEST_NAME
        best_ckpt = load_checkpoint(best_path) if best_path.exists() else None
    else:
        model.fit_norm_stats(train_db)
        adam = cfg.make_adam(model.params())
        rng = Rng.from_seed(cfg.seed, "train")
        t0 = time.perf_counter()
        tb, _, _ = evaluate_bound(model, train_db, cfg.seed)
        dv, kl0, rc0 = evaluate_bound(model, dev_db, cfg.seed)
        stopper.update(0, dv)
        log.rows.append(LogRow(0, tb, dv, kl0, rc0, time.perf_counter() - t0))
        # the init state is the incumbent best until an epoch beats it
        best_ckpt = _snapshot(model, adam, rng, cfg, 0, stopper, log.rows)
        if out is not None:
            save_checkpoint(out / BEST_NAME, best_ckpt)
            save_checkpoint(out / LAST_NAME, best_ckpt)
            log.write_csv(out / "log.csv")

    n = train_db.shape[0]
    xn_train = np.ascontiguousarray(model.normalize(train_db)[:, None])
    is_vae = model.cfg.kind == KIND_VAE
    latent = model.cfg.latent_dim

    last_epoch = start_epoch - 1
    for epoch in range(start_epoch, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        tot_bound = tot_kl = tot_recon = 0.0
        for idx in batch_plan(perm, cfg.batch_size):
            xb = T.Tensor(np.ascontiguousarray(xn_train[idx]))
            if is_vae:
                eps = rng.normal((idx.shape[0], latent), model.cfg.np_dtype)
                loss, parts = vae_loss(model, xb, eps, train=True)
                tot_kl += parts["kl"] * idx.shape[0]
                tot_recon += parts["recon"] * idx.shape[0]
                tot_bound += parts["bound"] * idx.shape[0]
            else:
                loss, parts = ae_loss(model, xb, train=True)
                tot_bound += -parts["sq_err"] * idx.shape[0]
            if not np.isfinite(loss.data):
                raise NumericalError(
                    f"non-finite loss in epoch {epoch}; last completed epoch "
                    f"{last_epoch}, best dev {stopper.best!r} at epoch {stopper.best_epoch}")
            adam.zero_grad()
            loss.backward()
            adam.step()
        dev, dev_kl, dev_recon = evaluate_bound(model, dev_db, cfg.seed)
        improved = stopper.update(epoch, dev)
        log.rows.append(LogRow(epoch, tot_bound / n, dev, dev_kl, dev_recon,
                               time.perf_counter() - t0))
        last_epoch = epoch
        if improved:
            best_ckpt = _snapshot(model, adam, rng, cfg, epoch, stopper, log.rows)
            if out is not None:
                save_checkpoint(out / BEST_NAME, best_ckpt)
        if out is not None:
            save_checkpoint(out / LAST_NAME,
                            _snapshot(model, adam, rng, cfg, epoch, stopper, log.rows))
            log.write_csv(out / "log.csv")
        if stopper.should_stop(epoch):
            break

    if best_ckpt is None:
        # resume with best.ckpt deleted and no later improvement; recover with
        # the current state so callers still get a usable model
        best_ckpt = _snapshot(model, adam, rng, cfg, last_epoch, stopper, log.rows)
        if out is not None:
            save_checkpoint(out / BEST_NAME, best_ckpt)
    return TrainResult(best_ckpt, log, stopper.best_epoch, last_epoch, float(stopper.best))
