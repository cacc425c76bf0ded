"""Epoch training loop, dev evaluation, checkpoint save/resume."""

from __future__ import annotations

import contextlib
import json
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .batch import pad_sequences
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .ctc import best_path_decode, ctc_loss, edit_distance, map_labels, read_label_map
from .data import Dataset
from .network import Network, log_softmax
from .normreg import WeightNoiseConfig, apply_weight_noise, is_weight_matrix
from .numeric import ContractError, make_rng, restore_rng, rng_state
from .optim import AdamState, LrSchedule, adam_step, build_batch_plan

LOG_NAME = "train.log"
LAST_NAME = "last.ckpt"
BEST_NAME = "best.ckpt"


class NonFiniteLossError(FloatingPointError):
    """Training produced NaN/Inf; carries the offending batch for diagnosis."""

    def __init__(self, message, epoch, batch_index, ids):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index
        self.ids = ids


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_metric: float
    lr: float
    seconds: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.dev_metric:.6f}\t{self.lr:.6g}\t{self.seconds:.3f}"


@dataclass
class EvalResult:
    loss: float  # per frame
    error_rate: float  # frame error (framewise) or label error (ctc), a fraction
    frames: int
    extra: dict = field(default_factory=dict)


@contextlib.contextmanager
def weight_noise(params: dict, stddev: float, rng):
    """Temporarily perturb weight matrices in place; clean values come back on exit.

    Gradients computed inside the block are applied to the clean weights.
    """
    if stddev <= 0:
        yield
        return
    noisy = apply_weight_noise(params, WeightNoiseConfig(stddev=stddev), rng)
    saved = {k: v.copy() for k, v in params.items() if is_weight_matrix(k, v)}
    try:
        for k in saved:
            params[k][...] = noisy[k]
        yield
    finally:
        for k, v in saved.items():
            params[k][...] = v


def make_batch(ds: Dataset, ids, dtype):
    batch = pad_sequences([ds.features[i] for i in ids], dtype=dtype)
    if ds.kind == "framewise":
        targets = np.zeros(batch.x.shape[:2], dtype=np.int64)
        for row, i in enumerate(ids):
            targets[row, :len(ds.targets[i])] = ds.targets[i]
    else:
        targets = [ds.targets[i] for i in ids]
    return batch, targets


def _check_head(net: Network, ds: Dataset):
    if (net.head == "ctc") != (ds.kind == "ctc"):
        raise ContractError(f"{ds.kind} targets cannot train a {net.head} head")
    if ds.dim != net.input_dim:
        raise ContractError(f"features have dimension {ds.dim}, network expects {net.input_dim}")


def evaluate(net: Network, ds: Dataset, batch_size: int = 8, label_map=None) -> EvalResult:
    """Eval-mode loss and error rate (running batch-norm statistics, no dropout)."""
    _check_head(net, ds)
    loss_sum, frames, errors, ref_total = 0.0, 0, 0, 0
    for ids in build_batch_plan(ds.lengths, batch_size):
        batch, targets = make_batch(ds, ids, net.dtype)
        logits, _ = net.forward(batch, mode="eval")
        frames += batch.frames
        lp = log_softmax(logits.astype(np.float64))
        if net.head == "framewise":
            m = batch.mask
            picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
            loss_sum -= float(picked[m].sum())
            errors += int(((lp.argmax(axis=-1) != targets) & m).sum())
            ref_total += batch.frames
        else:
            nll, _ = ctc_loss(lp, targets, batch.lengths)
            loss_sum += nll
            for row in range(batch.size):
                hyp = best_path_decode(lp[row, :batch.lengths[row]])
                ref = targets[row]
                if label_map is not None:
                    hyp, ref = map_labels(hyp, label_map), map_labels(ref, label_map)
                errors += edit_distance(ref, hyp)
                ref_total += len(ref)
    return EvalResult(loss_sum / frames, errors / max(ref_total, 1), frames,
                      {"errors": errors, "reference": ref_total})


class Trainer:
    """Owns the network, optimizer, schedule and the single RNG stream of a run.

    Every random draw after initialization (dropout masks, weight noise,
    batch reshuffles) comes from ``self.rng`` in a fixed order, so a run is
    a pure function of the configuration and seed.
    """

    def __init__(self, config: RunConfig, train: Dataset, dev: Dataset | None = None, num_classes=None):
        config.validate()
        self.config = config
        self.train = train
        self.dev = dev if dev is not None else train
        self.rng = make_rng(config.seed)
        classes = num_classes or config.num_classes or train.num_classes
        self.net = Network(config.stack_config(), train.dim, classes, head=config.head,
                           rng=self.rng, dtype=config.dtype)
        _check_head(self.net, train)
        _check_head(self.net, self.dev)
        self.adam = AdamState(lr=config.lr)
        self.schedule = LrSchedule(config.lr, config.lr_threshold)
        self.epoch = 0
        self.best_metric = None
        self.records: list[EpochRecord] = []
        self.label_map = read_label_map(config.label_map) if config.label_map else None
        self.grad_hook = None  # called with (grads) after every batch

    # -- one epoch -----------------------------------------------------------

    def _batches(self):
        plan = build_batch_plan(self.train.lengths, self.config.batch_size).batches
        if self.config.reshuffle:
            plan = [plan[i] for i in self.rng.permutation(len(plan))]
        return plan

    def train_epoch(self, out_dir=None) -> float:
        """One pass over the batch plan; returns the per-frame training loss."""
        params = self.net.parameters()
        loss_sum, frames = 0.0, 0
        for bi, ids in enumerate(self._batches()):
            batch, targets = make_batch(self.train, ids, self.net.dtype)
            try:
                with np.errstate(over="ignore", invalid="ignore"), \
                        weight_noise(params, self.config.weight_noise, self.rng):
                    loss, grads, stats = self.net.loss(batch, targets, "train", self.rng)
                    if not np.isfinite(loss):
                        raise FloatingPointError("loss is not finite")
                if self.grad_hook is not None:
                    self.grad_hook(grads)
                adam_step(params, grads, self.adam)
            except FloatingPointError as exc:
                self._abort(exc, bi, ids, out_dir)
            loss_sum += stats["loss_sum"]
            frames += stats["frames"]
        return loss_sum / frames

    def _abort(self, exc, bi, ids, out_dir):
        utts = [self.train.ids[i] for i in ids]
        msg = f"non-finite value in epoch {self.epoch + 1}, batch {bi} ({exc}); utterances {utts}"
        if out_dir:
            dump = {"epoch": self.epoch + 1, "batch_index": bi, "utterances": utts, "error": str(exc)}
            Path(out_dir, "nonfinite-batch.json").write_text(json.dumps(dump, indent=2) + "\n")
        raise NonFiniteLossError(msg, self.epoch + 1, bi, utts) from exc

    def run(self, epochs: int | None = None, out_dir=None, log=None) -> list[EpochRecord]:
        """Train ``epochs`` more epochs (default: up to ``config.epochs`` in total).

        Per epoch: training pass, dev evaluation, schedule update, log line,
        ``last.ckpt`` (and ``best.ckpt`` when the dev error is a new best).
        """
        if epochs is None:
            epochs = max(self.config.epochs - self.epoch, 0)
        out_dir = Path(out_dir) if out_dir else None
        if out_dir:
            out_dir.mkdir(parents=True, exist_ok=True)
        new = []
        for _ in range(epochs):
            start = time.perf_counter()
            train_loss = self.train_epoch(out_dir)
            dev = evaluate(self.net, self.dev, self.config.batch_size, self.label_map)
            self.adam.lr = self.schedule.update(dev.error_rate)
            self.epoch += 1
            improved = self.best_metric is None or dev.error_rate < self.best_metric
            if improved:
                self.best_metric = dev.error_rate
            rec = EpochRecord(self.epoch, train_loss, dev.error_rate, self.adam.lr,
                              time.perf_counter() - start)
            self.records.append(rec)
            new.append(rec)
            if out_dir:
                self.save(out_dir / LAST_NAME)
                if improved:
                    shutil.copyfile(out_dir / LAST_NAME, out_dir / BEST_NAME)
                with open(out_dir / LOG_NAME, "a") as fh:
                    fh.write(rec.line() + "\n")
            if log is not None:
                log(rec)
        return new

    # -- checkpoints ---------------------------------------------------------

    def state_tensors(self) -> dict:
        out = {}
        for k, v in self.net.parameters().items():
            out["param." + k] = v
        for k, v in self.net.buffers().items():
            out["buffer." + k] = v
        for k in self.net.parameters():
            if k in self.adam.m:
                out["adam.m." + k] = self.adam.m[k]
                out["adam.v." + k] = self.adam.v[k]
        return out

    def state_meta(self) -> dict:
        return {
            "format": "ligru-trainer",
            "config": self.config.to_dict(),
            "network": {"input_dim": self.net.input_dim, "num_classes": self.net.num_classes,
                        "head": self.net.head},
            "epoch": self.epoch,
            "best_metric": self.best_metric,
            "adam": {"lr": self.adam.lr, "t": self.adam.t},
            "schedule": {"lr": self.schedule.lr, "threshold": self.schedule.threshold,
                         "history": list(self.schedule.history)},
            "rng": rng_state(self.rng),
        }

    def save(self, path) -> None:
        save_checkpoint(path, self.state_meta(), self.state_tensors())

    def load_state(self, meta: dict, tensors: dict) -> None:
        params, buffers = self.net.parameters(), self.net.buffers()
        for k, v in params.items():
            v[...] = tensors["param." + k]
        for k, v in buffers.items():
            v[...] = tensors["buffer." + k]
        self.adam.m = {k: tensors["adam.m." + k].astype(params[k].dtype) for k in params
                       if "adam.m." + k in tensors}
        self.adam.v = {k: tensors["adam.v." + k].astype(params[k].dtype) for k in params
                       if "adam.v." + k in tensors}
        self.adam.lr = meta["adam"]["lr"]
        self.adam.t = meta["adam"]["t"]
        sch = meta["schedule"]
        self.schedule = LrSchedule(sch["lr"], sch["threshold"], list(sch["history"]))
        self.rng = restore_rng(meta["rng"])
        self.epoch = meta["epoch"]
        self.best_metric = meta["best_metric"]

    @classmethod
    def resume(cls, path, train: Dataset, dev: Dataset | None = None, config: RunConfig | None = None):
        """Rebuild a trainer from a checkpoint; ``config`` may change e.g. ``epochs``."""
        meta, tensors = load_checkpoint(path)
        saved = RunConfig(**meta["config"])
        cfg = config or saved
        trainer = cls(cfg, train, dev, num_classes=meta["network"]["num_classes"])
        trainer.load_state(meta, tensors)
        return trainer

    @classmethod
    def from_checkpoint(cls, path, dtype=None):
        """Network only (for eval/decode/analysis)."""
        meta, tensors = load_checkpoint(path)
        cfg = RunConfig(**meta["config"])
        info = meta["network"]
        net = Network(cfg.stack_config(), info["input_dim"], info["num_classes"], head=info["head"],
                      rng=make_rng(cfg.seed), dtype=dtype or cfg.dtype)
        for k, v in net.parameters().items():
            v[...] = tensors["param." + k]
        for k, v in net.buffers().items():
            v[...] = tensors["buffer." + k]
        return net, cfg, meta


def train_epochs(config: RunConfig, train: Dataset, dev: Dataset | None = None, out_dir=None,
                 epochs: int | None = None) -> Trainer:
    """Build a trainer and run it; returns the trainer (its ``records`` hold the log)."""
    trainer = Trainer(config, train, dev)
    trainer.run(epochs, out_dir)
    return trainer
