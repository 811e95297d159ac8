#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
训练循环与超参数扫描

The trainer is a generator: ``run()`` yields one progress dict per epoch,
the caller decides how to display it.
"""

import copy
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.backbone import ActionLLM, count_params
from src.config import SWEEP_AXES
from src.datapipe import ObservationSpec, inject_label_noise, sample_observation
from src.errors import EmptyObservationError, InputError, IntegrityError, NumericError
from src.evalkit import evaluate_grid, input_track
from src.objective import LossBreakdown, build_targets, total_loss, total_loss_backward
from src.utils import chunks, save_checkpoint

logger = logging.getLogger(__name__)


class Adam:
    """First/second-moment optimizer over trainable Params only."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


@dataclass
class TrainSample:
    video_id: str
    alpha: float
    start: int
    observation: object
    targets: object


def snapshot_frozen(model):
    return {name: p.value.copy() for name, p in model.named_params().items() if not p.trainable}


def audit_frozen(model, snapshot):
    """Raise IntegrityError unless every frozen Param is bit-identical to ``snapshot``."""
    params = model.named_params()
    changed = [name for name, value in snapshot.items() if not np.array_equal(params[name].value, value)]
    if changed:
        raise IntegrityError(f"frozen parameters changed during training: {changed[:5]}")
    return True


def split_validation(records, fraction, seed):
    """Hold out a seeded ``fraction`` of the training records (at least one when possible)."""
    if fraction <= 0 or len(records) < 2:
        return list(records), []
    order = np.random.default_rng(seed + 17).permutation(len(records))
    n_val = min(max(1, int(round(fraction * len(records)))), len(records) - 1)
    val = [records[i] for i in sorted(order[:n_val])]
    train = [records[i] for i in sorted(order[n_val:])]
    return train, val


class ActionTrainer:
    """
    Trains one ActionLLM on a list of VideoRecords.
    """

    def __init__(self, config, vocab, records, model=None, output_dir=None):
        """
        Args:
            config: RunConfig
            vocab: Vocabulary of the split
            records: training VideoRecords (a validation fraction is held out)
            model: optional pre-built model
            output_dir: where checkpoints and diagnostic dumps go
        """
        self.config = config.validate()
        self.vocab = vocab
        self.model = model or ActionLLM(config.model, vocab)
        self.terms = config.loss_term_set
        if not config.model.use_text:
            self.terms = self.terms - {"T"}
        self.train_records, self.val_records = split_validation(records, config.val_fraction, config.seed)
        if not self.train_records:
            raise InputError("no training videos")
        self.output_dir = Path(output_dir or config.output_dir)
        self.optimizer = Adam(
            self.model.parameters(), config.lr, (config.beta1, config.beta2), config.adam_eps
        )
        self.rng = np.random.default_rng(config.seed)
        self.best_val = float("inf")
        self.history = []

    # -- samples ----------------------------------------------------------

    def make_sample(self, record, alpha, start, noise_p, rng):
        spec = ObservationSpec(alpha, self.config.train_beta, self.config.sample_rate, start)
        use_pred = self.config.use_predicted and record.predicted_labels is not None
        obs = sample_observation(record, spec, input_labels=input_track(record, self.config.use_predicted))
        if obs.horizon < 1:
            raise EmptyObservationError(f"video {record.id}: empty prediction horizon at alpha={alpha}")
        if noise_p > 0.0 and not use_pred:
            obs.input_labels = inject_label_noise(obs.input_labels, noise_p, self.vocab.num_classes, rng)
        targets = build_targets(
            obs.gt_labels, obs.segments, self.config.model.num_queries, obs.horizon, self.vocab.num_classes
        )
        return TrainSample(record.id, alpha, start, obs, targets)

    def _epoch_samples(self):
        order = self.rng.permutation(len(self.train_records))
        for i in order:
            record = self.train_records[i]
            alpha = float(self.rng.choice(self.config.train_alphas))
            start = int(self.rng.integers(0, self.config.train_start_max + 1))
            try:
                yield self.make_sample(record, alpha, start, self.config.noise_p, self.rng)
            except EmptyObservationError as e:
                logger.debug("skipping training sample: %s", e)

    # -- steps ------------------------------------------------------------

    def loss_and_backward(self, sample, train_mode=True):
        obs = sample.observation
        pack, cache = self.model.forward(obs.features, obs.input_labels, train_mode, self.rng)
        losses = total_loss(pack, sample.targets, self.terms, self.config.loss_mean)
        if not np.isfinite(losses.L_total):
            raise NumericError(f"non-finite loss on video {sample.video_id}: {losses.as_dict()}")
        grads = total_loss_backward(pack, sample.targets, self.terms, self.config.loss_mean)
        self.model.backward(grads, cache)
        return losses

    def train_epoch(self):
        total = LossBreakdown()
        count = 0
        for batch in chunks(self._epoch_samples(), self.config.batch_size):
            self.optimizer.zero_grad()
            batch_losses = LossBreakdown()
            try:
                for sample in batch:
                    batch_losses = batch_losses + self.loss_and_backward(sample)
            except NumericError:
                self._dump_batch(batch)
                raise
            if len(batch) > 1:
                for p in self.optimizer.params:
                    p.grad /= len(batch)
            self._check_grads(batch)
            self.optimizer.step()
            total = total + batch_losses
            count += len(batch)
        return total.scaled(1.0 / max(count, 1)), count

    def validate(self):
        if not self.val_records:
            return None
        total = LossBreakdown()
        count = 0
        for record in self.val_records:
            for alpha in self.config.train_alphas:
                try:
                    sample = self.make_sample(record, alpha, 0, 0.0, self.rng)
                except EmptyObservationError:
                    continue
                pack = self.model.predict(sample.observation.features, sample.observation.input_labels)
                total = total + total_loss(pack, sample.targets, self.terms, self.config.loss_mean)
                count += 1
        return total.scaled(1.0 / max(count, 1)) if count else None

    def _check_grads(self, batch):
        for p in self.optimizer.params:
            if not np.all(np.isfinite(p.grad)):
                self._dump_batch(batch)
                raise NumericError("non-finite gradient; batch dumped to " + str(self._dump_path))

    @property
    def _dump_path(self):
        return self.output_dir / "nonfinite_batch.json"

    def _dump_batch(self, batch):
        self.output_dir.mkdir(parents=True, exist_ok=True)
        dump = []
        for s in batch:
            dump.append({
                "video": s.video_id,
                "alpha": s.alpha,
                "start": s.start,
                "frames": s.observation.frames.tolist(),
                "input_labels": s.observation.input_labels.tolist(),
                "segments": s.observation.segments,
                "phi": s.targets.phi,
            })
        self._dump_path.write_text(json.dumps(dump, indent=2), encoding="utf-8")
        logger.error("offending batch written to %s", self._dump_path)

    # -- loop -------------------------------------------------------------

    def run(self, start_epoch=0, write_checkpoints=True):
        """
        运行训练过程

        Yields:
            dict with epoch, train / val LossBreakdown, best flag, sample count, seconds
        """
        frozen = snapshot_frozen(self.model)
        learnable, frozen_count = count_params(self.model)
        logger.info(
            "training %d videos (%d held out), %d learnable / %d frozen params, config %s",
            len(self.train_records), len(self.val_records), learnable, frozen_count,
            self.config.model.fingerprint(),
        )
        for epoch in range(start_epoch, self.config.epochs):
            started = time.time()
            train_losses, count = self.train_epoch()
            val_losses = self.validate()
            score = val_losses.L_total if val_losses is not None else train_losses.L_total
            is_best = score < self.best_val
            if is_best:
                self.best_val = score
                if write_checkpoints:
                    save_checkpoint(self.output_dir / "best.allm", self.model)
            logger.info(
                "epoch %d: L_T=%.4f L_V=%.4f L_A=%.4f L_D=%.4f total=%.4f%s",
                epoch + 1, train_losses.L_T, train_losses.L_V, train_losses.L_A, train_losses.L_D,
                train_losses.L_total, f" val={val_losses.L_total:.4f}" if val_losses else "",
            )
            result = {
                "epoch": epoch + 1,
                "train": train_losses,
                "val": val_losses,
                "best": is_best,
                "samples": count,
                "seconds": time.time() - started,
            }
            self.history.append(result)
            yield result

        if write_checkpoints:
            save_checkpoint(self.output_dir / "final.allm", self.model)
        if self.config.freeze_audit:
            audit_frozen(self.model, frozen)
            logger.info("freeze audit passed: %d frozen params unchanged", len(frozen))


def train_model(config, vocab, records, output_dir=None, write_checkpoints=True):
    """Run every epoch and return the trainer."""
    trainer = ActionTrainer(config, vocab, records, output_dir=output_dir)
    for _ in trainer.run(write_checkpoints=write_checkpoints):
        pass
    return trainer


def sweep(config, axis, values, vocab, train_records, eval_records, backend=None):
    """
    Retrain once per value of ``axis`` and evaluate each model on the grid.

    Args:
        config: base RunConfig (copied per value)
        axis: 'N', 'd_c' or 'L_MA'
        values: values for the axis
        vocab, train_records, eval_records: the data
        backend: optional EvalBackend shared by all evaluations

    Returns:
        list of (value, EvalReport, learnable param count)
    """
    if axis not in SWEEP_AXES:
        raise InputError(f"unknown sweep axis {axis!r}, expected one of {sorted(SWEEP_AXES)}")
    field_name = SWEEP_AXES[axis]
    rows = []
    for value in values:
        run = copy.deepcopy(config)
        setattr(run.model, field_name, int(value))
        logger.info("sweep %s=%s", axis, value)
        trainer = train_model(run, vocab, train_records, write_checkpoints=False)
        report = evaluate_grid(
            trainer.model, eval_records, run.eval_alphas, run.eval_betas, run.sample_rate, backend,
            {"config": run.model.fingerprint(), "seed": run.seed, f"sweep.{axis}": value},
            use_predicted=run.use_predicted,
        )
        rows.append((value, report, count_params(trainer.model)[0]))
    return rows
