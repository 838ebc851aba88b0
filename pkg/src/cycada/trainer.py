"""Staged adaptation protocol: source pretraining, pixel-level cycle-consistent
adaptation, task training on translated images, and gated feature-level
adaptation.

Determinism contract: all batch orders come from seed-derived permutations,
every epoch reseeds the torch RNG from (seed, epoch), and model builders use
local generators, so identical configs reproduce loss trajectories bitwise
and checkpoint/resume at an epoch boundary is exact.
"""

from __future__ import annotations

import collections
import copy
import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from . import losses
from .data import (
    DomainData,
    ImageDataset,
    ToyDomainSpec,
    epoch_batches,
    make_toy_pair,
    paired_epoch_batches,
    load_prepared_shift,
    seed_mix,
    to_tensor,
    to_unit_range,
)
from .errors import ConfigError, DataError, StaleCacheError, TrainingAbort, TrainingDiverged
from .eval import classify_accuracy, write_metrics
from .losses import LossWeights, cycle_loss, gan_loss_discriminator, gan_loss_generator, \
    semantic_consistency_loss, squash_scores, task_loss
from .models import (
    ModelHandle,
    build_feature_discriminator,
    build_generator,
    build_image_discriminator,
    build_task_net,
    load_checkpoint,
    save_checkpoint,
)

STAGE_SOURCE = "source-pretrain"
STAGE_PIXEL = "pixel-adapt"
STAGE_TASK = "task-on-translated"
STAGE_FEATURE = "feature-adapt"
STAGES = (STAGE_SOURCE, STAGE_PIXEL, STAGE_TASK, STAGE_FEATURE)

GAN_STAGES = (STAGE_PIXEL, STAGE_FEATURE)

MANIFEST_SCHEMA_VERSION = 1

# Preview rows in each per-epoch translation-triple grid.
TRIPLE_PREVIEW = 8


@dataclass
class StageConfig:
    """Hyperparameters for one protocol stage."""

    stage: str
    learning_rate: float
    batch_size: int
    max_epochs: int
    seed: int = 0
    optimizer: str = "adam"
    beta1: float | None = None
    beta2: float = 0.999
    momentum: float = 0.9
    weights: LossWeights = field(default_factory=LossWeights)
    disable_cycle: bool = False
    disable_semantic: bool = False
    image_gan_variant: str = losses.LEAST_SQUARES
    feature_gan_variant: str = losses.MINIMAX
    gate_threshold: float = 0.60
    gate_window: int | None = None
    train_domain: str = "source"
    feature_reference: str = "task-on-translated"
    generator_width: int = 32
    discriminator_width: int = 64

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}, expected one of {STAGES}")
        if not self.learning_rate > 0:
            raise ConfigError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        # Zero epochs is the documented no-op configuration.
        if self.max_epochs < 0:
            raise ConfigError("max epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if (self.disable_cycle or self.disable_semantic) and self.stage != STAGE_PIXEL:
            raise ConfigError("ablation flags are only valid for the pixel-adapt stage")
        if self.train_domain not in ("source", "target"):
            raise ConfigError("train_domain must be 'source' or 'target'")
        if self.feature_reference not in ("task-on-translated", "source-pretrain"):
            raise ConfigError(
                "feature_reference must be 'task-on-translated' or 'source-pretrain'"
            )
        if self.gate_window is not None and self.gate_window < 1:
            raise ConfigError("gate window must be >= 1")
        if self.generator_width < 1 or self.discriminator_width < 1:
            raise ConfigError("network widths must be >= 1")

    def effective_beta1(self) -> float:
        if self.beta1 is not None:
            return self.beta1
        return 0.5 if self.stage in GAN_STAGES else 0.9


def _make_optimizer(config: StageConfig, params) -> torch.optim.Optimizer:
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    return torch.optim.Adam(
        params, lr=config.learning_rate, betas=(config.effective_beta1(), config.beta2)
    )


def _require_finite(value: torch.Tensor, term: str) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise TrainingDiverged(term)
    return value


class GateMonitor:
    """Ring of recent per-sample discriminator decisions with a strict threshold.

    The adversarial player may update only while accuracy over the filled
    window is strictly above the threshold.
    """

    def __init__(self, window: int, threshold: float = 0.60):
        if window < 1:
            raise ValueError("gate window must be >= 1")
        self.window = window
        self.threshold = threshold
        self.history = collections.deque(maxlen=window)

    def record(self, correct) -> None:
        for value in np.atleast_1d(np.asarray(correct)).reshape(-1):
            self.history.append(bool(value))

    def accuracy(self) -> float | None:
        if not self.history:
            return None
        return sum(self.history) / len(self.history)

    def open(self) -> bool:
        acc = self.accuracy()
        return acc is not None and acc > self.threshold

    def to_dict(self) -> dict:
        return {"window": self.window, "threshold": self.threshold,
                "history": [bool(v) for v in self.history]}

    @classmethod
    def from_dict(cls, data: dict) -> "GateMonitor":
        monitor = cls(data["window"], data["threshold"])
        monitor.record(data["history"])
        return monitor


class LossLog:
    """Appends (iteration, term, value) rows to a stage's losses.csv."""

    def __init__(self, out_dir: Path | None):
        self.path = None
        self.running: dict = {}
        self.counts: dict = {}
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            self.path = out_dir / "losses.csv"
            if not self.path.exists():
                with open(self.path, "w", newline="") as fh:
                    csv.writer(fh).writerow(["iteration", "term", "value"])

    def record(self, iteration: int, term: str, value: float) -> None:
        self.running[term] = self.running.get(term, 0.0) + value
        self.counts[term] = self.counts.get(term, 0) + 1
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([iteration, term, f"{value:.8f}"])

    def averages(self) -> dict:
        return {term: self.running[term] / self.counts[term] for term in self.running}


@dataclass
class TrainState:
    """Everything needed to resume a stage at an epoch boundary."""

    stage: str
    epoch: int
    iteration: int
    model_states: dict
    optimizer_states: dict
    gate: dict | None = None
    loss_averages: dict = field(default_factory=dict)
    stop_reason: str | None = None

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "stage": self.stage,
                "epoch": self.epoch,
                "iteration": self.iteration,
                "model_states": self.model_states,
                "optimizer_states": self.optimizer_states,
                "gate": self.gate,
                "loss_averages": self.loss_averages,
                "stop_reason": self.stop_reason,
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "TrainState":
        data = torch.load(Path(path), weights_only=True)
        return cls(**data)


def _capture_state(models: dict, optimizers: dict, stage: str, epoch: int, iteration: int,
                   gate: GateMonitor | None = None, averages: dict | None = None) -> TrainState:
    return TrainState(
        stage=stage,
        epoch=epoch,
        iteration=iteration,
        model_states={name: copy.deepcopy(h.module.state_dict()) for name, h in models.items()},
        optimizer_states={name: copy.deepcopy(o.state_dict()) for name, o in optimizers.items()},
        gate=gate.to_dict() if gate is not None else None,
        loss_averages=dict(averages or {}),
    )


def _restore_state(state: TrainState, models: dict, optimizers: dict) -> None:
    for name, handle in models.items():
        handle.module.load_state_dict(state.model_states[name])
    for name, opt in optimizers.items():
        opt.load_state_dict(state.optimizer_states[name])


def _state_path(out_dir) -> Path:
    return Path(out_dir) / "state.pt"


def _maybe_resume(out_dir, resume: bool, stage: str) -> TrainState | None:
    if not resume or out_dir is None:
        return None
    path = _state_path(out_dir)
    if not path.exists():
        return None
    state = TrainState.load(path)
    if state.stage != stage:
        raise TrainingAbort(f"cannot resume: state is for stage {state.stage!r}, not {stage!r}")
    return state


# ---------------------------------------------------------------------------
# Stage 1 (and the target-only baseline): classifier training


def _train_classifier(config: StageConfig, handle: ModelHandle,
                      images: np.ndarray, labels: np.ndarray, *,
                      stage_name: str, translate=None,
                      out_dir=None, resume: bool = False) -> ModelHandle:
    """Shared loop for task-loss training, optionally through a frozen translator."""
    n = len(labels)
    labels_t = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    optimizer = _make_optimizer(config, handle.trainable_parameters())
    models = {"task": handle}
    optimizers = {"opt": optimizer}
    start_epoch = 0
    state = _maybe_resume(out_dir, resume, stage_name)
    if state is not None:
        _restore_state(state, models, optimizers)
        start_epoch = state.epoch
    log = LossLog(out_dir)
    iteration = start_epoch * math.ceil(n / config.batch_size)
    for epoch in range(start_epoch, config.max_epochs):
        torch.manual_seed(seed_mix(config.seed, epoch, 11))  # dropout stream
        for idx in epoch_batches(n, config.batch_size, config.seed, epoch):
            batch = _gather_images(images, idx)
            if translate is not None:
                with torch.no_grad():
                    batch = translate(batch)
            logits = handle(batch, train=True)
            loss = _require_finite(task_loss(logits, labels_t[idx]), "task")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            log.record(iteration, "task", float(loss.detach()))
            iteration += 1
        if out_dir is not None:
            _capture_state(models, optimizers, stage_name, epoch + 1, iteration,
                           averages=log.averages()).save(_state_path(out_dir))
    return handle


def _gather_images(images, idx) -> torch.Tensor:
    if isinstance(images, np.ndarray) and images.dtype == np.uint8:
        return to_tensor(images[idx])
    arr = np.asarray(images, dtype=np.float32)[idx]
    return torch.from_numpy(arr)


def pretrain_source(config: StageConfig, f_s: ModelHandle, source: ImageDataset, *,
                    out_dir=None, resume: bool = False) -> ModelHandle:
    """Train the task net on labeled data with the classification loss only."""
    if config.stage != STAGE_SOURCE:
        raise ConfigError(f"expected a {STAGE_SOURCE} config, got {config.stage!r}")
    return _train_classifier(config, f_s, source.images, source.labels,
                             stage_name=STAGE_SOURCE, out_dir=out_dir, resume=resume)


# ---------------------------------------------------------------------------
# Stage 2: pixel-level cycle-consistent adaptation


def pixel_adapt(config: StageConfig, f_ref: ModelHandle,
                g_st: ModelHandle, g_ts: ModelHandle,
                d_s: ModelHandle, d_t: ModelHandle,
                source: ImageDataset, target: ImageDataset, *,
                out_dir=None, resume: bool = False) -> tuple:
    """Alternating discriminator/generator updates with cycle and semantic terms.

    Per batch and per domain: one discriminator step on the GAN loss, then
    one joint generator step on the weighted sum of generator-GAN, cycle,
    and semantic terms. Emits per-epoch (original, translated, reconstructed)
    triple grids when ``out_dir`` is set.
    """
    if config.stage != STAGE_PIXEL:
        raise ConfigError(f"expected a {STAGE_PIXEL} config, got {config.stage!r}")
    if not f_ref.frozen:
        raise TrainingAbort("pixel adaptation requires a frozen reference task net")
    variant = config.image_gan_variant
    w = config.weights
    use_gan = w.gan_image > 0
    use_cycle = w.cycle > 0 and not config.disable_cycle
    use_semantic = w.semantic > 0 and not config.disable_semantic

    opt_g = _make_optimizer(
        config, g_st.trainable_parameters() + g_ts.trainable_parameters()
    )
    opt_ds = _make_optimizer(config, d_s.trainable_parameters())
    opt_dt = _make_optimizer(config, d_t.trainable_parameters())
    models = {"g_st": g_st, "g_ts": g_ts, "d_s": d_s, "d_t": d_t}
    optimizers = {"g": opt_g, "d_s": opt_ds, "d_t": opt_dt}

    start_epoch = 0
    state = _maybe_resume(out_dir, resume, STAGE_PIXEL)
    if state is not None:
        _restore_state(state, models, optimizers)
        start_epoch = state.epoch

    log = LossLog(out_dir)
    n_s, n_t = len(source), len(target)
    preview = to_tensor(source.images[:TRIPLE_PREVIEW])
    iteration = state.iteration if state is not None else 0

    for epoch in range(start_epoch, config.max_epochs):
        torch.manual_seed(seed_mix(config.seed, epoch, 22))
        for idx_s, idx_t in paired_epoch_batches(n_s, n_t, config.batch_size,
                                                 config.seed, epoch):
            x_s = to_tensor(source.images[idx_s])
            x_t = to_tensor(target.images[idx_t])
            fake_t = g_st(x_s, train=True)
            fake_s = g_ts(x_t, train=True)

            if use_gan:
                loss_dt = _require_finite(
                    gan_loss_discriminator(
                        squash_scores(d_t(x_t, train=True), variant),
                        squash_scores(d_t(fake_t.detach(), train=True), variant),
                        variant,
                    ),
                    "gan_image_disc_target",
                )
                opt_dt.zero_grad()
                loss_dt.backward()
                opt_dt.step()
                loss_ds = _require_finite(
                    gan_loss_discriminator(
                        squash_scores(d_s(x_s, train=True), variant),
                        squash_scores(d_s(fake_s.detach(), train=True), variant),
                        variant,
                    ),
                    "gan_image_disc_source",
                )
                opt_ds.zero_grad()
                loss_ds.backward()
                opt_ds.step()
                log.record(iteration, "disc_target", float(loss_dt.detach()))
                log.record(iteration, "disc_source", float(loss_ds.detach()))

            gen_terms = {}
            if use_gan:
                gen_terms["gan_image"] = w.gan_image * _require_finite(
                    gan_loss_generator(squash_scores(d_t(fake_t, train=True), variant), variant)
                    + gan_loss_generator(squash_scores(d_s(fake_s, train=True), variant), variant),
                    "gan_image",
                )
            if use_cycle:
                rec_s = g_ts(fake_t, train=True)
                rec_t = g_st(fake_s, train=True)
                gen_terms["cycle"] = w.cycle * _require_finite(
                    cycle_loss(x_s, rec_s) + cycle_loss(x_t, rec_t), "cycle"
                )
            if use_semantic:
                gen_terms["semantic"] = w.semantic * _require_finite(
                    semantic_consistency_loss(f_ref, g_st, g_ts, x_s, x_t), "semantic"
                )
            if gen_terms:
                total = sum(gen_terms.values())
                opt_g.zero_grad()
                total.backward()
                opt_g.step()
                for term, value in gen_terms.items():
                    log.record(iteration, term, float(value.detach()))
            iteration += 1

        if out_dir is not None:
            _emit_triples(out_dir, epoch, preview, g_st, g_ts)
            _capture_state(models, optimizers, STAGE_PIXEL, epoch + 1, iteration,
                           averages=log.averages()).save(_state_path(out_dir))
    return g_st, g_ts, d_s, d_t


def _emit_triples(out_dir, epoch: int, preview: torch.Tensor,
                  g_st: ModelHandle, g_ts: ModelHandle) -> None:
    from .report import save_triples_grid

    with torch.no_grad():
        translated = g_st(preview)
        reconstructed = g_ts(translated)
    path = Path(out_dir) / "triples" / f"epoch-{epoch}.png"
    save_triples_grid(path, preview.numpy(), translated.numpy(), reconstructed.numpy())


def cycle_reconstruction_error(g_st: ModelHandle, g_ts: ModelHandle,
                               dataset: ImageDataset, limit: int = 256) -> float:
    """Mean absolute source-cycle reconstruction error on up to ``limit`` samples."""
    batch = to_tensor(dataset.images[:limit])
    with torch.no_grad():
        rec = g_ts(g_st(batch))
    return float((batch - rec).abs().mean())


# ---------------------------------------------------------------------------
# Stage 3: task training on translated source


def translation_cache_key(g_st: ModelHandle) -> str:
    return hashlib.sha256(g_st.state_bytes()).hexdigest()


def translate_dataset(g_st: ModelHandle, images: np.ndarray, batch_size: int = 256
                      ) -> np.ndarray:
    """Map a uint8 image stack through a frozen generator; float32 in [-1, 1]."""
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(g_st(to_tensor(images[i : i + batch_size])).numpy())
    return np.concatenate(out).astype(np.float32)


def build_translation_cache(g_st: ModelHandle, source: ImageDataset, cache_dir) -> Path:
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    translated = translate_dataset(g_st, source.images)
    path = cache_dir / "translated.npz"
    np.savez_compressed(path, images=translated,
                        generator_sha256=np.bytes_(translation_cache_key(g_st).encode()))
    return path


def load_translation_cache(path, g_st: ModelHandle) -> np.ndarray:
    with np.load(path) as data:
        stored = bytes(data["generator_sha256"]).decode()
        if stored != translation_cache_key(g_st):
            raise StaleCacheError(
                f"translation cache {path} was built for generator {stored[:12]}..., "
                f"current is {translation_cache_key(g_st)[:12]}..."
            )
        return data["images"]


def train_task_on_translated(config: StageConfig, f_t: ModelHandle, g_st: ModelHandle,
                             source: ImageDataset, *, cache_dir=None,
                             out_dir=None, resume: bool = False) -> ModelHandle:
    """Train a fresh task net on source images translated into the target style."""
    if config.stage != STAGE_TASK:
        raise ConfigError(f"expected a {STAGE_TASK} config, got {config.stage!r}")
    if not g_st.frozen:
        raise TrainingAbort("task training requires the translator to be frozen")
    if cache_dir is not None:
        cache_path = Path(cache_dir) / "translated.npz"
        if not cache_path.exists():
            build_translation_cache(g_st, source, cache_dir)
        translated = load_translation_cache(cache_path, g_st)
        return _train_classifier(config, f_t, translated, source.labels,
                                 stage_name=STAGE_TASK, out_dir=out_dir, resume=resume)
    return _train_classifier(config, f_t, source.images, source.labels,
                             stage_name=STAGE_TASK, translate=lambda b: g_st(b),
                             out_dir=out_dir, resume=resume)


# ---------------------------------------------------------------------------
# Stage 4: gated feature-level adversarial adaptation


def feature_adapt(config: StageConfig, f_t: ModelHandle, f_ref: ModelHandle,
                  d_feat: ModelHandle, translated_source, target: ImageDataset, *,
                  out_dir=None, resume: bool = False, report: dict | None = None
                  ) -> ModelHandle:
    """Alternate discriminator updates with gated task-net updates.

    The task net steps only while discriminator accuracy over the gate
    window is strictly above the threshold; an entire epoch without an open
    gate stops the stage early.
    """
    if config.stage != STAGE_FEATURE:
        raise ConfigError(f"expected a {STAGE_FEATURE} config, got {config.stage!r}")
    if not f_ref.frozen:
        raise TrainingAbort("feature adaptation requires a frozen reference task net")
    variant = config.feature_gan_variant
    translated = _as_float_images(translated_source)
    n_s, n_t = len(translated), len(target)

    window = config.gate_window if config.gate_window is not None else 2 * config.batch_size
    gate = GateMonitor(window, config.gate_threshold)
    opt_d = _make_optimizer(config, d_feat.trainable_parameters())
    opt_f = _make_optimizer(config, f_t.trainable_parameters())
    models = {"f_t": f_t, "d_feat": d_feat}
    optimizers = {"d": opt_d, "f": opt_f}

    start_epoch = 0
    state = _maybe_resume(out_dir, resume, STAGE_FEATURE)
    if state is not None:
        _restore_state(state, models, optimizers)
        start_epoch = state.epoch
        if state.gate is not None:
            gate = GateMonitor.from_dict(state.gate)
        if state.stop_reason:
            _fill_report(report, state.stop_reason, start_epoch)
            return f_t

    log = LossLog(out_dir)
    iteration = state.iteration if state is not None else 0
    stop_reason = "max-epochs"
    epochs_run = start_epoch
    for epoch in range(start_epoch, config.max_epochs):
        torch.manual_seed(seed_mix(config.seed, epoch, 33))
        gate_opened = False
        for idx_s, idx_t in paired_epoch_batches(n_s, n_t, config.batch_size,
                                                 config.seed, epoch):
            x_ts = torch.from_numpy(translated[idx_s])
            x_t = to_tensor(target.images[idx_t])
            with torch.no_grad():
                feat_ref = f_ref.features(x_ts)
            feat_t = f_t.features(x_t, train=True)

            real_p = squash_scores(d_feat(feat_ref, train=True), variant)
            fake_p = squash_scores(d_feat(feat_t.detach(), train=True), variant)
            disc_loss = _require_finite(
                gan_loss_discriminator(real_p, fake_p, variant), "gan_feat_disc"
            )
            opt_d.zero_grad()
            disc_loss.backward()
            opt_d.step()
            log.record(iteration, "disc_feat", float(disc_loss.detach()))

            gate.record((real_p.detach() > 0.5).numpy())
            gate.record((fake_p.detach() <= 0.5).numpy())
            if gate.open():
                gate_opened = True
                gen_scores = squash_scores(d_feat(feat_t, train=True), variant)
                gen_loss = _require_finite(
                    gan_loss_generator(gen_scores, variant), "gan_feat"
                )
                opt_f.zero_grad()
                gen_loss.backward()
                opt_f.step()
                log.record(iteration, "gan_feat", float(gen_loss.detach()))
            iteration += 1
        epochs_run = epoch + 1
        if out_dir is not None:
            snap = _capture_state(models, optimizers, STAGE_FEATURE, epoch + 1, iteration,
                                  gate=gate, averages=log.averages())
            if not gate_opened:
                snap.stop_reason = "no-suitable-discriminator"
            snap.save(_state_path(out_dir))
        if not gate_opened:
            stop_reason = "no-suitable-discriminator"
            break
    _fill_report(report, stop_reason, epochs_run)
    return f_t


def _fill_report(report: dict | None, stop_reason: str, epochs_run: int) -> None:
    if report is not None:
        report["stop_reason"] = stop_reason
        report["epochs_run"] = epochs_run


def _as_float_images(data) -> np.ndarray:
    if isinstance(data, ImageDataset):
        arr = to_unit_range(data.images)
        if arr.ndim == 3:
            arr = arr[:, None, :, :]
        return arr.astype(np.float32)
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 4:
        raise DataError(f"translated source must be (N, C, H, W), got {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Experiment orchestration


@dataclass
class ExperimentManifest:
    """Declarative description of a full experiment plus its (completed) results."""

    experiment: str
    method: str
    stages: list
    seeds: list
    dataset: dict
    out_root: str = "runs"
    shift_label: str = ""
    runs: list = field(default_factory=list)
    aggregate: dict | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "experiment": self.experiment,
            "method": self.method,
            "shift_label": self.shift_label,
            "dataset": self.dataset,
            "seeds": list(self.seeds),
            "stages": [_stage_to_dict(s) for s in self.stages],
            "out_root": str(self.out_root),
            "runs": self.runs,
            "aggregate": self.aggregate,
        }


def _stage_to_dict(config: StageConfig) -> dict:
    out = {
        "stage": config.stage,
        "learning_rate": config.learning_rate,
        "batch_size": config.batch_size,
        "max_epochs": config.max_epochs,
        "optimizer": config.optimizer,
        "beta1": config.beta1,
        "beta2": config.beta2,
        "momentum": config.momentum,
        "weights": {name: getattr(config.weights, name) for name in losses.TERM_NAMES},
        "disable_cycle": config.disable_cycle,
        "disable_semantic": config.disable_semantic,
        "image_gan_variant": config.image_gan_variant,
        "feature_gan_variant": config.feature_gan_variant,
        "gate_threshold": config.gate_threshold,
        "gate_window": config.gate_window,
        "train_domain": config.train_domain,
        "feature_reference": config.feature_reference,
        "generator_width": config.generator_width,
        "discriminator_width": config.discriminator_width,
    }
    return out


def stage_from_dict(data: dict) -> StageConfig:
    data = dict(data)
    weights = data.pop("weights", None)
    if weights is not None:
        data["weights"] = LossWeights(**weights)
    data.pop("seed", None)
    try:
        return StageConfig(seed=0, **data)
    except TypeError as exc:
        raise ConfigError(f"bad stage config: {exc}") from exc


def aggregate_results(accuracies: list) -> dict:
    """Mean and standard error (sample stddev / sqrt(runs)); stderr absent for one run."""
    values = [float(v) for v in accuracies]
    if not values:
        return {"runs": 0, "mean": None, "stderr": None}
    mean = float(np.mean(values))
    if len(values) < 2:
        return {"runs": len(values), "mean": mean, "stderr": None}
    stderr = float(np.std(values, ddof=1) / math.sqrt(len(values)))
    return {"runs": len(values), "mean": mean, "stderr": stderr}


def _load_domains(dataset: dict) -> tuple:
    kind = dataset.get("kind")
    if kind == "toy":
        spec = ToyDomainSpec(
            kind=dataset.get("toy_kind", "intensity-inversion"),
            base_shape=tuple(dataset.get("base_shape", (1, 16, 16))),
            num_classes=dataset.get("num_classes", 2),
            samples_per_class=dataset.get("samples_per_class", 200),
            seed=dataset.get("seed", 0),
            test_samples_per_class=dataset.get("test_samples_per_class", 100),
        )
        return make_toy_pair(spec)
    if kind == "digits":
        prepared = load_prepared_shift(dataset["prepared_root"], dataset["shift"])
        _verify_domain_hashes(dataset, prepared.source, prepared.target)
        return prepared.source, prepared.target
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _verify_domain_hashes(dataset: dict, source: DomainData, target: DomainData) -> None:
    expected = dataset.get("expected_hashes") or {}
    for domain in (source, target):
        for split in (domain.train, domain.test):
            key = f"{split.descriptor.name}-{split.descriptor.split}"
            if key in expected and expected[key] != split.descriptor.sha256:
                raise DataError(
                    f"dataset {key} hash {split.descriptor.sha256[:12]}... does not match "
                    f"manifest entry {expected[key][:12]}..."
                )


def run_experiment(manifest: ExperimentManifest) -> ExperimentManifest:
    """Execute the configured stage list for every seed and aggregate final metrics.

    A stage abort records the error for that seed and the remaining seeds
    still run. The completed manifest (with per-run metrics, dataset hashes,
    and mean +/- stderr) is written to ``{out_root}/{experiment}/manifest.yaml``.
    """
    source, target = _load_domains(manifest.dataset)
    manifest.dataset = dict(manifest.dataset)
    manifest.dataset["content_hashes"] = {
        f"{ds.descriptor.name}-{ds.descriptor.split}": ds.descriptor.sha256
        for domain in (source, target)
        for ds in (domain.train, domain.test)
    }
    exp_dir = Path(manifest.out_root) / manifest.experiment
    manifest.runs = []
    for seed in manifest.seeds:
        run_record = {"seed": int(seed), "stages": [], "final_accuracy": None, "error": None}
        try:
            result = _run_single_seed(manifest, source, target, int(seed), exp_dir)
            run_record.update(result)
        except TrainingAbort as exc:
            run_record["error"] = str(exc)
        manifest.runs.append(run_record)
    finals = [r["final_accuracy"] for r in manifest.runs if r["final_accuracy"] is not None]
    manifest.aggregate = aggregate_results(finals)
    exp_dir.mkdir(parents=True, exist_ok=True)
    with open(exp_dir / "manifest.yaml", "w") as fh:
        yaml.safe_dump(manifest.to_dict(), fh, sort_keys=False)
    return manifest


def _run_single_seed(manifest: ExperimentManifest, source: DomainData, target: DomainData,
                     seed: int, exp_dir: Path) -> dict:
    run_dir = exp_dir / f"seed-{seed}"
    input_shape = source.train.descriptor.image_shape
    num_classes = source.train.descriptor.num_classes
    image_size = input_shape[1]
    channels = input_shape[0]

    f_source: ModelHandle | None = None
    current_task: ModelHandle | None = None
    g_st = g_ts = None
    stage_records = []

    for index, stage_template in enumerate(manifest.stages):
        config = replace(stage_template, seed=seed_mix(seed, index))
        stage_dir = run_dir / config.stage
        record: dict = {"stage": config.stage}

        if config.stage == STAGE_SOURCE:
            domain = source if config.train_domain == "source" else target
            handle = build_task_net(input_shape, num_classes,
                                    seed=seed_mix(seed, index, 1))
            handle = pretrain_source(config, handle, domain.train, out_dir=stage_dir)
            save_checkpoint(handle, stage_dir / "checkpoint" / "task-net.ckpt")
            if config.train_domain == "source":
                f_source = handle
            current_task = handle

        elif config.stage == STAGE_PIXEL:
            if f_source is None:
                raise TrainingAbort("pixel-adapt requires a completed source-pretrain stage")
            f_ref = f_source.clone(frozen=True)
            g_st = build_generator(channels, image_size, base_width=config.generator_width,
                                   seed=seed_mix(seed, index, 1))
            g_ts = build_generator(channels, image_size, base_width=config.generator_width,
                                   seed=seed_mix(seed, index, 2))
            d_s = build_image_discriminator(channels, base_width=config.discriminator_width,
                                            image_size=image_size,
                                            seed=seed_mix(seed, index, 3))
            d_t = build_image_discriminator(channels, base_width=config.discriminator_width,
                                            image_size=image_size,
                                            seed=seed_mix(seed, index, 4))
            g_st, g_ts, d_s, d_t = pixel_adapt(config, f_ref, g_st, g_ts, d_s, d_t,
                                               source.train, target.train, out_dir=stage_dir)
            for name, handle in (("g-st", g_st), ("g-ts", g_ts), ("d-s", d_s), ("d-t", d_t)):
                save_checkpoint(handle, stage_dir / "checkpoint" / f"{name}.ckpt")
            record["cycle_reconstruction_error"] = cycle_reconstruction_error(
                g_st, g_ts, source.train
            )

        elif config.stage == STAGE_TASK:
            if g_st is None:
                raise TrainingAbort("task-on-translated requires a completed pixel-adapt stage")
            frozen_g = g_st.clone(frozen=True)
            handle = build_task_net(input_shape, num_classes,
                                    seed=seed_mix(seed, index, 1))
            handle = train_task_on_translated(config, handle, frozen_g, source.train,
                                              cache_dir=stage_dir / "cache", out_dir=stage_dir)
            save_checkpoint(handle, stage_dir / "checkpoint" / "task-net.ckpt")
            current_task = handle

        elif config.stage == STAGE_FEATURE:
            if current_task is None or g_st is None:
                raise TrainingAbort(
                    "feature-adapt requires completed task and pixel stages"
                )
            if config.feature_reference == "source-pretrain":
                if f_source is None:
                    raise TrainingAbort("feature reference 'source-pretrain' is unavailable")
                f_ref = f_source.clone(frozen=True)
            else:
                f_ref = current_task.clone(frozen=True)
            translated = translate_dataset(g_st, source.train.images)
            d_feat = build_feature_discriminator(current_task.feature_dim,
                                                 seed=seed_mix(seed, index, 1))
            feat_report: dict = {}
            current_task = feature_adapt(config, current_task, f_ref, d_feat,
                                         translated, target.train, out_dir=stage_dir,
                                         report=feat_report)
            save_checkpoint(current_task, stage_dir / "checkpoint" / "task-net.ckpt")
            record.update(feat_report)

        if current_task is not None:
            acc_source, _ = classify_accuracy(current_task, source.test)
            acc_target, cm = classify_accuracy(current_task, target.test)
            record["source_test_accuracy"] = acc_source
            record["target_test_accuracy"] = acc_target
            write_metrics(stage_dir / "metrics.json", accuracy=acc_target, cm=cm)
        stage_records.append(record)

    final = stage_records[-1].get("target_test_accuracy") if stage_records else None
    return {"stages": stage_records, "final_accuracy": final}
