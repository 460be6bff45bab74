"""Two-stage training: contrastive encoder pretraining, then a frozen-encoder classifier.

The loop is single-writer over parameters: one thread owns a :class:`TrainState`
at a time. Data batches can be prepared ahead on a prefetch thread without
changing their order.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
import time
import warnings
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import RunConfig, TrainConfig
from .data.batches import BatchStream
from .errors import FreezeViolationError, NumericError, StateError
from .losses import NoPositivesWarning, cross_entropy_loss, supcon_loss
from .model.networks import (
    ACCovidNet,
    Classifier,
    Encoder,
    ProjectionHead,
    build_classifier,
    build_encoder,
    build_projection,
    parameter_digest,
)

logger = logging.getLogger(__name__)

STAGES = ("stage1", "stage2")

LogFn = Callable[[dict], None]


@dataclass
class TrainState:
    """Everything needed to continue training bit-for-bit.

    ``epoch`` and ``batch_in_epoch`` count progress inside the current stage.
    Batch content is a pure function of ``(seed, stage, epoch, batch index)``,
    so these counters together with the seed are the full data-side RNG state.
    """

    config: RunConfig
    encoder: Encoder
    projection: ProjectionHead | None
    classifier: Classifier | None
    optimizer: torch.optim.Optimizer | None
    stage: str = "stage1"
    epoch: int = 0
    batch_in_epoch: int = 0
    step: int = 0
    stage1_complete: bool = False
    encoder_digest: str | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def rng_state(self) -> dict:
        return {
            "seed": self.config.train.seed,
            "stage": self.stage,
            "epoch": self.epoch,
            "batch_in_epoch": self.batch_in_epoch,
        }

    def trainable_modules(self) -> dict[str, torch.nn.Module]:
        if self.stage == "stage1":
            return {"encoder": self.encoder, "projection": self.projection}
        return {"classifier": self.classifier}

    def named_trainable_parameters(self) -> list[tuple[str, torch.nn.Parameter]]:
        return [
            (f"{prefix}.{name}", p)
            for prefix, module in self.trainable_modules().items()
            for name, p in module.named_parameters()
        ]

    def optimized_parameter_names(self) -> list[str]:
        """Names of the parameters the optimizer is allowed to update."""
        if self.optimizer is None:
            return []
        by_id = {id(p): n for n, p in self.all_named_parameters()}
        return [by_id.get(id(p), "<unknown>") for group in self.optimizer.param_groups for p in group["params"]]

    def all_named_parameters(self) -> list[tuple[str, torch.nn.Parameter]]:
        out = []
        for prefix in ("encoder", "projection", "classifier"):
            module = getattr(self, prefix)
            if module is not None:
                out.extend((f"{prefix}.{n}", p) for n, p in module.named_parameters())
        return out

    def model(self) -> ACCovidNet:
        if self.classifier is None:
            raise StateError("no classifier yet; run freeze_encoder first")
        return ACCovidNet(self.encoder, self.classifier)


def make_optimizer(params: Iterable[torch.nn.Parameter], lr: float, train: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(list(params), lr=lr, betas=(train.beta1, train.beta2), eps=train.eps)


def init_state(config: RunConfig, dtype: torch.dtype = torch.float32) -> TrainState:
    """Fresh stage-1 state; encoder weights optionally warm-started by name."""
    seed = config.train.seed
    encoder = build_encoder(config.model.encoder, seed, dtype)
    if config.train.warm_start_path:
        from .checkpoint import load_encoder_weights

        load_encoder_weights(encoder, config.train.warm_start_path)
    projection = build_projection(config.model.projection, seed, dtype)
    state = TrainState(config, encoder, projection, None, None)
    state.optimizer = make_optimizer(
        [p for _, p in state.named_trainable_parameters()], config.train.learning_rate, config.train
    )
    return state


def _param_norms(state: TrainState) -> dict[str, float]:
    norms = {}
    for prefix in ("encoder", "projection", "classifier"):
        module = getattr(state, prefix)
        if module is not None:
            sq = sum(float(p.detach().double().pow(2).sum()) for p in module.parameters())
            norms[prefix] = math.sqrt(sq)
    return norms


def _record(state: TrainState, batch_index: int, loss: float, lr: float, log: LogFn | None) -> None:
    rec = {
        "step": state.step,
        "stage": state.stage,
        "epoch": state.epoch,
        "batch": batch_index,
        "loss": loss,
        "learning_rate": lr,
        "wall_time": time.time(),
    }
    state.history.append(rec)
    if log is not None:
        log(rec)


def _non_finite(state: TrainState, batch_index: int, what: str) -> NumericError:
    norms = _param_norms(state)
    shown = ", ".join(f"{k}={v:.6g}" for k, v in norms.items())
    err = NumericError(
        f"non-finite {what} in {state.stage} at epoch {state.epoch}, batch {batch_index}; "
        f"parameter norms: {shown}"
    )
    err.batch_index = batch_index
    err.param_norms = norms
    return err


def _optimizer_step(state: TrainState, loss: torch.Tensor, batch_index: int) -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise _non_finite(state, batch_index, f"loss ({value})")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    clip = state.config.train.grad_clip_norm
    if clip is not None:
        torch.nn.utils.clip_grad_norm_([p for _, p in state.named_trainable_parameters()], clip)
    if state.stage == "stage2":
        check_frozen(state)
    state.optimizer.step()
    return value


def _run_stage(state, data, epochs, lr, loss_fn, max_steps, log) -> TrainState:
    steps_done = 0
    while state.epoch < epochs:
        saw_positive = False
        batches = data.batches(state.stage, state.epoch, start=state.batch_in_epoch)
        with contextlib.closing(batches):
            for batch in batches:
                if max_steps is not None and steps_done >= max_steps:
                    return state
                loss, has_positive = loss_fn(batch)
                saw_positive |= has_positive
                value = _optimizer_step(state, loss, batch.index)
                state.step += 1
                state.batch_in_epoch = batch.index + 1
                steps_done += 1
                _record(state, batch.index, value, lr, log)
        if state.stage == "stage1" and not saw_positive and state.batch_in_epoch > 0:
            warnings.warn(
                f"stage1 epoch {state.epoch}: no batch contained a positive pair",
                NoPositivesWarning,
                stacklevel=3,
            )
        state.epoch += 1
        state.batch_in_epoch = 0
    return state


def train_stage1(
    state: TrainState,
    data: BatchStream,
    max_steps: int | None = None,
    log: LogFn | None = None,
) -> TrainState:
    """Train encoder and projection head jointly under the contrastive loss.

    Runs until ``config.train.epochs_stage1`` epochs are complete, or stops
    early after ``max_steps`` optimizer steps (the state can be checkpointed
    and resumed from there).
    """
    if state.stage != "stage1":
        raise StateError(f"train_stage1 called in {state.stage}")
    train = state.config.train
    state.encoder.train()
    state.projection.train()

    def loss_fn(batch):
        z = state.projection(state.encoder(batch.images))
        if not torch.isfinite(z).all():
            raise _non_finite(state, batch.index, "embeddings")
        has_positive = bool(torch.bincount(batch.labels).max() >= 2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NoPositivesWarning)
            return supcon_loss(z, batch.labels, train.temperature), has_positive

    _run_stage(state, data, train.epochs_stage1, train.learning_rate, loss_fn, max_steps, log)
    if state.epoch >= train.epochs_stage1:
        state.stage1_complete = True
    return state


def freeze_encoder(state: TrainState) -> TrainState:
    """Drop the projection head, freeze the encoder and attach a fresh classifier optimizer."""
    if state.stage != "stage1" or not state.stage1_complete:
        raise StateError("freeze_encoder requires a completed stage 1")
    train = state.config.train
    state.encoder.requires_grad_(False)
    state.encoder.eval()
    state.projection = None
    if state.classifier is None:
        dtype = next(state.encoder.parameters()).dtype
        state.classifier = build_classifier(state.config.model.classifier, train.seed, dtype)
    state.stage = "stage2"
    state.epoch = state.batch_in_epoch = state.step = 0
    state.optimizer = make_optimizer(state.classifier.parameters(), train.stage2_learning_rate, train)
    state.encoder_digest = parameter_digest(state.encoder)
    return state


def check_frozen(state: TrainState) -> None:
    """Raise if anything would let a stage-2 step modify the encoder."""
    encoder_ids = {id(p) for p in state.encoder.parameters()}
    for p in state.encoder.parameters():
        if p.requires_grad:
            raise FreezeViolationError("encoder parameter is trainable in stage 2")
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            if id(p) in encoder_ids:
                raise FreezeViolationError("optimizer holds an encoder parameter in stage 2")


def train_stage2(
    state: TrainState,
    data: BatchStream,
    max_steps: int | None = None,
    log: LogFn | None = None,
) -> TrainState:
    """Train the classifier on frozen encoder features under cross-entropy."""
    if state.stage != "stage2":
        raise StateError("train_stage2 requires freeze_encoder first")
    train = state.config.train
    state.encoder.eval()
    state.classifier.train()

    def loss_fn(batch):
        with torch.no_grad():
            h = state.encoder(batch.images)
        probs = state.classifier(h)
        if not torch.isfinite(probs).all():
            raise _non_finite(state, batch.index, "class probabilities")
        return cross_entropy_loss(probs, batch.labels), True

    _run_stage(state, data, train.epochs_stage2, train.stage2_learning_rate, loss_fn, max_steps, log)
    if parameter_digest(state.encoder) != state.encoder_digest:
        raise FreezeViolationError("encoder parameters changed during stage 2")
    return state


class JsonlLog:
    """Append step records to a line-delimited JSON file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def __call__(self, record: dict) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
