import json

import numpy as np
import pytest
import torch

from accovidnet.config import RunConfig, TrainConfig
from accovidnet.data import AugmentConfig, BatchStream, ImageDataset
from accovidnet.errors import ConfigurationError, FreezeViolationError, NumericError, StateError
from accovidnet.losses import NoPositivesWarning
from accovidnet.model import parameter_digest
from accovidnet.training import (
    JsonlLog,
    check_frozen,
    freeze_encoder,
    init_state,
    make_optimizer,
    train_stage1,
    train_stage2,
)

NO_AUG = AugmentConfig(enabled=False)


def snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def stage1_stream(dataset, cfg, augment=NO_AUG):
    t = cfg.train
    return BatchStream(dataset, t.batch_size, t.seed, balanced=True, augment=augment, min_batch=2, prefetch=t.prefetch)


def stage2_stream(dataset, cfg):
    t = cfg.train
    return BatchStream(dataset, t.batch_size, t.seed, augment=NO_AUG, prefetch=t.prefetch)


def run_stage1(cfg, dataset, **kw):
    state = init_state(cfg)
    return train_stage1(state, stage1_stream(dataset, cfg), **kw)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(optimizer="sgd")
    assert TrainConfig().stage2_learning_rate == 1.7e-4
    assert TrainConfig(learning_rate_stage2=1e-3).stage2_learning_rate == 1e-3


def test_zero_epochs_is_a_no_op(synth_train):
    cfg = RunConfig.desk(32, batch_size=16, epochs_stage1=0, epochs_stage2=0)
    state = init_state(cfg)
    enc0, proj0 = snapshot(state.encoder), snapshot(state.projection)
    train_stage1(state, stage1_stream(synth_train, cfg))
    assert same(enc0, snapshot(state.encoder)) and same(proj0, snapshot(state.projection))
    assert state.step == 0 and state.stage1_complete
    freeze_encoder(state)
    clf0 = snapshot(state.classifier)
    train_stage2(state, stage2_stream(synth_train, cfg))
    assert same(clf0, snapshot(state.classifier))


def test_same_seed_same_trajectory(synth_train, desk_config):
    a = run_stage1(desk_config, synth_train)
    b = run_stage1(desk_config, synth_train)
    assert [r["loss"] for r in a.history] == [r["loss"] for r in b.history]
    assert same(snapshot(a.encoder), snapshot(b.encoder))


def test_prefetch_does_not_change_trajectory(synth_train):
    cfg0 = RunConfig.desk(32, batch_size=16, epochs_stage1=1, prefetch=0)
    cfg4 = RunConfig.desk(32, batch_size=16, epochs_stage1=1, prefetch=4)
    a = run_stage1(cfg0, synth_train)
    b = run_stage1(cfg4, synth_train)
    assert [r["loss"] for r in a.history] == [r["loss"] for r in b.history]


def test_log_records(synth_train, desk_config, tmp_path):
    path = tmp_path / "log.jsonl"
    state = run_stage1(desk_config, synth_train, log=JsonlLog(path))
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(records) == state.step == len(state.history) == 6
    assert {"step", "stage", "epoch", "batch", "loss", "learning_rate", "wall_time"} <= set(records[0])
    assert [r["step"] for r in records] == list(range(1, 7))
    assert records[0]["stage"] == "stage1" and records[0]["learning_rate"] == 1.7e-4


def _cosines(z, labels):
    sim = z @ z.T
    same_cls = labels[:, None] == labels[None, :]
    off = ~torch.eye(len(labels), dtype=torch.bool)
    return float(sim[same_cls & off].mean()), float(sim[~same_cls].mean())


def test_stage1_separates_classes(synth_train):
    cfg = RunConfig.desk(32, batch_size=16, epochs_stage1=1000)
    state = run_stage1(cfg, synth_train, max_steps=200)
    assert state.step == 200
    with torch.no_grad():
        x = torch.from_numpy(synth_train.images.transpose(0, 3, 1, 2).copy())
        z = state.projection(state.encoder(x))
    within, between = _cosines(z, torch.from_numpy(synth_train.labels))
    assert within > between

    ema, trace = None, []
    for r in state.history:
        ema = r["loss"] if ema is None else 0.9 * ema + 0.1 * r["loss"]
        trace.append(ema)
    assert trace[199] < trace[9]


def test_max_steps_then_resume_in_memory(synth_train):
    cfg = RunConfig.desk(32, batch_size=16, epochs_stage1=3)
    whole = run_stage1(cfg, synth_train)
    part = init_state(cfg)
    stream = stage1_stream(synth_train, cfg)
    train_stage1(part, stream, max_steps=4)
    assert (part.epoch, part.batch_in_epoch, part.stage1_complete) == (1, 1, False)
    train_stage1(part, stream)
    assert part.stage1_complete
    assert [r["loss"] for r in part.history] == [r["loss"] for r in whole.history]


def test_epoch_without_positive_pairs_warns():
    ds = ImageDataset(
        np.random.default_rng(0).random((6, 32, 32, 3)).astype(np.float32),
        np.array([0, 1, 2, 0, 1, 2]),
        [f"{i}" for i in range(6)],
    )
    cfg = RunConfig.desk(32, batch_size=3, epochs_stage1=1)
    state = init_state(cfg)
    stream = BatchStream(ds, 3, shuffle=False, prefetch=0)
    with pytest.warns(NoPositivesWarning, match="no batch contained a positive pair"):
        train_stage1(state, stream)


def test_freeze_requires_complete_stage1(synth_train):
    cfg = RunConfig.desk(32, batch_size=16, epochs_stage1=2)
    state = init_state(cfg)
    with pytest.raises(StateError):
        freeze_encoder(state)
    train_stage1(state, stage1_stream(synth_train, cfg), max_steps=1)
    with pytest.raises(StateError):
        freeze_encoder(state)
    with pytest.raises(StateError):
        train_stage2(state, stage2_stream(synth_train, cfg))


def test_freeze_contract(synth_train, desk_config):
    state = run_stage1(desk_config, synth_train)
    freeze_encoder(state)
    assert state.projection is None and state.stage == "stage2"
    assert all(not p.requires_grad for p in state.encoder.parameters())
    names = state.optimized_parameter_names()
    assert names and all(n.startswith("classifier.") for n in names)
    digest = state.encoder_digest
    assert digest == parameter_digest(state.encoder)
    train_stage2(state, stage2_stream(synth_train, desk_config))
    assert parameter_digest(state.encoder) == digest
    assert state.step > 0
    clf_params = list(state.classifier.parameters())
    assert state.optimizer.state
    assert all(any(k is p for p in clf_params) for k in state.optimizer.state)
    with pytest.raises(StateError):
        train_stage1(state, stage1_stream(synth_train, desk_config))


def test_stage2_step_touching_encoder_is_rejected(synth_train, desk_config):
    state = run_stage1(desk_config, synth_train)
    freeze_encoder(state)
    state.optimizer.add_param_group({"params": [next(state.encoder.parameters())]})
    before = parameter_digest(state.encoder)
    with pytest.raises(FreezeViolationError):
        train_stage2(state, stage2_stream(synth_train, desk_config))
    assert parameter_digest(state.encoder) == before


def test_unfrozen_encoder_is_rejected(synth_train, desk_config):
    state = run_stage1(desk_config, synth_train)
    freeze_encoder(state)
    next(state.encoder.parameters()).requires_grad_(True)
    with pytest.raises(FreezeViolationError):
        check_frozen(state)


def test_classifier_overfits_single_batch(synth_train):
    idx = np.concatenate([np.flatnonzero(synth_train.labels == k)[:3] for k in range(3)])[:8]
    ds = ImageDataset(synth_train.images[idx], synth_train.labels[idx], [synth_train.paths[i] for i in idx])
    cfg = RunConfig.desk(32, batch_size=8, epochs_stage1=0, epochs_stage2=500)
    state = init_state(cfg)
    train_stage1(state, stage1_stream(ds, cfg))
    freeze_encoder(state)
    train_stage2(state, BatchStream(ds, 8, shuffle=False, prefetch=0))
    losses = [r["loss"] for r in state.history]
    assert len(losses) == 500
    assert min(losses) < 0.05


def test_adam_step_matches_hand_formula():
    x = torch.nn.Parameter(torch.tensor([1.5], dtype=torch.float64))
    train = TrainConfig()
    opt = make_optimizer([x], 1.7e-4, train)
    a, c = 3.0, -0.5
    xv, m, v = 1.5, 0.0, 0.0
    for t in range(1, 4):
        opt.zero_grad()
        (0.5 * a * (x - c) ** 2).sum().backward()
        opt.step()
        g = a * (xv - c)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat, vhat = m / (1 - 0.9**t), v / (1 - 0.999**t)
        xv = xv - 1.7e-4 * mhat / (vhat**0.5 + 1e-8)
        assert abs(float(x.detach()) - xv) <= 1e-12


def test_non_finite_loss_reports_batch_and_norms(synth_train, desk_config):
    state = init_state(desk_config)
    with torch.no_grad():
        state.encoder.fc.weight[0, 0] = float("nan")
    with pytest.raises(NumericError) as info:
        train_stage1(state, stage1_stream(synth_train, desk_config))
    err = info.value
    assert err.batch_index == 0
    assert set(err.param_norms) == {"encoder", "projection"}
    assert "batch 0" in str(err) and "parameter norms" in str(err)


def test_gradient_clipping_bounds_global_norm(synth_train):
    cfg = RunConfig.desk(32, batch_size=16, epochs_stage1=1, grad_clip_norm=1e-3)
    state = run_stage1(cfg, synth_train, max_steps=1)
    grads = [p.grad for _, p in state.named_trainable_parameters() if p.grad is not None]
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads))
    assert float(total) <= 1e-3 * (1 + 1e-5)


def test_augmented_stream_trains_deterministically(synth_train):
    cfg = RunConfig.desk(32, batch_size=16, epochs_stage1=1)
    a = init_state(cfg)
    b = init_state(cfg)
    train_stage1(a, stage1_stream(synth_train, cfg, AugmentConfig()))
    train_stage1(b, stage1_stream(synth_train, cfg, AugmentConfig()))
    assert [r["loss"] for r in a.history] == [r["loss"] for r in b.history]
    with pytest.raises(StateError):
        a.model()
