"""Acceptance criteria, one test each.

Every test appends a ``[PASS]``/``[FAIL] criterion N: ...`` line that pytest
prints in its terminal summary. Run on its own with::

    python tests/test_acceptance.py
"""

import contextlib
import math
import time
import warnings

import numpy as np
import pytest
import torch

from accovidnet.checkpoint import load_checkpoint, save_checkpoint
from accovidnet.config import RunConfig
from accovidnet.data import (
    AugmentConfig,
    BatchStream,
    ImageDataset,
    Manifest,
    ManifestEntry,
    SplitConfig,
    derive_split,
    generate_synthetic,
    load_manifest,
    load_split,
    write_manifest,
)
from accovidnet.errors import ManifestError
from accovidnet.evaluation import ConfusionMatrix, compute_sensitivity, emit_report, evaluate, format_percent
from accovidnet.losses import NoPositivesWarning, cross_entropy_loss, supcon_loss
from accovidnet.model import (
    PEPX,
    AttentionGate,
    AttentionGateConfig,
    Classifier,
    ClassifierConfig,
    EncoderConfig,
    PEPXConfig,
    ProjectionHead,
    ProjectionHeadConfig,
    StageConfig,
    attention_gate_forward,
    build_classifier,
    build_encoder,
    build_projection,
    classifier_forward,
    encoder_forward,
    init_parameters,
    parameter_digest,
    pepx_forward,
    projection_forward,
)
from accovidnet.training import freeze_encoder, init_state, train_stage1, train_stage2

import oracles
from conftest import ACCEPTANCE_LINES

D = torch.float64
INSTANCES = 20
FORWARD_TOL = 1e-3
LOSS_TOL = 1e-6
BRUTE_TOL = 1e-9


@contextlib.contextmanager
def criterion(n, text):
    start = time.perf_counter()
    notes = []
    try:
        yield notes
    except BaseException as exc:
        line = f"[FAIL] criterion {n}: {text} ({type(exc).__name__}: {str(exc).splitlines()[0][:160]})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    detail = "; ".join(notes)
    line = f"[PASS] criterion {n}: {text} ({detail + '; ' if detail else ''}{time.perf_counter() - start:.1f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)


def _generic(module, seed):
    g = torch.Generator().manual_seed(seed)
    init_parameters(module, g).to(D)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.copy_(0.1 * torch.randn(p.shape, generator=g, dtype=D))
    return {k: v.detach() for k, v in module.named_parameters()}


def _forward_error(fn, inputs, params, rng):
    """Gradient check w.r.t. inputs and parameters of ``fn(*inputs, params)``.

    A random probe vector turns the output into a scalar.
    """
    names = list(params)
    out_shape = fn(*inputs, params).shape
    w = torch.from_numpy(rng.normal(size=tuple(out_shape)))

    def probe(*tensors):
        xs, ps = tensors[: len(inputs)], tensors[len(inputs):]
        return (fn(*xs, dict(zip(names, ps))) * w).sum()

    err, kept, skipped = oracles.central_difference_report(
        probe, [*inputs, *params.values()], rng, kink_tol=1e-4
    )
    assert kept >= 4 * skipped, f"too many kinked coordinates ({skipped} of {kept + skipped})"
    return err


def test_criterion_1_gradient_suite():
    with criterion(1, f"analytic gradients match central differences on {INSTANCES} instances per op") as notes:
        start = time.perf_counter()
        worst = {}
        for i in range(INSTANCES):
            rng = np.random.default_rng(1000 + i)
            c_in, c_out = (int(v) for v in rng.integers(2, 6, 2))
            cfg = PEPXConfig.for_widths(c_in, c_out)
            h = int(rng.integers(2, 5))
            err = _forward_error(
                lambda x, p: pepx_forward(x, cfg, p),
                [torch.from_numpy(rng.normal(size=(2, c_in, h, h)))], _generic(PEPX(cfg), i), rng,
            )
            worst["pepx_forward"] = max(worst.get("pepx_forward", 0), err)

            xc, gc, ic = (int(v) for v in rng.integers(1, 5, 3))
            gcfg = AttentionGateConfig(xc, gc, ic, combine_mode="multiplicative" if i % 2 == 0 else "additive")
            hx = int(rng.integers(2, 6))
            hg = int(rng.integers(1, hx + 1))
            err = _forward_error(
                lambda x, g, p: attention_gate_forward(x, g, gcfg, p),
                [torch.from_numpy(rng.normal(size=(2, xc, hx, hx))), torch.from_numpy(rng.normal(size=(2, gc, hg, hg)))],
                _generic(AttentionGate(gcfg), i), rng,
            )
            worst["attention_gate_forward"] = max(worst.get("attention_gate_forward", 0), err)

            d_in, d_hid, d_out = (int(v) for v in rng.integers(2, 9, 3))
            pcfg = ProjectionHeadConfig(d_in, d_hid, d_out)
            err = _forward_error(
                lambda x, p: projection_forward(x, pcfg, p),
                [torch.from_numpy(rng.normal(size=(3, d_in)))], _generic(ProjectionHead(pcfg), i), rng,
            )
            worst["projection_forward"] = max(worst.get("projection_forward", 0), err)

            a, b = (int(v) for v in rng.integers(3, 8, 2))
            ccfg = ClassifierConfig(d_in, 3, (a, b, 3))
            err = _forward_error(
                lambda x, p: classifier_forward(x, ccfg, p),
                [torch.from_numpy(rng.normal(size=(3, d_in)))], _generic(Classifier(ccfg), i), rng,
            )
            worst["classifier_forward"] = max(worst.get("classifier_forward", 0), err)

            n = int(rng.integers(3, 9))
            # rows of norm 10 put the normalization well inside its smooth range at step 1e-3
            raw = rng.normal(size=(n, int(rng.integers(2, 6))))
            raw = torch.from_numpy(10 * raw / np.linalg.norm(raw, axis=1, keepdims=True))
            labels = torch.from_numpy(rng.integers(0, 2, size=n))
            tau = float(rng.uniform(0.5, 1.0))

            def sc(x):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", NoPositivesWarning)
                    return supcon_loss(x / x.norm(dim=1, keepdim=True), labels, tau)

            worst["supcon_loss"] = max(worst.get("supcon_loss", 0), oracles.central_difference_check(sc, [raw], rng))

            logits = torch.from_numpy(rng.normal(size=(n, 3)))
            y = torch.from_numpy(rng.integers(0, 3, size=n))
            err = oracles.central_difference_check(lambda x: cross_entropy_loss(torch.softmax(x, 1), y), [logits], rng)
            worst["cross_entropy_loss"] = max(worst.get("cross_entropy_loss", 0), err)

        elapsed = time.perf_counter() - start
        notes.append("worst " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))
        for k in ("pepx_forward", "attention_gate_forward", "projection_forward", "classifier_forward"):
            assert worst[k] <= FORWARD_TOL, f"{k}: {worst[k]:.3g} > {FORWARD_TOL}"
        for k in ("supcon_loss", "cross_entropy_loss"):
            assert worst[k] <= LOSS_TOL, f"{k}: {worst[k]:.3g} > {LOSS_TOL}"
        assert elapsed < 120, f"gradient suite took {elapsed:.0f}s"


def test_criterion_2_loss_oracles():
    with criterion(2, "supcon matches triple enumeration on 50 batches; cross-entropy matches hand arithmetic") as notes:
        rng = np.random.default_rng(2)
        worst = 0.0
        for b in range(50):
            n = int(rng.integers(2, 17))
            d = int(rng.integers(2, 9))
            tau = (0.05, 0.1, 1.0)[b % 3]
            z = rng.normal(size=(n, d))
            z /= np.linalg.norm(z, axis=1, keepdims=True)
            labels = rng.integers(0, 3, size=n)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NoPositivesWarning)
                got = float(supcon_loss(torch.from_numpy(z), torch.from_numpy(labels), tau))
            expected = oracles.supcon_bruteforce(z, labels, tau)
            rel = abs(got - expected) / max(abs(expected), 1e-300) if expected else abs(got)
            worst = max(worst, rel)
        notes.append(f"worst supcon rel err {worst:.1e}")
        assert worst <= BRUTE_TOL

        uniform = float(cross_entropy_loss(torch.full((5, 3), 1 / 3, dtype=D), torch.tensor([0, 1, 2, 0, 1])))
        assert abs(uniform - math.log(3)) <= BRUTE_TOL * math.log(3)
        p = torch.tensor([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]], dtype=D)
        two = float(cross_entropy_loss(p, torch.tensor([0, 1])))
        hand = -(math.log(0.7) + math.log(0.8)) / 2
        assert abs(two - hand) <= BRUTE_TOL * hand
        assert float(cross_entropy_loss(torch.eye(3, dtype=D), torch.tensor([0, 1, 2]))) == 0.0


def test_criterion_3_architecture_contracts():
    with criterion(3, "shape algebra, annihilation, gating identity, 1024-d encoder, unit-norm z, simplex rows") as notes:
        rng = np.random.default_rng(3)
        for _ in range(10):
            c_in, c_out, h, w = (int(v) for v in rng.integers(1, 9, 4))
            cfg = PEPXConfig.for_widths(c_in, c_out)
            block = PEPX(cfg).to(D)
            params = {k: v.detach() for k, v in block.named_parameters()}
            assert pepx_forward(torch.from_numpy(rng.normal(size=(c_in, h, w))), cfg, params).shape == (c_out, h, w)
            zeros = {k: torch.zeros_like(v) for k, v in params.items()}
            assert torch.count_nonzero(pepx_forward(torch.from_numpy(rng.normal(size=(c_in, h, w))), cfg, zeros)) == 0
        assert PEPXConfig(16, 8, 8, 24, 16, bias=False).parameter_count() == 856

        gcfg = AttentionGateConfig(6, 10, 3)
        gp = _generic(AttentionGate(gcfg), 0)
        gp["psi.bias"] = torch.full((1,), 1e4, dtype=D)
        x = torch.from_numpy(rng.normal(size=(6, 8, 8)))
        assert torch.equal(attention_gate_forward(x, torch.from_numpy(rng.normal(size=(10, 4, 4))), gcfg, gp), x)

        default = EncoderConfig()
        enc = build_encoder(default, seed=0)
        with torch.no_grad():
            h = enc(torch.rand(1, 3, 224, 224))
        assert h.shape == (1, 1024)
        desk = EncoderConfig.desk(32)
        assert encoder_forward(torch.rand(3, 32, 32, dtype=D), desk, {
            k: v.detach() for k, v in build_encoder(desk, 1, D).named_parameters()
        }).shape == (1024,)

        head, clf = build_projection(seed=0, dtype=D), build_classifier(seed=0, dtype=D)
        feats = torch.from_numpy(rng.normal(scale=10, size=(32, 1024)))
        with torch.no_grad():
            z = head(feats)
            probs = clf(feats)
        norm_err = float((z.norm(dim=1) - 1).abs().max())
        simplex_err = float((probs.sum(dim=1) - 1).abs().max())
        notes.append(f"max |norm-1|={norm_err:.1e}, max |rowsum-1|={simplex_err:.1e}")
        assert norm_err <= 1e-6 and simplex_err <= 1e-6
        assert (probs >= 0).all()


def test_criterion_4_two_stage_contracts(synth_train, tmp_path):
    with criterion(4, "frozen-encoder digest constant, zero-epoch no-op, bit-exact 50-step resume") as notes:
        cfg = RunConfig.desk(32, batch_size=16, epochs_stage1=2, epochs_stage2=3)
        s1 = BatchStream(synth_train, 16, 0, balanced=True, augment=AugmentConfig(), min_batch=2)
        s2 = BatchStream(synth_train, 16, 0, augment=AugmentConfig(enabled=False))
        state = init_state(cfg)
        train_stage1(state, s1)
        freeze_encoder(state)
        digest = state.encoder_digest
        digests = []
        train_stage2(state, s2, log=lambda rec: digests.append(parameter_digest(state.encoder)))
        assert digests and set(digests) == {digest}
        notes.append(f"{len(digests)} stage-2 steps checked")

        zero = RunConfig.desk(32, batch_size=16, epochs_stage1=0, epochs_stage2=0)
        st = init_state(zero)
        before = {k: v.clone() for k, v in st.encoder.state_dict().items()}
        train_stage1(st, s1)
        assert all(torch.equal(before[k], v) for k, v in st.encoder.state_dict().items())
        freeze_encoder(st)
        clf_before = {k: v.clone() for k, v in st.classifier.state_dict().items()}
        train_stage2(st, s2)
        assert all(torch.equal(clf_before[k], v) for k, v in st.classifier.state_dict().items())

        long = RunConfig.desk(32, batch_size=16, epochs_stage1=100)
        whole = init_state(long)
        train_stage1(whole, s1, max_steps=50)
        part = init_state(long)
        train_stage1(part, s1, max_steps=20)
        resumed = load_checkpoint(save_checkpoint(part, tmp_path / "mid.ckpt"))
        train_stage1(resumed, s1, max_steps=30)
        assert [r["loss"] for r in resumed.history] == [r["loss"] for r in whole.history]
        assert len(whole.history) == 50


def test_criterion_5_desk_surrogate(tmp_path):
    with criterion(5, "two-stage pipeline on synthetic shapes: >=90% test accuracy, single-batch overfit") as notes:
        start = time.perf_counter()
        generate_synthetic(tmp_path / "synth", per_class=64, size=32, seed=0)
        m = load_manifest(tmp_path / "synth" / "manifest.csv")
        train, test = load_split(m, "train", 32), load_split(m, "test", 32)
        cfg = RunConfig.desk(32, batch_size=16, epochs_stage1=10, epochs_stage2=10, seed=0)
        t = cfg.train
        state = init_state(cfg)
        train_stage1(state, BatchStream(train, t.batch_size, t.seed, balanced=True, augment=cfg.augment, min_batch=2))
        freeze_encoder(state)
        train_stage2(state, BatchStream(train, t.batch_size, t.seed, augment=cfg.augment))
        cm = evaluate(state.model(), BatchStream(test, 64, shuffle=False).batches("eval", 0))
        acc = compute_sensitivity(cm).overall_accuracy
        notes.append(f"test accuracy {acc:.2f}% on {cm.total} images")
        assert acc >= 90.0

        idx = np.concatenate([np.flatnonzero(train.labels == k)[:3] for k in range(3)])[:8]
        one = ImageDataset(train.images[idx], train.labels[idx], [train.paths[i] for i in idx])
        overfit = RunConfig.desk(32, batch_size=8, epochs_stage1=0, epochs_stage2=500)
        st = init_state(overfit)
        train_stage1(st, BatchStream(one, 8, min_batch=2))
        freeze_encoder(st)
        train_stage2(st, BatchStream(one, 8, shuffle=False))
        losses = [r["loss"] for r in st.history]
        first = next(i for i, v in enumerate(losses) if v < 0.05) + 1 if min(losses) < 0.05 else None
        notes.append(f"overfit L_CE<0.05 at step {first}")
        assert first is not None and first <= 500
        elapsed = time.perf_counter() - start
        assert elapsed < 600, f"surrogate took {elapsed:.0f}s"


def test_criterion_6_metric_reproduction(synth_test):
    with criterion(6, "96/100 Covid row reports 96.00; evaluate equals per-sample loop on 30 samples"):
        cm = ConfusionMatrix(np.array([[100, 0, 0], [0, 100, 0], [2, 2, 96]]))
        rep = compute_sensitivity(cm)
        assert format_percent(rep.per_class_sensitivity["Covid19"]) == "96.00"
        assert '"Covid19": "96.00"' in emit_report(rep)

        rng = np.random.default_rng(6)
        images = rng.random((30, 32, 32, 3)).astype(np.float32)
        images[:12] = synth_test.images
        labels = rng.integers(0, 3, 30)
        ds = ImageDataset(images, labels, [str(i) for i in range(30)])
        from accovidnet.model import ACCovidNet

        model = ACCovidNet(build_encoder(EncoderConfig.desk(32), seed=6), build_classifier(seed=6))
        cm = evaluate(model, BatchStream(ds, 7, shuffle=False).batches("eval", 0))
        ref = np.zeros((3, 3), dtype=np.int64)
        with torch.no_grad():
            for img, y in zip(images, labels):
                p = model(torch.from_numpy(img.transpose(2, 0, 1).copy())[None])[0].tolist()
                ref[y, p.index(max(p))] += 1
        assert np.array_equal(cm.counts, ref) and cm.total == 30


def test_criterion_7_data_contracts(tmp_path):
    with criterion(7, "strict count validation for v1/v2/v3, off-by-one rejected by class, derive_split conserves"):
        names = ("normal", "pneumonia", "covid-19")
        manifests = {}
        for version in ("v1", "v2", "v3"):
            entries = []
            for k, (n_train, n_test) in SplitConfig.covidx(version).expected_counts.items():
                for i in range(n_train + n_test):
                    entries.append(ManifestEntry(f"{names[k]}/{i:05d}.png", k, "train" if i < n_train else "test"))
            path = write_manifest(Manifest(entries), tmp_path / f"{version}.csv")
            manifests[version] = load_manifest(path, version, strict=True, check_paths=False)
            for other in {"v1", "v2", "v3"} - {version}:
                with pytest.raises(ManifestError):
                    load_manifest(path, other, strict=True, check_paths=False)
            for k, name in ((0, "Normal"), (1, "Pneumonia"), (2, "Covid19")):
                drop = next(i for i, e in enumerate(entries) if e.label == k and e.split == "train")
                short = write_manifest(Manifest(entries[:drop] + entries[drop + 1:]), tmp_path / "short.csv")
                with pytest.raises(ManifestError, match=f"{name} train: expected"):
                    load_manifest(short, version, strict=True, check_paths=False)

        base = manifests["v1"]
        for target in ("v2", "v3"):
            out = derive_split(base, "v1", target)
            train = {e.image_path for e in out.select("train")}
            test = {e.image_path for e in out.select("test")}
            assert not train & test
            for k in range(3):
                assert sum(out.counts()[k].values()) == sum(base.counts()[k].values())


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
