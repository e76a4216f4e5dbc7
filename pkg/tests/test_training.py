import logging

import numpy as np
import pytest
import torch

import dtshape.training as training
from dtshape.diffnet import NonFiniteError, unflatten
from dtshape.fields import ModelConfig, template_sdf
from dtshape.training import (LOG_COLUMNS, CheckpointError, EmbeddingDiverged, RunLog, TemplateSampler,
                              TrainConfig, TrainingDiverged, draw_batch, embed_shape, extract_template,
                              load_checkpoint, sample_template_points, save_checkpoint, train)
from helpers import TOY, sphere_shape, toy_model

SMALL = ModelConfig(latent_dim=8, template_hidden=16, template_layers=3, deform_hidden=16, deform_layers=3,
                    hyper_hidden=16, hyper_layers=3)


def tiny_config(**kw):
    base = dict(epochs=3, batch=2, surface_points=32, free_points=32, template_points=64, steps_per_epoch=2,
                template_resolution=16, final_resolution=16, vec_points=8, template_period=2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def spheres():
    return [sphere_shape(r, 500, 500, seed=i, shape_id=f"s{i}") for i, r in enumerate((0.35, 0.45, 0.55))]


# ---------------------------------------------------------------- config and log

def test_presets():
    p = TrainConfig.full()
    assert (p.epochs, p.batch, p.surface_points, p.free_points, p.lr) == (200, 16, 4096, 4096, 1e-4)
    assert p.steps(40) == 3 and p.template_period == 5 and p.template_resolution == 64
    d = TrainConfig.desk()
    assert (d.epochs, d.batch, d.final_resolution) == (50, 8, 96)
    assert TrainConfig.desk(epochs=7).epochs == 7


def test_lr_schedule():
    assert TrainConfig.full().lr_at(200) == 1e-4
    d = TrainConfig.desk()
    assert d.lr_at(30) == 1e-4 and d.lr_at(31) == pytest.approx(1e-5, rel=1e-15)
    assert d.lr_at(18, epochs=30) == 1e-4 and d.lr_at(19, epochs=30) == pytest.approx(1e-5, rel=1e-15)


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch=0), dict(surface_points=0), dict(lr=0.0),
                                dict(template_resolution=4), dict(steps_per_epoch=0),
                                dict(lr_decay_start=1.5), dict(lr_decay_factor=0.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_runlog_monotone_and_csv():
    log = RunLog()
    log.append({"epoch": 1, "total": 0.1, "wall_ms": 5, "template_fallback": True})
    with pytest.raises(ValueError):
        log.append({"epoch": 1})
    log.append({"epoch": 2, "total": 1 / 3, "wall_ms": 7, "template_fallback": False})
    text = log.to_csv()
    head, r1, r2 = text.strip().split("\n")
    assert head.split(",") == list(LOG_COLUMNS)
    assert float(r2.split(",")[LOG_COLUMNS.index("total")]) == 1 / 3
    assert r1.split(",")[LOG_COLUMNS.index("template_fallback")] == "1"
    assert "wall_ms" not in log.to_csv(wall_time=False)
    assert np.array_equal(log.column("epoch"), [1, 2])


# ---------------------------------------------------------------- template sampling

def constant_template(model, value=1.0):
    m = model.clone()
    W, b = unflatten(m.template_spec, m.template)[-1]
    W.zero_()
    b.fill_(value)
    return m


def test_fallback_on_empty_template():
    m = constant_template(toy_model(0))
    s = sample_template_points(m, 100, 16, np.random.default_rng(0))
    assert s.fallback and s.points.shape == (100, 3)
    assert np.linalg.norm(s.points, axis=1).max() <= 1.0
    assert extract_template(m, 16).is_empty


def test_template_samples_near_zero_level(monkeypatch):
    monkeypatch.setattr(training, "template_sdf", lambda m, q: q.norm(dim=-1) - 0.5)
    R = 32
    s = sample_template_points(toy_model(0), 500, R, np.random.default_rng(0))
    assert not s.fallback
    assert np.abs(np.linalg.norm(s.points, axis=1) - 0.5).max() <= 2 * (2 / R)


def test_extraction_clipped_to_unit_ball(monkeypatch):
    # a crossing at radius 1.3 lies outside the supervised ball and is discarded
    monkeypatch.setattr(training, "template_sdf", lambda m, q: 1.3 - q.norm(dim=-1))
    assert extract_template(toy_model(0), 24).is_empty
    monkeypatch.setattr(training, "template_sdf", lambda m, q: torch.minimum(q.norm(dim=-1) - 0.5, 1.3 - q.norm(dim=-1)))
    r = np.linalg.norm(extract_template(toy_model(0), 24).vertices, axis=1)
    assert np.abs(r - 0.5).max() <= 2 * (2 / 24)


def test_sampler_caches_within_period():
    m = toy_model(1, config=SMALL)
    smp = TemplateSampler(50, 16, 3, np.random.default_rng(0))
    a = smp.get(m, 1)
    assert smp.get(m, 2) is a and smp.get(m, 3) is a
    assert smp.get(m, 4) is not a


def test_extract_template_resolution_convergence():
    from scipy.spatial import cKDTree
    m = toy_model(0, n=2, config=SMALL, code_scale=0.0)
    R = 32
    a, b = extract_template(m, R), extract_template(m, 2 * R)
    assert not a.is_empty
    # compare away from the unit-ball clip, where the crease is resolution dependent
    va, vb = (v[np.linalg.norm(v, axis=1) < 0.85] for v in (a.vertices, b.vertices))
    d1, _ = cKDTree(b.vertices).query(va)
    d2, _ = cKDTree(a.vertices).query(vb)
    assert max(d1.max(), d2.max()) <= 4 / R


# ---------------------------------------------------------------- batches

def test_draw_batch_shapes_and_determinism(spheres):
    a = draw_batch(spheres, np.array([0, 2]), 10, 12, np.random.default_rng(0))
    b = draw_batch(spheres, np.array([0, 2]), 10, 12, np.random.default_rng(0))
    assert a.surface.shape == (2, 10, 3) and a.free.shape == (2, 12, 3) and a.free_sdf.shape == (2, 12)
    assert torch.equal(a.surface, b.surface) and torch.equal(a.index, torch.tensor([0, 2]))
    # each row is drawn from its own instance
    r = a.surface[1].norm(dim=-1)
    assert float((r - 0.55).abs().max()) <= 1e-12


# ---------------------------------------------------------------- training

def test_train_small_run(spheres, tmp_path):
    model, log = train(spheres, tiny_config(), SMALL, checkpoint_dir=tmp_path)
    assert len(log.rows) == 3 and [r["epoch"] for r in log.rows] == [1, 2, 3]
    assert model.alpha.shape == (3, 8) and model.instance_ids == ["s0", "s1", "s2"]
    assert all(np.isfinite(r["total"]) for r in log.rows)
    m2, adam, hdr = load_checkpoint(tmp_path / "model.rsck")
    assert hdr["epoch"] == 3 and adam is not None and adam.step == 6
    assert m2.template_digest() == model.template_digest()


def test_train_deterministic(spheres, tmp_path):
    _, la = train(spheres, tiny_config(), SMALL, checkpoint_dir=tmp_path / "a")
    _, lb = train(spheres, tiny_config(), SMALL, checkpoint_dir=tmp_path / "b")
    assert la.to_csv(wall_time=False) == lb.to_csv(wall_time=False)
    assert (tmp_path / "a" / "model.rsck").read_bytes() == (tmp_path / "b" / "model.rsck").read_bytes()
    _, lc = train(spheres, tiny_config(seed=1), SMALL)
    assert lc.to_csv(wall_time=False) != la.to_csv(wall_time=False)


def test_train_loss_descends(spheres):
    _, log = train(spheres, tiny_config(epochs=20, steps_per_epoch=3, lr=1e-3), SMALL)
    tot = log.column("total")
    assert np.median(tot[-2:]) <= np.median(tot[:2])


def test_single_instance_warns(spheres, caplog):
    with caplog.at_level(logging.WARNING):
        train(spheres[:1], tiny_config(epochs=1), SMALL)
    assert any("single shape" in r.message for r in caplog.records)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train([], tiny_config(), SMALL)


def test_divergence_dumps_last_good(spheres, tmp_path, monkeypatch):
    real = training.backward
    calls = {"n": 0}

    def flaky(loss, wrt, node="loss", retain_graph=False):
        calls["n"] += 1
        if calls["n"] > 4:  # epochs 1 and 2 succeed
            raise NonFiniteError(node)
        return real(loss, wrt, node, retain_graph)

    monkeypatch.setattr(training, "backward", flaky)
    with pytest.raises(TrainingDiverged) as e:
        train(spheres, tiny_config(), SMALL, checkpoint_dir=tmp_path)
    assert e.value.epoch == 2
    _, _, hdr = load_checkpoint(e.value.checkpoint)
    assert hdr["epoch"] == 2


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_bytes(tmp_path):
    m = toy_model(3, n=3)
    from dtshape.diffnet import AdamState
    adam = AdamState.zeros_like(m.trainable())
    adam.step = 7
    save_checkpoint(tmp_path / "a.rsck", m, adam, seed=5, epoch=2, train_config=tiny_config(), extra={"k": 1})
    m2, adam2, hdr = load_checkpoint(tmp_path / "a.rsck")
    save_checkpoint(tmp_path / "b.rsck", m2, adam2, seed=5, epoch=2, train_config=tiny_config(), extra={"k": 1})
    assert (tmp_path / "a.rsck").read_bytes() == (tmp_path / "b.rsck").read_bytes()
    assert hdr["seed"] == 5 and hdr["extra"] == {"k": 1} and adam2.step == 7
    for (ka, ta), (kb, tb) in zip(m.named_tensors(), m2.named_tensors()):
        assert ka == kb and torch.equal(ta, tb)
    raw = (tmp_path / "a.rsck").read_bytes()
    assert raw[:4] == b"RSCK" and int.from_bytes(raw[4:8], "little") == 1


def test_checkpoint_errors(tmp_path):
    save_checkpoint(tmp_path / "a.rsck", toy_model(0))
    raw = (tmp_path / "a.rsck").read_bytes()
    (tmp_path / "t.rsck").write_bytes(raw[:-16])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.rsck")
    (tmp_path / "m.rsck").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.rsck")


# ---------------------------------------------------------------- embedding

def test_embed_freezes_template(spheres):
    base = toy_model(0, n=2, config=SMALL)
    digest = base.template_digest()
    hyper = [h.clone() for h in base.hyper]
    cfg = tiny_config(steps_per_epoch=3)
    r = embed_shape(base, spheres[1], epochs=2, config=cfg, seed=3)
    assert base.template_digest() == digest and r.model.template_digest() == digest
    assert all(torch.equal(a, b) for a, b in zip(hyper, base.hyper))
    assert any(not torch.equal(a, b) for a, b in zip(hyper, r.model.hyper))
    assert r.alpha.shape == (8,) and len(r.log.rows) == 2
    assert r.sdf_initial > 0 and r.sdf_final > 0
    r2 = embed_shape(base, spheres[1], epochs=2, config=cfg, seed=3)
    assert torch.equal(r.alpha, r2.alpha) and r.sdf_final == r2.sdf_final


def test_embed_fresh_codes_small():
    base = toy_model(0, n=2, config=dataclass_replace(SMALL, latent_dim=256))
    g = training.torch_gen(3, "embed", "codes")
    a = torch.randn(256, generator=g, dtype=torch.float64) * base.config.code_std
    assert abs(float(a.std()) - 0.01) < 2e-3


def dataclass_replace(obj, **kw):
    import dataclasses
    return dataclasses.replace(obj, **kw)


def test_embed_divergence_reports(spheres):
    base = toy_model(0, n=2, config=SMALL)
    with pytest.raises(EmbeddingDiverged) as e:
        embed_shape(base, spheres[0], epochs=1, config=tiny_config(), divergence_factor=0.5)
    assert {"epoch", "loss", "initial_loss"} <= set(e.value.report)


def test_embed_requires_positive_epochs(spheres):
    with pytest.raises(ValueError):
        embed_shape(toy_model(0, config=SMALL), spheres[0], epochs=0, config=tiny_config())


def test_toy_config_usable():
    assert TOY.latent_dim == 4 and template_sdf(toy_model(0), torch.zeros(2, 3, dtype=torch.float64)).shape == (2,)
