import json

import numpy as np
import pytest

from cpm import autodiff as ad
from cpm import contrastive as cc
from cpm.augment import AugmentationConfig, augment_batch_pair
from cpm.data import Dataset, generate_synthetic_dataset, stack_sequences
from cpm.model import EncoderConfig
from cpm.trainer import (ConfigError, Trainer, TrainConfig, TrainingDivergedError, lr_schedule,
                         paper_scale_config, run_pretrain)


@pytest.fixture(scope="module")
def tiny_data():
    seqs, manifest = generate_synthetic_dataset(3, 8, 15, 16, 0.02, 1)
    return Dataset(seqs, manifest)


def tiny_config(**kw):
    base = dict(epochs=4, stage_switch_epoch=2, batch_size=6, queue_size=20, k=3, warmup_epochs=1,
                precision=64, peak_lr=0.05, checkpoint_every=1,
                augment=AugmentationConfig(output_length=16),
                encoder=EncoderConfig(widths=[4, 6], temporal_kernel=3, projector_hidden=8, projector_out=5))
    base.update(kw)
    return TrainConfig(**base)


def strip_wall(records):
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in records]


# -- schedule ----------------------------------------------------------


def test_paper_scale_schedule_points():
    cfg = paper_scale_config()
    spe = 100
    assert lr_schedule(0, cfg, spe) == 0.0
    assert abs(lr_schedule(10 * spe, cfg, spe) - 0.5) < 1e-9
    assert abs(lr_schedule(400 * spe - 1, cfg, spe) - 0.0005) < 1e-9


def test_schedule_shape():
    cfg = TrainConfig()
    spe = 4
    lrs = np.array([lr_schedule(s, cfg, spe) for s in range(cfg.epochs * spe)])
    warm = int(cfg.warmup_epochs * spe)
    np.testing.assert_allclose(lrs[:warm + 1], np.linspace(0, cfg.peak_lr, warm + 1), atol=1e-15)
    assert np.all(np.diff(lrs[warm:]) <= 0)
    assert lrs[-1] == pytest.approx(cfg.floor_lr, abs=1e-15)
    with pytest.raises(ValueError):
        lr_schedule(cfg.epochs * spe, cfg, spe)


# -- config ------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(stage_switch_epoch=0)
    with pytest.raises(ConfigError):
        TrainConfig(stage_switch_epoch=61)
    with pytest.raises(ConfigError):
        TrainConfig(tau=0)
    with pytest.raises(ConfigError):
        TrainConfig(k=5000)


def test_config_round_trip_and_unknown_keys(tmp_path):
    cfg = TrainConfig(k=7, encoder=EncoderConfig(widths=[8]))
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_file(p) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"kk": 3})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"encoder": {"width": [3]}})
    assert cfg.with_overrides({"encoder.temporal_kernel": 5, "tau_prime": 0.1}).encoder.temporal_kernel == 5
    with pytest.raises(ConfigError):
        cfg.with_overrides({"encoder.nope": 1})


# -- steps ---------------------------------------------------------------


def _ready_trainer(data, **kw):
    tr = Trainer(tiny_config(**kw), data)
    tr.fill_queue()
    return tr


def test_fill_queue_length_tracks_steps(tiny_data):
    cfg = tiny_config()
    tr = Trainer(cfg, tiny_data)
    lengths = []
    orig = tr.queue.push

    def spy(*a, **k):
        orig(*a, **k)
        lengths.append(len(tr.queue))
    tr.queue.push = spy
    tr.fill_queue()
    assert lengths == [min((i + 1) * cfg.batch_size, cfg.queue_size) for i in range(len(lengths))]
    assert tr.queue.full and tr.fill_steps == -(-cfg.queue_size // cfg.batch_size)


def _frozen_batch(tr, seed):
    data, labels, ids = next(tr._batches())
    x1, x2 = augment_batch_pair(data, np.random.default_rng(seed), tr.config.augment)
    return x1, x2, ids


def test_stage2_with_k0_equals_stage1_bit_exact(tiny_data):
    tr = _ready_trainer(tiny_data, k=0)
    for seed in range(5):
        x1, x2, ids = _frozen_batch(tr, seed)
        state = tr.model.copy()
        l1 = tr.compute_loss(x1, x2, ids, stage=1)[0].item()
        tr.model = state.copy()
        l2 = tr.compute_loss(x1, x2, ids, stage=2)[0].item()
        tr.model = state
        assert l1 == l2


def test_symmetrized_loss_is_average_of_directions(tiny_data):
    tr = _ready_trainer(tiny_data)
    x1, x2, ids = _frozen_batch(tr, 0)
    q = tr.queue.entries()
    excl = cc.self_mask(ids, tr.queue.ids())
    snapshot = tr.model.copy()
    total = tr.compute_loss(x1, x2, ids, stage=2)[0].item()
    parts = []
    for a, b in ((x1, x2), (x2, x1)):
        tr.model = snapshot.copy()
        out = tr.model.forward_views(a, b, train=True, symmetrize=True)
        parts.append(tr._direction(out["p1"], out["t2"], q, excl, 2)[0].item())
    assert total == pytest.approx(0.5 * (parts[0] + parts[1]), rel=1e-12)


def test_stage1_never_mines(tiny_data):
    tr = _ready_trainer(tiny_data)
    before = (cc.counters["mine_topk"], cc.counters["enhance_target"])
    tr.run_epoch()
    tr.run_epoch()
    assert (cc.counters["mine_topk"], cc.counters["enhance_target"]) == before
    tr.run_epoch()  # epoch 2 is stage 2
    assert cc.counters["mine_topk"] > before[0] and cc.counters["enhance_target"] > before[1]


def test_step_changes_parameters_iff_lr_positive(tiny_data):
    tr = _ready_trainer(tiny_data)
    data, labels, ids = next(tr._batches())
    before = {k: p.data.copy() for k, p in tr.model.params.items()}
    rec = tr.train_step(data, labels, ids, 1)
    assert rec["lr"] == 0.0
    assert all(np.array_equal(before[k], p.data) for k, p in tr.model.params.items())
    rec = tr.train_step(data, labels, ids, 1)
    assert rec["lr"] > 0
    assert any(not np.array_equal(before[k], p.data) for k, p in tr.model.params.items())


def test_metric_record_fields(tiny_data):
    tr = _ready_trainer(tiny_data)
    recs = tr.run_epoch()
    assert set(recs[0]) == {"step", "epoch", "stage", "lr", "loss", "mean_top1_sim", "queue_fill", "wall_ms"}
    assert all(np.isfinite(r["loss"]) and r["queue_fill"] == 20 for r in recs)


def test_ema_target_moves_slowly(tiny_data):
    tr = _ready_trainer(tiny_data, ema=True, ema_momentum=0.9)
    tr.run_epoch()
    name = "encoder.block0.spatial.weight"
    assert not np.array_equal(tr.target.params[name].data, tr.model.params[name].data)


# -- whole runs ----------------------------------------------------------


def test_identical_seeds_identical_logs(tiny_data, tmp_path):
    a = run_pretrain(tiny_config(), tiny_data, tmp_path / "a")
    b = run_pretrain(tiny_config(), tiny_data, tmp_path / "b")
    assert strip_wall(a.metrics) == strip_wall(b.metrics)
    la = [json.loads(x) for x in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
    assert strip_wall(la) == strip_wall(a.metrics)
    c = run_pretrain(tiny_config(seed=1), tiny_data, tmp_path / "c")
    assert strip_wall(c.metrics) != strip_wall(a.metrics)


def test_resume_reproduces_trajectory(tiny_data, tmp_path):
    full = run_pretrain(tiny_config(), tiny_data, tmp_path / "full")
    part = run_pretrain(tiny_config(), tiny_data, tmp_path / "part", stop_after_epoch=1)
    rest = run_pretrain(tiny_config(), tiny_data, tmp_path / "rest", resume_from=part.checkpoint)
    assert strip_wall(part.metrics + rest.metrics) == strip_wall(full.metrics)
    for k, p in full.trainer.model.params.items():
        np.testing.assert_array_equal(p.data, rest.trainer.model.params[k].data)


def test_stage_switch_keeps_parameters_continuous(tiny_data, tmp_path):
    res = run_pretrain(tiny_config(), tiny_data, tmp_path / "r", stop_after_epoch=2)
    tr = Trainer.resume(res.checkpoint, tiny_data)
    assert tr.stage_for(tr.epoch) == 2
    for k, p in res.trainer.model.params.items():
        np.testing.assert_array_equal(p.data, tr.model.params[k].data)


def test_resume_rejects_incompatible_config(tiny_data, tmp_path):
    res = run_pretrain(tiny_config(), tiny_data, tmp_path / "r", stop_after_epoch=1)
    with pytest.raises(ConfigError):
        Trainer.resume(res.checkpoint, tiny_data, tiny_config(batch_size=4))


def test_run_outputs(tiny_data, tmp_path):
    res = run_pretrain(tiny_config(epochs=2, stage_switch_epoch=1), tiny_data, tmp_path / "o")
    echo = json.loads((tmp_path / "o" / "config.json").read_text())
    assert echo["config"] == tiny_config(epochs=2, stage_switch_epoch=1).to_dict()
    assert sorted(p.name for p in (tmp_path / "o" / "checkpoints").iterdir()) == ["epoch_001.cpmp", "epoch_002.cpmp"]
    assert res.checkpoint.exists()


def test_divergence_dumps_diagnostics(tiny_data, tmp_path):
    tr = Trainer(tiny_config(), tiny_data, out_dir=tmp_path)
    tr.fill_queue()
    tr.model.params["encoder.block0.spatial.weight"].data[:] = np.inf
    data, labels, ids = next(tr._batches())
    with pytest.raises(TrainingDivergedError), np.errstate(invalid="ignore", over="ignore"):
        tr.train_step(data, labels, ids, 1)
    dump = json.loads((tmp_path / "diverged.json").read_text())
    assert dump["param_finite"]["encoder.block0.spatial.weight"] is False


def test_train_step_needs_full_queue(tiny_data):
    tr = Trainer(tiny_config(), tiny_data)
    data, labels, ids = next(tr._batches())
    with pytest.raises(RuntimeError):
        tr.train_step(data, labels, ids, 1)


def test_batch_larger_than_dataset(tiny_data):
    with pytest.raises(ConfigError):
        Trainer(tiny_config(batch_size=100, queue_size=200), tiny_data)
