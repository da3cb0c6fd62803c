import json
from dataclasses import replace

import numpy as np
import pytest

from metabaseline import encoder as E
from metabaseline import pipelines as P
from metabaseline.data import ConfigError, SplitSpec, SyntheticSpec, generate_synthetic, split_by_supercategory
from metabaseline.episodes import EpisodeSpec
from metabaseline.evaluation import Monitor
from metabaseline.tensor import NumericError, Tensor

DS = generate_synthetic(SyntheticSpec(4, 5, 30, 8, noise_scale=2.0))
SPLIT = split_by_supercategory(DS, (2, 1, 1), 0)
TINY = dict(hidden_dims=(16,), embed_dim=8, seed=3)


def bits(params):
    return b"".join(t.data.tobytes() for t in params.tensors())


# -- optimizer --------------------------------------------------------------------------------------


def test_plain_gradient_step():
    p = Tensor(np.array([1.0, 2.0]))
    P.sgd_step([p], [np.array([0.5, -1.0])], [np.zeros(2)], lr=0.1, momentum=0.0, weight_decay=0.0)
    np.testing.assert_allclose(p.data, [0.95, 2.1])


def test_two_momentum_steps():
    p, v, g = Tensor(np.array([0.0])), [np.zeros(1)], np.array([2.0])
    for _ in range(2):
        P.sgd_step([p], [g], v, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_allclose(p.data, -0.1 * 2.0 * (2 + 0.9))


def test_weight_decay_shrinks_toward_zero():
    p = Tensor(np.array([3.0, -3.0]))
    P.sgd_step([p], [None], [np.zeros(2)], lr=0.1, momentum=0.0, weight_decay=0.5)
    np.testing.assert_allclose(p.data, [2.85, -2.85])


def test_decay_mask_skips_biases():
    w, b = Tensor(np.ones(2)), Tensor(np.ones(2))
    opt = P.SGD([w, b], [True, False], momentum=0.0, weight_decay=0.1)
    opt.step(1.0)
    np.testing.assert_allclose(w.data, 0.9)
    np.testing.assert_array_equal(b.data, 1.0)


def test_float32_step_stays_float32():
    p = Tensor(np.ones(3, np.float32))
    P.sgd_step([p], [np.ones(3)], [np.zeros(3, np.float32)], 0.1, 0.9, 5e-4)
    assert p.dtype == np.float32


# -- configs ----------------------------------------------------------------------------------------


def test_default_schedules():
    cls = P.classification_config(50)
    assert cls.lr_decay_epochs == (30, 40)
    assert [cls.lr_at(e) for e in (0, 29, 30, 40)] == pytest.approx([0.1, 0.1, 0.01, 0.001])
    meta = P.meta_config()
    assert (meta.lr, meta.batch_size, meta.batches_per_epoch, meta.momentum) == (0.001, 4, 200, 0.9)


@pytest.mark.parametrize("bad", [dict(lr=-1.0), dict(momentum=1.0), dict(weight_decay=-0.1),
                                 dict(head="mlp"), dict(metric="l1"), dict(stage="pretrain"),
                                 dict(batch_size=0)])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        replace(P.classification_config(), **bad).validate()


def test_config_json_round_trip(tmp_path):
    cfg = P.meta_config(3, episode=EpisodeSpec(5, 5, 10), hidden_dims=(8, 4))
    cfg.save(tmp_path / "c.json")
    assert P.TrainConfig.load(tmp_path / "c.json") == cfg
    with pytest.raises(ConfigError):
        P.TrainConfig.from_dict({"stage": "meta", "learning_rate": 1})


def test_config_errors_come_before_training():
    with pytest.raises(ConfigError):
        P.train_classification(DS, SPLIT, P.classification_config(2, lr=-1.0, **TINY), monitor=None)
    with pytest.raises(ConfigError):
        P.train_classification(DS, SplitSpec((0, 99), (5,), (10,)), P.classification_config(2, **TINY), monitor=None)


# -- classification stage ------------------------------------------------------------------------------


def test_separable_data_is_learned():
    ds = generate_synthetic(SyntheticSpec(3, 4, 40, 8, super_scale=1.0, class_scale=3.0, noise_scale=0.3))
    split = SplitSpec(tuple(range(8)), (8, 9), (10, 11))
    res = P.train_classification(ds, split, P.classification_config(15, batch_size=32, **TINY), monitor=None)
    assert res.records[-1].train_acc > 0.95


def test_classification_is_deterministic_and_excludes_holdout():
    cfg = P.classification_config(2, batch_size=32, **TINY)
    a = P.train_classification(DS, SPLIT, cfg, monitor=None)
    b = P.train_classification(DS, SPLIT, cfg, monitor=None)
    assert bits(a.encoder) == bits(b.encoder)
    assert a.records[-1].to_dict() == b.records[-1].to_dict()
    # changing only held-out samples leaves training untouched
    ds2 = generate_synthetic(SyntheticSpec(4, 5, 30, 8, noise_scale=2.0))
    for cid in SPLIT.base:
        ds2.classes[cid].samples[-3:] = 1e3
    c = P.train_classification(ds2, SPLIT, cfg, monitor=None)
    assert bits(a.encoder) == bits(c.encoder)


def test_cosine_head_trains():
    cfg = P.classification_config(2, batch_size=32, head="cosine", **TINY)
    res = P.train_classification(DS, SPLIT, cfg, monitor=None)
    assert res.head.kind == "cosine" and res.records[-1].tau is not None


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_run_raises_numeric_error():
    cfg = P.classification_config(3, batch_size=32, lr=1e6, momentum=0.0, **TINY)
    with pytest.raises(NumericError):
        P.train_classification(DS, SPLIT, cfg, monitor=None)


# -- meta stage -----------------------------------------------------------------------------------------


def test_golden_tiny_meta_run():
    # first-batch loss checked against a plain numpy forward (diff 4e-8); final loss frozen
    losses = []
    cfg = P.meta_config(2, batches_per_epoch=10, **TINY)
    res = P.train_meta(None, DS, SPLIT, cfg, monitor=None, on_batch=lambda s, l: losses.append(l))
    assert len(losses) == 20
    assert losses[0] == pytest.approx(2.3570417958802876, rel=1e-6)
    assert losses[-1] == pytest.approx(1.1120014190673828, rel=1e-6)


def test_zero_meta_epochs_is_the_classifier():
    mon = Monitor(DS, SPLIT, (EpisodeSpec(5, 1, 15),), ("val", "novel"), num_tasks=50)
    cls = P.train_classification(DS, SPLIT, P.classification_config(2, batch_size=32, **TINY), monitor=None)
    meta = P.train_meta(cls.encoder, DS, SPLIT, P.meta_config(0, **TINY), monitor=mon)
    assert bits(meta.selected) == bits(cls.encoder)
    assert meta.records[0].evals == mon(cls.encoder)


def test_zero_lr_leaves_parameters_unchanged():
    init = E.init_params(E.EncoderSpec(8, (16,), 8), 1)
    res = P.train_meta(init, DS, SPLIT, P.meta_config(1, batches_per_epoch=5, lr=0.0, **TINY), monitor=None)
    assert bits(res.encoder) == bits(init)
    assert res.tau == 10.0


def test_meta_loss_falls_during_first_epoch():
    cls = P.train_classification(DS, SPLIT, P.classification_config(3, batch_size=32, **TINY), monitor=None)
    losses = []
    P.train_meta(cls.encoder, DS, SPLIT, P.meta_config(1, batches_per_epoch=100, lr=0.01, **TINY),
                 monitor=None, on_batch=lambda s, l: losses.append(l))
    assert np.mean(losses) < np.mean(losses[:10])


def test_meta_is_deterministic_and_does_not_touch_init():
    init = E.init_params(E.EncoderSpec(8, (16,), 8), 1)
    before = bits(init)
    cfg = P.meta_config(2, batches_per_epoch=5, lr=0.01, **TINY)
    a = P.train_meta(init, DS, SPLIT, cfg, monitor=None)
    b = P.train_meta(init, DS, SPLIT, cfg, monitor=None)
    assert bits(init) == before
    assert bits(a.encoder) == bits(b.encoder) and a.tau == b.tau


def test_tau_is_learned_and_not_decayed():
    cls = P.train_classification(DS, SPLIT, P.classification_config(2, batch_size=32, **TINY), monitor=None)
    res = P.train_meta(cls.encoder, DS, SPLIT, P.meta_config(1, batches_per_epoch=20, lr=0.01, **TINY), monitor=None)
    assert res.tau != 10.0


def test_infeasible_meta_episode():
    cfg = P.meta_config(1, batches_per_epoch=2, episode=EpisodeSpec(5, 20, 15), **TINY)
    with pytest.raises(ValueError):
        P.train_meta(None, DS, SPLIT, cfg, monitor=None)


# -- checkpoints and resume ------------------------------------------------------------------------------


class Interrupt(Exception):
    pass


def _stop_after(n):
    def hook(record):
        if record.epoch == n:
            raise Interrupt
    return hook


@pytest.mark.parametrize("stage", ["classification", "meta"])
def test_resume_matches_uninterrupted_run(tmp_path, stage):
    mon = Monitor(DS, SPLIT, (EpisodeSpec(5, 1, 15),), ("val", "novel"), num_tasks=20)
    if stage == "classification":
        cfg = P.classification_config(4, batch_size=32, **TINY)
        run = lambda **kw: P.train_classification(DS, SPLIT, cfg, monitor=mon, **kw)
    else:
        cfg = P.meta_config(4, batches_per_epoch=5, lr=0.01, **TINY)
        run = lambda **kw: P.train_meta(None, DS, SPLIT, cfg, monitor=mon, **kw)
    full = run()
    ck = tmp_path / "state.fsck"
    with pytest.raises(Interrupt):
        run(checkpoint_path=ck, on_epoch=_stop_after(2))
    resumed = run(checkpoint_path=ck, resume=True)
    assert bits(resumed.encoder) == bits(full.encoder)
    assert [r.to_dict() for r in resumed.records] == [r.to_dict() for r in full.records]
    assert resumed.best_epoch == full.best_epoch
    assert bits(resumed.selected) == bits(full.selected)


def test_resume_rejects_other_config(tmp_path):
    ck = tmp_path / "state.fsck"
    P.train_meta(None, DS, SPLIT, P.meta_config(1, batches_per_epoch=2, **TINY), monitor=None, checkpoint_path=ck)
    with pytest.raises(ConfigError):
        P.train_meta(None, DS, SPLIT, P.meta_config(2, batches_per_epoch=2, **TINY), monitor=None,
                     checkpoint_path=ck, resume=True)


def test_model_file_round_trip(tmp_path):
    mon = Monitor(DS, SPLIT, (EpisodeSpec(5, 1, 15),), ("val", "novel"), num_tasks=20)
    res = P.train_meta(None, DS, SPLIT, P.meta_config(2, batches_per_epoch=3, lr=0.01, **TINY), monitor=mon)
    P.save_model(tmp_path / "m.fsck", res)
    params, extras = P.load_model(tmp_path / "m.fsck")
    assert bits(params) == bits(res.selected)
    assert extras["metric"] == "cosine"
    assert extras["tau"] == pytest.approx(res.best_tau)


def test_metrics_files(tmp_path):
    mon = Monitor(DS, SPLIT, (EpisodeSpec(5, 1, 15),), ("val", "novel"), num_tasks=20)
    res = P.train_classification(DS, SPLIT, P.classification_config(2, batch_size=32, **TINY), monitor=mon)
    P.write_metrics(res.records, tmp_path / "m.jsonl", tmp_path / "m.csv")
    rows = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert [P.MetricsRecord.from_dict(r) for r in rows] == res.records
    header = (tmp_path / "m.csv").read_text().splitlines()[0].split(",")
    assert "novel/5w1s/acc" in header and "train_loss" in header
