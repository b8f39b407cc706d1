import json

import numpy as np
import pytest
import torch

from blinedet.augment import AugmentationPolicy
from blinedet.errors import ConfigurationError, TrainingDivergedError
from blinedet.train import TrainConfig, PlateauSchedule, build_units, load_sample, train, train_cv

from conftest import make_tiny_dataset


def fast_config(**kw):
    base = dict(level="frame", arch_name="tiny_frame_cnn", learning_rate=1e-3, batch_size=4,
                max_batches_per_epoch=1, augmentation=AugmentationPolicy.off())
    base.update(kw)
    return TrainConfig(**base)


def scripted(losses):
    seq = list(losses)
    return lambda epoch, model: seq[epoch - 1] if epoch - 1 < len(seq) else seq[-1]


def flat_after(improving, total):
    return [1.0 - 0.1 * i for i in range(improving)] + [1.0] * (total - improving)


def test_config_defaults():
    c = TrainConfig(level="pixel", arch_name="tiny_pixel_unet")
    assert (c.lr, c.batch, c.adam_betas, c.max_epochs) == (1e-3, 32, (0.9, 0.999), 100)
    assert (c.lr_halving_patience, c.early_stop_patience) == (5, 10)
    assert TrainConfig(level="clip", arch_name="tiny_clip_cnn3d").lr == 1e-4
    assert TrainConfig(level="frame", arch_name="resnet18").lr == 2e-6
    assert TrainConfig(level="frame", arch_name="tiny_frame_cnn").lr == 1e-3
    assert TrainConfig(level="clip", arch_name="tiny_clip_cnn3d").batch == 4
    with pytest.raises(ConfigurationError):
        TrainConfig(level="frame", arch_name="x", lr_halving_patience=6, early_stop_patience=5)
    with pytest.raises(ConfigurationError):
        TrainConfig(level="frame", arch_name="x", batch_size=3)


def test_config_roundtrip():
    c = fast_config(seed=3)
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


# each scenario: (validation losses, config overrides, stop epoch, best epoch, epochs with a halving)
SCENARIOS = {
    "improve_1_to_3": (flat_after(3, 30), {}, 13, 3, [8]),
    "patience_one_worsening": ([1.0 + 0.1 * i for i in range(10)],
                               {"early_stop_patience": 1, "lr_halving_patience": 1}, 2, 1, []),
    "always_improving": ([1.0 / (i + 1) for i in range(7)], {"max_epochs": 7}, 7, 7, []),
    "recovery_after_halving": ([1.0, 1, 1, 1, 1, 1, 0.5] + [0.5] * 20, {}, 17, 7, [6, 12]),
    "sub_threshold_gains": ([1.0] + [1.0 - 9e-7] * 19, {}, 11, 1, [6]),
    "reset_then_plateau": ([1.0] + [1.0] * 9 + [0.9] + [0.9] * 20, {}, 21, 11, [6, 16]),
}


@pytest.mark.parametrize("name", sorted(SCENARIOS))
def test_schedule_scenarios(tiny, name):
    losses, overrides, stop, best, halvings = SCENARIOS[name]
    ds, split = tiny
    ck = train(fast_config(**overrides), ds, 0, split=split, evaluate_fn=scripted(losses))
    hist = ck.history
    assert len(hist) == stop
    assert ck.best_epoch == best
    assert [h["epoch"] for h in hist if h["lr_halved"]] == halvings
    lrs = [h["lr"] for h in hist]
    for a, b in zip(lrs, lrs[1:]):
        assert b == a or b == a / 2
    # gains below min_improvement do not move the checkpoint
    assert min(h["val_loss"] for h in hist) >= hist[best - 1]["val_loss"] - 1e-6


def test_plateau_schedule_direct():
    s = PlateauSchedule(1.0)
    decisions = [s.step(v) for v in flat_after(3, 13)]
    assert [i + 1 for i, d in enumerate(decisions) if d.lr_halved] == [8]
    assert decisions[-1].stop and not any(d.stop for d in decisions[:-1])
    assert s.lr == 0.5


def test_checkpoint_holds_best_epoch_parameters(tiny):
    ds, split = tiny
    snapshots = {}

    def fn(epoch, model):
        snapshots[epoch] = {k: v.clone() for k, v in model.state_dict().items()}
        return [1.0, 0.5, 0.7, 0.8][epoch - 1]

    ck = train(fast_config(max_epochs=4), ds, 0, split=split, evaluate_fn=fn)
    assert ck.best_epoch == 2
    for k, v in ck.state_dict.items():
        assert torch.equal(v, snapshots[2][k])


def test_deterministic_history(tiny):
    ds, split = tiny
    cfg = fast_config(max_epochs=2, max_batches_per_epoch=2, augmentation=AugmentationPolicy())
    a = train(cfg, ds, 1, split=split)
    b = train(cfg, ds, 1, split=split)
    assert a.history == b.history
    for k in a.state_dict:
        assert torch.equal(a.state_dict[k], b.state_dict[k])


def test_pixel_and_clip_levels_run(tiny):
    ds, split = tiny
    for level, arch, bs in (("pixel", "tiny_pixel_unet", 4), ("clip", "tiny_clip_cnn3d", 2)):
        cfg = fast_config(level=level, arch_name=arch, batch_size=bs, max_epochs=1, clip_length=4)
        ck = train(cfg, ds, 0, split=split)
        assert ck.level == level and len(ck.history) == 1 and np.isfinite(ck.history[0]["val_loss"])


def test_divergence(tiny, tmp_path):
    ds, split = tiny
    with pytest.raises(TrainingDivergedError) as info:
        train(fast_config(), ds, 0, split=split, evaluate_fn=lambda e, m: float("nan"), out_dir=tmp_path)
    assert info.value.snapshot["epoch"] == 1
    assert (tmp_path / "divergence.json").exists()


def test_units_and_samples(tiny):
    ds, _ = tiny
    vids = ds.video_ids[:4]
    pos, neg = build_units(ds, vids, "frame")
    assert all(u.index % 4 == 0 for u in pos)
    assert len(neg) == 8 * sum(1 for v in vids if not ds.meta[v].label)
    x, y = load_sample(ds, pos[0], "pixel")
    assert x.shape == (32, 48) and y.dtype == np.uint8 and y.sum() > 0
    cpos, _ = build_units(ds, vids, "clip", clip_length=4)
    assert sorted({u.index for u in cpos if u.video_id == pos[0].video_id}) == [0, 1, 2, 3, 4]


def test_train_cv_records_failures(tiny, tmp_path):
    ds, split = tiny

    def flaky(cfg, dataset, k, split=None, out_dir=None):
        if k == 2:
            raise RuntimeError("boom")
        return train(cfg, dataset, k, split=split, out_dir=out_dir,
                     evaluate_fn=scripted([1.0, 0.9]))

    cks, failures = train_cv(fast_config(max_epochs=2, model_id="m"), ds, split, tmp_path, train_fn=flaky)
    assert sorted(c.fold_index for c in cks) == [0, 1, 3, 4]
    assert list(failures) == [2]
    assert [c.model_id for c in cks] == [f"m/fold{k}" for k in (0, 1, 3, 4)]
    assert (tmp_path / "m" / "fold3" / "weights.bin").exists()
