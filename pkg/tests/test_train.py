import numpy as np
import pytest

from awcl.data import DatasetManifest, SyntheticSpec, render_synthetic
from awcl.errors import ConfigError, TrainingDivergedError
from awcl.model import EncoderSpec, load_checkpoint, model_from_checkpoint, param_hash
from awcl.sampler import SamplerConfig
from awcl.train import TrainConfig, pretrain, read_log, split_by_scan

SPEC = EncoderSpec(backbone="small-cnn", feature_dim=16, width=8)


@pytest.fixture(scope="module")
def tiny():
    images, entries, tax = render_synthetic(SyntheticSpec(n_scans=5, frames_per_scan=24, image_size=(16, 16),
                                                          segment_length=6, seed=2))
    return DatasetManifest(entries, "taxonomy.tsv", tax), images


def _cfg(**kw):
    base = dict(epochs=2, batch_size=8, model=SPEC, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_defaults():
    c = TrainConfig()
    assert (c.optimizer, c.lr, c.weight_decay, c.epochs, c.batch_size, c.tau) == ("adam", 1e-3, 1e-6, 10, 32, 0.5)
    assert c.betas == (0.9, 0.999)
    assert c.sampler.batch_size == 32


@pytest.mark.parametrize("kw", [{"lr": 0}, {"tau": -1}, {"epochs": 0}, {"optimizer": "sgd"},
                                {"val_fraction": 1.0}])
def test_invalid(kw):
    with pytest.raises(ConfigError):
        _cfg(**kw)


def test_dict_round_trip():
    c = _cfg(sampler=SamplerConfig(granularity="coarse", anatomy_ratio=0.3))
    again = TrainConfig.from_dict(c.to_dict())
    assert again == c
    assert again.digest() == c.digest()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})


def test_split_by_scan():
    scans = np.repeat([f"s{k}" for k in range(10)], 7)
    train, val = split_by_scan(scans, 0.2, seed=1)
    assert not set(scans[train]) & set(scans[val])
    assert len(set(scans[val])) == 2
    assert len(train) + len(val) == len(scans)


def test_pretrain_outputs(tiny, tmp_path):
    manifest, images = tiny
    res = pretrain(_cfg(), manifest, out_dir=tmp_path, images=images)
    assert {p.name for p in tmp_path.iterdir()} >= {"best.pt", "last.pt", "loss_log.jsonl"}
    records = read_log(tmp_path / "loss_log.jsonl")
    assert records == res.log
    train = [r for r in records if r["kind"] == "train"]
    assert set(train[0]) == {"kind", "step", "epoch", "branch", "anatomy_fraction", "loss"}
    assert [r["step"] for r in train] == list(range(len(train)))
    epochs = [r for r in records if r["kind"] == "epoch"]
    assert len(epochs) == 2 and all(r["val_loss"] is not None for r in epochs)
    ckpt = load_checkpoint(tmp_path / "last.pt")
    assert param_hash(model_from_checkpoint(ckpt)) == param_hash(model_from_checkpoint(res.checkpoint))


def test_branch_telemetry_matches_sampler(tiny):
    manifest, images = tiny
    res = pretrain(_cfg(epochs=1), manifest, images=images)
    (epoch,) = [r for r in res.log if r["kind"] == "epoch"]
    assert epoch["anatomy_branch_fraction"] == pytest.approx(epoch["sampler_branch_fraction"], abs=1e-12)
    assert 0 < epoch["anatomy_branch_fraction"] < 1


def test_ratio_zero_reproduces_simclr(tiny):
    manifest, images = tiny
    awcl = pretrain(_cfg(sampler=SamplerConfig(anatomy_ratio=0.0)), manifest, images=images)
    simclr = pretrain(_cfg(sampler=SamplerConfig(mode="simclr")), manifest, images=images)
    assert awcl.train_losses() == simclr.train_losses()
    assert all(r["branch"] == "instance" for r in awcl.log if r["kind"] == "train")


def test_same_seed_same_log(tiny):
    manifest, images = tiny
    a = pretrain(_cfg(epochs=1), manifest, images=images)
    b = pretrain(_cfg(epochs=1), manifest, images=images)
    assert a.log == b.log


def test_resume_mid_epoch(tiny, tmp_path):
    manifest, images = tiny
    cfg = _cfg(checkpoint_every=3)
    full = pretrain(cfg, manifest, images=images)
    part = pretrain(cfg, manifest, out_dir=tmp_path, images=images, max_steps=5)
    ckpt = load_checkpoint(tmp_path / "last.pt")
    assert ckpt["sampler_state"]["cursor"] == 3
    resumed = pretrain(cfg, manifest, images=images, resume_from=tmp_path / "last.pt")
    assert resumed.train_losses() == full.train_losses()
    assert param_hash(model_from_checkpoint(resumed.checkpoint)) == param_hash(model_from_checkpoint(full.checkpoint))
    assert len(part.train_losses()) == 5


def test_resume_rejects_other_config(tiny, tmp_path):
    manifest, images = tiny
    res = pretrain(_cfg(epochs=1), manifest, images=images)
    with pytest.raises(ConfigError):
        pretrain(_cfg(epochs=1, lr=0.01), manifest, images=images, resume_from=res.checkpoint)


def test_nan_loss_dumps_batch(tiny, tmp_path, monkeypatch):
    import awcl.train as train_mod

    manifest, images = tiny
    real = train_mod.per_anchor_losses

    def poisoned(batch):
        losses, branch = real(batch)
        return losses * float("nan"), branch

    monkeypatch.setattr(train_mod, "per_anchor_losses", poisoned)
    with pytest.raises(TrainingDivergedError) as info:
        pretrain(_cfg(), manifest, out_dir=tmp_path, images=images)
    dump = np.load(info.value.dump_path)
    assert dump["views"].shape[0] == 2 * 8


def test_mismatched_augment_size(tiny):
    from awcl.augment import make_policy

    manifest, images = tiny
    with pytest.raises(ConfigError):
        pretrain(_cfg(augment=make_policy("pretrain", (8, 8)).to_dict()), manifest, images=images)


def test_simclr_epoch_means_decrease():
    """2-epoch simclr smoke runs: the second epoch's mean loss is lower on most seeds."""
    wins = 0
    for seed in range(5):
        images, entries, tax = render_synthetic(SyntheticSpec(n_scans=10, frames_per_scan=32, image_size=(16, 16),
                                                              seed=seed))
        m = DatasetManifest(entries, "taxonomy.tsv", tax)
        cfg = _cfg(sampler=SamplerConfig(mode="simclr"), batch_size=16, seed=seed, val_fraction=0.2)
        means = pretrain(cfg, m, images=images).epoch_means()
        wins += means[1] < means[0]
    assert wins >= 4
