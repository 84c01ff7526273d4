import csv

import numpy as np
import pytest

from axoseg import datahub, pipeline, synthgen, trainer, unet
from axoseg.errors import ConfigError, DataError, TrainingDivergedError
from axoseg.infer import TilingPlan
from axoseg.trainer import Fold, TrainConfig


def tiny_config(**overrides):
    base = dict(
        epochs=2,
        batch_size=2,
        patch_size=(32, 32),
        lr=0.01,
        momentum=0.9,
        folds=2,
        seed=3,
        steps_per_epoch=2,
        model=unet.UNetConfig(depth=2, base_channels=4),
        val_plan=TilingPlan(tile=32, overlap=0.0, blend="uniform"),
    )
    base.update(overrides)
    return TrainConfig(**base)


def make_pool(n=6, size=(48, 48), domains=("a",), seed=0):
    rng = np.random.default_rng(seed)
    pool = {}
    for dom in domains:
        for i in range(n):
            axon = rng.random(size) > 0.8
            myelin = (rng.random(size) > 0.8) & ~axon
            image = np.where(axon, 0.9, np.where(myelin, 0.1, 0.5)).astype(np.float32)
            pool[f"{dom}/s{i:02d}"] = (image, pipeline.one_hot_target(axon, myelin))
    return pool


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            tiny_config(folds=1).validate()
        with pytest.raises(ConfigError):
            tiny_config(epochs=0).validate()
        with pytest.raises(ConfigError):
            tiny_config(batch_size=0).validate()
        with pytest.raises(ConfigError):
            tiny_config(steps_per_epoch=0).validate()
        with pytest.raises(ConfigError, match="divisible"):
            tiny_config(patch_size=(33, 32)).validate()
        tiny_config().validate()

    def test_resolve_steps_explicit_wins(self):
        assert tiny_config(steps_per_epoch=7).resolve_steps(100) == 7

    def test_resolve_steps_scales_with_pool(self):
        cfg = tiny_config(steps_per_epoch=None, batch_size=2)
        # one nominal pass: PATCHES_PER_IMAGE patches per image per epoch
        assert cfg.resolve_steps(10) == 15
        assert cfg.resolve_steps(30) == 45
        assert cfg.resolve_steps(30) == 3 * cfg.resolve_steps(10)
        assert cfg.resolve_steps(1) >= 1


class TestMakeFolds:
    def test_partition_and_balance_over_seeds(self):
        ids = [f"a/s{i}" for i in range(11)] + [f"b/s{i}" for i in range(7)]
        for seed in range(30):
            folds = trainer.make_folds(ids, 3, seed)
            assert len(folds) == 3
            val_union = [sid for f in folds for sid in f.val_ids]
            assert sorted(val_union) == sorted(ids)  # vals partition the pool
            for f in folds:
                assert sorted(f.train_ids + f.val_ids) == sorted(ids)
                assert not set(f.train_ids) & set(f.val_ids)
            # global balance: fold val sizes within one of each other
            sizes = [len(f.val_ids) for f in folds]
            assert max(sizes) - min(sizes) <= 1
            # per-domain stratification, same property domain-wise
            for dom, total in (("a", 11), ("b", 7)):
                per = [sum(sid.startswith(dom) for sid in f.val_ids) for f in folds]
                assert sum(per) == total
                assert max(per) - min(per) <= 1

    def test_deterministic(self):
        ids = [f"a/s{i}" for i in range(8)]
        a = trainer.make_folds(ids, 2, 4)
        b = trainer.make_folds(ids, 2, 4)
        assert [f.val_ids for f in a] == [f.val_ids for f in b]

    def test_bad_k(self):
        ids = [f"a/s{i}" for i in range(4)]
        with pytest.raises(ConfigError):
            trainer.make_folds(ids, 1, 0)
        with pytest.raises(DataError):
            trainer.make_folds(ids, 5, 0)


class TestTrainFold:
    def test_returns_best_epoch_checkpoint(self, tmp_path):
        pool = make_pool()
        fold = Fold(index=0, train_ids=sorted(pool)[:4], val_ids=sorted(pool)[4:])
        log_path = tmp_path / "log.csv"
        cfg = tiny_config(epochs=3)
        ckpt = trainer.train_fold(cfg, fold, pool, log_path=log_path)

        with open(log_path) as f:
            rows = list(csv.DictReader(f))
        assert [r["epoch"] for r in rows] == ["1", "2", "3"]
        metrics_logged = [float(r["val_dice_mean"]) for r in rows]
        assert ckpt.best_val_metric == max(metrics_logged)
        # earliest maximal epoch wins ties
        assert ckpt.epoch == metrics_logged.index(max(metrics_logged)) + 1
        assert ckpt.provenance.fold_index == 0
        assert sorted(ckpt.provenance.train_sample_ids) == sorted(fold.train_ids)

    def test_single_epoch_returns_epoch_one(self):
        pool = make_pool()
        fold = Fold(index=0, train_ids=sorted(pool)[:4], val_ids=sorted(pool)[4:])
        ckpt = trainer.train_fold(tiny_config(epochs=1), fold, pool)
        assert ckpt.epoch == 1

    def test_deterministic_given_seed(self):
        pool = make_pool()
        fold = Fold(index=1, train_ids=sorted(pool)[:4], val_ids=sorted(pool)[4:])
        a = trainer.train_fold(tiny_config(), fold, pool)
        b = trainer.train_fold(tiny_config(), fold, pool)
        assert a.best_val_metric == b.best_val_metric
        sa, sb = a.state, b.state
        assert sa.keys() == sb.keys()
        for k in sa:
            assert np.array_equal(sa[k], sb[k])

    def test_fold_index_changes_stream(self):
        pool = make_pool()
        ids = sorted(pool)
        a = trainer.train_fold(tiny_config(), Fold(0, ids[:4], ids[4:]), pool)
        b = trainer.train_fold(tiny_config(), Fold(1, ids[:4], ids[4:]), pool)
        assert any(
            not np.array_equal(a.state[k], b.state[k]) for k in a.state
        )

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_context(self):
        # instance norm rescales blow-ups away, so divergence needs the
        # norm-free variant, where a huge step overflows float32
        pool = make_pool()
        fold = Fold(index=0, train_ids=sorted(pool)[:4], val_ids=sorted(pool)[4:])
        cfg = tiny_config(
            lr=1e12, momentum=0.0, steps_per_epoch=3,
            model=unet.UNetConfig(depth=2, base_channels=4, normalization="none"),
        )
        with pytest.raises(TrainingDivergedError, match=r"epoch 1.*fold 0"):
            trainer.train_fold(cfg, fold, pool)

    def test_pool_loading_contracts(self, tmp_path):
        spec = synthgen.SynthDomainSpec(
            id="pl", polarity="axon-bright", radius_range=(3.0, 4.0), count_range=(1, 1),
            thickness_range=(0.3, 0.4), noise_sigma=0.0, texture_scale=0,
            image_size=(32, 32), pixel_size_um=0.1,
        )
        ds = datahub.ingest(synthgen.generate(spec, 3, tmp_path / "pl"))
        pool = trainer.load_pool([ds], ds.sample_ids)
        assert sorted(pool) == sorted(ds.sample_ids)
        img, tgt = pool[ds.sample_ids[0]]
        assert img.dtype == np.float32 and tgt.shape[0] == 3
        with pytest.raises(DataError, match="not found"):
            trainer.load_pool([ds], ["pl/ghost"])
        # strip the masks off one sample: training on it must be refused
        unannotated = datahub.Sample(
            sample_id="pl/bare", domain_id="pl",
            image_path=ds.samples[0].image_path,
            axon_mask_path=None, myelin_mask_path=None, height=32, width=32,
        )
        ds.samples.append(unannotated)
        with pytest.raises(DataError, match="masks"):
            trainer.load_pool([ds], ["pl/bare"])


class TestPolyLR:
    def test_schedule_shape(self):
        assert trainer.poly_lr(0, 100, 0.01, 0.9) == pytest.approx(0.01, abs=1e-7)
        mid = trainer.poly_lr(50, 100, 0.01, 0.9)
        assert 0 < trainer.poly_lr(99, 100, 0.01, 0.9) < mid < 0.01
        # power 1 is the linear ramp (up to the tiny floor term)
        assert trainer.poly_lr(25, 100, 0.01, 1.0) == pytest.approx(0.0075, abs=1e-7)
        # never reaches zero even at the last step
        assert trainer.poly_lr(100, 100, 0.01, 0.9) > 0


class TestRunExperiment:
    def build_sources(self, tmp_path, n=6):
        datasets, splits = [], []
        for name in ("da", "db"):
            spec = synthgen.SynthDomainSpec(
                id=name,
                polarity="axon-bright",
                radius_range=(3.0, 5.0),
                count_range=(1, 2),
                thickness_range=(0.3, 0.5),
                noise_sigma=0.02,
                texture_scale=0,
                image_size=(48, 48),
                pixel_size_um=0.1,
                seed=hash(name) % 1000,
            )
            manifest = synthgen.generate(spec, n, tmp_path / name)
            ds = datahub.ingest(manifest)
            datasets.append(ds)
            splits.append(datahub.split(ds, ratios=(0.5, 0.25, 0.25), seed=1))
        return datasets, splits

    def test_dedicated_trains_one_group_per_source(self, tmp_path):
        datasets, splits = self.build_sources(tmp_path)
        plan = trainer.ExperimentPlan("dedicated", tiny_config(epochs=1, steps_per_epoch=1))
        out = trainer.run_experiment(plan, datasets, splits, out_dir=tmp_path / "runs")
        assert sorted(out) == ["da", "db"]
        for name, ckpts in out.items():
            assert len(ckpts) == 2
            assert all(c.provenance.dataset_ids == [name] for c in ckpts)
            for i in range(2):
                assert (tmp_path / "runs" / name / f"fold{i}.ckpt").exists()
                assert (tmp_path / "runs" / name / f"fold{i}_log.csv").exists()

    def test_generalist_pools_all_sources(self, tmp_path):
        datasets, splits = self.build_sources(tmp_path)
        plan = trainer.ExperimentPlan("generalist", tiny_config(epochs=1, steps_per_epoch=1))
        out = trainer.run_experiment(plan, datasets, splits, out_dir=tmp_path / "runs")
        assert sorted(out) == [trainer.GENERALIST_NAME]
        ckpts = out[trainer.GENERALIST_NAME]
        assert all(c.provenance.dataset_ids == ["da", "db"] for c in ckpts)
        # training pool spans both domains in every fold
        for c in ckpts:
            doms = {sid.split("/")[0] for sid in c.provenance.train_sample_ids}
            assert doms == {"da", "db"}

    def test_no_test_sample_ever_trained_on(self, tmp_path):
        datasets, splits = self.build_sources(tmp_path)
        test_ids = {sid for ss in splits for sid in ss.test}
        for mode in ("dedicated", "generalist"):
            plan = trainer.ExperimentPlan(mode, tiny_config(epochs=1, steps_per_epoch=1))
            out = trainer.run_experiment(plan, datasets, splits, out_dir=tmp_path / f"r_{mode}")
            for ckpts in out.values():
                for c in ckpts:
                    assert not set(c.provenance.train_sample_ids) & test_ids

    def test_unknown_mode_rejected(self, tmp_path):
        datasets, splits = self.build_sources(tmp_path)
        with pytest.raises(ConfigError, match="mode"):
            trainer.run_experiment(
                trainer.ExperimentPlan("hybrid", tiny_config()), datasets, splits,
                out_dir=tmp_path / "runs",
            )
