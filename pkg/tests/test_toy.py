import math

import numpy as np
import pytest

from aia import autodiff as ad
from aia.tensor import Tensor
from aia.toy import (ConfigError, GeometryError, MovingSquareDataset, ToyBackbone, TrainConfig, TrainingDiverged,
                     build_model, directions, evaluate, frame_probe_accuracy, gen_moving_square, load_config,
                     start_box, top1, train, train_step)
from aia.complexity import analyze


@pytest.fixture(scope="module")
def small():
    return gen_moving_square(0, 40, frames=4, height=16, width=16, size=4)


class TestDataset:
    def test_same_seed_bitwise(self):
        a, b = gen_moving_square(9, 12), gen_moving_square(9, 12)
        assert a.clips.tobytes() == b.clips.tobytes()
        assert np.array_equal(a.labels, b.labels)

    def test_different_seed_differs(self):
        assert not np.array_equal(gen_moving_square(1, 4).clips, gen_moving_square(2, 4).clips)

    def test_static_square_rejected(self):
        with pytest.raises(GeometryError):
            gen_moving_square(0, 4, noise=0.0, speed=0)

    def test_square_leaving_frame_rejected(self):
        with pytest.raises(GeometryError, match="needs 34px"):
            gen_moving_square(0, 4, speed=2)

    @pytest.mark.parametrize("n", [4, 8])
    @pytest.mark.parametrize("n_clips", [13, 40, 99])
    def test_balanced(self, n, n_clips):
        ds = gen_moving_square(0, n_clips, frames=3, height=16, width=16, size=4, n_classes=n)
        counts = np.bincount(ds.labels, minlength=n)
        assert counts.max() - counts.min() <= 1

    def test_bad_class_count(self):
        with pytest.raises(ValueError):
            gen_moving_square(0, 4, n_classes=5)

    def test_range_and_shape(self, small):
        assert small.clips.shape == (40, 1, 4, 16, 16)
        assert small.clips.min() >= 0.0 and small.clips.max() <= 1.0

    def test_square_moves_in_label_direction(self):
        ds = gen_moving_square(4, 8, noise=0.0)
        ys, xs = np.mgrid[0:32, 0:32]
        for clip, label in zip(ds.clips, ds.labels):
            mass = clip[0].sum(axis=(1, 2))
            cy = (clip[0] * ys).sum(axis=(1, 2)) / mass
            cx = (clip[0] * xs).sum(axis=(1, 2)) / mass
            np.testing.assert_allclose(np.diff(cy), directions(4)[label][0], atol=1e-9)
            np.testing.assert_allclose(np.diff(cx), directions(4)[label][1], atol=1e-9)

    def test_common_start_box(self):
        assert start_box(8, 32, 32, 6, 1.0) == (7.0, 19.0, 7.0, 19.0)

    def test_single_frame_probe_near_chance(self):
        cfg = TrainConfig()
        train_set, val_set = cfg.datasets()
        assert frame_probe_accuracy(train_set, val_set, frame=0) <= 0.25 + 0.15

    def test_subset(self, small):
        sub = small.subset([0, 3])
        assert isinstance(sub, MovingSquareDataset) and len(sub) == 2


class TestBackbone:
    def test_plain_has_no_cross_frame_op(self, rng):
        # scrambling frame order must not change plain-mode logits
        m = build_model("plain", seed=1)
        x = rng.uniform(0, 1, (2, 1, 8, 16, 16))
        perm = rng.permutation(8)
        np.testing.assert_allclose(m.logits(x), m.logits(x[:, :, perm]), atol=1e-12)

    @pytest.mark.parametrize("variant", ["c", "shift"])
    def test_temporal_variants_see_order(self, rng, variant):
        m = build_model(variant, seed=1)
        m.eval()
        x = rng.uniform(0, 1, (2, 1, 8, 16, 16))
        assert not np.allclose(m.logits(x), m.logits(x[:, :, ::-1]))

    def test_modes(self):
        assert build_model("none").mode == "plain"
        assert build_model("tsm").mode == "shift"
        assert build_model("CinST→STinC").attention.variant == "cinst_stinc_seq"
        with pytest.raises(ValueError):
            ToyBackbone(mode="attention")
        with pytest.raises(ValueError):
            ToyBackbone(mode="3d")
        with pytest.raises(ValueError):
            ToyBackbone(pool="sum")

    def test_arch_spec_counts_match_params(self):
        for v in ["plain", "c", "cinst_stinc_seq", "shift"]:
            m = build_model(v)
            assert analyze(m.arch_spec(8, 32, 32)).total_params == sum(p.size for p in m.params())

    def test_first_batch_loss_is_log_classes(self):
        cfg = TrainConfig()
        train_set, _ = cfg.datasets()
        m = cfg.build_model("c")
        loss = ad.cross_entropy(m(ad.constant(Tensor(train_set.clips[:8]))), train_set.labels[:8])
        assert abs(loss.data[0] - math.log(4)) < 0.1


class TestTraining:
    def cfg(self, **kw):
        base = dict(epochs=2, batch_size=10, n_train=40, n_val=20, frames=4, height=16, width=16, square=4,
                    channels=(4, 4, 8), lr=0.01)
        base.update(kw)
        return TrainConfig(**base)

    def run(self, cfg, variant="c"):
        tr, va = cfg.datasets()
        return train(cfg.build_model(variant), tr, cfg, va)

    def test_bitwise_reproducible(self):
        cfg = self.cfg()
        a, b = self.run(cfg), self.run(cfg)
        assert [(e.train_loss, e.val_top1) for e in a.epochs] == [(e.train_loss, e.val_top1) for e in b.epochs]
        assert a.first_batch_loss == b.first_batch_loss

    @pytest.mark.parametrize("variant,batch", [("plain", 10), ("c", 40)])
    def test_lr_zero_freezes_loss(self, variant, batch):
        # gate BN uses batch statistics, so for attention variants the batches must not change between epochs
        hist = self.run(self.cfg(lr=0.0, epochs=3, batch_size=batch), variant)
        losses = [e.train_loss for e in hist.epochs]
        assert max(losses) - min(losses) < 1e-12

    def test_lr_schedule(self):
        cfg = TrainConfig(lr=0.1, lr_decay_epochs=(2, 4), lr_decay=0.1)
        assert [round(cfg.lr_at(e), 12) for e in range(6)] == [0.1, 0.1, 0.01, 0.01, 0.001, 0.001]

    def test_divergence_reports_position(self, small):
        m = build_model("plain", seed=0, channels=(2, 2, 2))
        m.head.weight.assign(np.full(m.head.weight.shape, np.inf))
        with np.errstate(invalid="ignore"), pytest.raises(TrainingDiverged, match="epoch 0 step 0"):
            train(m, small, self.cfg())

    def test_train_step_rejects_nan(self, small):
        m = build_model("plain", seed=0)
        clips = small.clips[:2].copy()
        clips[0, 0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingDiverged):
            train_step(m, clips, small.labels[:2], 0.1, self.cfg())

    @pytest.mark.parametrize("variant", ["plain", "c", "shift", "cinst_stinc_seq"])
    def test_overfits_eight_clips(self, variant):
        ds = gen_moving_square(3, 8)
        m = build_model(variant, seed=0)
        cfg = TrainConfig(lr=0.01, weight_decay=0.0)
        acc = 0.0
        for step in range(200):
            m.train()
            train_step(m, ds.clips, ds.labels, cfg.lr, cfg)
            if step % 10 == 9:
                m.eval()
                acc = top1(m.logits(ds.clips), ds.labels)
                if acc == 1.0:
                    break
        assert acc == 1.0


class TestTop1:
    def test_perfect(self):
        assert top1(np.eye(4), [0, 1, 2, 3]) == 1.0

    def test_uniform_ties_go_to_class_zero(self):
        labels = np.array([0, 0, 1, 2, 3, 0])
        assert top1(np.zeros((6, 4)), labels) == pytest.approx(3 / 6)

    def test_partial_tie(self):
        assert top1(np.array([[0.0, 2.0, 2.0]]), [1]) == 1.0
        assert top1(np.array([[0.0, 2.0, 2.0]]), [2]) == 0.0

    def test_empty_is_nan(self):
        assert math.isnan(top1(np.zeros((0, 4)), []))

    def test_hand_labelled_fixture(self):
        logits = np.array([
            [3.0, 0.0, 0.0, 0.0],   # 0 -> pred 0, correct
            [0.0, 1.0, 1.5, 0.0],   # 2 -> pred 2, correct
            [0.0, 0.0, 0.0, 0.0],   # 1 -> tie, pred 0, wrong
            [0.1, 0.2, 0.3, 0.4],   # 3 -> pred 3, correct
            [5.0, 5.0, 0.0, 0.0],   # 1 -> tie, pred 0, wrong
            [-1.0, -2.0, -3.0, -0.5],  # 3 -> pred 3, correct
            [0.0, 9.0, 0.0, 0.0],   # 0 -> pred 1, wrong
            [0.0, 0.0, 2.0, 2.0],   # 2 -> tie, pred 2, correct
            [1.0, 0.0, 0.0, 0.0],   # 0 -> pred 0, correct
            [0.0, 0.0, 0.0, 1.0],   # 2 -> pred 3, wrong
        ])
        labels = [0, 2, 1, 3, 1, 3, 0, 2, 0, 2]
        assert top1(logits, labels) == pytest.approx(6 / 10)

    def test_evaluate_uses_model_logits(self, small):
        class Fixed:
            def eval(self):
                self.evaluated = True

            def logits(self, clips):
                out = np.zeros((len(clips), 4))
                out[:, 1] = 1.0
                return out

        expected = np.mean(small.labels == 1)
        assert evaluate(Fixed(), small, batch_size=7) == pytest.approx(expected)


class TestConfig:
    def test_defaults_valid(self):
        cfg = TrainConfig()
        assert cfg.epochs == 6 and cfg.pool == "max" and cfg.speed == 1.0

    @pytest.mark.parametrize("field,value", [("epochs", 0), ("batch_size", -1), ("n_train", 0)])
    def test_non_positive(self, field, value):
        with pytest.raises(ConfigError):
            TrainConfig(**{field: value})

    def test_negative_lr(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr=-0.1)

    def test_seed_mandatory(self):
        with pytest.raises(ConfigError):
            TrainConfig(seed=None)

    def test_yaml_round(self):
        cfg = load_config("epochs: 3\nlr: 0.02\nlr_decay_epochs: [2]\nvariant: CinST\n")
        assert (cfg.epochs, cfg.lr, cfg.lr_decay_epochs, cfg.variant) == (3, 0.02, (2,), "CinST")

    def test_empty_yaml_is_defaults(self):
        assert load_config("") == TrainConfig()

    def test_unknown_key_line(self):
        with pytest.raises(ConfigError, match=r"cfg.yaml:2: unknown key 'epoch'"):
            load_config("lr: 0.1\nepoch: 3\n", "cfg.yaml")

    def test_bad_value_line(self):
        with pytest.raises(ConfigError, match=r"cfg.yaml:3: .*batch_size"):
            load_config("lr: 0.1\nseed: 1\nbatch_size: 0\n", "cfg.yaml")

    def test_syntax_error_line(self):
        with pytest.raises(ConfigError, match=r"cfg.yaml:2:"):
            load_config("lr: 0.1\n  epochs: [3\n", "cfg.yaml")

    def test_not_a_mapping(self):
        with pytest.raises(ConfigError, match="mapping"):
            load_config("- 1\n- 2\n")

    def test_unknown_variant(self):
        with pytest.raises(ConfigError, match="unknown attention variant"):
            load_config("variant: magic\n")
