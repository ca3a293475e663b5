import numpy as np
import pytest

from protoseg.encoder import model_checksum
from protoseg.trainer import (
    LABELED_ONTO_UNLABELED,
    UNLABELED_ONTO_LABELED,
    ConfigError,
    TrainConfig,
    format_config,
    make_dataset,
    make_mixed_label,
    make_pseudo_labels,
    parse_config,
    predict,
    pretrain,
    self_train,
    split_counts,
)
from protoseg.volume import LabelVolume, PasteRegion


def tiny_cfg(**kw):
    base = dict(
        d=6, pretrain_iters=4, selftrain_iters=4, ramp_len=4, eval_interval=2,
        dims=(10, 10, 8), noise_std=0.2, batch_size=1,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_split():
    return make_dataset(tiny_cfg(), count=20)


class TestConfig:
    def test_format_parse_round_trip(self):
        cfg = tiny_cfg(seed=9, gamma=0.02)
        assert parse_config(format_config(cfg)) == cfg

    def test_missing_key_named(self):
        text = format_config(TrainConfig())
        text = "\n".join(l for l in text.splitlines() if not l.startswith("alpha"))
        with pytest.raises(ConfigError, match="missing config key: alpha"):
            parse_config(text)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config(format_config(TrainConfig()) + "bogus = 1\n")

    def test_bad_value_reports_line(self):
        text = format_config(TrainConfig()).replace("lr = 0.01", "lr = fast")
        with pytest.raises(ConfigError, match="bad value for 'lr'"):
            parse_config(text)

    def test_comments_and_blank_lines_ignored(self):
        text = "# header\n\n" + format_config(TrainConfig()) + "\n# trailer\n"
        assert parse_config(text) == TrainConfig()

    def test_degenerate_fractions_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(labeled_fraction=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(C=1)


class TestSplits:
    def test_forty_case_split(self):
        assert split_counts(40, 0.1, 0.1) == (4, 32, 4)

    def test_counts_sum(self):
        for count in (20, 35, 50):
            n_lab, n_unl, n_eval = split_counts(count, 0.1, 0.1)
            assert n_lab + n_unl + n_eval == count

    def test_degenerate_split_rejected(self):
        with pytest.raises(ValueError):
            split_counts(3, 0.01, 0.01)  # rounds to zero labeled

    def test_make_dataset_sizes(self, tiny_split):
        assert len(tiny_split.labeled) == 2
        assert len(tiny_split.unlabeled) == 16
        assert len(tiny_split.eval_cases) == 2

    def test_volumes_distinct(self, tiny_split):
        a = tiny_split.labeled[0][0].data
        b = tiny_split.labeled[1][0].data
        assert not np.array_equal(a, b)


class TestMixedLabel:
    def _labs(self):
        rng = np.random.default_rng(0)
        yl = LabelVolume(rng.integers(0, 2, size=(6, 6, 4)), 2)
        yu = LabelVolume(rng.integers(0, 2, size=(6, 6, 4)), 2)
        return yl, yu

    def test_unlabeled_onto_labeled_scan(self):
        yl, yu = self._labs()
        region = PasteRegion((1, 2, 0), (3, 2, 2))
        out = make_mixed_label(yl, yu, region, UNLABELED_ONTO_LABELED)
        for x in range(6):
            for y in range(6):
                for z in range(4):
                    inside = 1 <= x < 4 and 2 <= y < 4 and 0 <= z < 2
                    src = yu if inside else yl
                    assert out.labels[x, y, z] == src.labels[x, y, z]

    def test_directions_differ(self):
        yl, yu = self._labs()
        region = PasteRegion((0, 0, 0), (3, 3, 3))
        a = make_mixed_label(yl, yu, region, UNLABELED_ONTO_LABELED)
        b = make_mixed_label(yl, yu, region, LABELED_ONTO_UNLABELED)
        assert np.array_equal(a.labels[region.slices()], yu.labels[region.slices()])
        assert np.array_equal(b.labels[region.slices()], yl.labels[region.slices()])

    def test_unknown_direction(self):
        yl, yu = self._labs()
        with pytest.raises(ValueError):
            make_mixed_label(yl, yu, PasteRegion((0, 0, 0), (1, 1, 1)), "sideways")


class TestPretrain:
    def test_zero_iterations_returns_init(self, tiny_split):
        cfg = tiny_cfg(pretrain_iters=0)
        model, history = pretrain(tiny_split, cfg)
        assert history == []
        assert model.num_classes == cfg.C

    def test_deterministic(self, tiny_split):
        cfg = tiny_cfg()
        m1, _ = pretrain(tiny_split, cfg)
        m2, _ = pretrain(tiny_split, cfg)
        assert model_checksum(m1) == model_checksum(m2)

    def test_loss_direction_over_short_run(self, tiny_split):
        # the supervised loss on a fixed batch should drop after training
        from protoseg import losses
        from protoseg.encoder import encode

        cfg = tiny_cfg(pretrain_iters=0)
        m0, _ = pretrain(tiny_split, cfg)
        m1, _ = pretrain(tiny_split, tiny_cfg(pretrain_iters=25))
        vol, lab = tiny_split.labeled[0]

        def sup_loss(m):
            probs = losses.linear_classify(encode(m, vol), m.linear_w)
            return losses.consistency_loss(probs, lab.labels)

        assert sup_loss(m1) < sup_loss(m0)

    def test_history_row_count(self, tiny_split):
        _, history = pretrain(tiny_split, tiny_cfg(pretrain_iters=5, eval_interval=2))
        # intervals at 2, 4 plus the final iteration 5
        assert [h.iteration for h in history] == [2, 4, 5]

    def test_single_labeled_volume_rejected(self, tiny_split):
        from protoseg.trainer import DatasetSplit

        solo = DatasetSplit(
            labeled=tiny_split.labeled[:1],
            unlabeled=tiny_split.unlabeled,
            eval_cases=tiny_split.eval_cases,
        )
        with pytest.raises(ValueError):
            pretrain(solo, tiny_cfg())


class TestPredict:
    def test_labels_match_prob_argmax(self, tiny_split):
        cfg = tiny_cfg(pretrain_iters=2)
        model, _ = pretrain(tiny_split, cfg)
        vol = tiny_split.eval_cases[0][0]
        lab, probs = predict(model, vol)
        assert lab.labels.shape == vol.dims
        assert np.array_equal(lab.labels, probs.argmax(axis=-1))
        assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-9)

    def test_pseudo_labels_in_range(self, tiny_split):
        model, _ = pretrain(tiny_split, tiny_cfg(pretrain_iters=2))
        lab, _ = make_pseudo_labels(model, tiny_split.unlabeled[0])
        assert lab.labels.max() < model.num_classes


@pytest.fixture(scope="module")
def pretrained(tiny_split):
    return pretrain(tiny_split, tiny_cfg(pretrain_iters=10))[0]


class TestSelfTrain:
    def test_invariants_hold_over_short_run(self, tiny_split, pretrained):
        cfg = tiny_cfg(selftrain_iters=4)
        student, teacher, history, loss_rows = self_train(
            tiny_split, pretrained, cfg, assert_invariants=True
        )
        assert len(loss_rows) == 4
        assert [h.iteration for h in history] == [2, 4]
        assert model_checksum(student) != model_checksum(teacher)

    def test_deterministic(self, tiny_split, pretrained):
        cfg = tiny_cfg(selftrain_iters=3)
        s1, t1, _, _ = self_train(tiny_split, pretrained, cfg)
        s2, t2, _, _ = self_train(tiny_split, pretrained, cfg)
        assert model_checksum(s1) == model_checksum(s2)
        assert model_checksum(t1) == model_checksum(t2)

    def test_lambda_ramp_recorded(self, tiny_split, pretrained):
        cfg = tiny_cfg(selftrain_iters=4, ramp_len=4)
        _, _, _, loss_rows = self_train(tiny_split, pretrained, cfg)
        lams = [r.lam for r in loss_rows]
        assert lams[0] == pytest.approx(np.exp(-5.0), abs=1e-12)
        assert all(b > a for a, b in zip(lams, lams[1:]))

    def test_bank_attached_and_updated(self, tiny_split, pretrained):
        cfg = tiny_cfg(selftrain_iters=2)
        student, teacher, _, _ = self_train(tiny_split, pretrained, cfg)
        assert student.bank is not None
        assert student.bank.vectors.shape == (cfg.C, cfg.K, cfg.d)
        assert teacher.bank is student.bank  # shared, momentum-maintained

    def test_needs_unlabeled(self, tiny_split, pretrained):
        from protoseg.trainer import DatasetSplit

        no_unl = DatasetSplit(
            labeled=tiny_split.labeled, unlabeled=[],
            eval_cases=tiny_split.eval_cases,
        )
        with pytest.raises(ValueError):
            self_train(no_unl, pretrained, tiny_cfg())
