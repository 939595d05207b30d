import numpy as np
import pytest

from dualcan import datagen, evaluation, model as M, nic, trainer
from dualcan.errors import ParameterError
from dualcan.nic import NoiseVerdict


def tiny_model(seed=0):
    return M.init_model(M.ModelConfig(input_dim=2, num_classes=2, hidden_dims=(4,),
                                      feature_dim=2, seed=seed))


def make_records(entries):
    return [
        nic.CorrectionRecord(index=i, verdict=v, assigned_cluster=0,
                             distance_to_centroid=0.0, radius=1.0,
                             corrected_label=0, corrected_feature=None, eta_used=0.0)
        for i, v in entries
    ]


class TestAccuracy:
    def test_perfect_model_scores_one(self):
        model = tiny_model()
        x = np.random.default_rng(0).normal(size=(50, 2))
        labels = np.argmax(M.predict(model, M.HEAD_SOURCE, x), axis=1)
        assert evaluation.accuracy(model, M.HEAD_SOURCE, x, labels) == 1.0

    def test_random_head_on_random_labels_is_half(self):
        # binomial expectation: a random model against random binary labels
        rng = np.random.default_rng(1)
        model = tiny_model(seed=5)
        x = rng.normal(size=(10000, 2)) * 3.0
        labels = rng.integers(0, 2, size=10000)
        acc = evaluation.accuracy(model, M.HEAD_SOURCE, x, labels)
        assert abs(acc - 0.5) < 0.02

    def test_permutation_invariance(self):
        model = tiny_model(seed=2)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(40, 2))
        labels = rng.integers(0, 2, size=40)
        perm = rng.permutation(40)
        assert evaluation.accuracy(model, M.HEAD_SOURCE, x, labels) == pytest.approx(
            evaluation.accuracy(model, M.HEAD_SOURCE, x[perm], labels[perm]), abs=1e-15
        )

    def test_empty_rejected(self):
        with pytest.raises(ParameterError):
            evaluation.accuracy(tiny_model(), M.HEAD_SOURCE, np.empty((0, 2)), np.empty(0))


class TestVerdictQuality:
    def flags(self, label, feature):
        return datagen.NoiseFlags(np.array(label, bool), np.array(feature, bool))

    def test_all_correct_is_diagonal(self):
        flags = self.flags([0, 1, 0, 0], [0, 0, 1, 0])
        records = make_records([
            (0, NoiseVerdict.CLEAN), (1, NoiseVerdict.LABEL_NOISE),
            (2, NoiseVerdict.FEATURE_NOISE), (3, NoiseVerdict.CLEAN),
        ])
        vq = evaluation.verdict_quality(records, flags)
        assert np.array_equal(vq.confusion, np.diag([2, 1, 1]))
        assert vq.precision[NoiseVerdict.CLEAN] == 1.0
        assert vq.recall[NoiseVerdict.LABEL_NOISE] == 1.0

    def test_all_clean_degenerate(self):
        flags = self.flags([0, 0], [0, 0])
        records = make_records([(0, NoiseVerdict.CLEAN), (1, NoiseVerdict.CLEAN)])
        vq = evaluation.verdict_quality(records, flags)
        assert vq.recall[NoiseVerdict.CLEAN] == 1.0
        assert vq.recall[NoiseVerdict.FEATURE_NOISE] is None
        assert vq.precision[NoiseVerdict.LABEL_NOISE] is None

    def test_double_corruption_counts_as_label_noise(self):
        flags = self.flags([1], [1])
        vq = evaluation.verdict_quality(make_records([(0, NoiseVerdict.LABEL_NOISE)]), flags)
        assert vq.confusion[2, 2] == 1

    def test_marginals_reconcile_with_record_counts(self):
        rng = np.random.default_rng(2)
        n = 60
        flags = self.flags(rng.random(n) < 0.3, rng.random(n) < 0.3)
        verdicts = [NoiseVerdict.CLEAN, NoiseVerdict.FEATURE_NOISE, NoiseVerdict.LABEL_NOISE]
        records = make_records([(i, verdicts[rng.integers(0, 3)]) for i in range(n)])
        vq = evaluation.verdict_quality(records, flags)
        assert vq.confusion.sum() == n
        for j, v in enumerate(evaluation.VERDICT_ORDER):
            assert vq.counts[v] == vq.confusion[:, j].sum()
        truth = evaluation.ground_truth_verdicts(flags)
        for i, v in enumerate(evaluation.VERDICT_ORDER):
            assert vq.confusion[i, :].sum() == np.sum(truth == v)

    def test_out_of_range_index_rejected(self):
        flags = self.flags([0], [0])
        with pytest.raises(ParameterError):
            evaluation.verdict_quality(make_records([(3, NoiseVerdict.CLEAN)]), flags)


class TestCurves:
    def history(self, src, pl):
        return [
            trainer.EpochMetrics(epoch=i, source_acc=0.9, target_acc=0.9,
                                 src_noise_ratio=s, pl_error=p, eta=0.1, lr=1e-3,
                                 source_train_loss=0.5, src_detected_noise_ratio=0.2,
                                 nic_src_clean=0, nic_src_feature=0, nic_src_label=0,
                                 nic_tgt_label=0)
            for i, (s, p) in enumerate(zip(src, pl))
        ]

    def test_constant_history_zero_deltas(self):
        curves = evaluation.correction_curves(self.history([0.2, 0.2, 0.2], [0.1, 0.1, 0.1]))
        assert curves.delta_src_noise == 0.0
        assert curves.delta_pl_error == 0.0

    def test_single_epoch_degenerate(self):
        curves = evaluation.correction_curves(self.history([0.3], [0.2]))
        assert len(curves.epochs) == 1
        assert curves.delta_src_noise == 0.0

    def test_decreasing_curves_negative_deltas(self):
        curves = evaluation.correction_curves(self.history([0.2, 0.1, 0.05], [0.3, 0.1, 0.02]))
        outcomes = evaluation.curve_assertions(curves)
        assert all(o.passed for o in outcomes)

    def test_empty_history_rejected(self):
        with pytest.raises(ParameterError):
            evaluation.correction_curves([])

    def test_csv_round_layout(self, tmp_path):
        curves = evaluation.correction_curves(self.history([0.2, 0.1], [0.3, 0.2]))
        path = tmp_path / "c.csv"
        curves.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,src_noise_ratio,pl_error"
        assert len(lines) == 3


class TestDistanceHistogram:
    def build(self, seed=0):
        rng = np.random.default_rng(seed)
        dom = datagen.DomainSpec(num_classes=3, feature_dim=2, samples_per_class=40,
                                 class_spread=0.5, seed=seed)
        source, _ = datagen.make_domain_pair(dom)
        noise = datagen.NoiseSpec(p_noise=0.4, kind=datagen.MIXED,
                                  feature_noise_sigma=0.75, seed=seed + 1)
        source = datagen.corrupt(source, noise)
        model = M.init_model(M.ModelConfig(input_dim=2, num_classes=3, seed=seed))
        feats = M.features(model, source.features)
        clusters = nic.build_clusters(feats, source.observed_labels, 3)
        return source, model, clusters

    def test_counts_partition_dataset(self):
        source, model, clusters = self.build()
        hist = evaluation.distance_histogram(source, model, clusters, source.noise_flags)
        total = sum(int(hist.counts[v].sum()) for v in evaluation.VERDICT_ORDER)
        assert total == len(source)
        assert hist.bin_edges[0] == 0.0

    def test_all_at_centroids_single_bin(self):
        source, model, clusters = self.build()
        # collapse: every feature equals centroid 0
        centroid_input = np.zeros_like(source.features)
        collapsed = datagen.NoisyDataset(
            features=centroid_input, observed_labels=source.observed_labels,
            clean_labels=source.clean_labels, noise_flags=source.noise_flags,
            domain=source.domain, num_classes=3,
        )
        feats = M.features(model, centroid_input)
        one_cluster = nic.build_clusters(feats, np.zeros(len(source), dtype=int), 3)
        hist = evaluation.distance_histogram(collapsed, model, one_cluster, source.noise_flags)
        for v in evaluation.VERDICT_ORDER:
            assert hist.counts[v][1:].sum() == 0

    def test_csv_export(self, tmp_path):
        source, model, clusters = self.build()
        hist = evaluation.distance_histogram(source, model, clusters, source.noise_flags, num_bins=10)
        path = tmp_path / "h.csv"
        hist.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "bin_lo,bin_hi,clean,feature_noise,label_noise"
        assert len(lines) == 11


def fast_experiment(**train_overrides):
    dom = datagen.DomainSpec(num_classes=3, feature_dim=2, samples_per_class=40,
                             class_spread=0.5, shift_rotation=0.5235987755982988, seed=7)
    noi = datagen.NoiseSpec(p_noise=0.4, kind=datagen.MIXED, feature_noise_sigma=0.75, seed=11)
    base = dict(max_epochs=8, warmup_epochs=2, batch_size=32, seed=3)
    base.update(train_overrides)
    return evaluation.ExperimentConfig(dom, noi, trainer.TrainConfig(**base))


class TestSweep:
    def test_single_clean_level_degenerates_to_plain_runs(self):
        base = fast_experiment()
        sweep = evaluation.noise_sweep(base, [0.0], ["full"], [0])
        assert len(sweep.cells) == 1
        cell = sweep.cells[0]
        assert not cell.failed
        source, target = evaluation.make_cell_task(base, 0.0, 0)
        cfg = trainer.TrainConfig(**{**base.train.__dict__,
                                     "seed": evaluation.derive_seed(base.train.seed, 0)})
        direct = trainer.run(cfg, source, target)
        assert cell.final_target_acc == direct.history[-1].target_acc

    def test_same_cell_task_shared_across_methods(self):
        base = fast_experiment()
        s1, t1 = evaluation.make_cell_task(base, 0.4, 2)
        s2, t2 = evaluation.make_cell_task(base, 0.4, 2)
        assert datagen.datasets_equal(s1, s2) and datagen.datasets_equal(t1, t2)

    def test_aggregate_uses_common_seed_set(self):
        base = fast_experiment()
        sweep = evaluation.noise_sweep(base, [0.0, 0.4], ["full", "no_correction"], [0, 1])
        assert len(sweep.cells) == 8
        for row in sweep.aggregate():
            assert row["n_seeds"] == 2
            assert row["n_failed"] == 0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_failed_cell_recorded_not_dropped(self):
        base = fast_experiment(lr=1e9, max_epochs=25, warmup_epochs=2)
        sweep = evaluation.noise_sweep(base, [0.4], ["full"], [0])
        assert len(sweep.cells) == 1
        # divergence at an absurd learning rate is recorded as a failed cell
        assert sweep.cells[0].failed
        assert sweep.any_failed

    def test_unknown_preset_rejected(self):
        with pytest.raises(ParameterError):
            evaluation.noise_sweep(fast_experiment(), [0.0], ["bogus"], [0])

    def test_csv_exports(self, tmp_path):
        sweep = evaluation.noise_sweep(fast_experiment(), [0.0], ["full"], [0, 1])
        cells = sweep.cells_csv_text().strip().splitlines()
        summary = sweep.summary_csv_text().strip().splitlines()
        assert cells[0] == "level,method,seed,final_target_acc,failed,error"
        assert summary[0] == "level,method,mean_acc,std_acc,n_seeds,n_failed"
        assert len(cells) == 3 and len(summary) == 2


class TestAblation:
    def test_five_rows_present(self):
        result = evaluation.ablation_battery(fast_experiment(), seeds=[0])
        assert [row["method"] for row in result.rows] == list(trainer.ABLATION_TABLE_ROWS)
        assert "full" in {row["method"] for row in result.rows}

    def test_full_row_uses_all_flags(self):
        flags = trainer.ABLATION_PRESETS["full"]
        assert flags.feature_correction and flags.label_correction
        assert flags.source_correction and flags.target_correction

    def test_table_csv_layout(self):
        result = evaluation.ablation_battery(fast_experiment(), seeds=[0])
        lines = result.table_csv_text().strip().splitlines()
        assert lines[0] == "method,mean_acc,std_acc,n_seeds,n_failed"
        assert len(lines) == 6

    def test_assertion_report_lists_every_check(self):
        result = evaluation.ablation_battery(fast_experiment(), seeds=[0, 1])
        outcomes = evaluation.ablation_assertions(result)
        text = evaluation.assertion_report_text(outcomes)
        assert text.count("[") == len(outcomes)
        assert "assertions passed" in text
