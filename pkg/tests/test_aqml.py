import collections
import json
import os
import tempfile
import unittest

import numpy as np

import aqml
import data
import fusion
from errors import SearchError, ValidationError


def toy_set(n=30, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    x_top = rng.normal(size=(n, 3)) + 2.0 * labels[:, None]
    x_bottom = rng.normal(size=(n, 2)) - 2.0 * labels[:, None]
    return data.SampleSet(x_top, labels, x_bottom)


def small_space(**kwargs):
    options = dict(
        n_qubits=4,
        block_count_range=(1, 2),
        var_layers_range=(1, 1),
        lr_range=(0.01, 0.01),
        batch_size_range=(8, 8),
        extractor_hidden_range=(4, 4),
        extractor_output_range=(1, 2),
        classifier_hidden_range=(4, 4),
    )
    options.update(kwargs)
    return aqml.SearchSpace(**options)


def small_config(seed=42):
    return fusion.TrainConfig(lr=0.01, batch_size=8, epochs=1, seed=seed, folds=3)


class TestSampleTrial(unittest.TestCase):
    def test_singleton_space(self):
        space = aqml.SearchSpace(n_qubits=4, block_count_range=(1, 1), load_vocab=['Amplitude'], var_vocab=['BEL'],
                                 var_layers_range=(2, 2), head='solo', extractor_output_range=(3, 3))
        for seed in range(5):
            spec, hyper = aqml.sample_trial(space, seed)
            self.assertEqual(spec.notation, 'Amplitude > BEL(2)')
            self.assertEqual(hyper['head'], 'solo')
            self.assertEqual(hyper['extractor_output'], 3)

    def test_same_seed_same_trial(self):
        space = small_space(block_count_range=(1, 5))
        for seed in range(20):
            a_spec, a_hyper = aqml.sample_trial(space, seed)
            b_spec, b_hyper = aqml.sample_trial(space, seed)
            self.assertEqual(a_spec.notation, b_spec.notation)
            self.assertEqual(a_hyper, b_hyper)

    def test_samples_are_valid(self):
        space = small_space(block_count_range=(1, 5), var_layers_range=(1, 3), extractor_output_range=(1, 8))
        for seed in range(200):
            spec, hyper = aqml.sample_trial(space, seed)
            spec.validate()
            self.assertGreaterEqual(len(spec.blocks), 1)
            self.assertLessEqual(len(spec.blocks), 5)
            self.assertTrue(all(b[0].kind != 'Amplitude' for b in spec.blocks[1:]))
            self.assertLessEqual(2 * hyper['extractor_output'], spec.max_input_features())
            self.assertIn(hyper['head'], ('solo', 'linear'))

    def test_block_count_is_uniform(self):
        space = small_space(block_count_range=(1, 5))
        counts = collections.Counter(len(aqml.sample_trial(space, seed)[0].blocks) for seed in range(1000))
        for n in range(1, 6):
            self.assertAlmostEqual(counts[n] / 1000, 0.2, delta=0.05)

    def test_identity_load_vocab(self):
        with self.assertRaises(ValidationError):
            aqml.SearchSpace(load_vocab=['IdentityLoad'])

    def test_bad_ranges(self):
        with self.assertRaises(ValidationError):
            aqml.SearchSpace(block_count_range=(3, 2))
        with self.assertRaises(ValidationError):
            aqml.SearchSpace(block_count_range=(1, 6))
        with self.assertRaises(ValidationError):
            aqml.SearchSpace(var_vocab=['Nothing'])

    def test_mlp_space(self):
        space = small_space(model='mlp')
        spec, hyper = aqml.sample_trial(space, 0)
        self.assertIsNone(spec)
        self.assertEqual(hyper['head'], 'mlp')
        self.assertEqual(hyper['classifier_hidden'], 4)

    def test_serialize(self):
        space = small_space(head='linear')
        copy = aqml.SearchSpace.deserialize(json.loads(json.dumps(space.serialize())))
        self.assertEqual(copy.serialize(), space.serialize())


class TestRunTrial(unittest.TestCase):
    def test_zero_learning_rate_equals_untrained_models(self):
        space = small_space()
        spec, hyper = aqml.sample_trial(space, 3)
        hyper['lr'] = 0.0
        dataset = toy_set()
        config = small_config()
        record = aqml.run_trial(spec, hyper, dataset, config, space=space)
        self.assertEqual(record.status, aqml.STATUS_OK)
        blueprint = aqml.blueprint_for(space, spec, hyper, 2, [3, 2])
        for (_, val), metrics in zip(fusion.kfold(dataset, 3, config.seed), record.per_fold_metrics):
            untrained = fusion.evaluate(fusion.build_model(blueprint, config.seed), dataset.subset(val))
            np.testing.assert_array_equal(metrics.confusion, untrained.confusion)
        self.assertEqual(record.n_params, fusion.build_model(blueprint, 0).param_count)

    def test_divergence_is_recorded(self):
        space = small_space(model='mlp')
        _, hyper = aqml.sample_trial(space, 0)
        dataset = toy_set()
        dataset.x_top[:, 0] = np.nan
        record = aqml.run_trial(None, hyper, dataset, small_config(), trial_id=4, space=space)
        self.assertEqual(record.status, aqml.STATUS_FAILED)
        self.assertEqual(record.trial_id, 4)
        self.assertTrue(np.isnan(record.mean_accuracy))
        self.assertIsNotNone(record.error)

    def test_pruning(self):
        space = small_space()
        spec, hyper = aqml.sample_trial(space, 1)
        pruned = aqml.run_trial(spec, hyper, toy_set(), small_config(), space=space, prune_below=1.1)
        self.assertEqual(pruned.status, aqml.STATUS_PRUNED)
        self.assertEqual(len(pruned.per_fold_metrics), 1)
        kept = aqml.run_trial(spec, hyper, toy_set(), small_config(), space=space, prune_below=-1.0)
        self.assertEqual(kept.status, aqml.STATUS_OK)
        self.assertEqual(len(kept.per_fold_metrics), 3)
        np.testing.assert_array_equal(kept.per_fold_metrics[0].confusion, pruned.per_fold_metrics[0].confusion)


class TestTrialRecord(unittest.TestCase):
    def record(self):
        return aqml.TrialRecord(7, 'AngleX > BEL(1)', 'solo', {'lr': 0.01},
                                [fusion.Metrics([[2, 1], [0, 3]]), fusion.Metrics([[3, 0], [0, 3]])], 49, 1.5,
                                n_params=40, classifier_params=4)

    def test_aggregates(self):
        record = self.record()
        self.assertAlmostEqual(record.mean_accuracy, (5 / 6 + 1) / 2, delta=1e-12)
        self.assertAlmostEqual(record.std_accuracy, np.std([5 / 6, 1], ddof=1), delta=1e-12)

    def test_round_trip(self):
        record = self.record()
        copy = aqml.TrialRecord.deserialize(json.loads(json.dumps(record.serialize())))
        self.assertEqual(copy.serialize(), record.serialize())

    def test_tampered_aggregate(self):
        serialized = self.record().serialize()
        serialized['mean_accuracy'] += 0.1
        with self.assertRaises(ValidationError):
            aqml.TrialRecord.deserialize(serialized)

    def test_failed_record(self):
        record = aqml.TrialRecord(0, '', 'mlp', {}, [], 42, 0.1, status=aqml.STATUS_FAILED, error='boom')
        serialized = json.loads(json.dumps(record.serialize()))
        self.assertIsNone(serialized['mean_accuracy'])
        self.assertFalse(aqml.TrialRecord.deserialize(serialized).completed)

    def test_best_record(self):
        good = aqml.TrialRecord(0, 'a', 'solo', {}, [fusion.Metrics([[3, 0], [0, 3]])], 0, 0.0, n_params=50)
        small = aqml.TrialRecord(1, 'b', 'solo', {}, [fusion.Metrics([[3, 0], [0, 3]])], 1, 0.0, n_params=20)
        worse = aqml.TrialRecord(2, 'c', 'solo', {}, [fusion.Metrics([[2, 1], [0, 3]])], 2, 0.0, n_params=1)
        failed = aqml.TrialRecord(3, 'd', 'solo', {}, [], 3, 0.0, status=aqml.STATUS_FAILED)
        self.assertIs(aqml.best_record([good, small, worse, failed]), small)
        self.assertIsNone(aqml.best_record([failed]))

    def test_median_fold_one(self):
        records = [aqml.TrialRecord(i, 'a', 'solo', {}, [fusion.Metrics(c)], i, 0.0)
                   for i, c in enumerate([[[1, 1], [0, 2]], [[2, 0], [0, 2]], [[0, 2], [0, 2]]])]
        self.assertAlmostEqual(aqml._median_fold_one(records), 0.75)
        self.assertIsNone(aqml._median_fold_one([]))


class TestSearch(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def log_path(self, name='trials.jsonl'):
        return os.path.join(self.tmp.name, name)

    def test_single_trial(self):
        best, records = aqml.search(small_space(), toy_set(), 1, 100, small_config(), self.log_path())
        self.assertEqual(len(records), 1)
        self.assertIs(best, records[0])
        self.assertEqual(best.seed, 100)
        self.assertEqual(len(best.per_fold_metrics), 3)

    def test_resume(self):
        path = self.log_path()
        _, first = aqml.search(small_space(), toy_set(), 2, 100, small_config(), path)
        _, records = aqml.search(small_space(), toy_set(), 3, 100, small_config(), path)
        self.assertEqual([r.trial_id for r in records], [0, 1, 2])
        self.assertEqual(records[1].serialize(), first[1].serialize())
        with open(path) as f:
            self.assertEqual(len(f.readlines()), 3)

    def test_deterministic_logs(self):
        for name in ('a.jsonl', 'b.jsonl'):
            aqml.search(small_space(), toy_set(), 3, 7, small_config(), self.log_path(name), record_wall_time=False)
        with open(self.log_path('a.jsonl')) as a, open(self.log_path('b.jsonl')) as b:
            self.assertEqual(a.read(), b.read())

    def test_best_is_monotone(self):
        _, records = aqml.search(small_space(), toy_set(), 4, 11, small_config())
        best = [aqml.best_record(records[:k + 1]).mean_accuracy for k in range(len(records))]
        self.assertEqual(best, sorted(best))

    def test_all_failed(self):
        dataset = toy_set()
        dataset.x_top[:, 0] = np.nan
        with self.assertRaises(SearchError):
            aqml.search(small_space(model='mlp'), dataset, 2, 0, small_config())

    def test_median_pruning(self):
        _, records = aqml.search(small_space(), toy_set(), 4, 5, small_config(), median_pruning=True)
        self.assertEqual(len(records[0].per_fold_metrics), 3)
        for r in records:
            self.assertIn(r.status, (aqml.STATUS_OK, aqml.STATUS_PRUNED))

    def test_bad_log(self):
        with open(self.log_path(), 'w') as f:
            f.write('{"trial_id": 0}\n')
        with self.assertRaises(ValidationError):
            aqml.search(small_space(), toy_set(), 1, 0, small_config(), self.log_path())

    def test_malformed_record_types(self):
        with open(self.log_path(), 'w') as f:
            f.write('[1, 2]\n')
        with self.assertRaises(ValidationError):
            aqml.TrialLog(self.log_path()).read()

    def test_resume_after_a_torn_append(self):
        path = self.log_path()
        aqml.search(small_space(), toy_set(), 2, 100, small_config(), path, record_wall_time=False)
        with open(path) as f:
            complete = f.read()
        with open(path, 'a') as f:
            f.write('{"trial_id": 2, "spec": "AngleX')
        self.assertEqual(len(aqml.TrialLog(path).read()), 2)
        _, records = aqml.search(small_space(), toy_set(), 3, 100, small_config(), path, record_wall_time=False)
        self.assertEqual([r.trial_id for r in records], [0, 1, 2])
        with open(path) as f:
            lines = f.readlines()
        self.assertEqual(len(lines), 3)
        self.assertEqual(''.join(lines[:2]), complete)
        self.assertEqual(json.loads(lines[2])['trial_id'], 2)

    def test_missing_newline_is_repaired(self):
        path = self.log_path()
        aqml.search(small_space(), toy_set(), 1, 100, small_config(), path)
        with open(path) as f:
            text = f.read()
        with open(path, 'w') as f:
            f.write(text.rstrip('\n'))
        _, records = aqml.search(small_space(), toy_set(), 2, 100, small_config(), path)
        self.assertEqual([r.trial_id for r in records], [0, 1])
        self.assertEqual(len(aqml.TrialLog(path).read()), 2)

    def test_mlp_search(self):
        best, records = aqml.mlp_search(small_space(model='mlp'), toy_set(), 2, 0, small_config())
        self.assertTrue(all(r.head == 'mlp' and r.spec == '' for r in records))
        with self.assertRaises(ValidationError):
            aqml.mlp_search(small_space(), toy_set(), 1, 0, small_config())


if __name__ == '__main__':
    unittest.main()
