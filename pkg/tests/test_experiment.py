import csv
import io
import os
import tempfile
from unittest import TestCase, skipUnless

import numpy as np
import yaml

from guarded_tuning.attack import FINETUNE, NOT_APPLICABLE
from guarded_tuning.errors import ConfigError, PhaseError
from guarded_tuning.experiment import (CONFIG_FILE, MANIFEST_FILE, REPORT_FILE, TRANSCRIPT_FILE, RunReport,
                                       comparison_rows, emit_comparison, load_run, reattack, run_experiment,
                                       run_id_for)
from guarded_tuning.protocol import Transcript, account
from guarded_tuning.protocol.messages import INFERENCE
from guarded_tuning.util import connect
from tests.examples import tiny_config

SLOW = bool(os.environ.get('GT_SLOW_TESTS'))


def memory_store():
    return connect(os.environ.get('TEST_STORE_URL', 'sqlite://'), recreate=True)


def synthetic_report(arch, task='keyed-lookup', seed=0, accuracy=0.5, finetune=50.0, inference=60.0,
                     finetune_bytes=1000, model=None):
    return RunReport(
        run_id=f'{arch}-{task}-s{seed}',
        architecture=arch,
        task=task,
        seed=seed,
        config_hash='0' * 64,
        accuracy={'zero_shot': 0.1, 'finetuned': accuracy},
        privacy={FINETUNE: {'mean': finetune}, INFERENCE: {'mean': inference}},
        communication={'finetune_bytes': finetune_bytes, 'total_bytes': finetune_bytes + 500},
        shared_layer_count=2,
        config={'model': model or {'d_model': 16}},
    )


class RunExperimentTests(TestCase):
    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.store = memory_store()

    def tearDown(self):
        self.tmpdir.cleanup()

    def run_tiny(self, **overrides):
        config = tiny_config(**overrides)
        return config, run_experiment(config, directory=self.tmpdir.name, store=self.store)

    def test_online_run(self):
        config, report = self.run_tiny()
        self.assertEqual(report.run_id, run_id_for(config))
        self.assertTrue(report.run_id.startswith('online-keyed-lookup-s0-'))
        self.assertEqual(set(report.accuracy), {'zero_shot', 'finetuned'})
        for value in report.accuracy.values():
            self.assertTrue(0.0 <= value <= 1.0)
        self.assertEqual(set(report.privacy), {FINETUNE, INFERENCE})
        self.assertEqual([p['step'] for p in report.privacy[FINETUNE]['points']], [3, 6])
        self.assertTrue(0.0 <= report.privacy_mean(FINETUNE) <= 100.0)
        self.assertEqual(report.training['steps'], 6)
        self.assertEqual(len(report.training['losses']), 6)
        self.assertEqual(report.shared_layer_count, 2)
        comm = report.communication
        self.assertEqual(comm['finetune_bytes'], comm['by_phase']['transfer'] + comm['by_phase']['train'])
        self.assertGreater(comm['by_phase']['inference'], 0)
        # files
        for name in (CONFIG_FILE, REPORT_FILE, MANIFEST_FILE, TRANSCRIPT_FILE):
            self.assertTrue(os.path.exists(os.path.join(self.tmpdir.name, name)), name)
        with open(os.path.join(self.tmpdir.name, CONFIG_FILE)) as fin:
            self.assertEqual(yaml.safe_load(fin), config.to_dict())
        transcript = Transcript.read(os.path.join(self.tmpdir.name, TRANSCRIPT_FILE))
        self.assertEqual(transcript.to_bytes(), self.store.artifacts.get(f'{report.run_id}/transcript'))
        self.assertEqual(account(transcript).to_dict(), comm)
        with open(os.path.join(self.tmpdir.name, MANIFEST_FILE)) as fin:
            manifest = yaml.safe_load(fin)
        self.assertEqual(manifest['segments'], {'input_adapter': [0], 'backbone': [1, 2], 'output_adapter': [3]})
        saved = RunReport.load(os.path.join(self.tmpdir.name, REPORT_FILE))
        self.assertEqual(saved.to_dict(wall_time=False), report.to_dict(wall_time=False))
        # store
        for name in ('transcript', 'checkpoint/client', 'checkpoint/server', 'references'):
            self.assertTrue(self.store.artifacts.exists(f'{report.run_id}/{name}'), name)
        self.assertEqual(self.store.get_run().run_id, report.run_id)
        self.assertEqual(self.store.attacks.objects.count(run_id=report.run_id), 2)

    def test_repeatable(self):
        _, first = self.run_tiny()
        transcript = self.store.artifacts.get(f'{first.run_id}/transcript')
        self.store = memory_store()
        _, second = self.run_tiny()
        self.assertEqual(first.to_dict(wall_time=False), second.to_dict(wall_time=False))
        self.assertEqual(self.store.artifacts.get(f'{second.run_id}/transcript'), transcript)

    def test_seed_changes_run(self):
        _, first = self.run_tiny()
        _, second = self.run_tiny(seed=1)
        self.assertNotEqual(first.run_id, second.run_id)
        self.assertNotEqual(first.training['losses'], second.training['losses'])
        self.assertEqual(len(self.store.runs.objects.all()), 2)

    def test_offline_run(self):
        _, report = self.run_tiny(architecture='offline')
        self.assertIn('emulator', report.accuracy)
        self.assertEqual(report.privacy_mean(FINETUNE), NOT_APPLICABLE)
        self.assertIn('reason', report.privacy[FINETUNE])
        self.assertNotEqual(report.privacy_mean(INFERENCE), NOT_APPLICABLE)
        self.assertEqual(report.communication['by_phase']['train'], 0)
        self.assertEqual(report.shared_layer_count, 4)
        with open(os.path.join(self.tmpdir.name, MANIFEST_FILE)) as fin:
            self.assertIn('emulator', yaml.safe_load(fin)['segments'])

    def test_sl_preset_and_bytes(self):
        sl_config, sl = self.run_tiny(architecture='sl')
        self.assertFalse(sl_config.quantization.enabled)
        self.assertEqual(sl_config.decorrelation.lam, 0.0)
        _, online = self.run_tiny()
        self.assertLess(online.communication['by_phase']['train'], sl.communication['by_phase']['train'])

    def test_attack_disabled(self):
        _, report = self.run_tiny(attack__stages=[])
        for phase in (FINETUNE, INFERENCE):
            self.assertEqual(report.privacy_mean(phase), NOT_APPLICABLE)
            self.assertEqual(report.privacy[phase]['reason'], 'attack disabled')

    def test_phase_error(self):
        # 7 bits give 128 sequences, 80 of them are taken by train and eval
        config = tiny_config(task__name='parity-of-window', attack__aux_size=100)
        with self.assertRaises(PhaseError) as cm:
            run_experiment(config, directory=self.tmpdir.name, store=self.store)
        self.assertEqual(cm.exception.phase, 'attack')
        self.assertIsInstance(cm.exception.error, ConfigError)
        self.assertIn('[attack]', str(cm.exception))
        self.assertFalse(os.path.exists(os.path.join(self.tmpdir.name, REPORT_FILE)))


class ReattackTests(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmpdir = tempfile.TemporaryDirectory()
        cls.store = memory_store()
        cls.config = tiny_config()
        cls.report = run_experiment(cls.config, directory=cls.tmpdir.name, store=cls.store)

    @classmethod
    def tearDownClass(cls):
        cls.tmpdir.cleanup()

    def test_load_run(self):
        config, report, store = load_run(self.tmpdir.name, store=self.store)
        self.assertEqual(config.config_hash(), self.config.config_hash())
        self.assertEqual(config, self.config)
        self.assertEqual(report.to_dict(), self.report.to_dict())
        with self.assertRaises(ValueError):
            load_run(self.tmpdir.name, run_id='missing', store=self.store)

    def test_same_attack_same_scores(self):
        reports = reattack(self.tmpdir.name, store=self.store)
        self.assertEqual({p: r.to_dict() for p, r in reports.items()}, self.report.privacy)

    def test_new_attack_config(self):
        import dataclasses
        weaker = dataclasses.replace(self.config.attack, stages=('inverter',))
        reports = reattack(self.tmpdir.name, run_id=self.report.run_id, attack=weaker, store=self.store)
        self.assertEqual(reports[FINETUNE].stages, ('inverter',))
        stored = self.store.attacks.objects.get(run_id=self.report.run_id, phase=FINETUNE)
        self.assertEqual(stored.stages, 'inverter')
        self.assertEqual(stored.mean, reports[FINETUNE].mean)
        # put the original scores back for the other tests
        reattack(self.tmpdir.name, store=self.store)


class ComparisonTests(TestCase):
    def test_rows(self):
        reports = [synthetic_report('online', seed=s, accuracy=0.5 + 0.1 * s, finetune=30.0) for s in range(2)]
        reports += [synthetic_report('sl', seed=s, accuracy=0.8, finetune=90.0, finetune_bytes=4000)
                    for s in range(2)]
        tasks, rows = comparison_rows(reports)
        self.assertEqual(tasks, ['keyed-lookup'])
        table = {(group, metric): values['keyed-lookup'] for group, metric, values in rows}
        self.assertEqual(rows[0][0], 'zero-shot')
        self.assertEqual(rows[1][0], 'sl')
        self.assertAlmostEqual(table[('online', 'accuracy')], 0.55)
        self.assertAlmostEqual(table[('online - sl', 'accuracy')], -0.25)
        self.assertAlmostEqual(table[('online - sl', 'finetune_privacy')], -60.0)
        self.assertEqual(table[('online - sl', 'finetune_bytes')], -3000)
        self.assertNotIn(('sl - sl', 'accuracy'), table)
        self.assertEqual(table[('online', 'shared_layers')], 2)

    def test_not_applicable(self):
        reports = [synthetic_report('sl'), synthetic_report('offline', finetune=NOT_APPLICABLE),
                   synthetic_report('gradfree', task='parity-of-window')]
        tasks, rows = comparison_rows(reports)
        self.assertEqual(tasks, ['keyed-lookup', 'parity-of-window'])
        table = {(group, metric): values for group, metric, values in rows}
        self.assertEqual(table[('offline', 'finetune_privacy')]['keyed-lookup'], NOT_APPLICABLE)
        self.assertEqual(table[('offline - sl', 'finetune_privacy')]['keyed-lookup'], NOT_APPLICABLE)
        self.assertEqual(table[('offline - sl', 'inference_privacy')]['keyed-lookup'], 0.0)
        # no run of that cell
        self.assertEqual(table[('sl', 'accuracy')]['parity-of-window'], NOT_APPLICABLE)
        self.assertEqual(table[('gradfree - sl', 'accuracy')]['parity-of-window'], NOT_APPLICABLE)

    def test_without_baseline(self):
        _, rows = comparison_rows([synthetic_report('online')])
        self.assertFalse(any(' - ' in group for group, _, _ in rows))

    def test_invalid(self):
        with self.assertRaises(ConfigError):
            comparison_rows([])
        with self.assertRaises(ConfigError):
            comparison_rows([synthetic_report('sl'), synthetic_report('online', model={'d_model': 64})])

    def test_emit(self):
        reports = [synthetic_report('sl'), synthetic_report('offline', finetune=NOT_APPLICABLE)]
        text, table = emit_comparison(reports)
        lines = text.splitlines()
        self.assertEqual(lines[0].split(), ['group', 'metric', 'keyed-lookup'])
        self.assertIn('N/A', text)
        self.assertIn('offline - sl', text)
        rows = list(csv.reader(io.StringIO(table)))
        self.assertEqual(rows[0], ['group', 'metric', 'keyed-lookup'])
        self.assertEqual(len(rows), 1 + 1 + 2 * 6 + 4)
        cells = {(r[0], r[1]): r[2] for r in rows[1:]}
        self.assertEqual(cells[('offline', 'finetune_privacy')], 'N/A')
        self.assertEqual(float(cells[('sl', 'accuracy')]), 0.5)
        self.assertEqual(float(cells[('sl', 'finetune_bytes')]), 1000.0)


# seed-aggregate experiments at the default model size, several minutes
SEEDS = range(5)
SLOW_RUN = {
    'training.steps': 300,
    'task.n_train': 1000,
    'task.n_eval': 100,
    'attack.cadence': 100,
    'attack.inverter_steps': 300,
    'attack.n_batches': 3,
}


def slow_config(**overrides):
    from guarded_tuning.config import resolve
    values = dict(SLOW_RUN)
    values.update({k.replace('__', '.'): v for k, v in overrides.items()})
    return resolve(None, values)


@skipUnless(SLOW, 'set GT_SLOW_TESTS=1 for the seed-aggregate experiments')
class SeedAggregateTests(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmpdir = tempfile.TemporaryDirectory()
        cls.store = memory_store()
        cls.reports = {}
        for arch in ('sl', 'online', 'gradfree', 'offline'):
            for seed in SEEDS:
                directory = os.path.join(cls.tmpdir.name, f'{arch}-s{seed}')
                cls.reports[arch, seed] = run_experiment(slow_config(architecture=arch, seed=seed),
                                                         directory=directory, store=cls.store)

    @classmethod
    def tearDownClass(cls):
        cls.tmpdir.cleanup()

    def test_protected_online_leaks_less(self):
        sl = [self.reports['sl', s].privacy_mean(FINETUNE) for s in SEEDS]
        online = [self.reports['online', s].privacy_mean(FINETUNE) for s in SEEDS]
        self.assertGreaterEqual(sum(o < b for o, b in zip(online, sl)), 4)
        self.assertGreaterEqual(np.mean(sl) - np.mean(online), 20.0)

    def test_finetuning_beats_zero_shot(self):
        for (arch, seed), report in self.reports.items():
            self.assertGreater(report.accuracy['finetuned'], report.accuracy['zero_shot'], (arch, seed))
        gradfree = np.mean([self.reports['gradfree', s].accuracy['finetuned'] for s in SEEDS])
        online = np.mean([self.reports['online', s].accuracy['finetuned'] for s in SEEDS])
        self.assertLessEqual(gradfree, online)

    def test_communication_ordering(self):
        for seed in SEEDS:
            train = {arch: self.reports[arch, seed].communication['by_phase']['train']
                     for arch in ('sl', 'online', 'gradfree')}
            self.assertLess(train['gradfree'], train['online'])
            self.assertLess(train['online'], train['sl'])

    def test_offline_bytes_ignore_dataset_size(self):
        directory = os.path.join(self.tmpdir.name, 'offline-large')
        larger = run_experiment(slow_config(architecture='offline', task__n_train=2000), directory=directory,
                                store=self.store)
        self.assertEqual(larger.communication['finetune_bytes'],
                         self.reports['offline', 0].communication['finetune_bytes'])

    def test_decorrelation_lowers_dcor(self):
        lower = 0
        for seed in SEEDS:
            directory = os.path.join(self.tmpdir.name, f'online-nolambda-s{seed}')
            unprotected = run_experiment(slow_config(seed=seed, decorrelation__lambda=0.0, attack__stages=[]),
                                   directory=directory, store=self.store)
            lower += self.reports['online', seed].training['mean_dcor'] < unprotected.training['mean_dcor']
        self.assertGreaterEqual(lower, 4)

    def test_comparison_table(self):
        text, _ = emit_comparison(list(self.reports.values()))
        for group in ('zero-shot', 'sl', 'online', 'gradfree', 'offline', 'online - sl'):
            self.assertIn(group, text)
