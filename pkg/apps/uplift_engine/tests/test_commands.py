import json
import os
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

import pandas as pd
import yaml
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings, tag

from apps.uplift_engine.constants import AblationVariant
from config.threads import THREAD_VARIABLES, cap_worker_threads

TINY_RUN = {
    'method': 'mtmt',
    'seed': 3,
    'data': {
        'synthetic': {
            'n_features': 3,
            'n_tasks': 2,
            'n_treatments': 2,
            'sample_count': 1000,
        },
    },
    'model': {
        'n_experts': 2,
        'expert_hidden': [8],
        'token_count': 2,
        'token_width': 4,
        'treatment_embed_dim': 4,
        'attention_dim': 4,
        'enhancer_hidden': [4],
    },
    'train': {
        'batch_size': 64,
        'max_epochs': 2,
        'learning_rate': 0.01,
    },
    'evaluation': {
        'attention_rows': 20,
    },
}


class CommandTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def write_config(self, name='run.yaml', **overrides):
        document = json.loads(json.dumps(TINY_RUN))
        document.update(overrides)
        path = self.root / name
        path.write_text(yaml.safe_dump(document), encoding='utf-8')
        return path

    def call(self, command, config, out, **options):
        stdout = StringIO()
        call_command(command, config=str(config), out=str(out), stdout=stdout, **options)
        return stdout.getvalue()

    def assertExitCode(self, code, command, config, out, **options):
        with self.assertRaises(CommandError) as ctx:
            self.call(command, config, out, **options)
        self.assertEqual(ctx.exception.returncode, code)


class PipelineCommandTests(CommandTestCase):
    def test_gen_data_writes_dataset_oracle_and_manifest(self):
        out = self.root / 'data'
        self.call('gen_data', self.write_config(), out)
        frame = pd.read_csv(out / 'dataset.csv')
        self.assertEqual(len(frame), 1000)
        self.assertEqual(
            list(frame.columns),
            ['row_id', 'x0', 'x1', 'x2', 'treatment', 'secondary_treatment', 'y0', 'y1'],
        )
        self.assertEqual(len(pd.read_csv(out / 'oracle.csv')), 1000)
        manifest = json.loads((out / 'manifest.json').read_text(encoding='utf-8'))
        self.assertEqual((manifest['seed'], manifest['rows']), (3, 1000))
        self.assertTrue((out / 'resolved_config.yaml').exists())

    def test_train_evaluate_score(self):
        config = self.write_config()
        out = self.root / 'run'
        self.call('train', config, out)
        summary = json.loads((out / 'train_summary.json').read_text(encoding='utf-8'))
        self.assertEqual(len(summary['epoch_losses']), 2)
        self.assertEqual((summary['n_train'], summary['n_test']), (800, 200))
        self.assertNotIn('wall_time', summary)
        log = (out / 'train.log').read_text(encoding='utf-8')
        self.assertIn('Epoch 2/2', log)
        self.assertIn('Wall time', log)

        self.call('evaluate', config, out)
        report = pd.read_csv(out / 'report.csv')
        self.assertEqual(len(report), 4)
        self.assertEqual(set(report['n_units']), set(report['n_treated'] + report['n_control']))
        for name in ('effects_summary.csv', 'effects_raw.csv', 'attention.csv', 'oracle/report.csv',
                     'random/report.csv', 'curves/task0_treatment1_qini.csv'):
            self.assertTrue((out / name).exists(), name)
        attention = pd.read_csv(out / 'attention.csv')
        self.assertEqual(set(attention['path']), {'base', 'secondary'})

        users = self.root / 'users.csv'
        users.write_text("row_id,x0,x1,x2\n1,0.1,0.2,0.3\n2,-1,0,1\n3,2,2,2\n4,0,0,0\n", encoding='utf-8')
        self.call('score', config, out, features=str(users))
        scores = pd.read_csv(out / 'scores.csv')
        self.assertEqual(len(scores), 12)
        for _, group in scores.groupby('row_id'):
            self.assertEqual(sorted(group['candidate']), [0, 1, 2])
            self.assertEqual(group['rank'].tolist(), [1, 2, 3])
            self.assertTrue(group['gamma_task0'].is_monotonic_decreasing)

    def test_training_is_reproducible(self):
        config = self.write_config()
        self.call('train', config, self.root / 'a')
        self.call('train', config, self.root / 'b')
        for name in ('checkpoint.json', 'train_summary.json'):
            self.assertEqual((self.root / 'a' / name).read_bytes(), (self.root / 'b' / name).read_bytes())

    def test_csv_dataset_with_manifest(self):
        data = self.root / 'data'
        self.call('gen_data', self.write_config(), data)
        config = self.write_config('csv.yaml', data={'path': str(data / 'dataset.csv')})
        out = self.root / 'csv_run'
        self.call('train', config, out, seed=5)
        self.call('evaluate', config, out, dataset=str(data / 'dataset.csv'))
        report = pd.read_csv(out / 'report.csv')
        first_task = report[report['task'] == 0]
        self.assertEqual(first_task['n_treated'].sum() + first_task['n_control'].iloc[0], 1000)
        self.assertTrue((out / 'oracle' / 'report.csv').exists())

    def test_baseline_methods(self):
        for method in ('s-learner', 't-learner'):
            config = self.write_config(f'{method}.yaml', method=method)
            out = self.root / method
            self.call('train', config, out)
            self.call('evaluate', config, out)
            self.assertTrue((out / 'report.csv').exists())
            self.assertFalse((out / 'attention.csv').exists())

    @tag('slow')
    def test_ablate_runs_every_variant(self):
        config = self.write_config(train={'batch_size': 128, 'max_epochs': 1, 'learning_rate': 0.01})
        out = self.root / 'ablation'
        self.call('ablate', config, out)
        summary = pd.read_csv(out / 'ablation_summary.csv')
        self.assertEqual(summary['variant'].unique().tolist(), AblationVariant.ORDER)
        self.assertEqual(len(summary), 5 * 4)

        full = yaml.safe_load((out / 'full' / 'resolved_config.yaml').read_text(encoding='utf-8'))['model']
        for name, (flag, value) in AblationVariant.OVERRIDES.items():
            model = yaml.safe_load((out / name / 'resolved_config.yaml').read_text(encoding='utf-8'))['model']
            self.assertEqual(model[flag], value)
            self.assertEqual({k for k in full if full[k] != model[k]}, {flag})

    @tag('slow')
    @override_settings(UPLIFT_ABLATION_USE_CELERY=True, UPLIFT_NUM_THREADS=2)
    def test_ablate_through_task_queue(self):
        config = self.write_config(train={'batch_size': 128, 'max_epochs': 1, 'learning_rate': 0.01})
        out = self.root / 'queued'
        self.call('ablate', config, out)
        self.assertEqual(len(pd.read_csv(out / 'ablation_summary.csv')), 5 * 4)


class ExitCodeTests(CommandTestCase):
    def test_missing_config_file(self):
        self.assertExitCode(2, 'train', self.root / 'absent.yaml', self.root / 'out')

    def test_unknown_config_key(self):
        self.assertExitCode(2, 'train', self.write_config(epochs=3), self.root / 'out')

    def test_gen_data_without_synthetic_section(self):
        config = self.write_config(data={'path': str(self.root / 'x.csv')})
        self.assertExitCode(2, 'gen_data', config, self.root / 'out')

    def test_score_without_features(self):
        self.assertExitCode(2, 'score', self.write_config(), self.root / 'out')

    def test_unparseable_csv(self):
        path = self.root / 'bad.csv'
        path.write_text("x0,treatment,secondary_treatment,y0\n0.5,1,0,1\nabc,0,,0\n", encoding='utf-8')
        config = self.write_config(data={
            'path': str(path),
            'schema': {'features': ['x0'], 'outcome_columns': ['y0'], 'treatment_count': 1},
        })
        self.assertExitCode(3, 'train', config, self.root / 'out')

    def test_checkpoint_method_mismatch(self):
        out = self.root / 'out'
        self.call('train', self.write_config(), out)
        self.assertExitCode(4, 'evaluate', self.write_config('s.yaml', method='s-learner'), out)

    def test_missing_checkpoint(self):
        self.assertExitCode(4, 'evaluate', self.write_config(), self.root / 'empty')


class ThreadCapTests(SimpleTestCase):
    def test_cap_fills_unset_variables(self):
        with mock.patch.dict(os.environ, {'UPLIFT_NUM_THREADS': '2', 'MKL_NUM_THREADS': '8'}, clear=True):
            cap_worker_threads()
            self.assertEqual(os.environ['OMP_NUM_THREADS'], '2')
            self.assertEqual(os.environ['OPENBLAS_NUM_THREADS'], '2')
            self.assertEqual(os.environ['MKL_NUM_THREADS'], '8')

    def test_zero_or_invalid_leaves_library_defaults(self):
        for value in ('0', 'many', '-1'):
            with mock.patch.dict(os.environ, {'UPLIFT_NUM_THREADS': value}, clear=True):
                cap_worker_threads()
                for var in THREAD_VARIABLES:
                    self.assertNotIn(var, os.environ, value)
