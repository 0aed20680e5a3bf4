from pathlib import Path

from celery.exceptions import TimeoutError as TaskTimeoutError
from django.test import SimpleTestCase

from apps.uplift_engine.services.experiment import RunConfig
from utils.decorators import describe_run, log_stage_time, retry_on_broker_timeout


@log_stage_time('evaluate')
def evaluate_run(run, fail=False):
    if fail:
        raise RuntimeError('boom')
    return run.seed


class FlakyResult:
    id = 'task-7'

    def __init__(self, failures):
        self.failures = failures
        self.calls = 0


@retry_on_broker_timeout(max_retries=2, delay=0.0)
def collect(result):
    result.calls += 1
    if result.calls <= result.failures:
        raise TaskTimeoutError('pending')
    return result.calls


class StageTimingTests(SimpleTestCase):
    def test_logs_the_run_it_belongs_to(self):
        run = RunConfig(seed=3, output_dir=Path('runs/demo'))
        with self.assertLogs(__name__, level='INFO') as logs:
            self.assertEqual(evaluate_run(run), 3)
        self.assertIn('evaluate finished in', logs.output[0])
        self.assertIn('method=mtmt seed=3 out=runs/demo', logs.output[0])

    def test_failures_are_logged_and_raised(self):
        run = RunConfig(seed=1, output_dir=Path('runs/x'))
        with self.assertLogs(__name__, level='WARNING') as logs:
            with self.assertRaises(RuntimeError):
                evaluate_run(run, fail=True)
        self.assertIn('evaluate failed after', logs.output[0])
        self.assertIn('boom', logs.output[0])

    def test_describe_payload_and_method(self):
        payload = {'method': 't-learner', 'seed': 2, 'output_dir': 'runs/t'}
        self.assertEqual(describe_run({'payload': payload}), 'method=t-learner seed=2 out=runs/t')
        self.assertEqual(describe_run({'method': 'oracle'}), 'method=oracle')
        self.assertEqual(describe_run({}), '')


class BrokerRetryTests(SimpleTestCase):
    def test_retries_until_the_result_arrives(self):
        result = FlakyResult(failures=2)
        with self.assertLogs('utils.decorators', level='WARNING') as logs:
            self.assertEqual(collect(result), 3)
        self.assertEqual(len(logs.output), 2)
        self.assertIn('Task task-7 timed out', logs.output[0])

    def test_gives_up_after_the_last_retry(self):
        result = FlakyResult(failures=5)
        with self.assertLogs('utils.decorators', level='WARNING'):
            with self.assertRaises(TaskTimeoutError):
                collect(result)
        self.assertEqual(result.calls, 3)
