import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from scipy import stats

from apps.uplift_engine.constants import EffectFunction, NaturalFunction, OutcomeKind, RowErrorPolicy
from apps.uplift_engine.services.data_processor import (
    DatasetSchema,
    EffectSpec,
    FeatureScaler,
    NaturalSpec,
    SyntheticSpec,
    evaluate_effect,
    generate_synthetic,
    load_csv,
    load_oracle_csv,
    read_manifest,
    split,
    write_csv,
    write_manifest,
    write_oracle_csv,
)
from apps.uplift_engine.tests.utils import random_rct
from utils.exceptions import ConfigurationError, DataSchemaError, DataValidationError, SpecError

THREE_ROWS = (
    "x0,x1,treatment,secondary_treatment,y0\n"
    "0.5,1.0,1,0,1\n"
    "-0.5,{cell},0,,0\n"
    "1.5,-1.0,1,1,0\n"
)


def difference_in_means(dataset, task, mask):
    """Treated-minus-control mean of one task and its standard error."""
    control = dataset.outcomes[~dataset.treated, task]
    treated = dataset.outcomes[mask, task]
    estimate = treated.mean() - control.mean()
    sigma = np.sqrt(treated.var(ddof=1) / treated.size + control.var(ddof=1) / control.size)
    return estimate, sigma


class SyntheticGenerationTests(SimpleTestCase):
    def test_null_effects_are_recovered(self):
        """Test that zero planted effects give a difference in means within 4 standard errors."""
        spec = SyntheticSpec(
            sample_count=100_000,
            base_effect=EffectSpec(EffectFunction.CONSTANT, 0.0),
            incremental_effects=[EffectSpec(EffectFunction.CONSTANT, 0.0)] * 2,
        )
        dataset, oracle = generate_synthetic(spec, seed=0)
        self.assertEqual(np.abs(oracle.composed()).max(), 0.0)
        for k in range(2):
            estimate, sigma = difference_in_means(dataset, k, dataset.treated)
            self.assertLess(abs(estimate), 4 * sigma)

    def test_constant_effects_are_recovered(self):
        """Test planted constant effects on binary outcomes with a 0.10 base rate."""
        spec = SyntheticSpec(
            sample_count=100_000,
            natural=NaturalSpec(NaturalFunction.CONSTANT, 0.10),
            base_effect=EffectSpec(EffectFunction.CONSTANT, 0.05),
            incremental_effects=[EffectSpec(EffectFunction.CONSTANT, 0.01), EffectSpec(EffectFunction.CONSTANT, 0.03)],
        )
        dataset, _ = generate_synthetic(spec, seed=1)
        for t, planted in enumerate((0.06, 0.08)):
            estimate, sigma = difference_in_means(dataset, 0, dataset.secondary == t)
            self.assertLess(abs(estimate - planted), 4 * sigma)

    def test_constant_base_effect_on_binary_outcomes(self):
        """Test a 0.10 base effect over a 0.10 base rate lands within 4 pooled binomial errors."""
        spec = SyntheticSpec(
            sample_count=100_000,
            natural=NaturalSpec(NaturalFunction.CONSTANT, 0.10),
            base_effect=EffectSpec(EffectFunction.CONSTANT, 0.10),
            incremental_effects=[EffectSpec(EffectFunction.CONSTANT, 0.0)] * 2,
        )
        dataset, _ = generate_synthetic(spec, seed=10)
        self.assertTrue(set(np.unique(dataset.outcomes)) <= {0.0, 1.0})
        for k in range(2):
            treated = dataset.outcomes[dataset.treated, k]
            control = dataset.outcomes[~dataset.treated, k]
            pooled = dataset.outcomes[:, k].mean()
            sigma = np.sqrt(pooled * (1 - pooled) * (1 / treated.size + 1 / control.size))
            self.assertLess(abs(treated.mean() - control.mean() - 0.10), 4 * sigma)

    def test_continuous_outcomes(self):
        spec = SyntheticSpec(
            sample_count=50_000,
            n_tasks=1,
            outcome_kind=OutcomeKind.CONTINUOUS,
            natural=NaturalSpec(NaturalFunction.CONSTANT, 1.0),
            base_effect=EffectSpec(EffectFunction.CONSTANT, 0.5),
            incremental_effects=[EffectSpec(EffectFunction.CONSTANT, 0.0)] * 2,
        )
        dataset, _ = generate_synthetic(spec, seed=2)
        estimate, sigma = difference_in_means(dataset, 0, dataset.treated)
        self.assertLess(abs(estimate - 0.5), 4 * sigma)
        self.assertAlmostEqual(dataset.outcomes[~dataset.treated, 0].std(), 0.1, delta=0.005)

    def test_same_seed_same_dataset(self):
        spec = SyntheticSpec(sample_count=500)
        a, oracle_a = generate_synthetic(spec, seed=7)
        b, oracle_b = generate_synthetic(spec, seed=7)
        c, _ = generate_synthetic(spec, seed=8)
        self.assertEqual(a.features.tobytes(), b.features.tobytes())
        self.assertEqual(a.outcomes.tobytes(), b.outcomes.tobytes())
        np.testing.assert_array_equal(a.secondary, b.secondary)
        np.testing.assert_array_equal(oracle_a.incremental, oracle_b.incremental)
        self.assertNotEqual(a.features.tobytes(), c.features.tobytes())

    def test_oracle_matches_planted_functions(self):
        spec = SyntheticSpec(sample_count=200, n_features=4)
        dataset, oracle = generate_synthetic(spec, seed=3)
        x = dataset.features
        np.testing.assert_array_equal(oracle.base[:, 1], evaluate_effect(spec.base_effect, x, 1))
        np.testing.assert_array_equal(oracle.incremental[:, 0, 1], evaluate_effect(spec.incremental_effects[1], x, 0))
        sign = oracle.incremental[:, 0, 0] / 0.02
        np.testing.assert_array_equal(np.abs(sign), np.ones(200))

    def test_control_rows_have_no_secondary(self):
        dataset, _ = generate_synthetic(SyntheticSpec(sample_count=1000), seed=4)
        np.testing.assert_array_equal(dataset.secondary[~dataset.treated], -1)
        self.assertTrue(set(dataset.secondary[dataset.treated]) <= {0, 1})

    def test_discrete_features(self):
        spec = SyntheticSpec(sample_count=300, n_features=3, discrete_features=2, discrete_levels=3)
        dataset, _ = generate_synthetic(spec, seed=5)
        self.assertEqual(dataset.schema.feature_names, ['x0', 'x1', 'x2', 'c0', 'c1'])
        self.assertTrue(set(np.unique(dataset.features[:, 3:])) <= {0.0, 1.0, 2.0})

    def test_treatment_is_independent_of_features(self):
        """Test the randomization with a chi-square test on each feature's median split."""
        dataset, _ = generate_synthetic(SyntheticSpec(sample_count=100_000), seed=6)
        passed = 0
        for j in range(dataset.n_features):
            above = dataset.features[:, j] > np.median(dataset.features[:, j])
            table = np.array([
                [np.sum((above == side) & (dataset.base_treatment == g)) for g in (0, 1)]
                for side in (False, True)
            ])
            _, p_value, _, _ = stats.chi2_contingency(table)
            passed += p_value > 0.001
        self.assertGreaterEqual(passed, 9)

    def test_invalid_generator_settings(self):
        with self.assertRaises(SpecError):
            SyntheticSpec(secondary_probabilities=[0.5, 0.6])
        with self.assertRaises(SpecError):
            SyntheticSpec(treatment_probability=1.0)
        with self.assertRaises(SpecError):
            SyntheticSpec(n_treatments=3)
        with self.assertRaises(SpecError):
            SyntheticSpec(base_effect=EffectSpec('quadratic', 0.1))
        with self.assertRaises(ConfigurationError):
            SyntheticSpec.from_dict({'samples': 10})


class CsvTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        self.schema = DatasetSchema(features=['x0', 'x1'], outcome_columns=['y0'], treatment_count=2)

    def write(self, text):
        path = self.root / 'data.csv'
        path.write_text(text, encoding='utf-8')
        return path

    def test_three_row_fixture(self):
        dataset = load_csv(self.write(THREE_ROWS.format(cell='2.0')), self.schema)
        np.testing.assert_array_equal(dataset.features, [[0.5, 1.0], [-0.5, 2.0], [1.5, -1.0]])
        np.testing.assert_array_equal(dataset.base_treatment, [1, 0, 1])
        np.testing.assert_array_equal(dataset.secondary, [0, -1, 1])
        np.testing.assert_array_equal(dataset.outcomes, [[1.0], [0.0], [0.0]])
        np.testing.assert_array_equal(dataset.row_ids, [0, 1, 2])

    def test_bad_cell_reports_line_number(self):
        path = self.write(THREE_ROWS.format(cell='abc'))
        with self.assertRaises(DataValidationError) as ctx:
            load_csv(path, self.schema)
        self.assertEqual(ctx.exception.line, 3)
        self.assertIn('line 3', ctx.exception.message)

    def test_skip_policy_drops_bad_rows(self):
        path = self.write(THREE_ROWS.format(cell='abc'))
        with self.assertLogs('apps.uplift_engine.services.data_processor', level='WARNING'):
            dataset = load_csv(path, self.schema, on_error=RowErrorPolicy.SKIP)
        self.assertEqual(len(dataset), 2)
        np.testing.assert_array_equal(dataset.row_ids, [0, 2])

    def test_inconsistent_treatment_rows(self):
        """Test the abort policy names the line of each inconsistent treatment row."""
        cases = {
            'treated row without secondary': "0.5,1.0,1,,1\n",
            'treated row with secondary out of range': "0.5,1.0,1,2,1\n",
            'treated row with negative secondary': "0.5,1.0,1,-1,1\n",
            'control row with secondary': "0.5,1.0,0,1,1\n",
        }
        for label, row in cases.items():
            text = "x0,x1,treatment,secondary_treatment,y0\n1.5,-1.0,1,1,0\n" + row
            with self.assertRaises(DataValidationError, msg=label) as ctx:
                load_csv(self.write(text), self.schema)
            self.assertEqual(ctx.exception.line, 3, label)
            self.assertEqual(ctx.exception.details['row'], 1, label)

    def test_skip_policy_drops_inconsistent_treatment_rows(self):
        text = (
            "x0,x1,treatment,secondary_treatment,y0\n"
            "0.5,1.0,1,,1\n"
            "1.5,-1.0,1,1,0\n"
            "0.5,1.0,1,2,1\n"
            "-0.5,0.0,0,,0\n"
            "0.5,1.0,0,0,1\n"
        )
        with self.assertLogs('apps.uplift_engine.services.data_processor', level='WARNING') as logs:
            dataset = load_csv(self.write(text), self.schema, on_error=RowErrorPolicy.SKIP)
        self.assertIn('Skipping 3 invalid rows', logs.output[0])
        self.assertIn('line 2', logs.output[0])
        np.testing.assert_array_equal(dataset.row_ids, [1, 3])
        np.testing.assert_array_equal(dataset.secondary, [1, -1])

    def test_missing_column(self):
        schema = DatasetSchema(features=['x0', 'x1', 'x2'], outcome_columns=['y0'], treatment_count=2)
        with self.assertRaises(DataSchemaError) as ctx:
            load_csv(self.write(THREE_ROWS.format(cell='2.0')), schema)
        self.assertEqual(ctx.exception.details['column'], 'x2')

    def test_missing_file(self):
        with self.assertRaises(DataSchemaError):
            load_csv(self.root / 'absent.csv', self.schema)

    def test_written_dataset_reads_back_identically(self):
        spec = SyntheticSpec(sample_count=50, discrete_features=1)
        dataset, oracle = generate_synthetic(spec, seed=9)
        write_csv(dataset, self.root / 'dataset.csv')
        loaded = load_csv(self.root / 'dataset.csv', spec.schema())
        np.testing.assert_array_equal(loaded.features, dataset.features)
        np.testing.assert_array_equal(loaded.secondary, dataset.secondary)
        np.testing.assert_array_equal(loaded.outcomes, dataset.outcomes)
        np.testing.assert_array_equal(loaded.row_ids, dataset.row_ids)

        write_oracle_csv(oracle, self.root / 'oracle.csv')
        reloaded = load_oracle_csv(self.root / 'oracle.csv', 2, 2)
        np.testing.assert_array_equal(reloaded.incremental, oracle.incremental)

        write_manifest(spec, 9, len(dataset), self.root / 'manifest.json')
        self.assertEqual(read_manifest(self.root / 'manifest.json'), (spec, 9))


class SplitAndScaleTests(SimpleTestCase):
    def setUp(self):
        self.dataset = random_rct(np.random.default_rng(0), 10)

    def test_eighty_twenty_on_ten_rows(self):
        train, test = split(self.dataset, (0.8, 0.2), seed=0)
        self.assertEqual((len(train), len(test)), (8, 2))
        ids = np.concatenate([train.row_ids, test.row_ids])
        self.assertEqual(sorted(ids.tolist()), list(range(10)))
        self.assertTrue((np.diff(train.row_ids) > 0).all())

    def test_split_is_seeded(self):
        a, _ = split(self.dataset, (0.8, 0.2), seed=1)
        b, _ = split(self.dataset, (0.8, 0.2), seed=1)
        np.testing.assert_array_equal(a.row_ids, b.row_ids)
        others = {tuple(split(self.dataset, (0.5, 0.5), seed=s)[1].row_ids) for s in range(5)}
        self.assertGreater(len(others), 1)

    def test_remainder_goes_to_first_subset(self):
        first, second = split(random_rct(np.random.default_rng(1), 7), (0.5, 0.5), seed=0)
        self.assertEqual((len(first), len(second)), (4, 3))

    def test_invalid_fractions(self):
        with self.assertRaises(SpecError):
            split(self.dataset, (0.8, 0.3), seed=0)
        with self.assertRaises(SpecError):
            split(self.dataset, (1.0, 0.0), seed=0)

    def test_scaler_normalises_training_split(self):
        dataset, _ = generate_synthetic(SyntheticSpec(sample_count=2000, discrete_features=1), seed=2)
        train, test = split(dataset, (0.8, 0.2), seed=0)
        scaler = FeatureScaler.fit(train)
        scaled = scaler.transform(train).features
        continuous = scaled[:, :10]
        self.assertLess(np.abs(continuous.mean(axis=0)).max(), 1e-9)
        self.assertLess(np.abs(continuous.var(axis=0) - 1.0).max(), 1e-9)
        np.testing.assert_array_equal(scaled[:, 10], train.features[:, 10])
        self.assertEqual(scaler.transform(test).features.shape, test.features.shape)

    def test_scaler_width_mismatch(self):
        scaler = FeatureScaler.identity(3)
        with self.assertRaises(DataSchemaError):
            scaler.transform_array(np.zeros((2, 4)))
