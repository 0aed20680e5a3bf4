import numpy as np
from django.test import SimpleTestCase

from apps.uplift_engine.services import diffcore as dc
from apps.uplift_engine.services.baselines import SLearner, TLearner, s_learner_uplift, t_learner_uplift
from apps.uplift_engine.tests.utils import small_config
from utils.exceptions import ModelNotFittedError


class SLearnerTests(SimpleTestCase):
    def setUp(self):
        self.config = small_config(expert_hidden=[])
        self.learner = SLearner(self.config)
        self.x = np.random.default_rng(0).normal(size=(5, 3))

    def test_design_matrix_layout(self):
        design = self.learner.design_matrix(self.x[:3], np.array([0, 1, 1]), np.array([-1, 1, 0]))
        np.testing.assert_array_equal(design[:, 3:], [[0, 0, 0], [1, 0, 1], [1, 1, 0]])
        np.testing.assert_array_equal(design[:, :3], self.x[:3])

    def test_zero_treatment_weights_give_zero_uplift(self):
        params = self.learner.init_params(np.random.default_rng(1))
        params.arrays['response.layer0.weight'][3:] = 0.0
        np.testing.assert_array_equal(self.learner.uplift_matrix(params, self.x), np.zeros((5, 2, 2)))

    def test_linear_uplift_is_treatment_weight_sum(self):
        """Test that a linear response gives Gamma = w_flag + w_treatment on every row."""
        params = self.learner.init_params(np.random.default_rng(2))
        weight = params['response.layer0.weight']
        gammas = self.learner.uplift_matrix(params, self.x)
        for t in range(2):
            expected = weight[3] + weight[4 + t]
            for row in gammas[:, :, t]:
                np.testing.assert_allclose(row, expected, rtol=1e-10, atol=1e-12)

    def test_single_user_helper(self):
        params = self.learner.init_params(np.random.default_rng(3))
        np.testing.assert_allclose(
            s_learner_uplift(self.x[0], params, self.config),
            self.learner.uplift_matrix(params, self.x[:1])[0],
        )

    def test_unfitted(self):
        with self.assertRaises(ModelNotFittedError):
            self.learner.uplift_matrix(None, self.x)


class TLearnerTests(SimpleTestCase):
    def setUp(self):
        self.config = small_config()
        self.learner = TLearner(self.config)
        self.params = self.learner.init_params(np.random.default_rng(4))
        self.x = np.random.default_rng(5).normal(size=(4, 3))

    def test_uplift_is_branch_difference(self):
        gammas = self.learner.uplift_matrix(self.params, self.x)
        control = self.learner.branch_response(self.params, self.x, 0)
        for t in range(2):
            treated = self.learner.branch_response(self.params, self.x, t + 1)
            np.testing.assert_allclose(gammas[:, :, t], treated - control)

    def test_swapping_branches_flips_sign(self):
        swapped = dc.ParameterSet(dict(self.params.arrays))
        for name in self.params.names():
            if name.startswith('branch.0.'):
                other = name.replace('branch.0.', 'branch.1.')
                swapped.arrays[name], swapped.arrays[other] = self.params[other], self.params[name]
        original = self.learner.uplift_matrix(self.params, self.x)[:, :, 0]
        flipped = self.learner.uplift_matrix(swapped, self.x)[:, :, 0]
        np.testing.assert_allclose(flipped, -original)

    def test_identical_branches_give_zero_uplift(self):
        for name in self.params.names():
            if not name.startswith('branch.0.'):
                continue
            for t in range(1, 3):
                self.params.arrays[name.replace('branch.0.', f'branch.{t}.')] = self.params[name].copy()
        np.testing.assert_array_equal(self.learner.uplift_matrix(self.params, self.x), np.zeros((4, 2, 2)))

    def test_branch_count_and_helper(self):
        self.assertEqual(self.learner.branch_count, 3)
        np.testing.assert_allclose(
            t_learner_uplift(self.x[1], self.params, self.config),
            self.learner.uplift_matrix(self.params, self.x[1:2])[0],
        )

    def test_unfitted(self):
        with self.assertRaises(ModelNotFittedError):
            self.learner.uplift_matrix(dc.ParameterSet({}), self.x)
