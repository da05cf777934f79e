import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from conftest import grid_oracle, linear_fixture

from cfintro.autodiff import ShapeError
from cfintro.engine import (CounterfactualQuery, IdentityGenerator, NoFlipError,
                            OptimizationError, QueryError, VariableSpace, apply_frozen_mask,
                            invert_to_latent, minimal_change_bisect, objective, optimize,
                            prototype_optimize, read_trajectory_jsonl, validate)
from cfintro.gradcheck import check_composed, fixture_models
from cfintro.models import LinearClassifier, MlpSpec, init_mlp


def identity_space(n=2):
    return VariableSpace.attribute(IdentityGenerator((n,)))


def identity_query(image, target, clf=None, **kw):
    return CounterfactualQuery(np.asarray(image, float), kw.pop("mode", "criticism"), target,
                               identity_space(len(image)), kw.pop("initial", image), **kw)


EYE = LinearClassifier(np.eye(2))


class TestObjective:
    def test_hand_example(self):
        q = identity_query([0.9, 0.1], 1, lam=1.0)
        total, cls, dist = objective(q.initial, q, EYE)
        expected = math.log(1.0 + math.exp(0.8))
        assert abs(cls - expected) < 1e-12
        assert abs(expected - 1.171) < 5e-4
        assert dist == 0.0 and total == cls

    @pytest.mark.parametrize("lam", [0.0, 0.3, 7.0])
    def test_zero_distance_at_start(self, lam):
        q = identity_query([0.3, 0.6], 0, lam=lam)
        total, cls, dist = objective(q.initial, q, EYE)
        p = np.exp([0.3, 0.6]) / np.exp([0.3, 0.6]).sum()
        assert dist == 0.0
        assert abs(total - lam * -math.log(p[0])) < 1e-12

    def test_lambda_zero_is_pure_distance(self):
        q = identity_query([0.9, 0.1], 1, lam=0.0)
        total, _, dist = objective(np.array([0.5, 0.4]), q, EYE)
        assert total == dist
        assert abs(dist - 0.7) < 1e-12

    def test_dimension_mismatch(self):
        q = identity_query([0.9, 0.1], 1)
        with pytest.raises(QueryError):
            objective(np.zeros(3), q, EYE)

    @pytest.mark.parametrize("kind", ["latent", "attribute"])
    def test_composed_gradient_matches_finite_differences(self, kind):
        assert check_composed(kind, points=20).passed


class TestFrozenMask:
    def test_examples(self):
        g = np.array([3.0, 4.0])
        np.testing.assert_array_equal(apply_frozen_mask(g, [False, False]), g)
        np.testing.assert_array_equal(apply_frozen_mask(g, [True, True]), [0.0, 0.0])
        np.testing.assert_array_equal(apply_frozen_mask(g, [True, False]), [0.0, 4.0])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            apply_frozen_mask([1.0, 2.0], [True])

    def test_all_frozen_never_moves(self):
        q = identity_query([0.9, 0.1], 1, frozen=np.array([True, True]), max_steps=25)
        traj = optimize(q, EYE)
        assert traj.outcome == "budget_exhausted"
        assert len(traj.steps) == 26
        for s in traj.steps:
            assert s.variables.tobytes() == q.initial.tobytes()

    def test_mask_by_name(self):
        _, _, editor = fixture_models()
        space = VariableSpace.attribute(editor)
        np.testing.assert_array_equal(space.mask_for(["a1"]), [False, True, False])
        with pytest.raises(QueryError, match="unknown variable"):
            space.mask_for(["size"])


class TestValidation:
    def test_target_equal_to_prediction_points_to_prototype(self):
        with pytest.raises(QueryError, match="prototype"):
            validate(identity_query([0.9, 0.1], 0), EYE)

    @pytest.mark.parametrize("kw", [{"lam": -1.0}, {"threshold": 1.0}, {"p": 2},
                                    {"frozen": np.array([True])}, {"initial": np.zeros(3)},
                                    {"mode": "attack"}])
    def test_rejects(self, kw):
        with pytest.raises(QueryError):
            validate(identity_query([0.9, 0.1], 1, **kw), EYE)

    def test_space_invariants(self):
        with pytest.raises(QueryError):
            VariableSpace("latent", IdentityGenerator((2,)), np.zeros(2), np.ones(2))
        with pytest.raises(QueryError):
            VariableSpace("attribute", IdentityGenerator((2,)), np.ones(2), np.zeros(2))
        with pytest.raises(QueryError):
            VariableSpace("pixels", IdentityGenerator((2,)), np.zeros(2), np.ones(2))

    def test_non_finite_gradient_aborts(self):
        bad = LinearClassifier(np.array([[np.nan, 0.0], [0.0, 1.0]]))
        q = identity_query([0.9, 0.1], 1)
        with pytest.raises(OptimizationError, match="step 0"):
            optimize(q, bad)


class TestOptimize:
    def test_linear_fixture_crosses_the_half_plane(self):
        clf, image = linear_fixture(3)
        q = identity_query(image, 1, lam=10.0, step_size=0.002)
        traj = optimize(q, clf)
        assert traj.succeeded
        margin = lambda x: (clf.W[1] - clf.W[0]) @ x + clf.b[1] - clf.b[0]
        assert margin(traj.final.variables) >= 0
        assert margin(traj.steps[-2].variables) < 0
        assert int(np.argmax(traj.final.probs)) == 1

    def test_invariants_along_trajectory(self):
        clf, image = linear_fixture(5)
        q = identity_query(image, 1, lam=3.0, step_size=0.01)
        traj = optimize(q, clf)
        lo, hi = q.space.lower, q.space.upper
        for k, s in enumerate(traj.steps):
            assert s.step == k
            assert abs(s.objective - (q.lam * s.cls_term + s.dist_term)) <= 1e-9
            assert np.all(s.variables >= lo) and np.all(s.variables <= hi)
        if traj.succeeded:
            assert int(np.argmax(traj.final.probs)) == 1 and traj.final.probs[1] >= 0.5

    def test_bit_identical_reruns(self):
        clf, image = linear_fixture(2)
        q = identity_query(image, 1, lam=1.0, step_size=0.005)
        assert optimize(q, clf).to_jsonl() == optimize(q, clf).to_jsonl()

    def test_concurrent_runs_match_sequential(self):
        queries = [identity_query(linear_fixture(s)[1], 1, lam=1.0, step_size=0.005)
                   for s in range(4)]
        clfs = [linear_fixture(s)[0] for s in range(4)]
        seq = [optimize(q, c).to_jsonl() for q, c in zip(queries, clfs)]
        with ThreadPoolExecutor(4) as pool:
            par = list(pool.map(lambda qc: optimize(*qc).to_jsonl(), zip(queries, clfs)))
        assert seq == par

    def test_serialized_fields(self):
        clf, image = linear_fixture(1)
        traj = optimize(identity_query(image, 1, step_size=0.01), clf)
        steps, summary = read_trajectory_jsonl(traj.to_jsonl())
        assert set(steps[0]) == {"step", "variables", "probs", "objective", "cls_term",
                                 "dist_term"}
        assert summary == {"outcome": traj.outcome, "delta": traj.delta, "lambda": traj.lam}
        assert len(steps) == len(traj.steps)


class TestPrototype:
    def test_already_confident_is_step_zero(self):
        clf = LinearClassifier(np.array([[10.0, 0.0], [0.0, 0.0]]))
        q = identity_query([0.9, 0.1], 0, mode="prototype")
        traj = prototype_optimize(q, clf)
        assert traj.succeeded and len(traj.steps) == 1
        assert traj.final.variables.tobytes() == q.initial.tobytes()

    def test_confidence_rises_monotonically_on_linear_fixture(self):
        clf = LinearClassifier(np.array([[0.0, 0.0], [8.0, -6.0]]), np.array([0.0, 0.5]))
        image = np.array([0.5, 0.5])
        q = identity_query(image, 1, mode="prototype", lam=100.0, step_size=1e-4)
        traj = prototype_optimize(q, clf)
        p = [s.probs[1] for s in traj.steps]
        assert traj.succeeded and p[-1] >= 0.99
        assert all(b > a for a, b in zip(p, p[1:]))

    def test_wrong_target_rejected(self):
        with pytest.raises(QueryError):
            prototype_optimize(identity_query([0.9, 0.1], 1, mode="prototype"), EYE)


class TestBisection:
    @pytest.mark.parametrize("seed", [0, 7])
    def test_matches_grid_oracle(self, seed):
        clf, image = linear_fixture(seed)
        q = identity_query(image, 1, step_size=0.002)
        res = minimal_change_bisect(q, clf, 0.0, 1.0)
        oracle = grid_oracle(clf, image)
        assert abs(res.delta - oracle) <= 0.1 * oracle

    def test_result_invariants(self):
        clf, image = linear_fixture(4)
        res = minimal_change_bisect(identity_query(image, 1, step_size=0.005), clf, 0.0, 1.0)
        assert res.trajectory.succeeded
        assert res.delta == res.trajectory.final.dist_term
        first_flip = next(s for s in res.sweep if s["flipped"])
        assert res.delta <= first_flip["delta"]
        assert len(res.sweep) == 1 + res.iterations

    def test_equal_bounds_consume_no_iterations(self):
        clf, image = linear_fixture(4)
        q = identity_query(image, 1, step_size=0.005)
        res = minimal_change_bisect(q, clf, 2.0, 2.0)
        assert res.lam == 2.0 and res.iterations == 0 and len(res.sweep) == 1

    def test_upper_bound_expands_geometrically(self):
        clf, image = linear_fixture(4)
        q = identity_query(image, 1, step_size=0.005, max_steps=50)
        res = minimal_change_bisect(q, clf, 0.0, 1e-4, iterations=3)
        lams = [s["lambda"] for s in res.sweep]
        grown = lams[:lams.index(next(s["lambda"] for s in res.sweep if s["flipped"])) + 1]
        assert all(abs(b / a - 10) < 1e-9 for a, b in zip(grown, grown[1:]))

    def test_no_flip_carries_sweep(self):
        clf, image = linear_fixture(4)
        q = identity_query(image, 1, max_steps=0)
        with pytest.raises(NoFlipError) as err:
            minimal_change_bisect(q, clf, 0.0, 1e5, cap=1e6)
        assert [s["lambda"] for s in err.value.sweep] == [1e5, 1e6]

    def test_bad_bounds(self):
        clf, image = linear_fixture(4)
        with pytest.raises(QueryError):
            minimal_change_bisect(identity_query(image, 1), clf, 5.0, 1.0)


class TestInversion:
    def test_zero_steps_returns_encoder_output(self):
        _, gen, _ = fixture_models()
        gen.encoder = init_mlp(MlpSpec((256, 16, 4), head="linear"), 9)
        image = np.random.default_rng(0).uniform(size=(16, 16))
        z, _ = invert_to_latent(image, gen, refine_steps=0)
        np.testing.assert_array_equal(z, gen.encode(image))

    def test_refinement_never_worse(self, glyph_models):
        _, _, models = glyph_models
        gen = models["generator"]
        rng = np.random.default_rng(0)
        for _ in range(5):
            z_true = rng.uniform(-1, 1, size=gen.latent_dim)
            image = gen.decode(z_true)
            _, e0 = invert_to_latent(image, gen, refine_steps=0)
            _, e1 = invert_to_latent(image, gen, refine_steps=50)
            assert e1 <= e0

    def test_glyph_reconstruction_bound(self, glyph_models):
        _, test, models = glyph_models
        errs = [invert_to_latent(test.images[i], models["generator"])[1] for i in range(20)]
        assert max(errs) <= 0.08
