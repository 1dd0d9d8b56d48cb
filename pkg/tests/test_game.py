"""Equilibrium machinery: tabular oracle games and trained-run diagnostics."""

import itertools

import numpy as np
import pytest

from cotriad.data import gen_synthetic_two_view, split_by_counts
from cotriad.engine import TrainConfig, run_training
from cotriad.errors import InvalidInputError
from cotriad.game import (
    GameProfile,
    StrategyGrid,
    StudentBudget,
    TabularTriadicGame,
    TrainedTriadicGame,
    alternating_best_response,
    best_response,
    compute_payoffs,
    default_teacher_grid,
    equilibrium_report,
    nash_residual,
    stackelberg_residual,
    with_payoffs,
)
from cotriad.generator import PerturbConfig


def toy_game():
    """2 x 2 x 1 game with a unique pure Nash point at (T2, S1, G1).

    Teacher prefers T2 against S1; S1 is the students' best (cost-minimizing)
    reply everywhere; the single generator point is trivially optimal.
    """
    teachers = ["T1", "T2"]
    students = ["S1", "S2"]
    generators = ["G1"]
    rt, rs, rg = {}, {}, {}
    rt[("T1", "S1", "G1")] = 0.60
    rt[("T2", "S1", "G1")] = 0.80
    rt[("T1", "S2", "G1")] = 0.70
    rt[("T2", "S2", "G1")] = 0.50
    rs[("T1", "S1", "G1")] = 0.20
    rs[("T1", "S2", "G1")] = 0.90
    rs[("T2", "S1", "G1")] = 0.10
    rs[("T2", "S2", "G1")] = 0.70
    for key in rt:
        rg[key] = 1.0
    return TabularTriadicGame(teachers, students, generators, rt, rs, rg)


def enumerate_nash(game):
    """Brute-force oracle: all profiles whose unilateral deviations never help."""
    out = []
    for t, s, g in itertools.product(
        game.teacher_points, game.student_points, game.generator_points
    ):
        ok_t = all(
            game.payoff_teacher(t2, s, g) <= game.payoff_teacher(t, s, g)
            for t2 in game.teacher_points
        )
        ok_s = all(
            game.payoff_students(t, s2, g) >= game.payoff_students(t, s, g)
            for s2 in game.student_points
        )
        ok_g = all(
            game.payoff_generator(t, s, g2) <= game.payoff_generator(t, s, g)
            for g2 in game.generator_points
        )
        if ok_t and ok_s and ok_g:
            out.append((t, s, g))
    return out


class TestTabularGame:
    def test_single_point_grid_returns_that_point(self):
        game = toy_game()
        profile = GameProfile("T1", "S1", "G1")
        point, _ = best_response(game, "generator", profile)
        assert point == "G1"

    def test_dominant_teacher_point_found(self):
        game = toy_game()
        profile = GameProfile("T1", "S1", "G1")
        point, payoff = best_response(game, "teacher", profile)
        assert point == "T2"
        assert payoff == pytest.approx(0.80)

    def test_tie_breaks_toward_incumbent(self):
        teachers = ["A", "B"]
        rt = {("A", "S", "G"): 0.5, ("B", "S", "G"): 0.5}
        rs = {("A", "S", "G"): 0.0, ("B", "S", "G"): 0.0}
        rg = dict(rs)
        game = TabularTriadicGame(teachers, ["S"], ["G"], rt, rs, rg)
        point, _ = best_response(game, "teacher", GameProfile("B", "S", "G"))
        assert point == "B"

    def test_repeated_invocation_identical(self):
        game = toy_game()
        profile = GameProfile("T1", "S2", "G1")
        first = best_response(game, "students", profile)
        second = best_response(game, "students", profile)
        assert first == second

    def test_residuals_match_hand_computation(self):
        game = toy_game()
        # At (T1, S2, G1): teacher deviation T1->T1/T2 best is 0.70 (T1), so
        # res_T = 0; students can move 0.90 -> 0.20, res_S = 0.70; generator 0.
        res = nash_residual(game, GameProfile("T1", "S2", "G1"))
        assert res == pytest.approx((0.0, 0.70, 0.0))
        # At (T1, S1, G1): teacher gains 0.80 - 0.60 via T2; students are
        # already at their minimum cost given T1.
        res = nash_residual(game, GameProfile("T1", "S1", "G1"))
        assert res == pytest.approx((0.20, 0.0, 0.0))

    def test_nash_point_matches_enumeration(self):
        game = toy_game()
        nash_set = enumerate_nash(game)
        assert nash_set == [("T2", "S1", "G1")]
        for t, s, g in itertools.product(
            game.teacher_points, game.student_points, game.generator_points
        ):
            res = nash_residual(game, GameProfile(t, s, g))
            is_nash = max(res) == 0.0
            assert is_nash == ((t, s, g) in nash_set)

    def test_alternating_best_response_converges(self):
        game = toy_game()
        final, rounds, residuals = alternating_best_response(
            game, GameProfile("T1", "S2", "G1"), max_rounds=10, tol=0.0
        )
        assert rounds <= 10
        assert (final.teacher_point, final.students, final.generator_cfg) == (
            "T2",
            "S1",
            "G1",
        )
        assert max(residuals) == 0.0

    def test_residual_nonnegative_and_monotone_under_grid_growth(self):
        game = toy_game()
        profile = GameProfile("T2", "S1", "G1")
        base = nash_residual(game, profile)
        assert min(base) >= 0.0
        # Add a dominating teacher point: the teacher residual cannot shrink.
        rt = dict(game._rt)
        rs = dict(game._rs)
        rg = dict(game._rg)
        for s in game.student_points:
            rt[("T3", s, "G1")] = 0.95
            rs[("T3", s, "G1")] = rs[("T1", s, "G1")]
            rg[("T3", s, "G1")] = 1.0
        bigger = TabularTriadicGame(
            game.teacher_points + ["T3"], game.student_points, game.generator_points,
            rt, rs, rg,
        )
        grown = nash_residual(bigger, profile)
        assert grown[0] >= base[0]
        assert grown[0] == pytest.approx(0.15)

    def test_unknown_player_rejected(self):
        with pytest.raises(InvalidInputError):
            best_response(toy_game(), "referee", GameProfile("T1", "S1", "G1"))

    def test_with_payoffs_caches(self):
        game = toy_game()
        profile = with_payoffs(game, GameProfile("T1", "S1", "G1"))
        assert profile.payoffs == (0.60, 0.20, 1.0)
        assert compute_payoffs(game, profile) == profile.payoffs


class TestStrategyGrid:
    def test_rejects_empty_and_simplex_violations(self):
        budget = StudentBudget(epochs=1, seed=0)
        with pytest.raises(InvalidInputError):
            StrategyGrid((), (PerturbConfig(epsilon=0.1),), (budget,))
        with pytest.raises(InvalidInputError):
            StrategyGrid(
                ((0.05, 0.8, 0.7),), (PerturbConfig(epsilon=0.1),), (budget,)
            )

    def test_trained_game_accepts_grid(self):
        ds = small_task()
        cfg = small_cfg()
        grid = StrategyGrid(
            teacher_points=((0.05, 0.5, 0.25),),
            generator_configs=(cfg.perturb,),
            student_budgets=(StudentBudget(epochs=1, seed=3),),
        )
        game = TrainedTriadicGame(ds, cfg, grid=grid, probe_size=32)
        assert game.teacher_points == [(0.05, 0.5, 0.25)]


def small_task(seed=5):
    ds = gen_synthetic_two_view(420, 3, 6, 6, 0.35, seed=seed)
    return split_by_counts(ds, 30, 6, 60, seed=seed)


def small_cfg(**kw):
    base = dict(
        epochs=3,
        labeled_batch=8,
        unlabeled_ratio=3,
        lr=0.05,
        hidden=8,
        mc_passes=3,
        dropout=0.2,
        filter_direction="below",
        perturb=PerturbConfig(epsilon=0.2, steps=1),
        seed=9,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestTrainedGame:
    def test_payoffs_deterministic_and_bounded(self):
        ds = small_task()
        cfg = small_cfg()
        rep = run_training(cfg, ds)
        game = TrainedTriadicGame(
            ds, cfg,
            teacher_points=[(0.05, 0.5, 0.25)],
            generator_points=[cfg.perturb],
            budgets=[StudentBudget(epochs=1, seed=3)],
            probe_size=64,
        )
        profile = GameProfile(rep.teacher.mapped(), rep.students, cfg.perturb)
        first = compute_payoffs(game, profile)
        second = compute_payoffs(game, profile)
        assert first == second
        assert 0.0 <= first[0] <= 1.0

    def test_zero_perturbation_generator_payoff_is_clean_entropy(self):
        ds = small_task()
        cfg = small_cfg()
        rep = run_training(cfg, ds)
        game = TrainedTriadicGame(ds, cfg, probe_size=64)
        # A tiny-budget attack cannot move the entropy away from clean.
        tiny = PerturbConfig(epsilon=1e-12, steps=1)
        val = game.payoff_generator(rep.teacher.mapped(), rep.students, tiny)
        from cotriad.numerics import entropy_rows, softmax_rows
        from cotriad.student import forward_batch

        x1, x2 = ds.views(game.probe_rows)
        clean = 0.5 * (
            entropy_rows(softmax_rows(forward_batch(rep.students[0], x1)[0])).mean()
            + entropy_rows(softmax_rows(forward_batch(rep.students[1], x2)[0])).mean()
        )
        assert val == pytest.approx(float(clean), abs=1e-6)

    def test_generator_best_response_scans_grid(self):
        ds = small_task()
        cfg = small_cfg()
        rep = run_training(cfg, ds)
        grid = [
            PerturbConfig(epsilon=1e-12, steps=1),
            PerturbConfig(epsilon=0.3, steps=3, step_size=0.1),
        ]
        game = TrainedTriadicGame(ds, cfg, generator_points=grid, probe_size=64)
        profile = GameProfile(rep.teacher.mapped(), rep.students, grid[0])
        point, payoff = best_response(game, "generator", profile)
        # The real attack strictly raises entropy over the null attack.
        assert point is grid[1]
        res = nash_residual(game, GameProfile(rep.teacher.mapped(), rep.students, grid[1]))
        assert res[2] == 0.0

    def test_default_teacher_grid_satisfies_simplex(self):
        for tau, lam_u, lam_adv in default_teacher_grid():
            assert 0.0 <= tau <= 1.0
            assert lam_u + lam_adv <= 1.0

    def test_equilibrium_report_shape(self):
        ds = small_task()
        cfg = small_cfg()
        rep = run_training(cfg, ds)
        game = TrainedTriadicGame(
            ds, cfg,
            teacher_points=[rep.teacher.mapped()],
            generator_points=[cfg.perturb],
            budgets=[StudentBudget(epochs=1, seed=3)],
            probe_size=48,
        )
        profile = GameProfile(rep.teacher.mapped(), rep.students, cfg.perturb)
        payload = equilibrium_report(game, profile, tolerance=10.0)
        assert payload["grid_nash"] is True
        assert set(payload["nash_residuals"]) == {"teacher", "students", "generator"}


class TestStackelbergResiduals:
    def test_definitions_and_ordering(self):
        ds = small_task()
        cfg = small_cfg(epochs=6)
        rep = run_training(cfg, ds)
        trained = stackelberg_residual(rep.students, rep.teacher, ds, cfg, probe_size=96)
        assert trained.teacher >= 0 and trained.students >= 0 and trained.generator >= 0
        # Untrained models sit far from stationarity on the same task/seed.
        from cotriad.engine import init_state

        fresh = init_state(cfg, ds, total_steps=10)
        untrained = stackelberg_residual(fresh.students, fresh.teacher, ds, cfg, probe_size=96)
        assert untrained.students > trained.students

    def test_eta_zero_run_reports_meta_gradient_magnitude(self):
        ds = small_task()
        cfg = small_cfg(eta_teacher=0.0, epochs=2)
        rep = run_training(cfg, ds)
        res = stackelberg_residual(rep.students, rep.teacher, ds, cfg, probe_size=64)
        assert np.isfinite(res.teacher)
