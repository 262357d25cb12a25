import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elsa.elastic import SupernetConfig
from elsa.errors import ContractError
from elsa.model import ModelDims, TinyTransformer
from elsa.search import (
    SearchConfig,
    brute_force_pareto,
    cached_evaluator,
    cost,
    crowding_distance,
    dominates,
    evolve,
    front_csv,
    front_svg,
    generations_csv,
    hypervolume,
    nondominated_sort,
)

obj2 = st.tuples(st.integers(-5, 5), st.integers(-5, 5))


class TestDominates:
    def test_strict(self):
        assert dominates((1, 1), (2, 2))

    def test_one_axis_tie(self):
        assert dominates((1, 2), (1, 3))

    def test_incomparable(self):
        assert not dominates((1, 2), (2, 1))
        assert not dominates((2, 1), (1, 2))

    def test_equal_points_do_not_dominate(self):
        assert not dominates((3, 3), (3, 3))

    @given(obj2)
    def test_irreflexive(self, a):
        assert not dominates(a, a)

    @given(obj2, obj2)
    def test_asymmetric(self, a, b):
        assert not (dominates(a, b) and dominates(b, a))

    @given(obj2, obj2, obj2)
    def test_transitive(self, a, b, c):
        if dominates(a, b) and dominates(b, c):
            assert dominates(a, c)


class TestNondominatedSort:
    def test_hand_case(self):
        objs = [(1, 5), (2, 3), (4, 1), (3, 4), (5, 5)]
        fronts = nondominated_sort(objs)
        assert fronts == [[0, 1, 2], [3], [4]]

    def test_single_point(self):
        assert nondominated_sort([(0, 0)]) == [[0]]

    def test_all_incomparable(self):
        objs = [(i, -i) for i in range(5)]
        assert nondominated_sort(objs) == [list(range(5))]

    def test_chain(self):
        objs = [(3, 3), (2, 2), (1, 1)]
        assert nondominated_sort(objs) == [[2], [1], [0]]

    @given(st.lists(obj2, min_size=1, max_size=12))
    @settings(max_examples=40)
    def test_front_zero_is_nondominated(self, objs):
        fronts = nondominated_sort(objs)
        assert sorted(i for f in fronts for i in f) == list(range(len(objs)))
        for i in fronts[0]:
            assert not any(dominates(objs[j], objs[i]) for j in range(len(objs)))


class TestCrowding:
    def test_boundaries_infinite(self):
        d = crowding_distance([(0, 2), (1, 1), (2, 0)])
        assert np.isinf(d[0]) and np.isinf(d[2])

    def test_middle_of_three_on_line(self):
        d = crowding_distance([(0, 2), (1, 1), (2, 0)])
        assert d[1] == 2.0

    def test_two_points_both_infinite(self):
        d = crowding_distance([(0, 1), (1, 0)])
        assert np.isinf(d).all()

    def test_identical_points_interior_zero(self):
        d = crowding_distance([(1, 1)] * 4)
        assert np.isinf(d[0]) and np.isinf(d[3])
        assert d[1] == 0.0 and d[2] == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            crowding_distance([])


class TestHypervolume:
    def test_single_point(self):
        assert hypervolume([(1.0, 1.0)], (3.0, 3.0)) == 4.0

    def test_two_point_staircase(self):
        assert hypervolume([(1, 2), (2, 1)], (3, 3)) == 3.0

    def test_dominated_point_adds_nothing(self):
        assert hypervolume([(1, 2), (2, 1), (2, 2)], (3, 3)) == 3.0

    def test_point_outside_ref_ignored(self):
        assert hypervolume([(4, 0), (1, 1)], (3, 3)) == 4.0

    def test_empty(self):
        assert hypervolume([], (1, 1)) == 0.0

    def test_duplicate_points_counted_once(self):
        assert hypervolume([(1, 1), (1, 1)], (2, 2)) == 1.0

    def test_three_objectives_rejected(self):
        with pytest.raises(ContractError):
            hypervolume([(1, 1, 1)], (2, 2, 2))

    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)),
                    min_size=1, max_size=8),
           st.tuples(st.floats(0, 1), st.floats(0, 1)))
    @settings(max_examples=40)
    def test_adding_a_point_never_shrinks(self, pts, extra):
        ref = (2.0, 2.0)
        assert hypervolume(pts + [extra], ref) >= hypervolume(pts, ref) - 1e-12


def tiny_model(with_adapters=True, targets=("q", "v", "up", "down"), rank_choices=(2,)):
    dims = ModelDims.uniform(vocab=8, d=8, heads=1, mlp=8, depth=1)
    model = TinyTransformer.build(dims, seed=0)
    if with_adapters:
        cfg = SupernetConfig.build(dims, targets=targets, rank_choices=rank_choices)
        model.attach_adapters(cfg, seed=0)
    return model


class TestCost:
    def test_adapter_contribution_closed_form(self):
        # one 8x8 layer gains rank 2: 2*(8+8) params, tokens * that in MACs
        bare = tiny_model(with_adapters=False)
        adapted = tiny_model(targets=("q",), rank_choices=(2,))
        d_params = cost(adapted)["params"] - cost(bare)["params"]
        assert d_params == 2 * (8 + 8)
        d_macs = cost(adapted, tokens=4)["macs"] - cost(bare, tokens=4)["macs"]
        assert d_macs == 4 * 2 * (8 + 8)

    def test_full_model_closed_form(self):
        dims = ModelDims.uniform(vocab=32, d=16, heads=2, mlp=32, depth=2)
        model = TinyTransformer.build(dims, seed=0)
        cfg = SupernetConfig.build(dims, rank_choices=(2, 4))
        model.attach_adapters(cfg, seed=0)
        t = 4
        r = 4
        lin_params = 2 * (4 * 16 * 16 + 2 * 16 * 32) + 16 * 32
        ad_params = 2 * r * (2 * (16 + 16) + 2 * (16 + 32))
        got = cost(model, tokens=t)
        assert got["params"] == lin_params + ad_params
        assert got["macs"] == t * (lin_params + ad_params) + 2 * t * t * 16

    def test_smaller_genome_strictly_cheaper(self):
        dims = ModelDims.uniform(vocab=8, d=8, heads=2, mlp=8, depth=1)
        model = TinyTransformer.build(dims, seed=0)
        cfg = SupernetConfig.build(dims, rank_choices=(1, 2), mode="B",
                                   head_choices=(1, 2), mlp_width_choices=(4, 8))
        model.attach_adapters(cfg, seed=0)
        lo = cfg.validate((0,) * cfg.genome_length)
        hi = cfg.validate((len(d.choices) - 1 for d in cfg.dims))
        c_lo, c_hi = cost(model, lo), cost(model, hi)
        assert c_lo["params"] < c_hi["params"]
        assert c_lo["macs"] < c_hi["macs"]

    def test_default_token_count_is_max_seq(self):
        model = tiny_model()
        assert cost(model) == cost(model, tokens=model.dims.max_seq)


def toy_space(depth=1, rank_choices=(1, 2, 4)):
    dims = ModelDims.uniform(vocab=8, d=8, heads=1, mlp=8, depth=depth)
    return SupernetConfig.build(dims, targets=("q", "v"), rank_choices=rank_choices)


def toy_evaluator(genome):
    # pure deterministic stand-in: accuracy rises with gene sum, macs too,
    # with a twist so the front has more than one point
    s = sum(genome)
    acc = (s + (genome[0] == 0)) / 10.0
    return {"accuracy": acc, "macs": 100 + 10 * s, "params": 50 + 5 * s}


class TestEvolve:
    def test_front_matches_brute_force(self):
        cfg = toy_space()
        for seed in range(5):
            sh = SearchConfig(pop_size=8, generations=6, seed=seed)
            archive = evolve(cfg, toy_evaluator, sh)
            got = {ind.genome for ind in archive.front()}
            assert got == brute_force_pareto(cfg, toy_evaluator)

    def test_same_seed_identical_history(self):
        cfg = toy_space()
        sh = SearchConfig(pop_size=6, generations=4, seed=3)
        a = evolve(cfg, toy_evaluator, sh)
        b = evolve(cfg, toy_evaluator, sh)
        assert generations_csv(a) == generations_csv(b)

    def test_worker_count_does_not_change_outcome(self):
        cfg = toy_space()
        one = evolve(cfg, toy_evaluator, SearchConfig(6, 4, seed=1, workers=1))
        three = evolve(cfg, toy_evaluator, SearchConfig(6, 4, seed=1, workers=3))
        assert generations_csv(one) == generations_csv(three)
        assert front_csv(one.front()) == front_csv(three.front())

    def test_zero_generations(self):
        cfg = toy_space()
        archive = evolve(cfg, toy_evaluator, SearchConfig(5, 0, seed=0))
        assert archive.generation == 0
        assert len(archive.history) == 1
        assert len(archive.cache) <= 5

    def test_elitism_keeps_best_points(self):
        cfg = toy_space(rank_choices=(1, 2, 4, 8))
        archive = evolve(cfg, toy_evaluator, SearchConfig(6, 8, seed=2))
        best_acc = [max(r["accuracy"] for r in e["population"])
                    for e in archive.history]
        min_macs = [min(r["macs"] for r in e["population"])
                    for e in archive.history]
        assert best_acc == sorted(best_acc)
        assert min_macs == sorted(min_macs, reverse=True)

    def test_hypervolume_reference_frozen(self):
        cfg = toy_space()
        archive = evolve(cfg, toy_evaluator, SearchConfig(6, 5, seed=0))
        hv = [e["hypervolume"] for e in archive.history]
        assert hv == sorted(hv)

    def test_infeasible_genome_excluded(self):
        cfg = toy_space(rank_choices=(1, 2))
        bad = (1, 1)

        def ev(genome):
            if genome == bad:
                raise ContractError("no good")
            return toy_evaluator(genome)

        archive = evolve(cfg, ev, SearchConfig(8, 6, seed=0))
        assert archive.cache.get(bad, "unseen") in (None, "unseen")
        assert bad not in {ind.genome for ind in archive.front()}
        assert bad not in {ind.genome for ind in archive.population}
        assert brute_force_pareto(cfg, ev) == {g for g in brute_force_pareto(
            cfg, toy_evaluator) if g != bad} or bad not in brute_force_pareto(cfg, ev)

    def test_all_infeasible_rejected(self):
        cfg = toy_space()

        def ev(genome):
            raise ContractError("nope")

        with pytest.raises(ContractError):
            evolve(cfg, ev, SearchConfig(4, 2, seed=0))

    def test_population_size_stable(self):
        cfg = toy_space()
        archive = evolve(cfg, toy_evaluator, SearchConfig(7, 5, seed=4))
        for e in archive.history:
            assert len(e["population"]) == 7


class TestBruteForce:
    def test_space_limit_enforced(self):
        cfg = toy_space(depth=2, rank_choices=tuple(range(1, 9)))
        assert cfg.space_size() == 4096
        brute_force_pareto(cfg, toy_evaluator)
        with pytest.raises(ContractError):
            brute_force_pareto(cfg, toy_evaluator, limit=4095)

    def test_front_is_mutually_nondominated(self):
        cfg = toy_space()
        front = brute_force_pareto(cfg, toy_evaluator)
        objs = {g: (-toy_evaluator(g)["accuracy"], toy_evaluator(g)["macs"])
                for g in cfg.enumerate_genomes()}
        for g in front:
            assert not any(dominates(objs[h], objs[g]) for h in objs)

    def test_all_infeasible_gives_empty_front(self):
        cfg = toy_space(rank_choices=(1, 2))

        def ev(genome):
            raise ValueError("boom")

        assert brute_force_pareto(cfg, ev) == set()


class TestCachedEvaluator:
    def test_each_genome_evaluated_once(self):
        calls = []

        def ev(genome):
            calls.append(genome)
            return toy_evaluator(genome)

        wrapped = cached_evaluator(ev)
        for _ in range(3):
            wrapped((0, 1))
            wrapped((1, 0))
        assert sorted(calls) == [(0, 1), (1, 0)]


class TestEmitters:
    def archive(self):
        return evolve(toy_space(), toy_evaluator, SearchConfig(5, 3, seed=0))

    def test_generations_csv_shape(self):
        archive = self.archive()
        lines = generations_csv(archive).strip().split("\n")
        assert lines[0] == "generation,genome,accuracy,macs,params,front_rank,crowding"
        assert len(lines) == 1 + sum(len(e["population"]) for e in archive.history)

    def test_front_csv_roundtrip(self):
        front = self.archive().front()
        lines = front_csv(front).strip().split("\n")
        assert lines[0] == "genome,accuracy,macs,params"
        for ind, line in zip(front, lines[1:]):
            genome_s, acc_s, macs_s, params_s = line.split(",")
            assert tuple(int(v) for v in genome_s.split("-")) == ind.genome
            assert float(acc_s) == ind.accuracy
            assert int(macs_s) == ind.macs

    def test_svg_deterministic_bytes(self):
        front = self.archive().front()
        a = front_svg(front, midpoint=(120.0, 0.4))
        b = front_svg(front, midpoint=(120.0, 0.4))
        assert a == b
        assert a.startswith("<svg")
        assert "</svg>" in a

    def test_svg_handles_empty_front(self):
        assert "<svg" in front_svg([])
