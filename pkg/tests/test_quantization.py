import numpy as np
import pytest
from scipy import stats
from hypothesis import given
from hypothesis import strategies as st

from qmarl.game_model import PerturbedPolicy, QuantizedPolicy, evaluate_joint_policy
from qmarl.games import build_team_game, finite_game
from qmarl.quantization import (
    EmptyBinError,
    FiniteEnvModel,
    Quantizer,
    ValueIterationError,
    build_finite_env,
    exact_finite_env,
    identity_quantizer,
    max_bin_diameter,
    quantize,
    uniform_quantizer,
    value_iteration,
)


def test_five_bin_representatives(q5):
    assert q5.representatives.tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert q5.cuts.tolist() == [0.125, 0.375, 0.625, 0.875]


@pytest.mark.parametrize("x, j", [(0.6, 2), (0.125, 0), (1.0, 4), (0.0, 0), (0.1250001, 1), (0.875, 3)])
def test_nearest_representative(q5, x, j):
    assert quantize(q5, x) == j


def test_single_bin():
    q = uniform_quantizer(0, 1, 1)
    assert q.representatives.tolist() == [0.5]
    assert quantize(q, 0.0) == quantize(q, 1.0) == 0
    assert max_bin_diameter(q) == 1.0


def test_two_bins_split_at_half():
    q = uniform_quantizer(0, 1, 2)
    assert q.representatives.tolist() == [0.0, 1.0]
    assert quantize(q, 0.49) == 0 and quantize(q, 0.51) == 1
    assert quantize(q, 0.5) == 0  # ties go to the lower bin


def test_quantizer_errors(q5):
    with pytest.raises(ValueError):
        uniform_quantizer(0, 1, 0)
    with pytest.raises(ValueError):
        quantize(q5, 1.01)
    with pytest.raises(ValueError):
        Quantizer(0.0, 1.0, [0.0, 1.0], [1.5])
    with pytest.raises(ValueError):
        Quantizer(0.0, 1.0, [0.0, 0.2], [0.5])  # 0.2 lies in bin 0


@given(st.integers(1, 40), st.floats(-5, 5), st.floats(0.01, 10))
def test_quantizer_totality(M, lo, width):
    q = uniform_quantizer(lo, lo + width, M)
    grid = np.linspace(q.lo, q.hi, 2001)
    for x in grid[::50]:
        j = quantize(q, x)
        assert q.in_bin(j, x)
        assert sum(q.in_bin(k, x) for k in range(M)) == 1
    for j, y in enumerate(q.representatives):
        assert quantize(q, y) == j


def test_quantizer_totality_dense_grid(q5):
    grid = np.linspace(0, 1, 10**5)
    bins = np.searchsorted(q5.cuts, grid, side="left")
    member = np.zeros((grid.size, 5), dtype=bool)
    for j in range(5):
        a, b = q5.bounds(j)
        member[:, j] = (grid >= a if j == 0 else grid > a) & (grid <= b)
    assert np.all(member.sum(axis=1) == 1)
    assert np.array_equal(member.argmax(axis=1), bins)


def test_bin_diameters(q5):
    assert max_bin_diameter(q5) == 0.25
    assert max_bin_diameter(q5, exclude_last=True) == 0.25
    assert max_bin_diameter(identity_quantizer([0, 1, 2, 3])) == 0.0
    widths = [q5.bounds(j)[1] - q5.bounds(j)[0] for j in range(5)]
    assert widths == [0.125, 0.25, 0.25, 0.25, 0.125]


def _ones_opponent(q, rho=0.05):
    return [None, PerturbedPolicy(QuantizedPolicy(1, q, [1] * q.n_bins), rho)]


def test_center_bin_cost_is_minus_half(team, q5):
    m = build_finite_env(team, 0, _ones_opponent(q5), q5, 10**6, np.random.default_rng(0))
    for u in range(2):
        assert abs(m.cost[2, u] + 0.5) <= 3 * m.cost_se[2, u]
        assert m.cost_se[2, u] < 1e-4


def test_center_bin_cooperative_split(q5):
    # cell (0.375, 0.625] shifted by 0.1 is (0.475, 0.725]: 0.15/0.25 stays, 0.10/0.25 moves up
    game = build_team_game(noise_prob=0.0)
    m = build_finite_env(game, 0, _ones_opponent(q5, 1e-12), q5, 200_000, np.random.default_rng(1))
    row = m.kernel[2, 1]
    assert abs(row[2] - 0.6) <= 3 * m.kernel_se[2, 1, 2] + 1e-12
    assert abs(row[3] - 0.4) <= 3 * m.kernel_se[2, 1, 3] + 1e-12
    assert row[[0, 1, 4]].sum() == 0.0


def test_env_rows_are_stochastic(team, q5):
    m = build_finite_env(team, 1, [PerturbedPolicy(QuantizedPolicy(0, q5, [0, 1, 0, 1, 1]), 0.2), None],
                         q5, 2000, np.random.default_rng(2))
    assert np.all(m.kernel >= 0)
    assert np.allclose(m.kernel.sum(axis=2), 1.0, atol=1e-9)
    assert np.all(np.abs(m.cost) <= team.c_max)


def test_env_is_reproducible(team, q5):
    a = build_finite_env(team, 0, _ones_opponent(q5), q5, 500, np.random.default_rng(4))
    b = build_finite_env(team, 0, _ones_opponent(q5), q5, 500, np.random.default_rng(4))
    assert np.array_equal(a.cost, b.cost) and np.array_equal(a.kernel, b.kernel)


def test_env_errors(team, q5):
    with pytest.raises(ValueError):
        build_finite_env(team, 0, _ones_opponent(q5), q5, 0, np.random.default_rng(0))
    with pytest.raises(EmptyBinError, match="bin 0"):
        build_finite_env(team, 0, _ones_opponent(q5), q5, 10, np.random.default_rng(0), weighting=np.array([0.5, 0.9]))


def test_model_json_round_trip(team, q5, tmp_path):
    m = build_finite_env(team, 0, _ones_opponent(q5), q5, 300, np.random.default_rng(0))
    back = FiniteEnvModel.from_json(m.to_json())
    assert np.array_equal(back.cost, m.cost) and np.array_equal(back.kernel, m.kernel)
    assert np.array_equal(back.cost_se, m.cost_se) and back.beta == m.beta
    m.save(tmp_path / "env.json")
    assert FiniteEnvModel.from_json((tmp_path / "env.json").read_text()).samples_per_bin == 300


def test_model_rejects_bad_rows():
    with pytest.raises(ValueError):
        FiniteEnvModel(np.zeros((1, 1)), np.array([[[0.5]]]), 0.5)


def test_value_iteration_single_state():
    m = FiniteEnvModel(np.ones((1, 3)), np.ones((1, 3, 1)), 0.5)
    assert np.allclose(value_iteration(m).q, 2.0, atol=1e-9)


def test_value_iteration_myopic():
    C = np.array([[1.0, -2.0], [0.5, 3.0]])
    P = np.full((2, 2, 2), 0.5)
    res = value_iteration(FiniteEnvModel(C, P, 0.0))
    assert np.array_equal(res.q, C)


def test_value_iteration_two_state_chain():
    C = np.array([[1.0], [0.0]])
    P = np.array([[[0.0, 1.0]], [[0.0, 1.0]]])
    res = value_iteration(FiniteEnvModel(C, P, 0.5))
    # 50-step backward induction
    V = np.zeros(2)
    for _ in range(50):
        V = C[:, 0] + 0.5 * P[:, 0] @ V
    assert np.allclose(res.q[:, 0], [1.0, 0.0], atol=1e-9)
    assert np.allclose(res.q[:, 0], V, atol=1e-9)


@given(st.integers(1, 5), st.integers(1, 3), st.floats(0.0, 0.95), st.integers(0, 2**32 - 1))
def test_value_iteration_contracts(M, U, beta, seed):
    rng = np.random.default_rng(seed)
    C = rng.uniform(-1, 1, (M, U))
    P = rng.dirichlet(np.ones(M), (M, U))
    res = value_iteration(FiniteEnvModel(C, P, beta))
    r = np.array(res.residuals)
    assert np.all(r[2:] <= beta * r[1:-1] + 1e-12)
    assert res.residual <= 1e-10
    Q = res.q
    assert np.allclose(Q, C + beta * P @ Q.min(axis=1), atol=1e-9)


def test_value_iteration_budget():
    m = FiniteEnvModel(np.ones((1, 1)), np.ones((1, 1, 1)), 0.99)
    with pytest.raises(ValueIterationError) as e:
        value_iteration(m, max_iters=3)
    assert e.value.iterations == 3 and e.value.residual > 0


def _random_finite(seed, m, counts, deterministic):
    rng = np.random.default_rng(seed)
    J = int(np.prod(counts))
    if deterministic:
        kernel = rng.integers(0, m, (m, J))
    else:
        kernel = rng.dirichlet(np.ones(m), (m, J))
    cost = rng.uniform(-1, 1, (len(counts), m, J)).round(3)
    return finite_game(kernel, cost, counts, 0.7)


def test_identity_quantizer_reproduces_deterministic_tables():
    g = _random_finite(0, 4, [2, 3], True)
    q = identity_quantizer(g.states)
    opp = [None, QuantizedPolicy(1, identity_quantizer(g.states), [2, 0, 1, 1])]
    exact = exact_finite_env(g, 0, opp, q)
    mc = build_finite_env(g, 0, opp, q, 1, np.random.default_rng(0))
    assert np.array_equal(mc.cost, exact.cost)
    assert np.array_equal(mc.kernel, exact.kernel)
    # against the raw tables: opponent plays its fixed action at each state
    for s in range(4):
        for u in range(2):
            j = g.tables.joint_index((u, opp[1].actions[s]))
            assert mc.cost[s, u] == g.tables.cost[0, s, j]
            assert np.array_equal(mc.kernel[s, u], g.tables.kernel[s, j])


def test_identity_quantizer_stochastic_tables_within_error():
    g = _random_finite(1, 3, [2, 2], False)
    q = identity_quantizer(g.states)
    opp = [None, PerturbedPolicy(QuantizedPolicy(1, q, [1, 0, 1]), 0.3)]
    exact = exact_finite_env(g, 0, opp, q)
    mc = build_finite_env(g, 0, opp, q, 50_000, np.random.default_rng(3))
    assert np.all(np.abs(mc.cost - exact.cost) <= 3 * mc.cost_se + 1e-12)
    se = np.sqrt(exact.kernel * (1 - exact.kernel) / 50_000)
    # 3-sigma level for the 12-entry kernel table as a whole
    z = stats.norm.isf((1 - 0.9973 ** (1 / exact.kernel.size)) / 2)
    assert np.all(np.abs(mc.kernel - exact.kernel) <= z * se + 1e-12)


def test_exact_env_needs_tables(team, q5):
    with pytest.raises(ValueError):
        exact_finite_env(team, 0, _ones_opponent(q5), q5)


def test_greedy_vs_frozen_ones_at_several_resolutions(team):
    for M in (2, 5, 9):
        q = uniform_quantizer(0, 1, M)
        m = build_finite_env(team, 0, _ones_opponent(q), q, 20_000, np.random.default_rng(M))
        res = value_iteration(m)
        assert res.greedy().tolist() == [1] * M
        gap = np.sort(res.q, axis=1)[:, 1] - res.q.min(axis=1)
        assert np.all(gap > 0.01)


def test_refinement_gap_non_increasing(team):
    # greedy-policy value gap against always cooperating, paired on shared draws
    opp_q = uniform_quantizer(0, 1, 5)
    opp = PerturbedPolicy(QuantizedPolicy(1, opp_q, [1] * 5), 0.05)
    gaps, ses = [], []
    for M in (2, 5, 9, 17):
        q = uniform_quantizer(0, 1, M)
        model = build_finite_env(team, 0, [None, opp], q, 5000, np.random.default_rng(M))
        greedy = QuantizedPolicy(0, q, value_iteration(model).greedy())
        best = QuantizedPolicy(0, q, [1] * M)
        a = evaluate_joint_policy(team, [greedy, opp], 0.5, 40, 400, np.random.default_rng(0)).returns[:, 0]
        b = evaluate_joint_policy(team, [best, opp], 0.5, 40, 400, np.random.default_rng(0)).returns[:, 0]
        d = a - b
        gaps.append(d.mean())
        ses.append(d.std(ddof=1) / np.sqrt(d.size) if d.std() > 0 else 0.0)
    for k in range(3):
        assert gaps[k + 1] <= gaps[k] + 3 * (ses[k] + ses[k + 1]) + 1e-12
