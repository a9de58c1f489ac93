import numpy as np
import pytest

from convshield import presets
from convshield.bounds import avg_pool_tail_bound, binomial_slack, empirical_tail
from convshield.experiments import (ExperimentConfig, lipschitz_lower_bound, prediction_invariance,
                                    run_disturbance, run_init_sweep)
from convshield.nn import (Activation, ArchSpec, Conv, GlobalPool, ShapeError, conv2d, init_arch_weights,
                           with_head)
from convshield.tensor import InitKind, InitStrategy, RngStream

from oracles import conv_matrix

SMALL_TOY = presets.toy_cnn((3, 4, 6))


def _cfg(**kw):
    base = dict(arch=SMALL_TOY, trials=40, input_sizes=((8, 8), (12, 12)), pooling=("avg", "max"))
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_validation():
    for bad in (dict(trials=0), dict(epsilon=-0.1), dict(threads=0), dict(base_input="image"),
                dict(pooling=())):
        with pytest.raises(ValueError):
            _cfg(**bad)


def test_zero_epsilon_gives_zero_disturbance():
    rep = run_disturbance(_cfg(epsilon=0.0))
    for s in rep.layer_stats:
        assert s.median == s.mean == s.max == s.a == s.b == 0.0
    for per_size in rep.pooled.values():
        for samples in per_size.values():
            assert not samples.any()


def test_report_shapes_and_signs():
    rep = run_disturbance(_cfg())
    assert len(rep.layer_stats) == 2 * 2
    for size in ((8, 8), (12, 12)):
        assert rep.linf[size].shape == (40, 2)
        assert rep.pooled_samples("max", size).shape == (40,)
        assert rep.pooled_channels["avg"][size].shape == (40, 6)
        a, b = rep.final_range[size]
        assert a < 0 < b
    for s in rep.layer_stats:
        assert 0 <= s.median <= s.max and s.mean >= 0 and s.b - s.a > 0


def test_linear_network_disturbance_ignores_base_input():
    # max pooling is itself nonlinear, so only the conv output and its average are x-free
    arch = ArchSpec([Conv(3, 4, 3, 1, 1), GlobalPool("avg")])
    reps = [run_disturbance(_cfg(arch=arch, base_input=kind)) for kind in ("uniform", "normal", "zeros")]
    for other in reps[1:]:
        np.testing.assert_allclose(other.pooled_samples("avg", (8, 8)), reps[0].pooled_samples("avg", (8, 8)),
                                   rtol=0, atol=1e-12)
        np.testing.assert_allclose(other.linf[(12, 12)], reps[0].linf[(12, 12)], rtol=0, atol=1e-12)


def test_shape_error_names_input_size():
    arch = ArchSpec([Conv(3, 4, 5), GlobalPool("avg")])
    with pytest.raises(ShapeError, match="3x3"):
        run_disturbance(_cfg(arch=arch, input_sizes=((8, 8), (3, 3))))


def test_thread_count_does_not_change_report():
    one = run_disturbance(_cfg(trials=50, threads=1))
    many = run_disturbance(_cfg(trials=50, threads=4))
    assert one.to_dict() == many.to_dict()
    assert one.to_csv() == many.to_csv()


def test_seed_changes_report():
    assert run_disturbance(_cfg(base_seed=1)).to_dict() != run_disturbance(_cfg(base_seed=2)).to_dict()


def test_csv_layout():
    rows = run_disturbance(_cfg()).to_csv().splitlines()
    assert rows[0] == "input_size,layer,statistic,value"
    # 2 sizes x 2 convs x 5 stats + 2 pools x 2 sizes x 5 stats
    assert len(rows) == 1 + 20 + 20
    assert rows[1].startswith("8x8,conv1,median,")


def test_init_sweep_single_arm_matches_run():
    cfg = _cfg(activation="identity")
    sweep = run_init_sweep(cfg, [cfg.init], ["identity"])
    assert list(sweep) == [("xavier_normal", "identity")]
    assert sweep[("xavier_normal", "identity")].to_dict() == run_disturbance(cfg).to_dict()


def test_init_sweep_shares_perturbations():
    # doubling std doubles every weight exactly; with shared perturbations a
    # linear conv then doubles every per-trial disturbance bit for bit
    arch = ArchSpec([Conv(3, 4, 3, 1, 1), GlobalPool("avg")])
    cfg = _cfg(arch=arch)
    a = InitStrategy(InitKind.NORMAL, std=0.1)
    b = InitStrategy(InitKind.NORMAL, std=0.2)
    sweep = run_init_sweep(cfg, [a, b], ["identity"])
    assert list(sweep) == [("normal(0,0.1)", "identity"), ("normal(0,0.2)", "identity")]
    ra, rb = sweep[("normal(0,0.1)", "identity")], sweep[("normal(0,0.2)", "identity")]
    for size in ((8, 8), (12, 12)):
        assert (rb.linf[size] == 2 * ra.linf[size]).all()
        assert (rb.pooled_samples("avg", size) == 2 * ra.pooled_samples("avg", size)).all()


def test_init_sweep_covers_every_combination():
    sweep = run_init_sweep(_cfg(trials=5), [InitStrategy(), InitStrategy(InitKind.UNIFORM)], [None, "relu"])
    assert set(sweep) == {(s, a) for s in ("xavier_normal", "uniform(-0.05,0.05)") for a in ("identity", "relu")}


def test_large_normal_init_amplifies_disturbance():
    cfg = ExperimentConfig(presets.toy_cnn(), trials=60, input_sizes=((16, 16),))
    sweep = run_init_sweep(cfg, [InitStrategy(), InitStrategy(InitKind.NORMAL, std=1.0)], ["identity", "relu"])
    for act in ("identity", "relu"):
        xavier = sweep[("xavier_normal", act)].stats((16, 16), 4).median
        normal = sweep[("normal(0,1)", act)].stats((16, 16), 4).median
        assert normal > xavier


def test_single_layer_disturbance_within_analytic_range():
    # |d| <= eps * sum |w| per output channel, and the variance at an interior pixel
    # is eps^2 / 3 * sum w^2
    arch = ArchSpec([Conv(3, 2, 3, 1, 1), GlobalPool("avg")])
    cfg = _cfg(arch=arch, trials=400, input_sizes=((6, 6),), init=InitStrategy(InitKind.NORMAL, std=1.0))
    rep = run_disturbance(cfg)
    w = init_arch_weights(cfg.network(), cfg.init, cfg.base_seed)[0]
    limit = 0.1 * np.abs(w).reshape(2, -1).sum(axis=1).max()
    stats = rep.stats((6, 6), 1)
    assert stats.max <= limit and -stats.a <= limit
    pooled = rep.pooled_channels["avg"][(6, 6)]
    assert (pooled <= limit).all()
    var = 0.01 / 3 * (w.reshape(2, -1) ** 2).sum(axis=1)
    gen = RngStream(5).generator()
    centre = np.array([conv2d(gen.uniform(-0.1, 0.1, (3, 6, 6)), w, arch.layers[0])[:, 3, 3]
                       for _ in range(2000)])
    np.testing.assert_allclose(centre.var(axis=0), var, rtol=0.12)


def test_identity_network_respects_hoeffding():
    arch = ArchSpec([GlobalPool("avg")])
    trials = 4000
    rep = run_disturbance(ExperimentConfig(arch, trials=trials, input_sizes=((8, 8),), pooling="avg"))
    samples = rep.pooled_channels["avg"][(8, 8)][:, 0]
    for gamma in np.linspace(0.002, 0.05, 25):
        bound = avg_pool_tail_bound(8, 8, -0.1, 0.1, gamma).value
        assert empirical_tail(samples, gamma) <= bound + binomial_slack(bound, trials)


def _toy_with_head(classes=5):
    arch = with_head(presets.toy_cnn((3, 4, 6), activation="relu"), classes)
    return arch, init_arch_weights(arch, InitStrategy(), 3)


def _inputs(n, shape=(3, 8, 8), seed=11):
    gen = RngStream(seed).generator()
    return [gen.uniform(0, 1, shape) for _ in range(n)]


def test_invariance_is_one_at_zero():
    arch, w = _toy_with_head()
    rep = prediction_invariance(arch, w, _inputs(4), [0.0, 0.5], trials=20, seed=0)
    assert rep.fractions[0] == 1.0
    assert rep.unchanged[0] == rep.total == 80
    assert rep.to_csv().splitlines()[0] == "epsilon,fraction_unchanged,unchanged,total"


def test_single_class_head_never_changes():
    arch, w = _toy_with_head(classes=1)
    rep = prediction_invariance(arch, w, _inputs(3), [0.0, 0.1, 10.0], trials=10, seed=0)
    assert rep.fractions == [1.0, 1.0, 1.0]


def test_invariance_rerun_is_consistent():
    arch, w = _toy_with_head()
    inputs = _inputs(8)
    eps = [0.02, 0.05]
    r1 = prediction_invariance(arch, w, inputs, eps, trials=100, seed=1)
    r2 = prediction_invariance(arch, w, inputs, eps, trials=100, seed=2)
    n = r1.total
    for f1, f2 in zip(r1.fractions, r2.fractions):
        p = 0.5 * (f1 + f2)
        assert abs(f1 - f2) <= 2.576 * np.sqrt(2 * p * (1 - p) / n) + 1.0 / n
    assert prediction_invariance(arch, w, inputs, eps, trials=100, seed=1, threads=3).to_dict() == r1.to_dict()


def test_invariance_errors():
    arch, w = _toy_with_head()
    with pytest.raises(ValueError):
        prediction_invariance(SMALL_TOY, init_arch_weights(SMALL_TOY, InitStrategy(), 0), _inputs(1), [0.0], 5, 0)
    with pytest.raises(ValueError):
        prediction_invariance(arch, w, [], [0.0], 5, 0)
    with pytest.raises(ValueError):
        prediction_invariance(arch, w, _inputs(1), [-0.1], 5, 0)


def test_lipschitz_scalar_map():
    arch = ArchSpec([Conv(1, 1, 1), GlobalPool("avg")])
    weights = [np.full((1, 1, 1, 1), 2.0), None]
    probes = [np.full((1, 1, 1), v) for v in (0.0, 0.5, -1.25, 3.0)]
    est = lipschitz_lower_bound(arch, weights, probes, pair_count=30, seed=0)
    assert est.lower_bound == pytest.approx(2.0, rel=1e-15)
    assert est.pairs_used <= 30
    assert est.argmax_pair[0] != est.argmax_pair[1]


def test_lipschitz_coincident_pairs_raise():
    arch = ArchSpec([Conv(1, 1, 1)])
    with pytest.raises(ValueError):
        lipschitz_lower_bound(arch, [np.ones((1, 1, 1, 1))], [np.zeros((1, 2, 2))], 5, 0)
    with pytest.raises(ValueError):
        lipschitz_lower_bound(arch, [np.ones((1, 1, 1, 1))], [np.zeros((1, 2, 2))], 0, 0)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_lipschitz_below_operator_norm(stride, padding):
    spec = Conv(1, 2, 3, stride, padding)
    w = RngStream(4).generator().normal(size=spec.weight_shape)
    norm = np.abs(conv_matrix(w, 4, 4, stride, padding)).sum(axis=1).max()
    probes = _inputs(20, (1, 4, 4), seed=9)
    linear = lipschitz_lower_bound(ArchSpec([spec]), [w], probes, 200, 0).lower_bound
    rectified = lipschitz_lower_bound(ArchSpec([spec, Activation("relu")]), [w, None], probes, 200, 0).lower_bound
    assert 0 < linear <= norm
    assert 0 <= rectified <= norm
