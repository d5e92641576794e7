import numpy as np
import pytest

from vrlkit.datagen import apply_normalizer, fit_normalizer, split
from vrlkit.evalkit import (
    BinningSpec,
    Temperature,
    adaece,
    apply_temperature,
    auroc,
    barrier_statistic,
    ece,
    entropy_profile,
    fisher_criterion,
    fit_temperature,
    heatmap_svg,
    reliability_svg,
)
from vrlkit.nn import forward, softmax
from vrlkit.tensor import RngState
from vrlkit.trainer import TrainConfig, train
from vrlkit.uncertainty import UncertaintyScores, entropy_of


def scores(values, measure="entropy"):
    return UncertaintyScores(measure, np.asarray(values, dtype=float))


def auroc_brute_force(in_vals, out_vals):
    """Exhaustive pair counting with half-weight ties."""
    wins = 0.0
    for o in out_vals:
        for i in in_vals:
            if o > i:
                wins += 1.0
            elif o == i:
                wins += 0.5
    return wins / (len(in_vals) * len(out_vals))


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc(scores([0.1, 0.2]), scores([0.5, 0.9])) == 1.0

    def test_all_ties(self):
        assert auroc(scores([0.3, 0.3]), scores([0.3, 0.3, 0.3])) == 0.5

    def test_hand_example(self):
        assert auroc(scores([0.1, 0.4]), scores([0.3, 0.5])) == 0.75

    def test_matches_brute_force_exact(self):
        rng = np.random.default_rng(0)
        for trial in range(30):
            n_in = int(rng.integers(1, 200))
            n_out = int(rng.integers(1, 200))
            vals_in = rng.normal(size=n_in)
            vals_out = rng.normal(size=n_out) + 0.3
            if trial % 3 == 0:  # force ties
                vals_in = np.round(vals_in, 1)
                vals_out = np.round(vals_out, 1)
            got = auroc(scores(vals_in), scores(vals_out))
            want = auroc_brute_force(vals_in, vals_out)
            assert got == want

    def test_complement_symmetry_without_ties(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=40)
        b = rng.normal(size=30)
        assert auroc(scores(a), scores(b)) + auroc(scores(b), scores(a)) == pytest.approx(
            1.0, abs=1e-12
        )

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=25)
        b = rng.normal(size=35)
        base = auroc(scores(a), scores(b))
        f = lambda v: np.exp(2.0 * v) + 1.0
        assert auroc(scores(f(a)), scores(f(b))) == pytest.approx(base, abs=1e-12)

    def test_measure_mismatch(self):
        with pytest.raises(ValueError):
            auroc(scores([1.0]), scores([1.0], measure="ds"))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            auroc(scores([]), scores([1.0]))


def ece_oracle_equal_width(probs, labels, n_bins):
    """Explicit per-sample enumeration of the equal-width ECE."""
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    total = len(conf)
    err = 0.0
    for b in range(n_bins):
        members = [
            i
            for i in range(total)
            if (min(int(conf[i] * n_bins), n_bins - 1)) == b
        ]
        if not members:
            continue
        acc = sum(correct[i] for i in members) / len(members)
        avg_conf = sum(conf[i] for i in members) / len(members)
        err += (len(members) / total) * abs(acc - avg_conf)
    return err


def adaece_oracle(probs, labels, n_bins):
    """Explicit equal-mass enumeration, ties staying in the left bin."""
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(float)
    order = np.argsort(conf, kind="mergesort")
    conf_s, correct_s = conf[order], correct[order]
    n = len(conf_s)
    bounds = [int(round(i * n / n_bins)) for i in range(n_bins + 1)]
    for i in range(1, n_bins):
        b = bounds[i]
        while 0 < b < n and conf_s[b - 1] == conf_s[b]:
            b += 1
        bounds[i] = max(b, bounds[i - 1])
    bounds[n_bins] = n
    err = 0.0
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if hi <= lo:
            continue
        seg_conf = conf_s[lo:hi]
        seg_corr = correct_s[lo:hi]
        err += (hi - lo) / n * abs(seg_corr.mean() - seg_conf.mean())
    return err


def random_prob_fixture(rng, n=20, k=4):
    probs = softmax(rng.normal(size=(n, k)) * 2)
    labels = rng.integers(0, k, size=n)
    return probs, labels


class TestCalibrationErrors:
    def test_perfectly_calibrated_is_zero(self):
        # every bin's confidence equals its empirical accuracy
        probs = np.array([[0.75, 0.25]] * 4)
        labels = np.array([0, 0, 0, 1])  # accuracy 0.75 at confidence 0.75
        assert ece(probs, labels, BinningSpec("equal_width", 10)) == pytest.approx(
            0.0, abs=1e-12
        )
        assert adaece(probs, labels, BinningSpec("equal_mass", 1)) == pytest.approx(
            0.0, abs=1e-12
        )

    def test_saturated_half_wrong(self):
        probs = np.array([[1.0, 0.0]] * 10)
        labels = np.array([0] * 5 + [1] * 5)
        assert ece(probs, labels) == pytest.approx(0.5, abs=1e-12)

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            probs, labels = random_prob_fixture(rng)
            spec_w = BinningSpec("equal_width", 15)
            spec_m = BinningSpec("equal_mass", 5)
            assert ece(probs, labels, spec_w) == pytest.approx(
                ece_oracle_equal_width(probs, labels, 15), abs=1e-12
            )
            assert adaece(probs, labels, spec_m) == pytest.approx(
                adaece_oracle(probs, labels, 5), abs=1e-12
            )

    def test_bounded_in_unit_interval(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            probs, labels = random_prob_fixture(rng, n=30)
            assert 0.0 <= ece(probs, labels) <= 1.0
            assert 0.0 <= adaece(probs, labels, BinningSpec("equal_mass", 10)) <= 1.0

    def test_mode_mismatch_rejected(self):
        probs = np.array([[0.6, 0.4]])
        with pytest.raises(ValueError):
            ece(probs, [0], BinningSpec("equal_mass", 5))
        with pytest.raises(ValueError):
            adaece(probs, [0], BinningSpec("equal_width", 5))

    def test_equal_mass_needs_enough_samples(self):
        probs = np.array([[0.6, 0.4]] * 3)
        with pytest.raises(ValueError):
            adaece(probs, [0, 0, 1], BinningSpec("equal_mass", 5))


class TestTemperature:
    def _logit_fixture(self, seed=5, n=300, k=4, sharpen=2.5):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(n, k))
        labels = np.array([
            rng.choice(k, p=softmax(row[None] / 1.5)[0]) for row in logits
        ])
        return logits * sharpen, labels  # overconfident fixture

    def test_fitted_never_worse_than_unit(self):
        logits, labels = self._logit_fixture()
        spec = BinningSpec("equal_width", 15)
        temp = fit_temperature(logits, labels, spec)
        before = ece(softmax(logits), labels, spec)
        after = ece(apply_temperature(logits, temp), labels, spec)
        assert after <= before + 1e-15

    def test_scaling_covariance(self):
        logits, labels = self._logit_fixture(seed=6)
        t1 = fit_temperature(logits, labels).T
        t2 = fit_temperature(2.0 * logits, labels).T
        assert abs(t2 - 2.0 * t1) <= 2.0 * t1 * 0.02 + 0.002

    def test_argmax_invariance(self):
        logits, labels = self._logit_fixture(seed=7)
        temp = fit_temperature(logits, labels)
        before = softmax(logits).argmax(axis=1)
        after = apply_temperature(logits, temp).argmax(axis=1)
        assert np.array_equal(before, after)

    def test_equal_mass_spec_also_supported(self):
        logits, labels = self._logit_fixture(seed=8, n=120)
        spec = BinningSpec("equal_mass", 10)
        temp = fit_temperature(logits, labels, spec)
        before = adaece(softmax(logits), labels, spec)
        after = adaece(apply_temperature(logits, temp), labels, spec)
        assert after <= before + 1e-15

    def test_grid_resolution(self):
        from vrlkit.evalkit import TEMPERATURE_GRID

        assert TEMPERATURE_GRID[0] == pytest.approx(0.1)
        assert TEMPERATURE_GRID[-1] == pytest.approx(10.0)
        assert np.allclose(np.diff(TEMPERATURE_GRID), 0.001)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            Temperature(0.05)


class TestFisher:
    def test_coincident_means_give_zero(self):
        rng = np.random.default_rng(8)
        cloud = rng.normal(size=(40, 2))
        features = np.vstack([cloud, cloud])  # identical class clouds
        labels = np.array([0] * 40 + [1] * 40)
        assert fisher_criterion(features, labels) == pytest.approx(0.0, abs=1e-9)

    def test_invariant_under_invertible_maps(self):
        rng = np.random.default_rng(9)
        features = np.vstack(
            [rng.normal(size=(30, 2)), rng.normal(size=(30, 2)) + [4.0, 1.0]]
        )
        labels = np.array([0] * 30 + [1] * 30)
        base = fisher_criterion(features, labels, epsilon=0.0)
        for _ in range(20):
            m = rng.normal(size=(2, 2))
            while abs(np.linalg.det(m)) < 0.1:
                m = rng.normal(size=(2, 2))
            mapped = fisher_criterion(features @ m.T, labels, epsilon=0.0)
            assert abs(mapped - base) <= 1e-6 * abs(base)

    def test_matches_direct_2x2_oracle(self):
        rng = np.random.default_rng(10)
        f0 = rng.normal(size=(25, 2)) * [1.0, 0.5]
        f1 = rng.normal(size=(35, 2)) * [0.7, 1.2] + [3.0, -1.0]
        features = np.vstack([f0, f1])
        labels = np.array([0] * 25 + [1] * 35)
        got = fisher_criterion(features, labels, epsilon=0.0)
        # direct matrix arithmetic
        mu = features.mean(axis=0)
        s_w = np.zeros((2, 2))
        s_b = np.zeros((2, 2))
        for c, grp in ((0, f0), (1, f1)):
            mu_c = grp.mean(axis=0)
            diffs = grp - mu_c
            s_w += diffs.T @ diffs
            s_b += len(grp) * np.outer(mu_c - mu, mu_c - mu)
        want = np.trace(np.linalg.inv(s_w) @ s_b)
        assert got == pytest.approx(want, rel=1e-9)

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            fisher_criterion(np.zeros((4, 2)), np.zeros(4, dtype=int))


def trained_moons_net(seed=0):
    from vrlkit.datagen import make_two_moons

    base = make_two_moons(300, 0.15, RngState(30).split(1))
    tr_raw, _ = split(base, 0.8, stratified=True, rng=RngState(31).split(2))
    stats = fit_normalizer(tr_raw)
    tr = apply_normalizer(tr_raw, stats)
    cfg = TrainConfig(
        strategy="erm", hidden_dims=(16,), epochs=20, batch_size=32,
        learning_rate=0.1, seed=seed,
    )
    net, _ = train(cfg, tr, None)
    return net, tr


class TestEntropyProfile:
    def test_defaults_and_counts(self):
        import inspect

        from vrlkit.evalkit import entropy_profile as ep

        assert inspect.signature(ep).parameters["n_pairs"].default == 1000
        net, tr = trained_moons_net()
        profile = entropy_profile(net, tr, n_pairs=50, rng=RngState(1).split(0))
        assert profile.lambda_grid.size == 20
        assert profile.entropies.shape == (50, 20)
        assert profile.histogram.sum() == 50 * 20

    def test_endpoints_match_pure_samples(self):
        net, tr = trained_moons_net()
        profile = entropy_profile(net, tr, n_pairs=20, rng=RngState(2).split(0))
        assert profile.lambda_grid[0] == 0.0 and profile.lambda_grid[-1] == 1.0
        # all endpoint entropies must appear among the per-sample entropies
        logits, _, _ = forward(net, tr.x)
        sample_h = np.sort(entropy_of(softmax(logits)))
        for h in np.concatenate([profile.entropies[:, 0], profile.entropies[:, -1]]):
            idx = np.searchsorted(sample_h, h)
            neighbours = sample_h[max(0, idx - 1) : idx + 1]
            assert np.min(np.abs(neighbours - h)) <= 1e-12

    def test_single_class_rejected(self):
        net, tr = trained_moons_net()
        only_zero = tr.take(np.flatnonzero(tr.labels == 0))
        with pytest.raises(ValueError):
            entropy_profile(net, only_zero, n_pairs=5, rng=RngState(3).split(0))


class TestBarrierStatistic:
    def _flat_profile(self, value=0.4):
        from vrlkit.evalkit import EntropyProfile

        grid = np.linspace(0, 1, 20)
        entropies = np.full((10, 20), value)
        hist = np.zeros((20, 30), dtype=np.int64)
        return EntropyProfile(grid, entropies, hist, np.linspace(0, 1, 31))

    def test_flat_profile_is_one(self):
        assert barrier_statistic(self._flat_profile()) == pytest.approx(1.0, abs=1e-12)

    def test_nonnegative(self):
        net, tr = trained_moons_net()
        profile = entropy_profile(net, tr, n_pairs=30, rng=RngState(4).split(0))
        assert barrier_statistic(profile) >= 0.0

    def test_zero_denominator_floored(self):
        prof = self._flat_profile(0.0)
        prof.entropies[:, 8:12] = 1.0
        assert barrier_statistic(prof) > 0  # finite thanks to the floor

    def test_empty_profile_rejected(self):
        from vrlkit.evalkit import EntropyProfile

        prof = EntropyProfile(
            np.linspace(0, 1, 20), np.empty((0, 20)),
            np.zeros((20, 30), dtype=np.int64), np.linspace(0, 1, 31),
        )
        with pytest.raises(ValueError):
            barrier_statistic(prof)


class TestSvgEmission:
    def test_heatmap_svg_deterministic(self, tmp_path):
        net, tr = trained_moons_net()
        profile = entropy_profile(net, tr, n_pairs=25, rng=RngState(5).split(0))
        a = heatmap_svg(profile, tmp_path / "h.svg")
        b = heatmap_svg(profile)
        assert a == b
        assert (tmp_path / "h.svg").read_text() == a
        assert a.startswith("<svg") and a.rstrip().endswith("</svg>")

    def test_reliability_svg(self, tmp_path):
        rng = np.random.default_rng(11)
        probs = softmax(rng.normal(size=(50, 3)))
        labels = rng.integers(0, 3, size=50)
        svg = reliability_svg(probs, labels, BinningSpec("equal_width", 10),
                              tmp_path / "r.svg")
        assert "<svg" in svg and (tmp_path / "r.svg").exists()
