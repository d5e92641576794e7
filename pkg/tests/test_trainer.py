import numpy as np
import pytest

from vrlkit.datagen import Dataset, apply_normalizer, fit_normalizer, make_gaussian_blobs, make_two_moons, split
from vrlkit.evalkit import entropy_profile
from vrlkit.nn import forward
from vrlkit.tensor import RngState
from vrlkit.trainer import (
    MIXUP_ALPHA_GRID,
    REGMIXUP_ALPHA_GRID,
    REGMIXUP_ETA_GRID,
    EnsembleModel,
    ExperimentRecord,
    TrainConfig,
    accuracy,
    cross_validate,
    default_search_grid,
    ensemble_predict,
    train,
    train_ensemble,
)


def normalized_moons(n=300, noise=0.15, seed=0):
    base = make_two_moons(n, noise, RngState(seed).split(1))
    tr_raw, val_raw = split(base, 0.8, stratified=True, rng=RngState(seed).split(2))
    stats = fit_normalizer(tr_raw)
    return apply_normalizer(tr_raw, stats), apply_normalizer(val_raw, stats)


def tiny_image_dataset(n=12, seed=3):
    # 2x2 single-channel images so the cutmix strategies are exercised
    rng = RngState(seed)
    x = rng.normal((n, 4))
    labels = np.asarray(rng.integers(0, 2, size=n))
    return Dataset(x, labels, k=2, name="tiny_img", image_shape=(2, 2, 1))


def nets_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights)) and all(
        np.array_equal(x, y) for x, y in zip(a.biases, b.biases)
    )


FAST = dict(hidden_dims=(16,), epochs=5, batch_size=32, learning_rate=0.05)


class TestConfigValidation:
    def test_mixing_needs_alpha(self):
        with pytest.raises(ValueError):
            TrainConfig(strategy="mixup")

    def test_reg_needs_eta(self):
        with pytest.raises(ValueError):
            TrainConfig(strategy="regmixup", alpha=1.0)

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            TrainConfig(strategy="dropout")


class TestDegeneracies:
    def test_regmixup_eta_zero_equals_erm_bitwise(self):
        tr, val = normalized_moons()
        erm_net, erm_rec = train(TrainConfig(strategy="erm", seed=7, **FAST), tr, val)
        reg_net, reg_rec = train(
            TrainConfig(strategy="regmixup", alpha=10.0, eta=0.0, seed=7, **FAST), tr, val
        )
        assert nets_equal(erm_net, reg_net)
        assert erm_rec.epoch_losses == reg_rec.epoch_losses
        assert erm_rec.metrics == reg_rec.metrics

    def test_mixup_forced_lambda_one_equals_erm_bitwise(self):
        tr, val = normalized_moons()
        erm_net, erm_rec = train(TrainConfig(strategy="erm", seed=7, **FAST), tr, val)
        mix_net, mix_rec = train(
            TrainConfig(strategy="mixup", alpha=10.0, force_lambda=1.0, seed=7, **FAST),
            tr, val,
        )
        assert nets_equal(erm_net, mix_net)
        assert erm_rec.epoch_losses == mix_rec.epoch_losses


class TestTrainBehaviour:
    def test_two_blob_erm_reaches_99(self):
        base = make_gaussian_blobs(400, 2, 10.0, RngState(1).split(1), noise_sd=1.0)
        tr_raw, val_raw = split(base, 0.8, stratified=True, rng=RngState(1).split(2))
        stats = fit_normalizer(tr_raw)
        tr, val = apply_normalizer(tr_raw, stats), apply_normalizer(val_raw, stats)
        cfg = TrainConfig(
            strategy="erm", hidden_dims=(16,), epochs=50, batch_size=64,
            learning_rate=0.1, seed=0,
        )
        net, record = train(cfg, tr, val)
        assert record.metrics["val_accuracy"] >= 0.99

    @pytest.mark.parametrize(
        "strategy",
        ["erm", "mixup", "regmixup", "cutmix", "regcutmix",
         "mixup_plus_cutmix", "reg_mixup_plus_regcutmix"],
    )
    def test_descent_on_tiny_batch(self, strategy):
        ds = tiny_image_dataset()
        cfg = TrainConfig(
            strategy=strategy,
            hidden_dims=(8,),
            alpha=None if strategy == "erm" else 1.0,
            eta=1.0 if "reg" in strategy else None,
            epochs=10,
            batch_size=ds.n,  # full-batch steps
            learning_rate=0.05,
            momentum=0.0,
            schedule="constant",
            seed=4,
        )
        _, record = train(cfg, ds, None)
        assert record.epoch_losses[-1] < record.epoch_losses[0]

    def test_per_pair_lambda_mode_trains(self):
        tr, val = normalized_moons()
        cfg = TrainConfig(
            strategy="regmixup", alpha=10.0, eta=1.0, lambda_mode="per_pair",
            seed=9, **FAST,
        )
        net, record = train(cfg, tr, val)
        assert np.isfinite(record.epoch_losses).all()
        assert record.metrics["val_accuracy"] > 0.5

    def test_cutmix_requires_image_data(self):
        tr, _ = normalized_moons()
        with pytest.raises(ValueError):
            train(TrainConfig(strategy="cutmix", alpha=1.0, **FAST), tr, None)

    def test_regmixup_barrier_direction_on_moons(self):
        # accuracy stays close to ERM while mid-path predictive entropy at
        # lambda ~ 0.5 at least doubles
        base = make_two_moons(500, 0.1, RngState(1000).split(1))
        tr_raw, val_raw = split(base, 0.8, stratified=True, rng=RngState(50).split(2))
        stats = fit_normalizer(tr_raw)
        tr, val = apply_normalizer(tr_raw, stats), apply_normalizer(val_raw, stats)
        mids, accs = {}, {}
        for strat in ("erm", "regmixup"):
            cfg = TrainConfig(
                strategy=strat, hidden_dims=(64, 64),
                alpha=10.0 if strat == "regmixup" else None,
                eta=1.0 if strat == "regmixup" else None,
                epochs=60, batch_size=64, learning_rate=0.1, seed=0,
            )
            net, _ = train(cfg, tr, val)
            prof = entropy_profile(net, tr, n_pairs=400, rng=RngState(0).split(300))
            window = (prof.lambda_grid >= 0.4) & (prof.lambda_grid <= 0.6)
            mids[strat] = prof.entropies[:, window].mean()
            accs[strat] = accuracy(net, val)
        assert abs(accs["regmixup"] - accs["erm"]) <= 0.02
        assert mids["regmixup"] >= 2.0 * mids["erm"]


class TestRecord:
    def test_byte_identical_for_equal_config(self, monkeypatch):
        monkeypatch.setenv("VRL_DETERMINISTIC", "1")
        tr, val = normalized_moons()
        cfg = TrainConfig(strategy="regmixup", alpha=5.0, eta=1.0, seed=3, **FAST)
        _, rec_a = train(cfg, tr, val)
        _, rec_b = train(cfg, tr, val)
        assert rec_a.to_text() == rec_b.to_text()
        assert rec_a.to_text().encode() == rec_b.to_text().encode()

    def test_round_trip(self):
        tr, val = normalized_moons()
        cfg = TrainConfig(strategy="mixup", alpha=0.4, seed=5, **FAST)
        _, rec = train(cfg, tr, val)
        back = ExperimentRecord.from_text(rec.to_text())
        assert back.to_text() == rec.to_text()
        assert back.train_config() == cfg

    def test_unknown_version_rejected(self):
        with pytest.raises(ValueError):
            ExperimentRecord.from_text("vrlkit-record v9\n[config]\n")


class TestCrossValidate:
    def test_singleton_grid(self):
        tr, _ = normalized_moons()
        cfg = TrainConfig(strategy="erm", seed=1, **FAST)
        assert cross_validate([cfg], tr) == cfg

    def test_untrained_config_never_wins(self):
        tr, _ = normalized_moons(n=400)
        # an effectively untrained run (vanishing lr) vs a real one
        dead = TrainConfig(
            strategy="erm", hidden_dims=(16,), epochs=1, batch_size=32,
            learning_rate=1e-12, seed=1,
        )
        live = TrainConfig(
            strategy="erm", hidden_dims=(16,), epochs=30, batch_size=32,
            learning_rate=0.1, seed=1,
        )
        assert cross_validate([dead, live], tr) == live

    def test_empty_grid(self):
        tr, _ = normalized_moons()
        with pytest.raises(ValueError):
            cross_validate([], tr)

    def test_default_grids_match_protocol(self):
        assert MIXUP_ALPHA_GRID == (0.1, 0.2, 0.3, 0.4, 0.5, 1.0, 5.0, 10.0, 20.0)
        assert REGMIXUP_ALPHA_GRID == (
            0.1, 0.2, 0.3, 0.4, 0.5, 1.0, 5.0, 10.0, 15.0, 20.0, 30.0
        )
        assert REGMIXUP_ETA_GRID == (0.1, 1.0, 2.0)
        base = TrainConfig(strategy="regmixup", alpha=1.0, eta=1.0, **FAST)
        grid = default_search_grid(base)
        assert len(grid) == len(REGMIXUP_ALPHA_GRID) * len(REGMIXUP_ETA_GRID)
        assert {c.alpha for c in grid} == set(REGMIXUP_ALPHA_GRID)


class TestEnsemble:
    def test_singleton_matches_single_network(self):
        tr, val = normalized_moons()
        cfg = TrainConfig(strategy="erm", seed=11, **FAST)
        solo, _ = train(cfg, tr, val)
        ens = train_ensemble(cfg, 1, tr, val)
        assert nets_equal(solo, ens.members[0])
        probs, logits = ensemble_predict(ens, val.x, "mean_prob")
        want, _, _ = forward(solo, val.x)
        assert np.allclose(logits, want, atol=0, rtol=0)

    def test_duplicate_members_collapse(self):
        tr, val = normalized_moons()
        cfg = TrainConfig(strategy="erm", seed=2, **FAST)
        net, _ = train(cfg, tr, val)
        ens = EnsembleModel([net, net.copy()])
        p_prob, _ = ensemble_predict(ens, val.x, "mean_prob")
        p_logit, _ = ensemble_predict(ens, val.x, "mean_logit")
        from vrlkit.nn import softmax

        single = softmax(forward(net, val.x)[0])
        assert np.allclose(p_prob, single, atol=1e-15)
        assert np.allclose(p_logit, single, atol=1e-15)

    def test_incongruent_architectures_rejected(self):
        from vrlkit.nn import LayerSpec, Network

        a = Network([LayerSpec(2, 3, "identity")])
        b = Network([LayerSpec(2, 4, "identity")])
        with pytest.raises(ValueError):
            EnsembleModel([a, b])

    def test_mean_prob_rows_sum_to_one(self):
        tr, val = normalized_moons()
        cfg = TrainConfig(strategy="erm", seed=6, **FAST)
        ens = train_ensemble(cfg, 3, tr, val)
        probs, _ = ensemble_predict(ens, val.x, "mean_prob")
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_mean_logit_symmetry(self):
        from vrlkit.nn import LayerSpec, Network

        a = Network([LayerSpec(2, 2, "identity")])
        a.weights[0] = np.array([[1.0, 0.0], [0.0, 0.0]])
        a.biases[0] = np.array([1.0, 0.0])
        b = Network([LayerSpec(2, 2, "identity")])
        b.weights[0] = np.array([[0.0, 1.0], [0.0, 0.0]])
        b.biases[0] = np.array([0.0, 1.0])
        x = np.array([[1.0, 1.0]])
        la, _, _ = forward(a, x)
        lb, _, _ = forward(b, x)
        assert np.allclose(la, [[2.0, 0.0]]) and np.allclose(lb, [[0.0, 2.0]])
        probs, _ = ensemble_predict(EnsembleModel([a, b]), x, "mean_logit")
        assert np.allclose(probs, [[0.5, 0.5]], atol=1e-15)

    def test_ensemble_val_accuracy_not_below_members(self):
        base = make_two_moons(400, 0.2, RngState(21).split(1))
        tr_raw, val_raw = split(base, 0.8, stratified=True, rng=RngState(21).split(2))
        stats = fit_normalizer(tr_raw)
        tr, val = apply_normalizer(tr_raw, stats), apply_normalizer(val_raw, stats)
        for trial in range(5):
            cfg = TrainConfig(
                strategy="erm", hidden_dims=(16,), epochs=15, batch_size=32,
                learning_rate=0.1, seed=100 + trial,
            )
            ens = train_ensemble(cfg, 5, tr, val)
            member_acc = np.mean([accuracy(m, val) for m in ens.members])
            probs, _ = ensemble_predict(ens, val.x, "mean_logit")
            ens_acc = (probs.argmax(axis=1) == val.labels).mean()
            assert ens_acc >= member_acc - 0.01
