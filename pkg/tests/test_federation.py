"""Protocol contracts: aggregation arithmetic, the bit-exact equivalence
identities between paradigms, SCAFFOLD bookkeeping and determinism."""

import os

import numpy as np
import pytest

from fedperisim import federation as fed
from fedperisim import model as rm
from fedperisim.cohort import OUTCOME_NAMES
from fedperisim.errors import (ClientDataError, ConfigError, DivergenceError,
                               ProtocolError)
from fedperisim.preprocess import TransformedCohort
from fedperisim.rng import stream


def toy_config():
    return rm.ModelConfig(
        variant=rm.PREOPERATIVE,
        n_continuous=4, n_binary=2, cat_vocab_sizes=(5,), n_channels=1,
        continuous_hidden=(6,), binary_hidden=(4,), categorical_hidden=(4,),
        embedding_dim=2, fusion_dim=6, gru_hidden=3, attention_dim=3, head_dim=2,
    )


def toy_transformed(site, n, seed, shift=0.0):
    config = toy_config()
    rng = stream(seed, "fed-data", site)
    x_cont = rng.normal(size=(n, config.n_continuous)) + shift
    logits = 1.2 * x_cont[:, 0] - 0.8 * x_cont[:, 1]
    labels = np.empty((n, 9))
    for k in range(9):
        labels[:, k] = (rng.uniform(size=n) <
                        1 / (1 + np.exp(-(logits + 0.3 * (k - 4))))).astype(float)
    return TransformedCohort(
        site=site, fit_site=site,
        record_ids=[f"{site}-{i:05d}" for i in range(n)],
        x_cont=x_cont,
        x_bin=rng.integers(0, 2, size=(n, config.n_binary_inputs)).astype(float),
        x_cat=rng.integers(0, 5, size=(n, 1)),
        labels=labels,
        sex=np.where(rng.uniform(size=n) < 0.5, "F", "M"),
        race=np.where(rng.uniform(size=n) < 0.3, "AA", "non-AA"),
        age=rng.uniform(20, 90, size=n),
    )


def split_site(site, n, seed, shift=0.0):
    data = toy_transformed(site, n, seed, shift)
    n_train = int(0.7 * n)
    n_val = int(0.15 * n)
    return fed.SiteData(
        site_id=site,
        train=data.take(np.arange(n_train)),
        val=data.take(np.arange(n_train, n_train + n_val)),
        test=data.take(np.arange(n_train + n_val, n)),
    )


def plan(paradigm, **kw):
    base = dict(rounds=3, epochs=1, batch_size=16, lr=0.05, seed=0)
    base.update(kw)
    return fed.TrainPlan(paradigm=paradigm, **base)


class TestTrainPlan:
    def test_validation(self):
        with pytest.raises(ConfigError):
            fed.TrainPlan(paradigm="gossip")
        with pytest.raises(ConfigError):
            fed.TrainPlan(paradigm=fed.FEDAVG, rounds=0)
        with pytest.raises(ConfigError):
            fed.TrainPlan(paradigm=fed.FEDAVG, lr=0.0)
        with pytest.raises(ConfigError):
            fed.TrainPlan(paradigm=fed.FEDAVG, mu=0.1)
        fed.TrainPlan(paradigm=fed.FEDPROX, mu=0.1)


class TestAggregate:
    def test_single_client_installed_verbatim(self):
        y = np.array([0.1, -0.7, 1 / 3])
        server = fed.ServerState(params=np.zeros(3))
        update = fed.ClientUpdate(site_id="a", params=y, n_samples=3)
        out = fed.aggregate(server, [update])
        assert out.params.tobytes() == y.tobytes()

    def test_weighted_mean_arithmetic(self):
        server = fed.ServerState(params=np.zeros(1))
        updates = [fed.ClientUpdate("a", np.array([1.0]), 2),
                   fed.ClientUpdate("b", np.array([4.0]), 1)]
        out = fed.aggregate(server, updates)
        assert out.params[0] == 2.0  # (2*1 + 1*4) / 3 exactly

    def test_symmetric_updates_cancel(self):
        server = fed.ServerState(params=np.zeros(4))
        y = stream(0, "sym").normal(size=4)
        updates = [fed.ClientUpdate("a", y, 5), fed.ClientUpdate("b", -y, 5)]
        out = fed.aggregate(server, updates)
        assert np.array_equal(out.params, np.zeros(4))

    def test_length_mismatch_rejected(self):
        server = fed.ServerState(params=np.zeros(3))
        with pytest.raises(ProtocolError):
            fed.aggregate(server, [fed.ClientUpdate("a", np.zeros(2), 1)])

    def test_empty_updates_rejected(self):
        with pytest.raises(ProtocolError):
            fed.aggregate(fed.ServerState(params=np.zeros(1)), [])

    def test_convex_hull_invariant(self):
        rng = stream(1, "hull")
        for _ in range(50):
            ys = [rng.normal(size=6) for _ in range(3)]
            ns = [int(n) for n in rng.integers(1, 50, size=3)]
            server = fed.ServerState(params=np.zeros(6))
            updates = [fed.ClientUpdate(str(i), y, n)
                       for i, (y, n) in enumerate(zip(ys, ns))]
            out = fed.aggregate(server, updates)
            stacked = np.stack(ys)
            assert np.all(out.params >= stacked.min(axis=0) - 1e-15)
            assert np.all(out.params <= stacked.max(axis=0) + 1e-15)


class TestLocalTrain:
    def test_empty_data_rejected(self):
        config = toy_config()
        flat = rm.ModelParams.init(config, 0).flatten()
        client = fed.ClientState("a", flat.copy(), n_samples=5)
        empty = toy_transformed("a", 10, 0).take(np.array([], dtype=int))
        with pytest.raises(ClientDataError):
            fed.local_train(client, flat, plan(fed.FEDAVG), empty, config, 0)

    def test_divergence_error_names_round_and_site(self):
        config = toy_config()
        flat = rm.ModelParams.init(config, 0).flatten()
        flat[:] = np.nan
        client = fed.ClientState("gnv", flat.copy(), n_samples=10)
        data = toy_transformed("gnv", 10, 0)
        with pytest.raises(DivergenceError) as exc:
            fed.local_train(client, flat, plan(fed.FEDAVG), data, config, 7)
        assert exc.value.round_index == 7
        assert exc.value.site == "gnv"
        assert "7" in str(exc.value) and "gnv" in str(exc.value)

    def test_fedprox_mu_zero_identical_to_fedavg(self):
        config = toy_config()
        flat = rm.ModelParams.init(config, 0).flatten()
        data = toy_transformed("a", 40, 1)
        out = {}
        for paradigm in (fed.FEDAVG, fed.FEDPROX):
            client = fed.ClientState("a", flat.copy(), n_samples=40)
            update = fed.local_train(client, flat.copy(), plan(paradigm),
                                     data, config, 0)
            out[paradigm] = update.params
        assert np.array_equal(out[fed.FEDAVG], out[fed.FEDPROX])

    def test_scaffold_zero_controls_identical_to_fedavg(self):
        config = toy_config()
        flat = rm.ModelParams.init(config, 0).flatten()
        data = toy_transformed("a", 40, 1)
        avg = fed.local_train(fed.ClientState("a", flat.copy(), 40),
                              flat.copy(), plan(fed.FEDAVG), data, config, 0)
        sca = fed.local_train(
            fed.ClientState("a", flat.copy(), 40, control=np.zeros(flat.size)),
            flat.copy(), plan(fed.SCAFFOLD), data, config, 0,
            server_control=np.zeros(flat.size))
        assert np.array_equal(avg.params, sca.params)

    def test_scaffold_control_update_one_step(self):
        """With K=1 and zero controls, c_i+ equals the batch gradient at x."""
        config = toy_config()
        flat = rm.ModelParams.init(config, 3).flatten()
        data = toy_transformed("a", 8, 2)
        lr = 0.05
        one_step = fed.TrainPlan(paradigm=fed.SCAFFOLD, rounds=1, epochs=1,
                                 batch_size=8, lr=lr, seed=0)
        client = fed.ClientState("a", flat.copy(), 8, control=np.zeros(flat.size))
        update = fed.local_train(client, flat.copy(), one_step, data, config, 0,
                                 server_control=np.zeros(flat.size))
        idx = stream(0, "batches", 0, 0).permutation(8)
        _, grad = rm.loss_and_grad(flat, config, data.make_batch(idx, False))
        assert np.allclose(client.control, grad, atol=1e-12)
        assert np.allclose(update.control_delta, grad, atol=1e-12)

    def test_scaffold_hand_stepped_quadratic_oracle(self):
        """Option-II bookkeeping on f(w) = (w - 3)^2 / 2, stepped by hand."""
        lr, k_steps = 0.1, 4
        x = np.array([0.0])
        c_i = np.array([0.0])
        c = np.array([0.0])

        y = x.copy()
        for _ in range(k_steps):
            grad = y - 3.0  # f'(w)
            y = y - lr * (grad - c_i + c)
        expected_c_new = c_i - c + (x - y) / (k_steps * lr)

        # same trajectory written as the running mean of visited gradients
        y2, grads = x.copy(), []
        for _ in range(k_steps):
            grads.append(y2 - 3.0)
            y2 = y2 - lr * grads[-1]
        assert expected_c_new[0] == pytest.approx(np.mean(grads), abs=1e-12)


class TestMuMonotonicity:
    def test_client_drift_shrinks_with_mu(self):
        config = toy_config()
        flat = rm.ModelParams.init(config, 0).flatten()
        data = toy_transformed("a", 60, 4)
        drifts = []
        for mu in (0.0, 1.0, 10.0, 100.0):
            p = fed.TrainPlan(paradigm=fed.FEDPROX, rounds=1, epochs=2,
                              batch_size=16, lr=0.002, mu=mu, seed=0)
            client = fed.ClientState("a", flat.copy(), 60)
            update = fed.local_train(client, flat.copy(), p, data, config, 0)
            drifts.append(np.linalg.norm(update.params - flat))
        assert all(b <= a + 1e-12 for a, b in zip(drifts, drifts[1:])), drifts


class TestRunRound:
    def test_round_log_shape(self):
        config = toy_config()
        sites = [split_site("gnv", 80, 0), split_site("jax", 60, 1, shift=0.5)]
        artifacts = fed.run_paradigm(plan(fed.FEDAVG, rounds=2), sites, config,
                                     outcomes=OUTCOME_NAMES)
        assert len(artifacts.rounds) == 2
        for entry in artifacts.rounds:
            assert set(entry.sites) == {"gnv", "jax"}
            for site_entry in entry.sites.values():
                assert set(site_entry["val_auroc"]) == set(OUTCOME_NAMES)
                assert np.isfinite(site_entry["train_loss"])

    def test_scaffold_server_control_is_client_mean(self):
        config = toy_config()
        sites = [split_site("gnv", 80, 0), split_site("jax", 60, 1, shift=0.5)]
        p = plan(fed.SCAFFOLD, rounds=5)
        init = rm.ModelParams.init(config, p.seed).flatten()
        clients = [fed.ClientState(s.site_id, init.copy(), len(s.train),
                                   control=np.zeros(init.size)) for s in sites]
        server = fed.ServerState(params=init.copy(), control=np.zeros(init.size))
        site_data = {s.site_id: s.train for s in sites}
        for _ in range(5):
            server, clients, _log = fed.run_round(server, clients, p, site_data,
                                                  config)
            client_mean = np.mean([c.control for c in clients], axis=0)
            assert np.max(np.abs(server.control - client_mean)) <= 1e-12

    def test_fedavg_round_params_in_convex_hull(self):
        config = toy_config()
        sites = [split_site("gnv", 80, 0), split_site("jax", 60, 1, shift=0.5)]
        p = plan(fed.FEDAVG, rounds=4)
        init = rm.ModelParams.init(config, p.seed).flatten()
        clients = [fed.ClientState(s.site_id, init.copy(), len(s.train))
                   for s in sites]
        server = fed.ServerState(params=init.copy())
        site_data = {s.site_id: s.train for s in sites}
        for _ in range(4):
            x_before = server.params
            server, clients, _log = fed.run_round(server, clients, p, site_data,
                                                  config)
            ys = np.stack([c.params for c in clients])
            assert np.all(server.params >= ys.min(axis=0) - 1e-15)
            assert np.all(server.params <= ys.max(axis=0) + 1e-15)
            assert not np.array_equal(server.params, x_before)


class TestParadigmEquivalences:
    def test_one_client_federation_equals_local(self):
        config = toy_config()
        site = split_site("gnv", 100, 2)
        local = fed.run_paradigm(plan(fed.LOCAL), [site], config,
                                 outcomes=OUTCOME_NAMES)
        one_client = fed.run_paradigm(plan(fed.FEDAVG), [site], config,
                                      outcomes=OUTCOME_NAMES)
        assert np.array_equal(local.params["gnv"], one_client.params["global"])
        assert local.best_round["gnv"] == one_client.best_round["global"]

    def test_central_on_identical_sites_equals_local(self):
        config = toy_config()
        site = split_site("gnv", 100, 2)
        twin = fed.SiteData(site_id="jax-twin", train=site.train, val=site.val,
                            test=site.test)
        local = fed.run_paradigm(plan(fed.LOCAL), [site], config,
                                 outcomes=OUTCOME_NAMES)
        central = fed.run_paradigm(plan(fed.CENTRAL), [site, twin], config,
                                   outcomes=OUTCOME_NAMES)
        assert np.array_equal(local.params["gnv"], central.params["global"])

    def test_fedprox_mu_zero_run_equals_fedavg_run(self):
        config = toy_config()
        sites = [split_site("gnv", 80, 0), split_site("jax", 60, 1, shift=0.5)]
        avg = fed.run_paradigm(plan(fed.FEDAVG), sites, config,
                               outcomes=OUTCOME_NAMES)
        prox = fed.run_paradigm(plan(fed.FEDPROX, mu=0.0), sites, config,
                                outcomes=OUTCOME_NAMES)
        assert np.array_equal(avg.params["global"], prox.params["global"])

    def test_scaffold_first_round_equals_fedavg_first_round(self):
        config = toy_config()
        sites = [split_site("gnv", 80, 0), split_site("jax", 60, 1, shift=0.5)]
        states = {}
        for paradigm in (fed.FEDAVG, fed.SCAFFOLD):
            p = plan(paradigm, rounds=1)
            init = rm.ModelParams.init(config, p.seed).flatten()
            scaffold = paradigm == fed.SCAFFOLD
            clients = [fed.ClientState(
                s.site_id, init.copy(), len(s.train),
                control=np.zeros(init.size) if scaffold else None) for s in sites]
            server = fed.ServerState(
                params=init.copy(),
                control=np.zeros(init.size) if scaffold else None)
            server, _c, _log = fed.run_round(
                server, clients, p, {s.site_id: s.train for s in sites}, config)
            states[paradigm] = server.params
        assert np.array_equal(states[fed.FEDAVG], states[fed.SCAFFOLD])


class TestSelection:
    def test_selection_maximizes_logged_criterion(self):
        config = toy_config()
        sites = [split_site("gnv", 120, 3), split_site("jax", 90, 4, shift=0.4)]
        artifacts = fed.run_paradigm(plan(fed.FEDAVG, rounds=6), sites, config,
                                     outcomes=OUTCOME_NAMES)
        scores = {entry.round_index: fed._selection_score(entry)
                  for entry in artifacts.rounds}
        best = min(r for r, s in scores.items() if s == max(scores.values()))
        assert artifacts.best_round["global"] == best


class TestParadigmTrainer:
    def test_estimator_surface(self):
        config = toy_config()
        sites = [split_site("gnv", 80, 0), split_site("jax", 60, 1, shift=0.5)]
        trainer = fed.ParadigmTrainer("scaffold", config, rounds=2,
                                      batch_size=16, lr=0.05, seed=0)
        assert trainer.get_params()["rounds"] == 2
        with pytest.raises(Exception):
            trainer.predict_proba(sites[0].test)
        trainer.fit(sites, outcomes=OUTCOME_NAMES)
        scores = trainer.predict_proba(sites[0].test)
        assert scores.shape == (len(sites[0].test), 9)
        assert np.all((scores > 0) & (scores < 1))

    def test_matches_run_paradigm(self):
        config = toy_config()
        sites = [split_site("gnv", 80, 0)]
        trainer = fed.ParadigmTrainer("local", config, rounds=2, batch_size=16,
                                      lr=0.05, seed=0).fit(sites,
                                                           outcomes=OUTCOME_NAMES)
        direct = fed.run_paradigm(plan(fed.LOCAL, rounds=2), sites, config,
                                  outcomes=OUTCOME_NAMES)
        assert np.array_equal(trainer.artifacts_.params["gnv"],
                              direct.params["gnv"])
        assert trainer.models_["gnv"].flatten().tobytes() == \
            direct.params["gnv"].tobytes()


class TestThreadDeterminism:
    def test_concurrent_clients_match_sequential(self):
        config = toy_config()
        sites = [split_site("gnv", 80, 0), split_site("jax", 60, 1, shift=0.5)]
        previous = os.environ.get("FEDPERISIM_THREADS")
        try:
            os.environ["FEDPERISIM_THREADS"] = "1"
            seq = fed.run_paradigm(plan(fed.SCAFFOLD), sites, config,
                                   outcomes=OUTCOME_NAMES)
            os.environ["FEDPERISIM_THREADS"] = "4"
            par = fed.run_paradigm(plan(fed.SCAFFOLD), sites, config,
                                   outcomes=OUTCOME_NAMES)
        finally:
            if previous is None:
                os.environ.pop("FEDPERISIM_THREADS", None)
            else:
                os.environ["FEDPERISIM_THREADS"] = previous
        assert np.array_equal(seq.params["global"], par.params["global"])
