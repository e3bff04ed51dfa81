"""Synchronous-round federated training over in-process clients.

Implements three learning paradigms (local, central, federated) and three
aggregation algorithms (FedAvg, FedProx, SCAFFOLD) as pure functions over
flat parameter vectors.  One optimizer (plain SGD) everywhere keeps the
protocol-equivalence identities exact: FedProx with mu=0 is bit-identical
to FedAvg, SCAFFOLD's first round from zero control variates is
bit-identical to a FedAvg round, and a one-client federation is
bit-identical to local training.

Determinism contract: minibatch permutations come from value-keyed streams
(seed, "batches", round, epoch), client work is independent, and the
server reduces updates in fixed site order, so sequential and concurrent
execution produce bit-identical states.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import model as rm
from .base import ParamsMixin, check_is_fitted
from .errors import (ClientDataError, ConfigError, DivergenceError,
                     ProtocolError, UndefinedMetricError)
from .metrics import auroc
from .rng import stream

LOCAL = "local"
CENTRAL = "central"
FEDAVG = "fedavg"
FEDPROX = "fedprox"
SCAFFOLD = "scaffold"

PARADIGMS = (LOCAL, CENTRAL, FEDAVG, FEDPROX, SCAFFOLD)
FEDERATED = (FEDAVG, FEDPROX, SCAFFOLD)


@dataclass(frozen=True)
class TrainPlan:
    """Rounds, local epochs, batch size and learning rate of one paradigm.

    The paper states none of these; defaults are sized for desk-scale runs.
    ``mu`` is the FedProx proximal coefficient and is used only there.
    """

    paradigm: str
    rounds: int = 30
    epochs: int = 1
    batch_size: int = 64
    lr: float = 0.05
    mu: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ConfigError(f"unknown paradigm {self.paradigm!r}")
        if self.rounds < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("rounds, epochs and batch size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.mu < 0:
            raise ConfigError("mu must be non-negative")
        if self.mu > 0 and self.paradigm != FEDPROX:
            raise ConfigError("mu applies only to the fedprox paradigm")


@dataclass
class ClientState:
    site_id: str
    params: np.ndarray
    n_samples: int
    control: np.ndarray = None  # SCAFFOLD c_i, absent otherwise

    def __post_init__(self):
        if self.n_samples < 1:
            raise ClientDataError(f"client {self.site_id!r} has no training data")


@dataclass
class ServerState:
    params: np.ndarray
    control: np.ndarray = None  # SCAFFOLD c, absent otherwise
    round_index: int = 0


@dataclass
class ClientUpdate:
    site_id: str
    params: np.ndarray
    n_samples: int
    control_delta: np.ndarray = None
    mean_loss: float = 0.0


@dataclass
class RoundEntry:
    round_index: int
    sites: dict  # site -> {"train_loss": float, "val_auroc": {outcome: float|None}}
    wall_time_s: float

    def to_json(self):
        return {"round": self.round_index, "sites": self.sites,
                "wall_time_s": self.wall_time_s}


@dataclass
class TrainedArtifacts:
    paradigm: str
    config: rm.ModelConfig
    plan: TrainPlan
    best_round: dict  # model key -> selected round index
    params: dict  # model key -> flat vector ("global" or one key per site)
    rounds: list = field(default_factory=list)  # of RoundEntry


def _batches(n, batch_size, plan, round_index, epoch):
    perm = stream(plan.seed, "batches", round_index, epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def local_train(client: ClientState, global_params: np.ndarray, plan: TrainPlan,
                data, config: rm.ModelConfig, round_index: int,
                server_control: np.ndarray = None) -> ClientUpdate:
    """Run K = E * ceil(n/B) SGD steps from the broadcast parameters.

    FedProx adds mu * (y - x) to each gradient; SCAFFOLD adds (c - c_i)
    and returns the Option-II control-variate delta
    c_i+ - c_i = -c + (x - y) / (K * lr).
    """
    n = len(data)
    if n == 0:
        raise ClientDataError(f"client {client.site_id!r} has no training data")
    if global_params.shape != client.params.shape:
        raise ProtocolError(
            f"client {client.site_id!r}: broadcast length {global_params.shape} "
            f"does not match client length {client.params.shape}")

    scaffold = plan.paradigm == SCAFFOLD
    if scaffold:
        correction = server_control - client.control
    with_series = config.variant == rm.POSTOPERATIVE

    y = global_params.copy()
    steps = 0
    loss_sum = 0.0
    for epoch in range(plan.epochs):
        for idx in _batches(n, plan.batch_size, plan, round_index, epoch):
            batch = data.make_batch(idx, with_series)
            loss, grad = rm.loss_and_grad(y, config, batch)
            if not np.isfinite(loss) or not np.isfinite(grad).all():
                raise DivergenceError(
                    f"non-finite gradient at round {round_index}, site {client.site_id!r}",
                    round_index=round_index, site=client.site_id)
            if plan.paradigm == FEDPROX and plan.mu != 0.0:
                grad = grad + plan.mu * (y - global_params)
            if scaffold:
                grad = grad + correction
            y = y - plan.lr * grad
            steps += 1
            loss_sum += loss

    delta = None
    if scaffold:
        new_control = client.control - server_control + \
            (global_params - y) / (steps * plan.lr)
        delta = new_control - client.control
        client.control = new_control
    client.params = y
    return ClientUpdate(site_id=client.site_id, params=y, n_samples=n,
                        control_delta=delta, mean_loss=loss_sum / steps)


def aggregate(server: ServerState, updates, total_clients=None) -> ServerState:
    """Sample-size-weighted parameter average, summed in fixed site order.

    A single update is installed verbatim (x+ = y exactly).  For SCAFFOLD
    the server control variate moves by the mean of the client deltas over
    the total client count.
    """
    if not updates:
        raise ProtocolError("aggregate needs at least one client update")
    p = server.params.shape
    for update in updates:
        if update.params.shape != p:
            raise ProtocolError(
                f"update from {update.site_id!r} has length {update.params.shape}, "
                f"server has {p}")

    if len(updates) == 1:
        new_params = updates[0].params.copy()
    else:
        acc = np.zeros_like(server.params)
        for update in updates:
            acc = acc + update.n_samples * update.params
        new_params = acc / sum(u.n_samples for u in updates)
    if not np.isfinite(new_params).all():
        raise DivergenceError(
            f"non-finite aggregated parameters at round {server.round_index}",
            round_index=server.round_index)

    new_control = server.control
    if server.control is not None:
        n_total = total_clients if total_clients is not None else len(updates)
        delta_sum = np.zeros_like(server.control)
        for update in updates:
            if update.control_delta is None:
                raise ProtocolError(f"update from {update.site_id!r} lacks a control delta")
            delta_sum = delta_sum + update.control_delta
        new_control = server.control + delta_sum / n_total

    return ServerState(params=new_params, control=new_control,
                       round_index=server.round_index + 1)


def _threads():
    try:
        return max(1, int(os.environ.get("FEDPERISIM_THREADS", "1")))
    except ValueError:
        return 1


def _evaluate_sites(flat, config, val_sets, outcomes, batch_size=512):
    """Per-site, per-outcome validation AUROC of the given parameters.

    Outcomes with a single class in a validation set log as None.
    """
    params = rm.ModelParams.unflatten(config, flat)
    with_series = config.variant == rm.POSTOPERATIVE
    result = {}
    for site, val in val_sets.items():
        if len(val) == 0:
            result[site] = {name: None for name in outcomes}
            continue
        chunks = [rm.predict_proba(
            params, val.make_batch(np.arange(s, min(s + batch_size, len(val))),
                                   with_series))
            for s in range(0, len(val), batch_size)]
        scores = np.concatenate(chunks, axis=0)
        per_outcome = {}
        for k, name in enumerate(outcomes):
            try:
                per_outcome[name] = auroc(scores[:, k], val.labels[:, k])
            except UndefinedMetricError:
                per_outcome[name] = None
        result[site] = per_outcome
    return result


def run_round(server: ServerState, clients, plan: TrainPlan, site_data,
              config: rm.ModelConfig, val_sets=None, outcomes=None):
    """Broadcast, train every client (possibly concurrently), aggregate, log."""
    t0 = time.monotonic()
    round_index = server.round_index
    x = server.params

    def work(client):
        return local_train(client, x, plan, site_data[client.site_id], config,
                           round_index, server_control=server.control)

    max_workers = _threads()
    if max_workers > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            updates = list(pool.map(work, clients))
    else:
        updates = [work(client) for client in clients]

    new_server = aggregate(server, updates, total_clients=len(clients))

    sites = {}
    if val_sets is not None:
        val_auroc = _evaluate_sites(new_server.params, config, val_sets,
                                    outcomes or [])
    for update in updates:
        entry = {"train_loss": update.mean_loss}
        if val_sets is not None:
            entry["val_auroc"] = val_auroc.get(update.site_id, {})
        sites[update.site_id] = entry
    log = RoundEntry(round_index=round_index, sites=sites,
                     wall_time_s=time.monotonic() - t0)
    return new_server, clients, log


@dataclass
class SiteData:
    """One site's transformed splits, keyed for a paradigm run."""

    site_id: str
    train: object
    val: object
    test: object = None


def _selection_score(entry: RoundEntry):
    """Mean validation AUROC across outcomes, averaged over sites."""
    site_means = []
    for site in sorted(entry.sites):
        values = [v for v in entry.sites[site].get("val_auroc", {}).values()
                  if v is not None]
        if values:
            site_means.append(float(np.mean(values)))
    return float(np.mean(site_means)) if site_means else float("-inf")


def _train_group(sites, plan, config, init_flat, outcomes):
    """Train one model over the given client sites, selecting the round
    with the best mean validation AUROC."""
    scaffold = plan.paradigm == SCAFFOLD
    p = init_flat.size
    clients = [ClientState(site_id=s.site_id, params=init_flat.copy(),
                           n_samples=len(s.train),
                           control=np.zeros(p) if scaffold else None)
               for s in sites]
    server = ServerState(params=init_flat.copy(),
                         control=np.zeros(p) if scaffold else None)
    site_data = {s.site_id: s.train for s in sites}
    val_sets = {s.site_id: s.val for s in sites}

    best_flat, best_score, best_round = server.params.copy(), float("-inf"), 0
    logs = []
    for _ in range(plan.rounds):
        server, clients, entry = run_round(
            server, clients, plan, site_data, config,
            val_sets=val_sets, outcomes=outcomes)
        logs.append(entry)
        score = _selection_score(entry)
        if score > best_score:
            best_score, best_round = score, entry.round_index
            best_flat = server.params.copy()
    return best_flat, best_round, logs, server


def run_paradigm(plan: TrainPlan, sites, config: rm.ModelConfig,
                 outcomes=None) -> TrainedArtifacts:
    """Train under one paradigm.

    local   -> one model per site, trained only on that site
    central -> one model on the pooled (id-deduplicated) training data
    fed*    -> one global model over all sites via synchronous rounds
    """
    if not sites:
        raise ConfigError("run_paradigm needs at least one site")
    init_flat = rm.ModelParams.init(config, plan.seed).flatten()
    outcomes = list(outcomes) if outcomes is not None else list(range(9))

    artifacts = TrainedArtifacts(paradigm=plan.paradigm, config=config, plan=plan,
                                 best_round={}, params={})
    if plan.paradigm == LOCAL:
        for site in sites:
            flat, best_round, logs, _ = _train_group([site], plan, config,
                                                     init_flat, outcomes)
            artifacts.params[site.site_id] = flat
            artifacts.best_round[site.site_id] = best_round
            artifacts.rounds.extend(logs)
    elif plan.paradigm == CENTRAL:
        flat, best_round, logs, _ = _train_group(sites_pooled(sites), plan,
                                                 config, init_flat, outcomes)
        artifacts.params["global"] = flat
        artifacts.best_round["global"] = best_round
        artifacts.rounds.extend(logs)
    else:
        flat, best_round, logs, _ = _train_group(sites, plan, config, init_flat,
                                                 outcomes)
        artifacts.params["global"] = flat
        artifacts.best_round["global"] = best_round
        artifacts.rounds.extend(logs)
    return artifacts


class ParadigmTrainer(ParamsMixin):
    """Estimator-style front door over run_paradigm.

    fit(sites) trains under the configured paradigm; predict_proba scores a
    transformed cohort with the selected model ("global" for central and
    federated paradigms, the site id for local ones).
    """

    def __init__(self, paradigm, model_config, rounds=30, epochs=1,
                 batch_size=64, lr=0.05, mu=0.0, seed=0):
        self.paradigm = paradigm
        self.model_config = model_config
        self.rounds = rounds
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.mu = mu
        self.seed = seed
        self.artifacts_ = None

    def _plan(self):
        return TrainPlan(paradigm=self.paradigm, rounds=self.rounds,
                         epochs=self.epochs, batch_size=self.batch_size,
                         lr=self.lr, mu=self.mu, seed=self.seed)

    def fit(self, sites, outcomes=None):
        self.artifacts_ = run_paradigm(self._plan(), sites, self.model_config,
                                       outcomes=outcomes)
        return self

    @property
    def models_(self):
        check_is_fitted(self, "artifacts_")
        return {key: rm.ModelParams.unflatten(self.model_config, flat)
                for key, flat in self.artifacts_.params.items()}

    def predict_proba(self, transformed, model="global"):
        check_is_fitted(self, "artifacts_")
        params = self.models_[model]
        with_series = self.model_config.variant == rm.POSTOPERATIVE
        chunks = []
        for start in range(0, len(transformed), 512):
            idx = np.arange(start, min(start + 512, len(transformed)))
            chunks.append(rm.predict_proba(
                params, transformed.make_batch(idx, with_series)))
        return np.concatenate(chunks, axis=0)


def sites_pooled(sites):
    """Central learning trains one client on the pooled splits."""
    train = _concat_transformed([s.train for s in sites])
    val = _concat_transformed([s.val for s in sites])
    return [SiteData(site_id="pooled", train=train, val=val)]


def _concat_transformed(parts):
    """Concatenate transformed cohorts, dropping duplicate record ids."""
    from .preprocess import TransformedCohort

    seen = set()
    keep = []
    for part in parts:
        idx = [i for i, rid in enumerate(part.record_ids) if rid not in seen]
        seen.update(part.record_ids[i] for i in idx)
        keep.append(part.take(idx))
    first = keep[0]
    has_series = all(p.has_series for p in keep)
    return TransformedCohort(
        site="pooled",
        fit_site=first.fit_site,
        record_ids=[rid for p in keep for rid in p.record_ids],
        x_cont=np.concatenate([p.x_cont for p in keep], axis=0),
        x_bin=np.concatenate([p.x_bin for p in keep], axis=0),
        x_cat=np.concatenate([p.x_cat for p in keep], axis=0),
        labels=np.concatenate([p.labels for p in keep], axis=0),
        sex=np.concatenate([p.sex for p in keep]),
        race=np.concatenate([p.race for p in keep]),
        age=np.concatenate([p.age for p in keep]),
        series_vals=[v for p in keep for v in p.series_vals] if has_series else [],
        series_pres=[v for p in keep for v in p.series_pres] if has_series else [],
    )
