"""FedAvg simulation and the centralized baseline it is compared against.

Seeds: the global model is initialised from ``init_params(cfg, seed)``.
Client ``i`` in round ``t`` (both 1-based for rounds, 0-based for clients)
trains with ``derive_seed(seed, t, i)``; centralized epoch ``k`` uses
``derive_seed(seed, k, 0)``. A one-client, one-local-epoch federation
therefore retraces the centralized run bit for bit.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import nn
from ._seeding import derive_seed
from .dataset import PartitionMap
from .exceptions import AggregationError, ConfigurationError, InputError
from .metrics import evaluate


@dataclass(frozen=True)
class FedConfig:
    num_clients: int = 10
    rounds: int = 400
    local_epochs: int = 1
    train: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    eval_every: int = 1
    seed: int = 0
    checkpoint_every: int = 0

    def validate(self) -> None:
        if min(self.num_clients, self.rounds, self.local_epochs, self.eval_every) < 1:
            raise ConfigurationError("num_clients, rounds, local_epochs and eval_every must be positive")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be non-negative")
        self.train.validate()


@dataclass
class RoundRecord:
    round: int
    accuracy: float
    loss: float
    wall_seconds: float = 0.0


def resolve_jobs(n_jobs: Optional[int] = None) -> int:
    """Explicit value, else ``$FEDJAM_JOBS``, else the number of CPUs."""
    if n_jobs is None:
        env = os.environ.get("FEDJAM_JOBS", "").strip()
        n_jobs = int(env) if env else (os.cpu_count() or 1)
    if n_jobs < 1:
        raise ConfigurationError("jobs must be positive")
    return n_jobs


def aggregate(updates) -> dict:
    """Sample-count weighted average of ``[(params, n_samples), ...]``.

    Accumulates in float64 and casts back to the first client's dtype.
    """
    updates = list(updates)
    if not updates:
        raise AggregationError("nothing to aggregate")
    ref = updates[0][0]
    for i, (params, weight) in enumerate(updates):
        if list(params) != list(ref):
            raise AggregationError(f"client {i} has tensors {list(params)}, expected {list(ref)}")
        for name, arr in params.items():
            if arr.shape != ref[name].shape:
                raise AggregationError(f"client {i}: {name} has shape {arr.shape}, expected {ref[name].shape}")
        if not weight > 0:
            raise AggregationError(f"client {i} has non-positive weight {weight}")
    total = math.fsum(float(w) for _, w in updates)
    coeffs = [float(w) / total for _, w in updates]
    out = {}
    for name, arr in ref.items():
        acc = np.zeros(arr.shape, dtype=np.float64)
        for c, (params, _) in zip(coeffs, updates):
            acc += c * params[name].astype(np.float64)
        out[name] = acc.astype(arr.dtype)
    return out


def _test_split(x, y, test_idx):
    if test_idx is None:
        return None, None
    test_idx = np.asarray(test_idx, dtype=np.int64)
    if test_idx.size == 0:
        raise InputError("test split is empty")
    return x[test_idx], y[test_idx]


def _local_update(params, x, y, cfg, train):
    return nn.sgd_epochs(params, x, y, cfg, train)


def run_fedavg(
    x,
    y,
    partition: PartitionMap,
    model_cfg: nn.CnnConfig,
    fed_cfg: FedConfig,
    test_idx,
    n_jobs: int = 1,
    checkpoint_dir=None,
    clock: Optional[Callable[[], float]] = time.perf_counter,
    on_round: Optional[Callable] = None,
):
    """FedAvg with full participation every round.

    ``x`` is the whole dataset as a ``[N, 1, H, W]`` float batch and ``y`` its
    labels; ``partition`` and ``test_idx`` index into it. Returns the final
    global parameters and one :class:`RoundRecord` per evaluated round (the
    last round is always evaluated); ``test_idx=None`` skips evaluation.
    ``clock=None`` records zero wall time so reruns give identical records.
    """
    fed_cfg.validate()
    model_cfg.validate()
    if partition.num_clients != fed_cfg.num_clients:
        raise ConfigurationError(
            f"partition has {partition.num_clients} clients but num_clients={fed_cfg.num_clients}"
        )
    for i, shard in enumerate(partition.assignments):
        if not shard:
            raise ConfigurationError(f"client {i} has an empty shard")
    shards = [np.asarray(a, dtype=np.int64) for a in partition.assignments]
    x_test, y_test = _test_split(x, y, test_idx)
    clock = clock or (lambda: 0.0)
    start = clock()

    params = nn.init_params(model_cfg, fed_cfg.seed)
    records = []
    parallel = None
    if n_jobs > 1 and len(shards) > 1:
        from joblib import Parallel

        parallel = Parallel(n_jobs=n_jobs)
        parallel.__enter__()
    try:
        for t in range(1, fed_cfg.rounds + 1):
            jobs = [
                (
                    params,
                    x[shard],
                    y[shard],
                    model_cfg,
                    replace(fed_cfg.train, epochs=fed_cfg.local_epochs, seed=derive_seed(fed_cfg.seed, t, i)),
                )
                for i, shard in enumerate(shards)
            ]
            if parallel is None:
                local = [_local_update(*job) for job in jobs]
            else:
                from joblib import delayed

                local = parallel(delayed(_local_update)(*job) for job in jobs)
            params = aggregate([(p, len(shard)) for p, shard in zip(local, shards)])

            if x_test is not None and (t % fed_cfg.eval_every == 0 or t == fed_cfg.rounds):
                acc, loss, _ = evaluate(params, x_test, y_test, model_cfg)
                records.append(RoundRecord(t, acc, loss, clock() - start))
                if on_round is not None:
                    on_round(records[-1])
            if checkpoint_dir is not None and fed_cfg.checkpoint_every and t % fed_cfg.checkpoint_every == 0:
                nn.save_params(params, Path(checkpoint_dir) / f"round_{t:04d}.fjwt")
    finally:
        if parallel is not None:
            parallel.__exit__(None, None, None)
    return params, records


def run_centralized(
    x,
    y,
    train_idx,
    test_idx,
    model_cfg: nn.CnnConfig,
    train_cfg: nn.TrainConfig,
    eval_every: int = 1,
    clock: Optional[Callable[[], float]] = time.perf_counter,
    on_round: Optional[Callable] = None,
):
    """Plain SGD over the pooled training split for ``train_cfg.epochs`` epochs.

    Records are per epoch (``round`` holds the epoch number).
    """
    train_cfg.validate()
    model_cfg.validate()
    if eval_every < 1:
        raise ConfigurationError("eval_every must be positive")
    train_idx = np.sort(np.asarray(train_idx, dtype=np.int64))
    if train_idx.size == 0:
        raise ConfigurationError("no training data")
    x_train, y_train = x[train_idx], y[train_idx]
    x_test, y_test = _test_split(x, y, test_idx)
    clock = clock or (lambda: 0.0)
    start = clock()

    params = nn.init_params(model_cfg, train_cfg.seed)
    records = []
    for k in range(1, train_cfg.epochs + 1):
        epoch_cfg = replace(train_cfg, epochs=1, seed=derive_seed(train_cfg.seed, k, 0))
        params = nn.sgd_epochs(params, x_train, y_train, model_cfg, epoch_cfg)
        if x_test is not None and (k % eval_every == 0 or k == train_cfg.epochs):
            acc, loss, _ = evaluate(params, x_test, y_test, model_cfg)
            records.append(RoundRecord(k, acc, loss, clock() - start))
            if on_round is not None:
                on_round(records[-1])
    return params, records
