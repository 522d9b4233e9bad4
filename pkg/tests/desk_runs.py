"""Desk-scale training runs shared by the acceptance criteria (cached per session)."""

import time
from functools import lru_cache

from depsnet.config import recipe
from depsnet.data import load_dataset
from depsnet.evaluation import pareto_frontier
from depsnet.rng import substream
from depsnet.training import run_training

SEEDS = (0, 1, 2)


@lru_cache(maxsize=None)
def dataset():
    return load_dataset(recipe("deps").dataset)


@lru_cache(maxsize=None)
def deps_run(seed, epsilon0=1e-4, fm_warmup_fraction=0.5):
    """(weights, log, seconds) for the desk DEPS recipe; every step is logged."""
    cfg = recipe("deps", seed=seed, epsilon0=epsilon0, fm_warmup_fraction=fm_warmup_fraction,
                 log_every_steps=1)
    t = time.perf_counter()
    weights, log = run_training(cfg.arch, dataset(), cfg.plan, cfg.lr, seed)
    return weights, log, time.perf_counter() - t


@lru_cache(maxsize=None)
def mean_pareto(seed, fm_warmup_fraction, num_samples=128):
    weights, _, _ = deps_run(seed, 1e-4, fm_warmup_fraction)
    ds = dataset()
    fr = pareto_frontier(weights, weights.space, ds.test, 6, num_samples,
                         substream(seed, "pareto"), ds.train, 4)
    return fr.mean_pareto_accuracy
