"""Deterministic random streams for trial-parallel Monte Carlo.

Every trial owns independent substreams derived by hashing
``(base_seed, trial_index, role)`` through numpy's SeedSequence and fed to
the counter-based Philox bit generator.  Tallies therefore do not depend on
execution order: any subset of trials can run in any schedule, serially or
concurrently, and consume exactly the draws it would consume alone.

Normal variates drawn from these generators use numpy's ziggurat
``standard_normal``.  Golden fixtures in the test suite are tied to that
algorithm; no code path may substitute a different normal sampler.
"""

from __future__ import annotations

import numpy as np

# Substream roles within a trial.  The hyperparameter draw gets its own
# stream so that pipelines with and without a refit stage (plain SBC versus
# the marginalisation check) consume identical simulation and posterior
# streams, which is what makes the point-mass reduction bit-exact.
ROLE_SIMULATION = 0
ROLE_HYPER = 1
ROLE_POSTERIOR = 2

# Auxiliary single-purpose streams, disjoint from trial streams because
# their spawn keys have length one.
AUX_DIAGNOSTICS = 0
AUX_PROLOGUE_FIT = 1
AUX_THRESHOLD = 2

_MAX_SEED = 2**64


def _check_seed(base_seed: int) -> int:
    seed = int(base_seed)
    if not 0 <= seed < _MAX_SEED:
        raise ValueError(f"base_seed must be an unsigned 64-bit integer, got {base_seed}")
    return seed


def trial_stream(base_seed: int, trial_index: int, role: int) -> np.random.Generator:
    """Generator for one role of one trial, schedule-independent."""
    seq = np.random.SeedSequence(
        entropy=_check_seed(base_seed),
        spawn_key=(int(trial_index), int(role)),
    )
    return np.random.Generator(np.random.Philox(seq))


def aux_stream(base_seed: int, purpose: int) -> np.random.Generator:
    """Generator for a named non-trial purpose (diagnostics, prologue fit)."""
    seq = np.random.SeedSequence(entropy=_check_seed(base_seed), spawn_key=(int(purpose),))
    return np.random.Generator(np.random.Philox(seq))
