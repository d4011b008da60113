#!/usr/bin/env python3
"""Two ends of the hyperparameter-adequacy spectrum, side by side.

Scenario A: three training points and a broad prior.  Point estimates of
the hyperparameters are badly overconfident there, so the check should
flag that the hyperparameter posterior needs real marginalisation.

Scenario B: two hundred training points.  The marginal likelihood is
sharply peaked, the point estimate is fine, and the check should say so.

Each scenario generates a dataset from the reference model, embeds it in
a config, and runs the marg-check command, so the artifacts (rank tally,
fitted-hyperparameter trace, report) land in separate directories.
"""

import argparse
import json
import sys
import tempfile

import numpy as np

from gpsbc.cli import main as cli_main
from gpsbc.kernels import InputPoints
from gpsbc.margcheck import build_se_model
from gpsbc.models import sample_prior_joint, simulate_observations

REFERENCE_THETA = np.log([1.0, 0.5, 0.1])


def make_dataset(n: int, seed: int):
    x = np.linspace(0.0, 1.0, n)[:, None]
    gen = build_se_model(REFERENCE_THETA, 1)
    rng = np.random.default_rng(seed + 1_000_000)
    f, _ = sample_prior_joint(gen, InputPoints(x), InputPoints.empty(1), rng)
    y = simulate_observations(f, gen.likelihood, rng)[:, 0]
    return x, y


def scenario_doc(n: int, n_trials: int, optimizer: dict, seed: int) -> dict:
    x, y = make_dataset(n, seed)
    return {
        "data": {"x": x.tolist(), "y": [float(v) for v in y]},
        "sbc": {"N": n_trials, "L": 50, "base_seed": seed,
                "Xstar": [0.0625 + 0.125 * k for k in range(4)]},
        "hyper_prior": {"mu": [float(v) for v in REFERENCE_THETA],
                        "sigma": 1.0},
        "optimizer": optimizer,
    }


SCENARIOS = {
    "small-n": (
        lambda seed: scenario_doc(
            3, 120, {"max_iters": 60, "grad_tol": 1e-4, "restarts": 5}, seed),
        "marginalisation_needed",
    ),
    "large-n": (
        lambda seed: scenario_doc(
            200, 40, {"max_iters": 40, "grad_tol": 3e-5, "restarts": 3}, seed),
        "type2_adequate",
    ),
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out/marg_scenarios")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    all_expected = True
    for name, (build, expected) in SCENARIOS.items():
        doc = build(args.seed)
        with tempfile.NamedTemporaryFile("w", suffix=".json",
                                         delete=False) as handle:
            json.dump(doc, handle)
            cfg_path = handle.name
        out_dir = f"{args.out}/{name}"
        cli_main(["marg-check", "--config", cfg_path, "--out", out_dir])
        with open(f"{out_dir}/report.json", encoding="utf-8") as handle:
            report = json.load(handle)
        marker = "as expected" if report["verdict"] == expected else \
            f"EXPECTED {expected}"
        print(f"{name}: {report['verdict']} ({marker}; "
              f"valley {report['pooled']['valley_score']}, "
              f"threshold {report['valley_threshold']})")
        all_expected = all_expected and report["verdict"] == expected
    return 0 if all_expected else 1


if __name__ == "__main__":
    sys.exit(main())
