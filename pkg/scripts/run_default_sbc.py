#!/usr/bin/env python3
"""Run the default calibration experiment and print the verdict.

The default config is the reference setting: single-output squared
exponential GP, eight training points on [0, 1], four interleaved test
points, 1000 trials of 100 posterior samples.  Pass --fast for a desk-size
run while iterating.
"""

import argparse
import json
import sys
import tempfile

from gpsbc.cli import main as cli_main


def build_doc(fast: bool, seed: int) -> dict:
    doc = {"sbc": {"base_seed": seed}}
    if fast:
        doc["sbc"].update({"N": 200, "L": 20})
        doc["diagnostics"] = {"mc_reps": 999}
    return doc


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out/default_sbc")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--fast", action="store_true",
                        help="200 trials instead of 1000")
    args = parser.parse_args()

    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as handle:
        json.dump(build_doc(args.fast, args.seed), handle)
        cfg_path = handle.name
    code = cli_main(["sbc", "--config", cfg_path, "--out", args.out])
    with open(f"{args.out}/report.json", encoding="utf-8") as handle:
        report = json.load(handle)
    print(f"verdict: {report['verdict']}  "
          f"(pooled MC p-value {report['pooled']['p_value_mc']})")
    print(f"artifacts in {args.out}/")
    return code


if __name__ == "__main__":
    sys.exit(main())
