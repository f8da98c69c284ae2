#!/usr/bin/env python3
"""Print the inference vs. closed-loop throughput table for every workload
fixture, in both execution modes, next to the analytic prediction."""

import dataclasses
import sys

from nanopipe.errors import OracleUnavailable
from nanopipe.scenarios import expected_period_us, load_scenario, run_scenario

ROWS = ["pulp-frontnet-48", "cereda-remote-40", "fcnn-39", "imav-30", "nanoflownet-11"]


def main():
    print(f"{'scenario':<22}{'mode':<12}{'inference':>10}{'closed':>10}"
          f"{'drop %':>9}{'oracle':>10}")
    for name in ROWS:
        for mode in ("pipelined", "serialized"):
            spec = dataclasses.replace(load_scenario(name), mode=mode)
            _, m = run_scenario(spec)
            try:
                oracle_hz = f"{1e6 / expected_period_us(spec):.1f}"
            except OracleUnavailable:
                oracle_hz = "--"
            drop = f"{m.drop_pct:+.1f}" if m.drop_pct is not None else "--"
            inf = f"{m.inference_hz:.1f}" if m.inference_hz else "--"
            print(f"{spec.name:<22}{mode:<12}{inf:>10}{m.closed_loop_hz:>10.1f}"
                  f"{drop:>9}{oracle_hz:>10}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
