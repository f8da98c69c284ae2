#!/usr/bin/env python3
"""Sweep the remote loop over offered rates and the added-delay condition,
printing mean end-to-end latency and round-trip time."""

import dataclasses
import sys

from nanopipe.scenarios import load_scenario, run_scenario


def main():
    print(f"{'scenario':<24}{'rate Hz':>8}{'closed Hz':>11}{'e2e ms':>10}{'rtt ms':>9}")
    sweep = load_scenario("remote-sweep")
    for rate in (10.0, 20.0, 40.0):
        spec = dataclasses.replace(sweep, rate_hz=rate)
        _, m = run_scenario(spec)
        print(f"{spec.name:<24}{rate:>8.0f}{m.closed_loop_hz:>11.2f}"
              f"{m.e2e_ms_mean:>10.2f}{'--':>9}")
    for name in ("remote-40hz", "remote-40hz-delay500"):
        spec = load_scenario(name)
        _, m = run_scenario(spec)
        rtt = f"{m.rtt_ms_mean:.2f}" if m.rtt_ms_mean is not None else "--"
        print(f"{spec.name:<24}{spec.rate_hz:>8.0f}{m.closed_loop_hz:>11.2f}"
              f"{m.e2e_ms_mean:>10.2f}{rtt:>9}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
