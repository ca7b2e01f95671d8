"""Calibrate the cache policy weights on a small trace and compare with the pure policies."""

import argparse

from mpoffload import ModelSpec, Policy, RunConfig, Simulator, TraceSpec, calibrate_weights, generate


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--step", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    m = ModelSpec(n_layers=4, n_experts_per_layer=8, d_model=16, seed=args.seed)
    trace = generate(TraceSpec(model=m, prompt_len=4, decode_len=24, n_sequences=2, seed=args.seed))
    cfg = RunConfig(model=m, cap_high=10, cap_low=4)
    for pol in (Policy.LRU, Policy.LFU, Policy.LHU, Policy.FLD, Policy.RANDOM):
        pen = Simulator(trace, cfg.with_(policy=pol)).run().total_miss_penalty
        print(f"{pol.value:<8} penalty {pen:8.2f}")
    best, table = calibrate_weights(trace, cfg, args.step)
    print(f"calibrated penalty {dict(table)[best]:8.2f} at {best} ({len(table)} grid points)")


if __name__ == "__main__":
    main()
