"""Switch the three mechanisms on one at a time and report what each adds.

Starts from random eviction with every expert loaded at High and no
prefetching, then adds dynamic precision, lookahead prefetching and the
weighted cache policy in turn.
"""

import argparse

from mpoffload import ModelSpec, Policy, RunConfig, TraceSpec, generate, run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--layers", type=int, default=16)
    ap.add_argument("--decode", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    m = ModelSpec(n_layers=args.layers, seed=args.seed)
    trace = generate(TraceSpec(model=m, decode_len=args.decode, n_sequences=3, affinity_skew=1.0, seed=args.seed))
    cfg = RunConfig(model=m, cap_high=3 * args.layers, cap_low=args.layers, policy=Policy.RANDOM,
                    dynamic_loading=False, prefetching=False, prefetch_precision="scored")
    steps = [
        ("baseline", {}),
        ("+ dynamic precision", {"dynamic_loading": True}),
        ("+ prefetching (p=1)", {"prefetching": True, "lookahead": 1}),
        ("+ weighted cache", {"policy": Policy.WEIGHTED}),
    ]
    print(f"{'configuration':<22} {'ms/token':>9} {'penalty':>8} {'hit':>6} {'GB moved':>9}")
    for name, change in steps:
        cfg = cfg.with_(**change)
        r = run(trace, cfg)
        print(f"{name:<22} {r.decode_ms_per_token:>9.2f} {r.normalized_miss_penalty:>8.3f}"
              f" {r.hit_ratio:>6.3f} {r.bytes_loaded / 1e9:>9.1f}")


if __name__ == "__main__":
    main()
