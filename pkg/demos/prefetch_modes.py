"""Decode speed against lookahead depth for the two prefetch precision modes.

"both" fetches a Low then a High copy of every predicted expert; "scored"
classifies the predicted gate outcome and fetches only the precision it needs.
On a link-bound cost model the extra High copies can cost more than they save.
"""

import argparse

from mpoffload import ModelSpec, RunConfig, TraceSpec, generate, run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--layers", type=int, default=16)
    ap.add_argument("--decode", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    m = ModelSpec(n_layers=args.layers, seed=args.seed)
    trace = generate(TraceSpec(model=m, decode_len=args.decode, n_sequences=2, seed=args.seed))
    base = RunConfig(model=m, cap_high=3 * args.layers, cap_low=args.layers)
    print(f"{'p':>2} {'mode':>7} {'ms/token':>9} {'penalty':>8} {'prefetches':>10} {'dropped':>8}")
    for p in range(5):
        for mode in ("both", "scored"):
            cfg = base.with_(lookahead=p, prefetching=p > 0, prefetch_precision=mode)
            r = run(trace, cfg)
            print(f"{p:>2} {mode:>7} {r.decode_ms_per_token:>9.2f} {r.normalized_miss_penalty:>8.3f}"
                  f" {r.prefetch_loads:>10} {r.dropped_prefetches:>8}")
            if p == 0:
                break


if __name__ == "__main__":
    main()
