"""Time-per-batch scaling of one fully connected layer.

The snf step is matrix products only, so its cost grows quadratically in
the dimension; the exact step factorizes and inverts, growing cubically.
Fitted log-log slopes make the asymptotic gap visible; absolute times are
machine-dependent.

The default dimensions keep this demo around a minute; pass larger dims
on the command line to reproduce the full-range sweep.
"""

import sys

from snflow import diagnostics


def main():
    dims = [int(d) for d in sys.argv[1:]] or [32, 64, 128, 256, 512]
    table = {}
    for mode in ("snf", "exact"):
        table[mode] = diagnostics.timing_sweep(dims, mode, batch=128, n_batches=12, seed=0)

    print(f"{'D':>6} {'snf ms':>10} {'exact ms':>10} {'ratio':>7}")
    for s, e in zip(table["snf"], table["exact"]):
        print(f"{s.dim:>6} {s.mean_seconds * 1e3:>10.2f} {e.mean_seconds * 1e3:>10.2f} "
              f"{e.mean_seconds / s.mean_seconds:>7.2f}")
    for mode in ("snf", "exact"):
        slope = diagnostics.fit_loglog_slope(
            dims, [r.mean_seconds for r in table[mode]]
        )
        print(f"{mode:5s} fitted log-log slope: {slope:.2f}")


if __name__ == "__main__":
    main()
