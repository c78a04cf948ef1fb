"""Peak matrix memory of SOFT attention versus exact attention as n doubles.

A small version of ``softfree bench-scaling`` without timing, so it runs in
a few seconds.
"""

from softfree import bench
from softfree.bench import ScalingSection
from softfree.pinv import NewtonConfig


def main():
    sec = ScalingSection(n_list=[512, 1024, 2048], m=49, d_e=64, repeats=3)
    rows = bench.run_scaling(sec, NewtonConfig(), seed=0, timing=False)
    for mech in sec.mechanisms:
        peaks = [r["peak_bytes"] for r in rows if r["mechanism"] == mech]
        ratios = bench.doubling_ratios(rows, mech, "peak_bytes")
        print(f"{mech:15s} peak bytes {peaks}  doubling ratios "
              + " ".join(f"{r:.2f}" for r in ratios))


if __name__ == "__main__":
    main()
