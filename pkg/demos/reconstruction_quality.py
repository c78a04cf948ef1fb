"""Compare the low-rank attention reconstruction with the exact kernel matrix.

Sweeps the landmark count and sampler on a smooth 16x16 token field and
reports the relative Frobenius error of the reconstruction.
"""

import numpy as np

from softfree.attention import AttentionConfig, approximation_error
from softfree.bench import smooth_token_field
from softfree.kernel import TokenSequence
from softfree.sampling import SamplerSpec


def main():
    rng = np.random.default_rng(0)
    q = TokenSequence(smooth_token_field(16, 16, 16, rng), 16, 16)
    print("sampler    m   rel. error")
    for method in ("avg_pool", "random", "biased"):
        for k in (8, 4, 2):
            m = (16 // k) ** 2
            spec = SamplerSpec(method, k if method == "avg_pool" else 1, m, seed=1)
            err = approximation_error(q, AttentionConfig(16, 1, spec))
            print(f"{method:9s} {m:3d}   {err:.3e}")


if __name__ == "__main__":
    main()
