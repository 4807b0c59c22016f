"""Personalized optimization with Kriging surrogates.

Modules:
    gp: Kriging model with linear trend, fitting and prediction.
    design: Sobol' streams and maximin distance designs.
    inner_opt: Batched, box-constrained multistart Nelder-Mead.
    sha: Sequential design loops (sha1, sha2).
    robust: Constant robust decisions and decision costs.
    testbed: Benchmark cost functions.
    bench: Experiment harness and report writers.
"""

__version__ = "0.1.0"
