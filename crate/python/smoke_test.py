#!/usr/bin/env python3
"""Smoke test for the hmt_py extension module.

Build and place the module first:

    cargo build --release -p hmt-py
    cp target/release/libhmt_py.so python/hmt_py.so
    python3 python/smoke_test.py
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import hmt_py


def approx(a, b, tol=1e-9):
    assert abs(a - b) < tol, f"{a} vs {b}"


def main():
    spec = hmt_py.ModelSpec.gaussian(2)
    assert spec.states == 2 and spec.packed_dim == 6

    theta = hmt_py.Theta.gaussian(
        [[0.6, 0.4], [0.45, 0.55]], [-1.0, 1.0], [1.0, 1.0]
    )
    sm, sp, rho = theta.mixing_profile()
    approx(sm, 0.8)
    approx(sp, 1.2)
    approx(rho, 1.0 / 3.0)

    pi = hmt_py.stationary_distribution([[0.6, 0.4], [0.45, 0.55]])
    approx(pi[0], 9.0 / 17.0, 1e-12)
    approx(hmt_py.dobrushin([[0.6, 0.4], [0.45, 0.55]]), 0.15, 1e-12)

    sample = hmt_py.simulate(spec, theta, depth=6, root_law="stationary", seed=42)
    assert len(sample) == 2 ** 7 - 1
    again = hmt_py.simulate(spec, theta, depth=6, root_law="stationary", seed=42)
    assert sample.to_jsonl() == again.to_jsonl(), "simulation must be deterministic"

    ll = hmt_py.log_likelihood_py(theta, sample, 0)
    assert math.isfinite(ll) and ll < 0.0

    # telescoping at the root: h_{root,0,x} = log g(x, y_root)
    inc = hmt_py.increment_py(theta, sample, "", 0, 0)
    single = hmt_py.masked_log_density_py(theta, sample, [""], "", 0)
    approx(inc, single)

    marg = hmt_py.posterior_marginal_py(theta, sample, "010", 0)
    approx(sum(marg), 1.0, 1e-10)

    theta_hat, trace, _converged = hmt_py.fit_mle_py(sample, 0, spec, init="moment")
    for a, b in zip(trace, trace[1:]):
        assert b >= a - 1e-10, "EM trace must be nondecreasing"
    assert trace[-1] >= ll - 1e-8, "fit must dominate the generating parameters"

    score, names = hmt_py.score_py(spec, theta_hat, sample, 0)
    assert len(score) == len(names) == spec.packed_dim
    assert max(abs(s) for s in score) < 1e-3, f"score at the optimum: {score}"

    info = hmt_py.observed_information_py(spec, theta_hat, sample, 0, method="louis")
    for i in range(len(info)):
        for j in range(len(info)):
            approx(info[i][j], info[j][i], 1e-8)

    report = hmt_py.run_suite("dobrushin", cases=200)
    assert report["pass"], report

    roundtrip = hmt_py.Sample.from_jsonl(sample.to_jsonl())
    assert roundtrip.depth == 6 and len(roundtrip) == len(sample)

    print("smoke test OK")


if __name__ == "__main__":
    main()
