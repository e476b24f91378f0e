"""Smoke test for the framebudget_py extension module.

Build and install first:  pip install maturin && maturin develop -m crates/py/Cargo.toml
"""

import math
import tempfile

import framebudget_py as fb


def main():
    cfg = fb.Config("[train]\niterations = 8\n", ["train.capo.gamma=0.05"])
    assert len(cfg.hash()) == 64
    assert "gamma = 0.05" in cfg.to_toml()

    adv = fb.capo([[1.0, 0.0], [1.0, 1.0]], [[True, False], [True, True]], [0.2, 0.6])
    assert abs(adv["pivot"] - 0.375) < 1e-12
    assert all(a >= 0.05 for a in adv["final"][1])

    assert abs(fb.beta_logpdf(0.5, 1.0, 1.0)) < 1e-12
    assert fb.score("numeric", "3.14", "3.15") == (1.0, True, 1.0)
    r, ok, s = fb.score("temporal_grounding", "", "", [(0, 35)], [(0, 100)], False)
    assert ok and math.isclose(r, 0.35) and math.isclose(s, 0.15)
    assert fb.option_letter("The answer is (b)") == "B"

    assert 82.0 <= fb.speedup(0.11) <= 83.5
    assert fb.frame_capacity(16384, 0.0625) == (16, 256)
    assert math.isclose(fb.allocator_overhead(), 4096 / 100352, rel_tol=0, abs_tol=1e-12)

    history = fb.train(cfg)
    assert len(history) == 8 and 0.2 <= history[-1]["mean_scale"] <= 1.8

    with tempfile.TemporaryDirectory() as out:
        res = fb.run("complexity_calc", fb.Config(), out)
        assert res["passed"] and "manifest.json" in res["artifacts"]

    print("smoke test passed")


if __name__ == "__main__":
    main()
