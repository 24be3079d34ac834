"""Smoke test for the gape_py extension module.

Build and install with `maturin develop -m crates/py/Cargo.toml` (or
`pip install ./crates/py`), then run `python python/smoke_test.py`.
"""

import math
import os
import random
import tempfile

import gape_py


def check_mask_paths():
    rng = random.Random(0)
    n, d = 12, 6
    q = [[rng.gauss(0, 1) for _ in range(d)] for _ in range(n)]
    k = [[rng.gauss(0, 1) for _ in range(d)] for _ in range(n)]
    gate = ([0.3] * d, 0.1, [0.2] * d, 0.5, 0.5413)
    ref = gape_py.attention_weights(q, k, list(range(n)), pe="rope", gate=gate, t=16.0, path="m")
    for path in ("mhat", "fused"):
        w = gape_py.attention_weights(q, k, list(range(n)), pe="rope", gate=gate, t=16.0, path=path)
        worst = max(abs(a - b) for ra, rb in zip(ref, w) for a, b in zip(ra, rb))
        assert worst < 1e-10, (path, worst)
    for i, row in enumerate(ref):
        assert abs(sum(row[: i + 1]) - 1.0) < 1e-12
        assert all(x == 0.0 for x in row[i + 1 :])


def check_suites():
    for name, trials, violations, _ in gape_py.verify("all", trials=20, seed=1):
        assert trials > 0 and violations == 0, name


def check_data_and_model():
    tokens, positions, digits, target = gape_py.niah_sample(256, "first", seed=3)
    assert len(tokens) == 256 and len(positions) == 4
    assert target == digits[0]
    model = gape_py.Model(pe="nope", gape=True, d_model=16, t_train=64, seed=2)
    logits = model.predict(tokens[:64])
    assert len(logits) == 10 and all(math.isfinite(x) for x in logits)
    entropy = model.entropy(tokens[:64])
    assert len(entropy) == 2 and len(entropy[0]) == 2
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        model.save(path)
        again = gape_py.Model.load(path)
        assert again.predict(tokens[:64]) == logits


def check_training():
    model, metrics = gape_py.train(
        pe="nope", gape=True, l_train=64, steps=4, batch=4, warmup=1, val_every=2, val_size=8, d_model=16, seed=0
    )
    assert metrics.startswith("# adamw_eps=")
    rows = model.evaluate(multipliers=[1, 2], n_eval=8)
    assert [r[1] for r in rows] == [1, 2]


def check_closed_forms():
    shapes = [gape_py.kv_cache_shapes("rope", g, 1, 512, 4, 32) for g in (False, True)]
    assert shapes[0] == shapes[1]
    a = gape_py.effective_context_length(1.0, 1.0, 1.0, 1024.0, 0.05)
    b = gape_py.effective_context_length(1.0, 1.0, 2.0, 1024.0, 0.05)
    assert abs(a - 2 * b) < 1e-9


if __name__ == "__main__":
    check_mask_paths()
    check_suites()
    check_data_and_model()
    check_training()
    check_closed_forms()
    print("gape_py smoke test passed")
