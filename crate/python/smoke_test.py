"""Smoke test for the `air` extension module.

Build and install it first:

    pip install --no-build-isolation ./crates/py
    python python/smoke_test.py
"""

import json
import math
import tempfile
from pathlib import Path

import air


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def check_math():
    assert close(air.cosine_similarity([1.0, 0.0], [1.0, 1.0]), 1 / math.sqrt(2))
    p = air.temperature_softmax([0.3, 0.1, 0.2], 0.01)
    assert close(sum(p), 1.0)
    assert air.fuse(p, [0.0, 1.0, 0.0], 0.0) == p
    assert close(sum(air.fuse(p, [0.0, 1.0, 0.0], 1 / 6)), 1 + 1 / 6)
    assert air.argmax([0.2, 0.4, 0.4]) == 1
    assert abs(air.harmonic_mean(0.8, 0.6) - 0.68571) < 1e-5
    try:
        air.temperature_softmax([0.1], -1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative temperature accepted")


def check_world():
    w = air.World()
    assert (w.num_classes, w.dim) == (10, 64)
    text = w.zero_shot_text()
    assert len(text) == w.num_classes
    xs, ys = w.test_embeddings(), w.test_labels()
    correct = sum(air.argmax(w.predict_zero_shot(x)) == y for x, y in zip(xs, ys))
    print(f"zero-shot test accuracy {correct / len(ys):.3f}")
    assert w.zero_prompt_loss(xs[:8], ys[:8]) > 0


def check_run():
    cfg = json.loads(air.default_config())
    cfg["trainer"]["iterations"] = 2
    cfg["generator"]["num_synthetic"] = 20
    text = json.dumps(cfg)
    a = json.loads(air.run_experiment(text))
    b = json.loads(air.run_experiment(text))
    assert a["trajectory_sha256"] == b["trajectory_sha256"]
    assert len(a["records"]) == 2
    print(f"two-iteration run: test accuracy {a['final_metrics']['accuracy']:.3f}")
    with tempfile.TemporaryDirectory() as tmp:
        row = json.loads(air.run_to_dir(tmp, text))
        assert row["run_id"] == a["config_hash"][:16]
        assert (Path(tmp) / "trace.json").is_file()
    try:
        air.run_experiment('{"trainer": {"lamda": 1}}')
    except ValueError as e:
        assert "trainer" in str(e)
    else:
        raise AssertionError("unknown key accepted")


def check_selftest():
    results = air.selftest()
    failed = [name for name, ok, _ in results if not ok]
    assert not failed, failed


if __name__ == "__main__":
    check_math()
    check_world()
    check_run()
    check_selftest()
    print("smoke test passed")
