"""Smoke test for the iedp_py extension.

Usage:
    cargo build --release -p iedp-py
    python3 python/smoke_test.py [--checkpoint RUN/model.bin --image IMG.png]

The module is imported from the environment if installed, otherwise from
the shared library in target/release or target/debug.
"""

import argparse
import importlib
import importlib.util
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    try:
        return importlib.import_module("iedp_py")
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libiedp_py.so"
        if lib.exists():
            tmp = Path(tempfile.mkdtemp())
            shutil.copy(lib, tmp / "iedp_py.so")
            spec = importlib.util.spec_from_file_location("iedp_py", tmp / "iedp_py.so")
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit("iedp_py not found; run `cargo build --release -p iedp-py` first")


def close(a, b, tol=1e-9):
    return all(abs(x - y) <= tol for x, y in zip(a, b)) and len(a) == len(b)


def check_tensors(m):
    a = m.Tensor([1, 2, 3, 4, 5, 6], [2, 3])
    b = m.Tensor([1, 0, 0, 1, 2, -1], [3, 2])
    out, (ga, gb) = m.value_and_grad("matmul", [a, b])
    assert out.shape == [2, 2]
    assert close(out.tolist(), [7, -1, 16, -1])
    assert close(ga.tolist(), [1, 1, 1, 1, 1, 1])
    assert close(gb.tolist(), [5, 5, 7, 7, 9, 9])

    x = m.Tensor.randn([4, 3], std=1.5, seed=3)
    y, (gx,) = m.value_and_grad("tanh", [x])
    expect = [1 - math.tanh(v) ** 2 for v in x.tolist()]
    assert close(gx.tolist(), expect, 1e-12)
    assert close(y.tolist(), [math.tanh(v) for v in x.tolist()], 1e-12)

    try:
        m.value_and_grad("add", [x])
    except ValueError:
        pass
    else:
        raise AssertionError("arity error not raised")


def check_gradcheck(m):
    rows = m.gradcheck("ops")
    assert rows and all(passed for _, _, passed in rows), rows
    assert any(label == "layer_norm" for label, _, _ in rows)


def check_data_and_metrics(m):
    s = m.generate_sample(5, classes=6, size=64)
    assert len(s["image"]) == 3 * 64 * 64
    assert len(s["mask"]) == len(s["depth"]) == 64 * 64
    assert sorted(set(s["mask"])) == s["classes"]
    assert min(s["depth"]) > 0
    assert m.generate_sample(5) == s

    prompt = m.build_prompt(s["classes"])
    assert all(w in s["caption"] for w in prompt.split())

    assert m.miou(s["mask"], s["mask"], 6) == 1.0
    d = m.depth_metrics(s["depth"], s["depth"])
    assert d["rmse"] == 0.0 and d["delta1"] == 1.0
    scaled = [1.3 * v for v in s["depth"]]
    assert m.depth_metrics(scaled, s["depth"])["delta1"] == 0.0

    assert m.poly_lr(0, 100) == 1e-3
    assert abs(m.poly_lr(50, 100, 1.0, 1.0) - 0.5) < 1e-12


def check_config(m):
    paths = "data = d\nencoder_checkpoint = e.bin\nout_dir = o\n"
    text = m.parse_config(paths + "task = depth\nmax_iters = 10\n")
    assert "task = depth" in text and "max_iters = 10" in text
    try:
        m.parse_config(paths + "learning_rate = 0.1\n")
    except ValueError as e:
        assert "learning_rate" in str(e)
    else:
        raise AssertionError("unknown key accepted")


def check_model(m, checkpoint, image):
    model = m.Model.load(checkpoint)
    out = model.predict_png(image)
    k = model.num_classes if model.task == "segmentation" else 1
    assert out.shape[0] == k, out.shape
    print(f"model: {model.task}, prediction {out.shape}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint")
    ap.add_argument("--image")
    args = ap.parse_args()

    m = load_module()
    check_tensors(m)
    check_gradcheck(m)
    check_data_and_metrics(m)
    check_config(m)
    if args.checkpoint and args.image:
        check_model(m, args.checkpoint, args.image)
    print("smoke test passed")


if __name__ == "__main__":
    main()
