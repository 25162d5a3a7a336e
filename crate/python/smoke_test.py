"""Smoke test for the chipnet Python extension.

Build the extension first:

    cargo build -p chipnet-python --release

then run `python3 python/smoke_test.py`. The script copies
target/release/libchipnet.so to a temporary directory as chipnet.so and
imports it from there. Set CHIPNET_LIB to use a different build.
"""

import importlib
import math
import os
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def import_chipnet(workdir):
    lib = pathlib.Path(os.environ.get("CHIPNET_LIB", ROOT / "target" / "release" / "libchipnet.so"))
    if not lib.is_file():
        sys.exit(f"extension not found at {lib}; run `cargo build -p chipnet-python --release`")
    shutil.copy(lib, workdir / "chipnet.so")
    sys.path.insert(0, str(workdir))
    return importlib.import_module("chipnet")


def check_projections(cn):
    assert cn.logistic(0.0, 3.0) == 0.5
    assert abs(cn.logistic(1.0, 2.0, midpoint=0.5) - 1 / (1 + math.exp(-1.0))) < 1e-12
    for gamma in (1.0, 2.0, 8.0, 32.0, 256.0):
        assert abs(cn.heaviside(0.0, gamma)) < 1e-12
        assert abs(cn.heaviside(1.0, gamma) - 1.0) < 1e-12
    assert cn.heaviside(0.3, 0.0) == 0.3
    assert cn.logistic_round(0.5) == 0.5
    assert cn.logistic_round(0.9) > 0.99


def check_shape(cn):
    shape = cn.NetworkShape.chain(3, [(4, 16, 9), (4, 16, 9), (8, 4, 9)])
    assert len(shape) == 3 and shape.total_channels == 16
    assert shape.mask_layout() == [4, 4, 8]
    ones = [1.0] * 16
    for kind in ("channel", "volume", "parameter", "flops"):
        assert abs(shape.budget(kind, ones) - 1.0) < 1e-12, kind
        assert len(shape.budget_gradient(kind, ones)) == 16
    half = [1.0, 0.0] * 8
    assert abs(shape.budget("channel", half) - 0.5) < 1e-12

    z = [i / 16 for i in range(16)]
    keep = shape.hard_prune(z, "channel", 0.25)
    assert keep == [False] * 12 + [True] * 4

    again = cn.NetworkShape.from_description(shape.description())
    assert again.fingerprint() == shape.fingerprint()

    try:
        shape.budget("area", ones)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown budget kind accepted")


def check_run(cn, workdir):
    out = workdir / "run"
    config = f"""
out_dir = "{out}"
seed = 5

[data]
batch_size = 8

[data.synth]
classes = 3
samples_per_class = 16
image_size = 8

[model]
preset = "tiny-cnn"
widths = [4, 4, 6, 6]

[pretrain]
epochs = 2

[prune]
epochs = 3

[finetune]
epochs = 1
"""
    run = cn.Run(config, ["prune.target=0.5"])
    assert pathlib.Path(run.out_dir) == out

    pre = run.pretrain()
    assert len(pre["records"]) == 2
    pruned = run.prune()
    assert pruned["complete"]
    assert pruned["budgets"]["channel"] <= 0.5

    ckpt = cn.Checkpoint.load(str(out / "prune.ckpt"))
    assert ckpt.stage == "prune"
    assert ckpt.shape.total_channels == 20
    keep = ckpt.hard_mask()
    assert keep is not None and len(keep) == 20
    name = ckpt.array_names()[0]
    dims, values = ckpt.array(name)
    assert math.prod(dims) == len(values)
    assert ckpt.config()["prune"]["target"] == 0.5

    fine = run.finetune()
    assert fine["parameters_slim"] < fine["parameters_dense"]
    result = run.evaluate(str(out / "finetune.ckpt"))
    assert 0.0 <= result["result"]["accuracy"] <= 1.0
    report = run.report()
    assert report["channels"] == 20

    reloaded = cn.Run.load(str(out / "manifest-prune.json"))
    assert "tiny-cnn" in reloaded.to_toml()

    try:
        cn.Run(config, ["prune.target=1.5"])
    except ValueError:
        pass
    else:
        raise AssertionError("invalid target accepted")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        workdir = pathlib.Path(tmp)
        cn = import_chipnet(workdir)
        check_projections(cn)
        check_shape(cn)
        check_run(cn, workdir)
        print(f"chipnet {cn.__version__}: smoke test passed")


if __name__ == "__main__":
    main()
