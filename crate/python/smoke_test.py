"""Smoke test for the dsva extension.

Build first:  cargo build --release -p dsva-py
The script copies target/release/libdsva.so next to itself as dsva.so.
"""

import math
import os
import shutil
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.dirname(HERE)


def load():
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libdsva.so")
        if os.path.exists(lib):
            shutil.copy(lib, os.path.join(HERE, "dsva.so"))
            break
    sys.path.insert(0, HERE)
    import dsva

    return dsva


def main():
    dsva = load()
    T = dsva.Tensor

    assert dsva.dice_loss(T([4], [1.0] * 4), T([4], [1.0] * 4)) == 0.0
    assert abs(dsva.ce_loss(T([1], [0.5]), T([1], [1.0])) - math.log(2)) < 1e-12
    assert dsva.ce_loss(T([2], [1.0, 0.0]), T([2], [0.0, 1.0]), "squared_error") == 1.0
    assert dsva.ortho_loss(T.identity(2), T.identity(2)) == 2.0
    assert dsva.gradient_reversal_grad(T([2], [0.3, -0.7]), 1.0).data == [-1.0, -1.0]
    assert abs(dsva.iou([0.0, 0.9, 0.9, 0.0], [1, 1, 0, 0]) - 1 / 3) < 1e-12

    ds = dsva.Dataset.generate(3, 6, height=32, width=32, objects=2)
    assert len(ds) == 6 and ds.height == 32
    blob = ds.to_bytes()
    assert dsva.Dataset.from_bytes(blob).to_bytes() == blob
    try:
        dsva.Dataset.from_bytes(blob[:-1])
        raise AssertionError("truncated dataset accepted")
    except ValueError:
        pass
    scene = ds.scene(0)
    assert len(scene["image"]) == 32 * 32 * 3 and scene["label"]

    cfg = dsva.RunConfig(overrides=["run.seed=5"])
    assert "seed = 5" in cfg.to_toml()
    try:
        dsva.RunConfig(overrides=["model.nope=1"])
        raise AssertionError("unknown key accepted")
    except ValueError:
        pass

    checks = dsva.grad_check()
    assert checks and all(ok for _, ok, _ in checks)

    row = dsva.club_bench(0.0, samples=2000, fit_steps=300)
    assert abs(row["estimate"]) < 0.1

    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "scenes.bin")
        dsva.Dataset.generate(0, 36, height=32, width=32, objects=2).write(data)
        sets = [
            f"data.path={data!r}".replace("'", '"'),
            f"run.out_dir={os.path.join(tmp, 'run')!r}".replace("'", '"'),
            "data.scenes=36",
            "data.eval_scenes=6",
            "data.generation.height=32",
            "data.generation.width=32",
            "data.factors.reference_scenes=32",
            "model.blocks=1",
            "phase1.steps=3",
            "phase1.batch=2",
            "phase2.steps=3",
            "phase2.batch=2",
        ]
        cfg = dsva.RunConfig(overrides=sets)
        p1 = dsva.pretrain_text(cfg)
        p2 = dsva.train_decouple(cfg, p1["checkpoint"])
        assert p2["text_decoder_checksum"][0] == p2["text_decoder_checksum"][1]
        report = dsva.evaluate(cfg, p2["checkpoint"], iterations=0)
        assert 0.0 <= report["miou"] <= 1.0

    print("smoke test ok:", len(checks), "gradient checks,", f"eval mIoU {report['miou']:.3f}")


if __name__ == "__main__":
    main()
