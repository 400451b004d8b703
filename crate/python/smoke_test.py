"""Smoke test for the pymehtc extension module.

Build and install first:
    pip install maturin
    pip install --no-build-isolation -e crates/py
"""

import json
import math
import pathlib
import tempfile

import pymehtc


def check_metrics():
    a = [0, 1, 1, 0]
    b = [0, 1, 0, 0]
    assert abs(pymehtc.dice(a, b, 1) - 2 / 3) < 1e-12
    assert pymehtc.dice([0] * 4, [0] * 4, 1) == 1.0
    # two single voxels 3 apart along i with 2 mm spacing
    pred = [1, 0, 0, 0]
    gt = [0, 0, 0, 1]
    assert pymehtc.hausdorff(pred, gt, [4, 1, 1], 1, [2.0, 1.0, 1.0]) == 6.0


def check_origins():
    assert pymehtc.window_origins(256, 128, 0.5) == [0, 64, 128]


def check_contrastive():
    assert abs(pymehtc.contrastive_loss([[1.0, 0.0]], [[0.0, 1.0]], 0.5)) < 1e-12
    za = [[1.0, 0.2], [0.1, 1.0]]
    zb = [[0.9, 0.1], [0.0, 1.0]]
    rows = [[x / math.hypot(*r) for x in r] for r in za + zb]
    sim = [[sum(p * q for p, q in zip(u, v)) / 0.5 for v in rows] for u in rows]
    expect = 0.0
    for i in range(4):
        denom = sum(math.exp(sim[i][k]) for k in range(4) if k != i)
        expect -= math.log(math.exp(sim[i][(i + 2) % 4]) / denom)
    expect /= 4
    assert abs(pymehtc.contrastive_loss(za, zb, 0.5) - expect) < 1e-9


def check_io(tmp):
    v = pymehtc.Volume([3, 2, 2], [float(i) for i in range(12)], spacing=[0.5, 1.0, 2.0], origin=[1.0, 2.0, 3.0])
    path = tmp / "v.nii.gz"
    v.write(str(path))
    back = pymehtc.Volume.read(str(path))
    assert back.dims == [3, 2, 2]
    assert back.data == v.data
    assert all(abs(x - y) < 1e-6 for x, y in zip(back.spacing, v.spacing))
    heart = pymehtc.synthetic_heart(0, size=16)
    assert heart.dims == [16, 16, 16]
    assert max(heart.data) == 8.0


def check_cli(tmp):
    cfg = {
        "seed": 3,
        "schema": "lax4ch",
        "data": {"synthetic": {"count": 2, "extent": [16, 16], "seed": 1}},
        "model": json.loads(pymehtc.model_config(2, 1, 5, [2, 4, 8, 16, 32], window=2)),
        "train": {"patch": [16, 16], "batch_size": 2, "epochs": 2},
    }
    out = tmp / "train"
    manifest = json.loads(pymehtc.run("train", json.dumps(cfg), str(out)))
    assert "model.ckpt" in manifest["outputs"]
    again = json.loads(pymehtc.replay_manifest(str(out / "run_manifest.json"), str(tmp / "replay")))
    assert again["outputs"] == manifest["outputs"]
    model = pymehtc.Model.load(str(out / "model.ckpt"))
    assert model.num_classes == 5
    labels = model.predict([0.5] * (20 * 24), [20, 24], [16, 16])
    assert len(labels) == 20 * 24 and max(labels) < 5
    try:
        pymehtc.run("train", "{}", str(tmp / "bad"))
    except ValueError as e:
        assert "schema" in str(e) or "data" in str(e)
    else:
        raise AssertionError("missing fields were accepted")


def main():
    with tempfile.TemporaryDirectory() as d:
        tmp = pathlib.Path(d)
        for check in (check_metrics, check_origins, check_contrastive):
            check()
        check_io(tmp)
        check_cli(tmp)
    print(f"pymehtc {pymehtc.__version__}: smoke test passed")


if __name__ == "__main__":
    main()
