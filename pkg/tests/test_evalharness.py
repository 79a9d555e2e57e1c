import json
import struct

import numpy as np
import pytest

from snprune.errors import ContractError, ParseError, ShapeError
from snprune.evalharness import (
    Dataset,
    LayerRecord,
    PruneReport,
    emit_report,
    evaluate,
    fit_inputs,
    load_dataset,
    read_idx,
    read_report,
    sample_calibration,
    white_noise,
    write_idx,
)
from snprune.model import Layer, Network, dense_mlp


def write_tiny_idx(tmp_path):
    """Four 2x2 byte images, built byte by byte."""
    pixels = bytes([0, 255, 0, 0, 0, 0, 255, 0, 255, 255, 0, 0, 0, 0, 0, 255])
    (tmp_path / "img").write_bytes(struct.pack(">IIII", 0x803, 4, 2, 2) + pixels)
    (tmp_path / "lab").write_bytes(struct.pack(">II", 0x801, 4) + bytes([1, 0, 2, 1]))
    return tmp_path / "img", tmp_path / "lab"


def test_idx_hand_fixture(tmp_path):
    img, lab = write_tiny_idx(tmp_path)
    ds = load_dataset(img, labels_path=lab, num_classes=3)
    assert ds.inputs.shape == (4, 2, 2)
    np.testing.assert_array_equal(ds.inputs[0], [[0.0, 1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(ds.labels, [1, 0, 2, 1])


def test_idx_write_read_round_trip(tmp_path, rng):
    for a in (rng.integers(0, 256, (3, 4, 5)).astype(np.uint8), rng.standard_normal((6, 2)),
              rng.integers(-5, 5, 7).astype(np.int32)):
        back = read_idx(write_idx(tmp_path / "x", a))
        np.testing.assert_array_equal(back, a)


@pytest.mark.parametrize(
    "payload, where",
    [
        (b"\x01\x02", "byte 0"),
        (struct.pack(">I", 0x12345678), "byte 0"),
        (struct.pack(">II", 0x803, 4), "byte 4"),
        (struct.pack(">IIII", 0x803, 4, 2, 2) + bytes(10), "byte 26"),
        (struct.pack(">II", 0x801, 2) + bytes(3), "byte 10"),
    ],
)
def test_idx_parse_errors_carry_position(tmp_path, payload, where):
    (tmp_path / "bad").write_bytes(payload)
    with pytest.raises(ParseError, match=where):
        read_idx(tmp_path / "bad")


def test_idx_label_out_of_range(tmp_path):
    img, lab = write_tiny_idx(tmp_path)
    with pytest.raises(ParseError, match="byte 10"):
        load_dataset(img, labels_path=lab, num_classes=2)


def test_idx_count_mismatch(tmp_path):
    img, _ = write_tiny_idx(tmp_path)
    (tmp_path / "lab3").write_bytes(struct.pack(">II", 0x801, 3) + bytes([0, 0, 0]))
    with pytest.raises(ParseError):
        load_dataset(img, labels_path=tmp_path / "lab3")


def test_csv_loading_and_errors(tmp_path):
    good = tmp_path / "good.csv"
    good.write_text("1,0.5,2\n0,1,1\n\n2,3,4\n")
    ds = load_dataset(good, format="csv", num_classes=3)
    np.testing.assert_array_equal(ds.labels, [1, 0, 2])
    np.testing.assert_array_equal(ds.inputs, [[0.5, 2.0], [1.0, 1.0], [3.0, 4.0]])

    ragged = tmp_path / "ragged.csv"
    ragged.write_text("1,0.5,2\n0,1\n")
    with pytest.raises(ParseError, match="line 2"):
        load_dataset(ragged, format="csv")

    bad = tmp_path / "bad.csv"
    bad.write_text("1,0.5\nx,1\n")
    with pytest.raises(ParseError, match="line 2"):
        load_dataset(bad, format="csv")

    oor = tmp_path / "oor.csv"
    oor.write_text("5,0.5\n")
    with pytest.raises(ParseError, match="line 1"):
        load_dataset(oor, format="csv", num_classes=3)


def test_dataset_contracts():
    with pytest.raises(ShapeError):
        Dataset(np.zeros((3, 2)), np.zeros(2, dtype=int))
    with pytest.raises(ContractError):
        load_dataset("x", format="parquet")


def test_calibration_sampling_is_deterministic(rng):
    ds = Dataset(rng.standard_normal((50, 3)), np.arange(50) % 4)
    a = sample_calibration(ds, 10, seed=7)
    b = sample_calibration(ds, 10, seed=7)
    c = sample_calibration(ds, 10, seed=8)
    assert a.inputs.tobytes() == b.inputs.tobytes()
    assert a.inputs.tobytes() != c.inputs.tobytes()
    assert len(a) == 10 and a.split == "calibration"
    assert sample_calibration(ds, "all") is ds
    with pytest.raises(ContractError):
        sample_calibration(ds, 51)


def test_white_noise_reproducible():
    a, b = white_noise((3, 4), 5, seed=2), white_noise((3, 4), 5, seed=2)
    assert a.inputs.shape == (5, 3, 4)
    assert a.inputs.tobytes() == b.inputs.tobytes()


def test_fit_inputs_reshapes(tmp_path):
    img, lab = write_tiny_idx(tmp_path)
    ds = load_dataset(img, labels_path=lab)
    net = dense_mlp([np.ones((3, 4))])
    assert fit_inputs(ds, net).shape == (4, 4)
    with pytest.raises(ShapeError):
        fit_inputs(ds, dense_mlp([np.ones((3, 5))]))


def test_evaluate_hand_example():
    # identity logits: the prediction is the argmax of the input itself
    net = Network((Layer("dense", weight=np.eye(3)),), (3,))
    x = np.array([[2.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 5.0, 0.0], [1.0, 0.0, 0.0]])
    acc, loss = evaluate(net, Dataset(x, np.array([0, 2, 0, 1]), num_classes=3))
    assert acc == 0.5
    lse = lambda v: np.log(np.exp(v).sum())  # noqa: E731
    expect = np.mean([lse(x[0]) - 2.0, lse(x[1]) - 1.0, lse(x[2]) - 0.0, lse(x[3]) - 0.0])
    assert loss == pytest.approx(expect, rel=1e-12)


def test_evaluate_batches_do_not_matter(rng):
    net = dense_mlp([rng.standard_normal((6, 4)), rng.standard_normal((3, 6))])
    ds = Dataset(rng.standard_normal((37, 4)), rng.integers(0, 3, 37), num_classes=3)
    a = evaluate(net, ds, batch_size=5)
    b = evaluate(net, ds, batch_size=1000)
    assert a[0] == b[0] and a[1] == pytest.approx(b[1], rel=1e-12)


def test_fixture_model_accuracy(digits_net, digits_test):
    acc, _ = evaluate(digits_net, digits_test)
    assert acc >= 0.97


def _report():
    return PruneReport(
        layers=[LayerRecord("fc1", 128, 64, 0.1 + 0.2), LayerRecord("fc2", 128, 128, 1.0)],
        flops_before=1000, flops_after=300, params_before=500, params_after=150,
        acc_before=0.98, acc_after=0.9660000000000001, method="unnorm_zca", mode="uniform",
    )


def test_report_json_round_trip_exact(tmp_path):
    r = _report()
    back = read_report(emit_report(r, tmp_path / "r.json"))
    assert back == r
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["schema_version"] == 1
    assert d["totals"]["speedup"] == 1000 / 300
    assert d["metrics"]["delta"] == r.acc_after - r.acc_before


def test_report_csv(tmp_path):
    lines = emit_report(_report(), tmp_path / "r.csv", "csv").read_text().splitlines()
    assert lines[0].startswith("layer_id,n_before,keep,retained_variance_fraction,flops_before")
    assert lines[1].startswith("fc1,128,64,0.30000000000000004,")
    total = lines[-1].split(",")
    assert total[:3] == ["TOTAL", "256", "192"]
    assert float(total[8]) == 1000 / 300
    assert len(lines) == 4


def test_report_rejects_unknown_schema(tmp_path):
    (tmp_path / "r.json").write_text(json.dumps({"schema_version": 2}))
    with pytest.raises(ValueError):
        read_report(tmp_path / "r.json")
