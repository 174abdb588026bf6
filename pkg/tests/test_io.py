import io as pyio
import json
import locale

import numpy as np
import pytest

from specbound import io
from specbound.data import synthetic_dataset
from specbound.errors import FormatError
from specbound.network import build_cnn, forward
from specbound.tensor import Rng


def write_manifest(tmp_path, layers, blob=b""):
    (tmp_path / "w.bin").write_bytes(blob)
    doc = {"version": io.MANIFEST_VERSION, "layers": layers}
    path = tmp_path / "net.json"
    path.write_text(json.dumps(doc))
    return path


class TestManifest:
    def test_hand_written_fc(self, tmp_path):
        vals = np.array([1.5, -2.0, 0.25, 8.0], dtype="<f4")
        path = write_manifest(
            tmp_path,
            [{"name": "fc", "kind": "fully_connected", "rows": 2, "cols": 2, "dtype": "f32le",
              "blob": "w.bin", "offset": 0, "count": 4, "layout": "row-major [rows][cols]"}],
            vals.tobytes(),
        )
        man = io.load_manifest(path)
        assert man.weights[0].dtype == np.float64
        assert np.array_equal(man.weights[0], [[1.5, -2.0], [0.25, 8.0]])
        assert man.spec().layers[0].rows == 2

    def test_round_trip_bit_identical(self, tmp_path):
        net = build_cnn(Rng(0), (8, 8, 3), (4, 5), num_classes=3, dtype=np.float32)
        p1 = io.save_manifest(tmp_path / "a" / "net.json", net)
        blob1 = (p1.parent / "net.bin").read_bytes()
        man = io.load_manifest(p1)
        p2 = io.save_manifest(tmp_path / "b" / "net.json", man)
        assert (p2.parent / "net.bin").read_bytes() == blob1
        x = Rng(1).uniform(0, 1, (4, 8, 8, 3))
        assert np.allclose(forward(man.to_network(), x), forward(net, x), rtol=1e-5)

    def test_round_trip_with_bias_f64(self, tmp_path):
        net = build_cnn(Rng(0), (8, 8, 1), (2,), num_classes=3, bias=True, padding="valid")
        net = net.with_weights(net.weights(), [Rng(2).normal(l.bias.shape) for l in net.layers])
        path = io.save_manifest(tmp_path / "net.json", net)
        back = io.load_manifest(path).to_network()
        for a, b in zip(net.layers, back.layers):
            assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
            assert (a.padding, a.pool) == (b.padding, b.pool)

    def test_input_shape_inferred(self, tmp_path):
        net = build_cnn(Rng(0), (8, 8, 3), (4,), num_classes=3)
        path = io.save_manifest(tmp_path / "net.json", net)
        doc = json.loads(path.read_text())
        del doc["input_shape"]
        path.write_text(json.dumps(doc))
        assert io.load_manifest(path).to_network().input_shape == (8, 8, 3)

    def test_truncated_blob_names_layer(self, tmp_path):
        net = build_cnn(Rng(0), (8, 8, 3), (4,), num_classes=3, dtype=np.float32)
        path = io.save_manifest(tmp_path / "net.json", net)
        blob = tmp_path / "net.bin"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(FormatError, match="size mismatch") as info:
            io.load_manifest(path)
        assert info.value.layer == "fc"

    def test_unknown_dtype(self, tmp_path):
        path = write_manifest(
            tmp_path,
            [{"name": "L0", "kind": "fully_connected", "rows": 1, "cols": 1, "dtype": "f16le",
              "blob": "w.bin", "offset": 0, "count": 1}],
            b"\0\0",
        )
        with pytest.raises(FormatError, match="L0"):
            io.load_manifest(path)

    def test_bad_offset_and_count(self, tmp_path):
        layer = {"name": "L0", "kind": "fully_connected", "rows": 1, "cols": 2, "dtype": "f64le",
                 "blob": "w.bin", "offset": -8, "count": 2}
        with pytest.raises(FormatError, match="L0"):
            io.load_manifest(write_manifest(tmp_path, [layer], b"\0" * 16))
        layer.update(offset=0, count=3)
        with pytest.raises(FormatError, match="L0"):
            io.load_manifest(write_manifest(tmp_path, [layer], b"\0" * 24))

    def test_bad_version(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"version": "x", "layers": []}))
        with pytest.raises(FormatError):
            io.load_manifest(tmp_path / "m.json")


def cifar_bytes(labels, pixel_values):
    recs = [bytes([lab]) + bytes([val]) * 3072 for lab, val in zip(labels, pixel_values)]
    return b"".join(recs)


class TestCifar:
    def test_two_records(self, tmp_path):
        f = tmp_path / "b.bin"
        f.write_bytes(cifar_bytes([3, 7], [0, 255]))
        ds = io.load_cifar10_binary(f)
        assert len(ds) == 2 and list(ds.labels) == [3, 7]
        assert ds.image_shape == (32, 32, 3)
        assert np.all(ds.images[0] == 0.0) and np.all(ds.images[1] == 1.0)

    def test_channel_major_layout(self, tmp_path):
        rec = bytearray([1]) + bytes([10]) * 1024 + bytes([20]) * 1024 + bytes([30]) * 1024
        rec[1 + 5 * 32 + 6] = 99  # red channel, row 5, column 6
        f = tmp_path / "b.bin"
        f.write_bytes(bytes(rec))
        img = io.load_cifar10_binary(f).images[0] * 255
        assert np.allclose(img[0, 0], [10, 20, 30])
        assert img[5, 6, 0] == pytest.approx(99)

    def test_empty(self, tmp_path):
        f = tmp_path / "e.bin"
        f.write_bytes(b"")
        assert len(io.load_cifar10_binary(f)) == 0

    def test_bad_length(self, tmp_path):
        f = tmp_path / "s.bin"
        f.write_bytes(b"\0" * 3072)
        with pytest.raises(FormatError):
            io.load_cifar10_binary(f)

    def test_bad_label(self, tmp_path):
        f = tmp_path / "l.bin"
        f.write_bytes(cifar_bytes([1, 12], [0, 0]))
        with pytest.raises(FormatError) as info:
            io.load_cifar10_binary(f)
        assert info.value.record == 1

    def test_writer_round_trip(self, tmp_path):
        ds = synthetic_dataset(20, seed=3)
        io.write_cifar10_binary(tmp_path / "s.bin", ds)
        back = io.load_cifar10_binary(tmp_path / "s.bin")
        assert np.array_equal(back.labels, ds.labels)
        assert np.max(np.abs(back.images - ds.images)) <= 1e-7

    def test_npz_round_trip(self, tmp_path):
        ds = synthetic_dataset(5, shape=(4, 4, 1), seed=1)
        ds.provenance[2] = "elastic"
        io.save_dataset(tmp_path / "d.npz", ds)
        back = io.load_dataset(tmp_path / "d.npz")
        assert np.array_equal(back.images, ds.images)
        assert list(back.provenance) == list(ds.provenance)


class TestCsv:
    def test_seventeen_digits(self):
        assert io.fmt(0.1) == "0.10000000000000001"
        assert float(io.fmt(np.pi)) == np.pi
        assert io.fmt(np.int64(3)) == "3" and io.fmt(True) == "1"

    def test_locale_independent(self):
        old = locale.setlocale(locale.LC_NUMERIC)
        try:
            for name in ("de_DE.UTF-8", "fr_FR.UTF-8"):
                try:
                    locale.setlocale(locale.LC_NUMERIC, name)
                    break
                except locale.Error:
                    continue
            buf = pyio.StringIO()
            io.write_csv(buf, ("x",), [(1.5,)])
            assert buf.getvalue() == "x\n1.5\n"
        finally:
            locale.setlocale(locale.LC_NUMERIC, old)


class TestArchitectures:
    def test_builtins(self):
        archs = io.load_architectures()
        assert set(archs) == {"lenet5", "alexnet", "vgg16"}
        assert [a.depth for a in archs.values()] == [5, 8, 16]
        assert io.widest_layer(archs["lenet5"]) == 4704
        assert io.widest_layer(archs["alexnet"]) == 193600
        assert io.widest_layer(archs["vgg16"]) == 224 * 224 * 64
