import json

import numpy as np
import pytest

from structprune import tensor as T
from structprune.arch import make_densenet_bc, make_wrn
from structprune.checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from structprune.layers import apply_mask, build_network


@pytest.mark.parametrize("desc", [make_wrn(10, 1), make_densenet_bc(16, 4)], ids=["wrn", "densenet"])
def test_round_trip_is_bit_identical(tmp_path, desc):
    net = build_network(desc, seed=2)
    apply_mask(net.blocks[1], 0)
    for _, buf in net.named_buffers():
        buf[:] = np.random.default_rng(0).uniform(0.5, 2, buf.shape)
    root = save_checkpoint(tmp_path / "ck", net, {"lr": 0.01}, {"note": "x"})
    again, manifest = load_checkpoint(root)
    assert manifest["meta"] == {"note": "x"} and manifest["optimizer"] == {"lr": 0.01}
    for (n, p), (m, q) in zip(net.named_parameters(), again.named_parameters()):
        assert n == m and p.data.tobytes() == q.data.tobytes()
    for (_, a), (_, b) in zip(net.named_buffers(), again.named_buffers()):
        assert a.tobytes() == b.tobytes()
    assert [b.mask.active for b in again.blocks] == [b.mask.active for b in net.blocks]
    x = T.Tensor(np.ones((1, 3, 32, 32)), dtype=T.DEFAULT_DTYPE)
    net.eval()
    again.eval()
    with T.no_grad():
        np.testing.assert_array_equal(net(x).data, again(x).data)


def test_blobs_are_raw_little_endian_f32(tmp_path):
    net = build_network(make_wrn(10, 1), seed=0)
    root = save_checkpoint(tmp_path / "ck", net)
    manifest = read_manifest(root)
    for entry in manifest["tensors"]:
        size = (root / entry["file"]).stat().st_size
        assert size == 4 * int(np.prod(entry["shape"]))
    first = manifest["tensors"][0]
    arr = np.frombuffer((root / first["file"]).read_bytes(), dtype="<f4")
    np.testing.assert_array_equal(arr, dict(net.named_parameters())[first["name"]].data.ravel())


def test_corrupt_manifest(tmp_path):
    root = save_checkpoint(tmp_path / "ck", build_network(make_wrn(10, 1), seed=0))
    (root / "manifest.json").write_text("{not json")
    with pytest.raises(CheckpointError, match="invalid JSON"):
        load_checkpoint(root)
    (root / "manifest.json").write_text(json.dumps({"schema": "other/1"}))
    with pytest.raises(CheckpointError, match="schema"):
        load_checkpoint(root)


def test_truncated_blob(tmp_path):
    root = save_checkpoint(tmp_path / "ck", build_network(make_wrn(10, 1), seed=0))
    blob = root / read_manifest(root)["tensors"][0]["file"]
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="bytes"):
        load_checkpoint(root)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)
