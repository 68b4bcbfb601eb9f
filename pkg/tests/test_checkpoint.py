import json
import tempfile
import unittest
from pathlib import Path

import numpy as np

from cooklab.checkpoint import (
    FORMAT_VERSION,
    adam_state_from,
    load_checkpoint,
    make_checkpoint,
    resume_epoch,
    save_checkpoint,
    write_checkpoint,
)
from cooklab.errors import DataError
from cooklab.nn import AdamState


class TestCheckpoint(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        rng = np.random.default_rng(0)
        self.params = [rng.normal(size=(3, 4)), rng.normal(size=4), np.array(2.5)]

    def tearDown(self):
        self.tmp.cleanup()

    def test_params_round_trip_as_float32(self):
        path = self.dir / "m.ckpt"
        save_checkpoint(path, "mlp", self.params, {"sizes": [3, 4]}, "abc123", meta={"tool": "knife"})
        ckpt = load_checkpoint(path, "mlp")
        self.assertEqual(ckpt.architecture, "mlp")
        self.assertEqual(ckpt.meta, {"tool": "knife"})
        self.assertEqual(ckpt.header["config_hash"], "abc123")
        self.assertEqual(ckpt.header["param_count"], 12 + 4 + 1)
        for saved, loaded in zip(self.params, ckpt.params):
            self.assertEqual(loaded.shape, saved.shape)
            np.testing.assert_array_equal(loaded, saved.astype(np.float32))
        self.assertIsNone(ckpt.optimizer)
        self.assertEqual(resume_epoch(ckpt), 0)

    def test_optimizer_state_round_trip(self):
        state = AdamState([p * 0.1 for p in self.params], [p * p for p in self.params], step=7)
        ckpt = make_checkpoint("mlp", self.params, {}, "h", optimizer=state, epoch=3)
        path = self.dir / "opt.ckpt"
        write_checkpoint(path, ckpt)
        loaded = load_checkpoint(path)
        restored = adam_state_from(loaded)
        self.assertEqual(restored.step, 7)
        np.testing.assert_allclose(restored.m[0], (self.params[0] * 0.1).astype(np.float32))
        np.testing.assert_allclose(restored.v[1], (self.params[1] ** 2).astype(np.float32))
        self.assertEqual(resume_epoch(loaded), 4)

    def test_optimizer_can_be_left_out(self):
        state = AdamState.zeros_like(self.params)
        path = self.dir / "slim.ckpt"
        write_checkpoint(path, make_checkpoint("mlp", self.params, {}, "h", optimizer=state, epoch=0), with_optimizer=False)
        loaded = load_checkpoint(path)
        self.assertIsNone(loaded.optimizer)
        self.assertEqual(path.stat().st_size - len(path.read_bytes().split(b"\n", 1)[0]) - 1, 17 * 4)

    def test_architecture_mismatch(self):
        path = self.dir / "m.ckpt"
        save_checkpoint(path, "mlp", self.params, {}, "h")
        with self.assertRaises(DataError) as ctx:
            load_checkpoint(path, "gnn")
        self.assertEqual(ctx.exception.code, "ARCHITECTURE")

    def test_unsupported_version(self):
        path = self.dir / "old.ckpt"
        header = {"format_version": FORMAT_VERSION + 1, "architecture": "mlp", "param_count": 0, "param_shapes": []}
        path.write_bytes(json.dumps(header).encode() + b"\n")
        with self.assertRaises(DataError) as ctx:
            load_checkpoint(path)
        self.assertEqual(ctx.exception.code, "FORMAT_VERSION")

    def test_truncated_blob(self):
        path = self.dir / "m.ckpt"
        save_checkpoint(path, "mlp", self.params, {}, "h")
        path.write_bytes(path.read_bytes()[:-4])
        with self.assertRaises(DataError) as ctx:
            load_checkpoint(path)
        self.assertEqual(ctx.exception.code, "BLOB_SIZE")
        path.write_bytes(path.read_bytes()[:-2])
        with self.assertRaises(DataError) as ctx:
            load_checkpoint(path)
        self.assertEqual(ctx.exception.code, "BLOB_SIZE")

    def test_missing_file(self):
        with self.assertRaises(DataError) as ctx:
            load_checkpoint(self.dir / "nope.ckpt")
        self.assertEqual(ctx.exception.code, "NO_DATA")


if __name__ == "__main__":
    unittest.main()
