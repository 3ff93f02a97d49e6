"""Neural blocks: MLP, attention, layer-norm params, weight-file round trips."""

import json

import numpy as np
import pytest

from descriptor_slam import autodiff as ad
from descriptor_slam.autodiff import Tape
from descriptor_slam.nn import (
    ParameterStore,
    WeightFileError,
    add_attention_params,
    linear_forward,
    load_weights,
    mlp_forward,
    multi_head_attention,
    save_weights,
)

from .test_autodiff import finite_difference


class TestParameterStore:
    def test_deterministic_initialization(self):
        a, b = ParameterStore(7), ParameterStore(7)
        a.add_linear("l", 8, 4)
        b.add_linear("l", 8, 4)
        np.testing.assert_array_equal(a["l.w"], b["l.w"])

    def test_xavier_bound(self):
        store = ParameterStore(0)
        store.add_linear("l", 10, 6)
        bound = np.sqrt(6.0 / 16.0)
        assert np.abs(store["l.w"]).max() <= bound
        np.testing.assert_array_equal(store["l.b"], np.zeros(6))

    def test_unknown_parameter(self):
        with pytest.raises(WeightFileError):
            ParameterStore()["missing"]


class TestMlp:
    def test_zero_weights_zero_output(self):
        store = ParameterStore(0)
        store.add_mlp("m", (3, 4, 2))
        store["m.l0.w"] = np.zeros((3, 4))
        store["m.l1.w"] = np.zeros((4, 2))
        tape = Tape()
        out = mlp_forward(tape, store, "m", tape.constant(np.ones((5, 3))), (3, 4, 2))
        np.testing.assert_array_equal(out.data, np.zeros((5, 2)))

    def test_identity_single_layer(self):
        store = ParameterStore(0)
        store.add_linear("m.l0", 3, 3)
        store["m.l0.w"] = np.eye(3)
        tape = Tape()
        x = np.random.default_rng(0).uniform(-1, 1, (4, 3))
        out = mlp_forward(tape, store, "m", tape.constant(x), (3, 3))
        np.testing.assert_allclose(out.data, x, atol=1e-15)

    def test_matches_independent_forward_oracle(self):
        rng = np.random.default_rng(1)
        store = ParameterStore(1)
        store.add_mlp("m", (4, 5, 2))
        x = rng.uniform(-1, 1, (3, 4))
        # hand-rolled forward with the same weights
        h = x @ store["m.l0.w"] + store["m.l0.b"]
        h = np.maximum(h, 0.0)
        expected = h @ store["m.l1.w"] + store["m.l1.b"]
        tape = Tape()
        out = mlp_forward(tape, store, "m", tape.constant(x), (4, 5, 2))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_wrong_input_dim_rejected(self):
        store = ParameterStore(0)
        store.add_mlp("m", (4, 2))
        tape = Tape()
        with pytest.raises(ad.ShapeError):
            mlp_forward(tape, store, "m", tape.constant(np.zeros((2, 3))), (4, 2))


class TestAttention:
    def _store(self, dim=8, seed=0):
        store = ParameterStore(seed)
        add_attention_params(store, "attn", dim)
        return store

    def test_single_keyval_row_degenerate_softmax(self):
        store = self._store()
        tape = Tape()
        rng = np.random.default_rng(2)
        queries = tape.constant(rng.uniform(-1, 1, (5, 8)))
        keyval = tape.constant(rng.uniform(-1, 1, (1, 8)))
        out = multi_head_attention(tape, store, "attn", queries, keyval, heads=2)
        # softmax over one element is 1: every row equals Wo @ (v of that row)
        v = keyval.data @ store["attn.v.w"] + store["attn.v.b"]
        expected = v @ store["attn.o.w"] + store["attn.o.b"]
        np.testing.assert_allclose(out.data, np.tile(expected, (5, 1)), atol=1e-12)

    def test_key_permutation_invariance(self):
        store = self._store(seed=3)
        rng = np.random.default_rng(3)
        q = rng.uniform(-1, 1, (4, 8))
        kv = rng.uniform(-1, 1, (6, 8))
        perm = rng.permutation(6)

        def run(kv_arr):
            tape = Tape()
            return multi_head_attention(
                tape, store, "attn", tape.constant(q), tape.constant(kv_arr), heads=4
            ).data

        np.testing.assert_allclose(run(kv), run(kv[perm]), atol=1e-12)

    def test_self_attention_row_equivariance(self):
        store = self._store(seed=4)
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, (5, 8))
        perm = rng.permutation(5)

        def run(arr):
            tape = Tape()
            t = tape.constant(arr)
            return multi_head_attention(tape, store, "attn", t, t, heads=2).data

        np.testing.assert_allclose(run(x)[perm], run(x[perm]), atol=1e-12)

    def test_dim_not_divisible_rejected(self):
        store = self._store()
        tape = Tape()
        x = tape.constant(np.zeros((2, 8)))
        with pytest.raises(ad.ShapeError):
            multi_head_attention(tape, store, "attn", x, x, heads=3)

    def test_query_projection_gradient_vs_finite_differences(self):
        store = self._store(seed=5)
        rng = np.random.default_rng(5)
        q_in = rng.uniform(-1, 1, (3, 8))
        kv_in = rng.uniform(-1, 1, (4, 8))

        def loss_fn(wq):
            store["attn.q.w"] = wq
            tape = Tape()
            out = multi_head_attention(
                tape, store, "attn", tape.constant(q_in), tape.constant(kv_in), heads=2
            )
            return float(ad.sum_all(ad.square(out)).data)

        w0 = store["attn.q.w"].copy()
        fd = finite_difference(loss_fn, w0.copy())
        store["attn.q.w"] = w0
        tape = Tape()
        out = multi_head_attention(
            tape, store, "attn", tape.constant(q_in), tape.constant(kv_in), heads=2
        )
        grads = ad.backward(tape, ad.sum_all(ad.square(out)), store)
        err = np.abs(grads["attn.q.w"] - fd) / np.maximum(np.abs(fd), 1e-3)
        assert err.max() < 1e-5


class TestWeightFiles:
    def test_empty_store_round_trip(self, tmp_path):
        path = tmp_path / "w.bin"
        save_weights(ParameterStore(0), path)
        assert len(load_weights(path)) == 0

    def test_single_tensor_round_trip_bit_identical(self, tmp_path):
        store = ParameterStore(0)
        store["m"] = np.array([[1.5, -2.25], [0.125, 4.0]])  # exact in float32
        path = tmp_path / "w.bin"
        save_weights(store, path)
        loaded = load_weights(path)
        np.testing.assert_array_equal(loaded["m"], store["m"])

    def test_randomized_store_file_round_trip_byte_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        store = ParameterStore(0)
        for i in range(10):
            store[f"p{i}"] = rng.uniform(-1, 1, rng.integers(1, 5, size=rng.integers(1, 3)))
        p1 = tmp_path / "a.bin"
        p2 = tmp_path / "b.bin"
        save_weights(store, p1)
        save_weights(load_weights(p1), p2)  # file -> store -> file
        assert p1.read_bytes() == p2.read_bytes()  # per-byte comparison

    def test_manifest_sidecar_lists_names_and_shapes(self, tmp_path):
        store = ParameterStore(0)
        store["a"] = np.zeros((2, 3))
        path = tmp_path / "w.bin"
        save_weights(store, path)
        manifest = json.loads((tmp_path / "w.bin.manifest.json").read_text())
        assert manifest["parameters"] == [{"name": "a", "shape": [2, 3]}]

    def test_manifest_mismatch_rejected(self, tmp_path):
        store = ParameterStore(0)
        store["a"] = np.zeros((2, 3))
        path = tmp_path / "w.bin"
        save_weights(store, path)
        bad = {"parameters": [{"name": "b", "shape": [2, 3]}]}
        with pytest.raises(WeightFileError, match="mismatch"):
            load_weights(path, expected_manifest=bad)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "w.bin"
        path.write_bytes(b"XXXX" + b"\0" * 16)
        with pytest.raises(WeightFileError, match="magic"):
            load_weights(path)

    def test_version_mismatch_rejected(self, tmp_path):
        import struct

        path = tmp_path / "w.bin"
        path.write_bytes(b"DPMW" + struct.pack("<II", 99, 0))
        with pytest.raises(WeightFileError, match="version"):
            load_weights(path)
