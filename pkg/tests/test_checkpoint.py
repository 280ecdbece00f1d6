"""Checkpoint container tests.

The format promises two things worth testing literally: save -> load ->
resave produces byte-identical files (canonical JSON header, fixed blob
order), and every stored array comes back bitwise with its trainable /
frozen flags intact.  Error paths get crafted files: wrong magic, a
header that is not JSON, an unknown version, a payload cut short.
"""

import struct

import numpy as np
import pytest

from hialign.autograd import ParameterStore, Tensor, rng_stream
from hialign.checkpoint import (
    config_hash,
    load_checkpoint,
    param_arrays,
    resave_checkpoint,
    save_checkpoint,
    save_from_store,
)
from hialign.exceptions import DataError
from hialign.optim import AdamW
from hialign.trainer import tiny_config


def small_store():
    rng = rng_stream(11, 1)
    store = ParameterStore()
    store.add("enc.w", Tensor(rng.normal(size=(4, 3)), requires_grad=True))
    store.add("enc.b", Tensor(np.zeros(3), requires_grad=True))
    store.add("tau", Tensor(np.asarray(0.07), requires_grad=True))
    store.add("table", Tensor(rng.normal(size=(5, 2))), trainable=False, frozen=True)
    return store


class TestRoundTrip:
    def test_arrays_and_flags_survive(self, tmp_path):
        store = small_store()
        cfg = tiny_config()
        path = tmp_path / "a.ckpt"
        save_from_store(path, store, cfg, "pretrain", 7, 1.25)
        loaded = load_checkpoint(path)

        assert loaded["header"]["kind"] == "pretrain"
        assert loaded["header"]["epoch"] == 7
        assert loaded["header"]["best_metric"] == 1.25
        assert [m["name"] for m in loaded["header"]["params"]] == list(store.names())
        for name, (arr, trainable, frozen) in loaded["params"].items():
            assert np.array_equal(arr, store[name].data)
            assert arr.dtype == store[name].data.dtype
            assert trainable == store.is_trainable(name)
            assert frozen == store.is_frozen(name)

    def test_scalar_parameter_keeps_rank_zero(self, tmp_path):
        store = small_store()
        path = tmp_path / "a.ckpt"
        save_from_store(path, store, tiny_config(), "pretrain", 0, 0.0)
        arrs = param_arrays(load_checkpoint(path))
        assert arrs["tau"].shape == ()
        assert arrs["tau"] == store["tau"].data

    def test_resave_is_byte_identical(self, tmp_path):
        store = small_store()
        first = tmp_path / "a.ckpt"
        second = tmp_path / "b.ckpt"
        save_from_store(first, store, tiny_config(), "finetune", 3, 42.0,
                        extra={"tokens": ["<pad>", "dog"], "gloss_vocab": ["dog"]})
        resave_checkpoint(second, load_checkpoint(first))
        assert first.read_bytes() == second.read_bytes()

    def test_extra_rides_in_header(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_from_store(path, small_store(), tiny_config(), "pretrain", 0, 0.0,
                        extra={"tokens": ["<pad>", "x"]})
        header = load_checkpoint(path)["header"]
        assert header["extra"] == {"tokens": ["<pad>", "x"]}

    def test_no_extra_means_empty_dict(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_from_store(path, small_store(), tiny_config(), "pretrain", 0, 0.0)
        assert load_checkpoint(path)["header"]["extra"] == {}

    def test_param_arrays_helper(self, tmp_path):
        store = small_store()
        path = tmp_path / "a.ckpt"
        save_from_store(path, store, tiny_config(), "pretrain", 0, 0.0)
        arrs = param_arrays(load_checkpoint(path))
        assert set(arrs) == set(store.names())
        assert all(np.array_equal(arrs[n], store[n].data) for n in arrs)


class TestOptimizerState:
    def test_moments_round_trip(self, tmp_path):
        store = small_store()
        opt = AdamW(store, weight_decay=0.01)
        grads = {n: np.ones_like(store[n].data) for n in store.trainable_names()}
        opt.step(grads, 1e-3)
        opt.step(grads, 1e-3)

        path = tmp_path / "a.ckpt"
        save_from_store(path, store, tiny_config(), "pretrain", 2, 0.5, optimizer=opt)
        loaded = load_checkpoint(path)

        assert loaded["opt"]["t"] == 2
        state = opt.state()
        for n in state["m"]:
            assert np.array_equal(loaded["opt"]["m"][n], state["m"][n])
            assert np.array_equal(loaded["opt"]["v"][n], state["v"][n])

    def test_restored_optimizer_continues_identically(self, tmp_path):
        grads = None
        weights = []
        for use_restore in (False, True):
            store = small_store()
            opt = AdamW(store, weight_decay=0.01)
            if grads is None:
                grads = {n: 0.3 * np.ones_like(store[n].data) for n in store.trainable_names()}
            opt.step(grads, 1e-3)
            if use_restore:
                path = tmp_path / "mid.ckpt"
                save_from_store(path, store, tiny_config(), "pretrain", 1, 0.0, optimizer=opt)
                loaded = load_checkpoint(path)
                store2 = small_store()
                for n in store2.names():
                    store2[n].data[...] = param_arrays(loaded)[n]
                opt = AdamW(store2, weight_decay=0.01)
                opt.load_state(loaded["opt"])
                store = store2
            opt.step(grads, 1e-3)
            weights.append({n: store[n].data.copy() for n in store.names()})
        for n in weights[0]:
            assert np.array_equal(weights[0][n], weights[1][n])

    def test_no_optimizer_loads_as_none(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_from_store(path, small_store(), tiny_config(), "pretrain", 0, 0.0)
        assert load_checkpoint(path)["opt"] is None


class TestConfigHash:
    def test_matches_runconfig_hash(self):
        cfg = tiny_config()
        assert config_hash(cfg.to_dict()) == cfg.hash()

    def test_key_order_irrelevant(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})

    def test_value_change_changes_hash(self):
        a = tiny_config(seed=0).to_dict()
        b = tiny_config(seed=1).to_dict()
        assert config_hash(a) != config_hash(b)

    def test_mismatch_warns_on_stderr(self, tmp_path, capsys):
        path = tmp_path / "a.ckpt"
        save_from_store(path, small_store(), tiny_config(seed=0), "pretrain", 0, 0.0)
        load_checkpoint(path, expected_config_dict=tiny_config(seed=1).to_dict())
        err = capsys.readouterr().err
        assert "warning" in err and "different config" in err

    def test_match_is_silent(self, tmp_path, capsys):
        path = tmp_path / "a.ckpt"
        save_from_store(path, small_store(), tiny_config(seed=0), "pretrain", 0, 0.0)
        load_checkpoint(path, expected_config_dict=tiny_config(seed=0).to_dict())
        assert capsys.readouterr().err == ""


class TestErrors:
    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="cannot open"):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"WHAT" + b"\x00" * 64)
        with pytest.raises(DataError, match="bad magic"):
            load_checkpoint(path)

    def test_malformed_header(self, tmp_path):
        blob = b"{not json"
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"HFCK" + struct.pack("<I", len(blob)) + blob)
        with pytest.raises(DataError, match="malformed checkpoint header"):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        blob = b'{"version": 99}'
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"HFCK" + struct.pack("<I", len(blob)) + blob)
        with pytest.raises(DataError, match="unsupported checkpoint version 99"):
            load_checkpoint(path)

    def test_truncated_payload_names_parameter(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, {"only.w": (np.ones((8, 8)), True, False)},
                        tiny_config().to_dict(), "pretrain", 0, 0.0)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(DataError, match="while reading 'only.w'"):
            load_checkpoint(path)
