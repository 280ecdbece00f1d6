"""Checkpoint container: one canonical-JSON header plus HFAT blobs.

Layout: magic ``HFCK``, u32 header length, header JSON (sorted keys,
compact separators, UTF-8), then one HFAT record per parameter in header
order, then optimizer first/second moments for the recorded names.
Everything that `translate` needs to run standalone rides in the header:
the full run config plus the token and gloss vocabularies.

Canonical JSON and fixed blob order make save -> load -> save produce
byte-identical files, which the persistence tests assert literally.
"""

from __future__ import annotations

import hashlib
import json
import struct
import sys

import numpy as np

from .exceptions import DataError
from .tensor_io import load_tensor, tensor_bytes

MAGIC = b"HFCK"
VERSION = 1


def config_hash(config_dict):
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path, params, config_dict, kind, epoch, best_metric,
                    opt_state=None, extra=None):
    """params: name -> (array, trainable, frozen), in serialization order."""
    header = {
        "version": VERSION,
        "kind": kind,
        "epoch": int(epoch),
        "best_metric": float(best_metric),
        "config": config_dict,
        "config_hash": config_hash(config_dict),
        "params": [
            {"name": n, "trainable": bool(tr), "frozen": bool(fr)}
            for n, (_, tr, fr) in params.items()
        ],
        "opt": None if opt_state is None else {"t": int(opt_state["t"]),
                                               "names": sorted(opt_state["m"])},
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), default=list).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n, (arr, _, _) in params.items():
            fh.write(tensor_bytes(np.asarray(arr)))
        if opt_state is not None:
            for n in sorted(opt_state["m"]):
                fh.write(tensor_bytes(np.asarray(opt_state["m"][n])))
                fh.write(tensor_bytes(np.asarray(opt_state["v"][n])))


def save_from_store(path, store, config, kind, epoch, best_metric, optimizer=None, extra=None):
    params = {n: (p.tensor.data, p.trainable, p.frozen) for n, p in store.items()}
    opt_state = optimizer.state() if optimizer is not None else None
    return save_checkpoint(path, params, config.to_dict(), kind, epoch, best_metric,
                           opt_state=opt_state, extra=extra)


def load_checkpoint(path, expected_config_dict=None):
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise DataError(f"cannot open checkpoint {path}: {e}") from None
    with fh:
        if fh.read(4) != MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic)")
        (hlen,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"{path}: malformed checkpoint header: {e}") from None
        if header.get("version") != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
        params = {}
        for meta in header["params"]:
            try:
                arr = load_tensor(fh)
            except DataError as e:
                raise DataError(f"{path}: while reading {meta['name']!r}: {e}") from None
            params[meta["name"]] = (arr, meta["trainable"], meta["frozen"])
        opt = None
        if header["opt"] is not None:
            opt = {"t": header["opt"]["t"], "m": {}, "v": {}}
            for n in header["opt"]["names"]:
                opt["m"][n] = load_tensor(fh)
                opt["v"][n] = load_tensor(fh)
    if expected_config_dict is not None:
        if config_hash(expected_config_dict) != header["config_hash"]:
            print(f"warning: checkpoint {path} was written under a different config "
                  f"(hash {header['config_hash']}, expected {config_hash(expected_config_dict)})",
                  file=sys.stderr)
    return {"header": header, "params": params, "opt": opt}


def resave_checkpoint(path, loaded):
    """Write a loaded checkpoint back out; used by the round-trip tests."""
    h = loaded["header"]
    save_checkpoint(path, loaded["params"], h["config"], h["kind"], h["epoch"],
                    h["best_metric"], opt_state=loaded["opt"], extra=h["extra"])


def param_arrays(loaded):
    return {n: arr for n, (arr, _, _) in loaded["params"].items()}
