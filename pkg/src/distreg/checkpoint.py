"""Binary checkpoint files holding live and reference parameters.

Layout (all integers little-endian):

    magic   4 bytes  b"DRFT"
    version u32      currently 1
    count   u32      number of entries
    entry   repeated:
        name_len u32, name (UTF-8)
        rank u64, extents rank x u64
        values  prod(extents) x f64   (live parameters)
        refs    prod(extents) x f64   (reference parameters)
    seed    u64
    hash    32 bytes (sha256 of the run config, zero when unknown)

One entry per parameter tensor, named ``layer<i>.weight`` /
``layer<i>.bias``. A single metadata entry named ``!meta ...`` with an
empty payload leads the file; its name carries space-separated
``key=value`` pairs (input shape, architecture, epoch) so a network can
be rebuilt from the checkpoint alone. Round trips are bitwise exact.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DRFT"
VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    entries: dict = field(default_factory=dict)  # name -> (values, reference)
    seed: int = 0
    config_hash: bytes = b"\x00" * 32
    meta: dict = field(default_factory=dict)


def _meta_name(meta):
    parts = ["!meta"] + [f"{k}={v}" for k, v in meta.items()]
    name = " ".join(parts)
    for k, v in meta.items():
        if " " in str(v):
            raise CheckpointError(f"metadata value for {k!r} must not contain spaces")
    return name


def _parse_meta(name):
    meta = {}
    for token in name.split(" ")[1:]:
        key, _, value = token.partition("=")
        meta[key] = value
    return meta


def save_checkpoint(path, net, config_hash=None, epoch=0):
    """Write a network's parameters and reference snapshot to ``path``."""
    from .config import format_arch  # deferred: config builds on checkpoint users

    if net.reference is None:
        raise CheckpointError("network has no captured reference to store")
    if config_hash is None:
        config_hash = b"\x00" * 32
    if len(config_hash) != 32:
        raise CheckpointError("config hash must be exactly 32 bytes")

    meta = {
        "input": "x".join(str(s) for s in net.input_shape),
        "arch": format_arch(net),
        "epoch": str(epoch),
    }
    entries = [(_meta_name(meta), np.empty(0), np.empty(0))]
    for i in net.param_layer_indices():
        params = net.layers[i].params()
        refs = net.reference[i]
        for pname in sorted(params):
            entries.append((f"layer{i}.{pname}", params[pname], refs[pname]))

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(entries)))
        for name, values, refs in entries:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            shape = values.shape
            f.write(struct.pack("<Q", len(shape)))
            for extent in shape:
                f.write(struct.pack("<Q", extent))
            f.write(np.ascontiguousarray(values, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(refs, dtype="<f8").tobytes())
        f.write(struct.pack("<Q", net.seed))
        f.write(config_hash)


def load_checkpoint(path):
    """Read a checkpoint file back into a :class:`Checkpoint`."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r} at byte 0")
    offset = 4

    def take(count, what):
        nonlocal offset
        if offset + count > len(blob):
            raise CheckpointError(f"{path}: truncated reading {what} at byte {offset}")
        piece = blob[offset : offset + count]
        offset += count
        return piece

    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    ck = Checkpoint()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8, "rank"))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, "extents"))
        size = 1
        for extent in shape:
            size *= extent
        values = np.frombuffer(take(8 * size, f"values of {name}"), dtype="<f8")
        refs = np.frombuffer(take(8 * size, f"reference of {name}"), dtype="<f8")
        if name.startswith("!meta"):
            ck.meta = _parse_meta(name)
            continue
        ck.entries[name] = (values.reshape(shape).copy(), refs.reshape(shape).copy())
    (ck.seed,) = struct.unpack("<Q", take(8, "seed"))
    ck.config_hash = take(32, "config hash")
    if offset != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after byte {offset}")
    return ck


def check_compatible(a, b):
    """Raise naming the first mismatched layer entry between two checkpoints."""
    for name in a.entries:
        if name not in b.entries:
            raise CheckpointError(f"entry {name!r} missing from second checkpoint")
        if a.entries[name][0].shape != b.entries[name][0].shape:
            raise CheckpointError(
                f"shape mismatch at {name!r}: {a.entries[name][0].shape} vs "
                f"{b.entries[name][0].shape}"
            )
    for name in b.entries:
        if name not in a.entries:
            raise CheckpointError(f"entry {name!r} missing from first checkpoint")


def restore_network(ck):
    """Rebuild the network a checkpoint describes, parameters and reference."""
    from .config import build_layers, parse_arch

    if "arch" not in ck.meta or "input" not in ck.meta:
        raise CheckpointError("checkpoint lacks architecture metadata")
    input_shape = tuple(int(s) for s in ck.meta["input"].split("x"))
    rng = np.random.default_rng(ck.seed)
    layers = build_layers(parse_arch(ck.meta["arch"]), input_shape, rng)

    from .nn import Network

    net = Network(layers, input_shape, seed=ck.seed)
    net.capture_reference()
    for i in net.param_layer_indices():
        params = net.layers[i].params()
        for pname in params:
            key = f"layer{i}.{pname}"
            if key not in ck.entries:
                raise CheckpointError(f"checkpoint missing entry {key!r}")
            values, refs = ck.entries[key]
            if values.shape != params[pname].shape:
                raise CheckpointError(
                    f"shape mismatch at {key!r}: checkpoint {values.shape}, "
                    f"architecture {params[pname].shape}"
                )
            np.copyto(params[pname], values)
            np.copyto(net.reference[i][pname], refs)
    return net
