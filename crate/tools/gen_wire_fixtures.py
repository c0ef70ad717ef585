#!/usr/bin/env python3
"""Hand-encodes the DRSM v1 golden fixtures.

Written against the layout table only, so the Rust encoder/decoder can be
checked against bytes it did not produce. Run from the repository root:

    python3 tools/gen_wire_fixtures.py
"""

import os
import struct

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.dirname(HERE)
WIRE_DIR = os.path.join(ROOT, "fixtures", "wire")
SHARD_DIR = os.path.join(ROOT, "fixtures", "shards")


def key(k):
    b = k.encode("utf-8")
    assert len(b) <= 255
    return bytes([len(b)]) + b


def u64(k, v):
    return key(k) + b"\x01" + struct.pack("<Q", v)


def i64(k, v):
    return key(k) + b"\x02" + struct.pack("<q", v)


def f64(k, v):
    return key(k) + b"\x03" + struct.pack("<d", v)


def string(k, s):
    b = s.encode("utf-8")
    return key(k) + b"\x04" + struct.pack("<I", len(b)) + b


def blob(k, b):
    return key(k) + b"\x05" + struct.pack("<I", len(b)) + bytes(b)


def tensor(k, dtype, dims, values):
    code, fmt = {"u8": (0, "B"), "f32": (1, "f"), "i64": (2, "q")}[dtype]
    n = 1
    for d in dims:
        n *= d
    assert n == len(values)
    out = key(k) + b"\x06" + bytes([code, len(dims)])
    out += b"".join(struct.pack("<I", d) for d in dims)
    out += b"".join(struct.pack("<" + fmt, v) for v in values)
    return out


def payload(*entries):
    return b"\x44\x52\x01" + struct.pack("<H", len(entries)) + b"".join(entries)


FIXTURES = {
    "header_only": payload(u64("btid", 7), u64("frame", 0)),
    "tensor_u8": payload(
        u64("btid", 0), u64("frame", 1), tensor("image", "u8", [2, 2], [1, 2, 3, 4])
    ),
    "all_types": payload(
        u64("btid", 3),
        u64("frame", 42),
        i64("offset", -5),
        f64("scale", 1.5),
        string("scene", "cube"),
        blob("raw", [0, 255, 16]),
        tensor("probs", "f32", [3], [0.25, 0.25, 0.5]),
        tensor("cids", "i64", [2], [1, -1]),
    ),
    "control": payload(
        u64("btid", 2**64 - 1),
        u64("frame", 0),
        string("cmd", "set_class_probs"),
        tensor("class_probs", "f32", [2], [0.25, 0.75]),
    ),
    "empty_annotations": payload(
        u64("btid", 1),
        u64("frame", 5),
        tensor("image", "u8", [2, 3, 3], list(range(18))),
        tensor("bboxes", "f32", [0, 4], []),
        tensor("cids", "i64", [0], []),
        tensor("vis", "f32", [0], []),
    ),
    "unicode_key": payload(u64("btid", 0), u64("frame", 0), string("größe", "µm")),
}


def main():
    os.makedirs(WIRE_DIR, exist_ok=True)
    os.makedirs(SHARD_DIR, exist_ok=True)
    for name, data in FIXTURES.items():
        with open(os.path.join(WIRE_DIR, name + ".bin"), "wb") as f:
            f.write(data)

    # Shard: magic DRSH, version 1, framed payloads, trailer marker + count.
    frames = [
        payload(u64("btid", 0), u64("frame", i), tensor("image", "u8", [1, 2, 3], [i] * 6))
        for i in range(3)
    ]
    with open(os.path.join(SHARD_DIR, "golden.drsh"), "wb") as f:
        f.write(b"DRSH\x01")
        for p in frames:
            f.write(struct.pack("<I", len(p)) + p)
        f.write(struct.pack("<I", 0xFFFFFFFF) + struct.pack("<Q", len(frames)))


if __name__ == "__main__":
    main()
