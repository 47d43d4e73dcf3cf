#!/usr/bin/env python3
"""Host-harness stand-in for executor tests: silu_and_mul only, on the CPU.

usage: fake_harness.py SOURCE MANIFEST

Markers in SOURCE change behaviour:
  KF_TEST_CRASH        exit 12 after writing nothing
  KF_TEST_SKIP_OUTPUT  exit 0 without writing outputs
  KF_TEST_SLEEP        sleep far past any test timeout
  KF_TEST_BAD_TIMING   write a timing file with the wrong sample count
  KF_TEST_US=<float>   latency written to the timing file (default 20.0)
"""
import json
import os
import re
import struct
import sys
import time

import numpy as np

EXIT_MANIFEST, EXIT_DEVICE, EXIT_LAUNCH = 10, 11, 12
DTYPES = {0: np.float32, 1: np.float16}
CODES = {"f32": 0, "f16": 1}


def read_kft(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != b"KFT1":
        raise ValueError(f"{path}: bad magic")
    code = data[4]
    (ndim,) = struct.unpack_from("<I", data, 5)
    shape = struct.unpack_from(f"<{ndim}Q", data, 9)
    off = 9 + 8 * ndim
    return np.frombuffer(data[off:], dtype=np.dtype(DTYPES[code]).newbyteorder("<")).reshape(shape)


def write_kft(path, arr, dtype):
    arr = np.ascontiguousarray(arr, dtype=np.dtype(DTYPES[CODES[dtype]]).newbyteorder("<"))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"KFT1")
        f.write(bytes([CODES[dtype]]))
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())
    os.replace(tmp, path)


def silu_and_mul(x, g):
    x = x.astype(np.float32)
    return x / (1.0 + np.exp(-x)) * g.astype(np.float32)


def main():
    source_path, manifest_path = sys.argv[1], sys.argv[2]
    with open(source_path) as f:
        source = f.read()
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except (OSError, ValueError) as e:
        print(f"manifest: {e}", file=sys.stderr)
        return EXIT_MANIFEST
    if manifest.get("kernel") != "silu_and_mul":
        print(f"unsupported kernel {manifest.get('kernel')}", file=sys.stderr)
        return EXIT_MANIFEST
    if "KF_TEST_SLEEP" in source:
        time.sleep(600)
    if "KF_TEST_CRASH" in source:
        print("kernel launch failed: an illegal memory access was encountered", file=sys.stderr)
        return EXIT_LAUNCH

    # Read every input before writing anything, so a missing file leaves no
    # partial outputs behind.
    results = []
    for case in manifest["cases"]:
        ins = {}
        outs = []
        for b in case["bindings"]:
            if b["kind"] == "input":
                try:
                    ins[b["name"]] = read_kft(b["path"])
                except (OSError, ValueError) as e:
                    print(f"case {case['case_id']}: {e}", file=sys.stderr)
                    return EXIT_MANIFEST
            elif b["kind"] == "output":
                outs.append(b)
        results.append((silu_and_mul(ins["x"], ins["g"]), outs))

    if "KF_TEST_SKIP_OUTPUT" not in source:
        for value, outs in results:
            for b in outs:
                write_kft(b["path"], value, b["dtype"])

    m = re.search(r"KF_TEST_US=([0-9.]+)", source)
    us = float(m.group(1)) if m else 20.0
    n = manifest["timed_runs"]
    if "KF_TEST_BAD_TIMING" in source:
        n -= 1
    lines = [
        "# kernelforge-timing v1",
        f"# shape_label: {manifest['shape_label']}",
        f"# warmup_runs: {manifest['warmup_runs']}",
        f"# timed_runs: {manifest['timed_runs']}",
    ]
    lines += [f"{us:.3f}"] * n
    tmp = manifest["timing_path"] + ".tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, manifest["timing_path"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
