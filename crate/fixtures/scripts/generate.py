#!/usr/bin/env python3
"""Regenerates the scripted agent transcripts from the candidate sources.

Coding replies embed each candidate file verbatim so the simulated executor's
source-hash registry recognises them.
"""
import json
import pathlib

HERE = pathlib.Path(__file__).resolve().parent
KERNELS = HERE.parent / "kernels"

KERNELS_PLAN = {
    "merge_attn_states_lse": {
        "shapes": [[64, 32, 128], [48, 40, 128]],
        "plans": [
            ["- [fast-math-intrinsics] use __expf for the two score weights (region: value loop)"],
            ["- [loop-invariant-hoisting] compute the merge weights once per block (region: value loop)"],
            ["- [fast-math-intrinsics] replace the division by a reciprocal (region: weight computation)"],
            ["- [loop-invariant-hoisting] hoist the weights into shared memory (region: block prologue)",
             "- [vectorized-load] process half2 pairs of the head dimension (region: value loop)"],
            ["- [other] use a smaller block for short head dimensions (region: launcher)"],
        ],
    },
    "fused_add_rmsnorm": {
        "shapes": [[16, 4096], [8, 11008]],
        "plans": [
            ["- [fast-math-intrinsics] use rsqrtf for the normalizer (region: after the reduction)"],
            ["- [warp-shuffle-reduction] reduce the sum of squares within warps first (region: reduction)"],
            ["- [other] shrink the block to 128 threads (region: launch configuration)"],
            ["- [warp-shuffle-reduction] warp shuffles with a short shared-memory finish (region: reduction)",
             "- [vectorized-load] load x, residual and weight as half2 (region: both row loops)",
             "- [fast-math-intrinsics] use rsqrtf for the normalizer (region: after the reduction)"],
            ["- [other] try 512 threads per block (region: launch configuration)"],
        ],
    },
    "silu_and_mul": {
        "shapes": [[16, 4096], [32, 5120]],
        "plans": [
            ["- [fast-math-intrinsics] use __expf in silu (region: silu)"],
            ["- [vectorized-load] load x and g as half2 (region: element loop)"],
            ["- [fast-math-intrinsics] compute the reciprocal in half precision (region: silu)"],
            ["- [vectorized-load] half2 loads and stores with a scalar tail (region: element loop)",
             "- [fast-math-intrinsics] __expf and __frcp_rn in silu (region: silu)"],
            ["- [fast-math-intrinsics] use __fdividef instead of __frcp_rn (region: silu)"],
        ],
    },
}


def literal(s: str) -> str:
    assert "'''" not in s
    return "'''\n" + s + "'''"


def candidate(kernel: str, rnd: int) -> str:
    if rnd == 4:
        return (KERNELS / kernel / "optimized.cu").read_text()
    return (KERNELS / kernel / "candidates" / f"r{rnd}.cu").read_text()


def entry(role: str, rnd: int, response: str) -> str:
    return f'[[entry]]\nrole = "{role}"\nround = {rnd}\nresponse = {literal(response)}\n'


def main() -> None:
    for kernel, spec in KERNELS_PLAN.items():
        parts = [entry("testing", 0, json.dumps({"shapes": spec["shapes"], "seeds": [0, 1]}) + "\n")]
        for rnd, plan in enumerate(spec["plans"], start=1):
            parts.append(entry("planning", rnd, "\n".join(plan) + "\n"))
            code = candidate(kernel, rnd)
            parts.append(entry("coding", rnd, f"Rewritten kernel:\n\n```cuda\n{code}```\n"))
        (HERE / f"{kernel}.toml").write_text("\n".join(parts))


if __name__ == "__main__":
    main()
