"""Writer for the AWF frame-feature container.

Layout (little-endian):

    magic "AWF1" | u32 version=1 | u32 D | f32 frame_period_ms
    | u64 utterance_count
    | per utterance: u16 id_byte_len | UTF-8 id | u64 T | T*D f32 row-major

This is the toolkit-neutral interchange format; downstream consumers
validate and read it with their own stores.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"AWF1"
VERSION = 1


def write_awf(records: list, frame_period_ms: float, path) -> None:
    """records: list of (utt_id, float32 matrix of shape T x D)."""
    if not records:
        raise ValueError("cannot write an empty feature file")
    dim = records[0][1].shape[1]
    seen = set()
    for utt_id, frames in records:
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError(f"'{utt_id}': features must be a non-empty T x D matrix")
        if frames.shape[1] != dim:
            raise ValueError(
                f"inconsistent dimension: '{utt_id}' has D={frames.shape[1]}, expected {dim}"
            )
        if not np.all(np.isfinite(frames)):
            raise ValueError(f"non-finite values in features of '{utt_id}'")
        if utt_id in seen:
            raise ValueError(f"duplicate utt_id '{utt_id}'")
        seen.add(utt_id)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, dim))
        f.write(struct.pack("<f", np.float32(frame_period_ms)))
        f.write(struct.pack("<Q", len(records)))
        for utt_id, frames in records:
            id_bytes = utt_id.encode("utf-8")
            f.write(struct.pack("<H", len(id_bytes)))
            f.write(id_bytes)
            f.write(struct.pack("<Q", frames.shape[0]))
            f.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())
