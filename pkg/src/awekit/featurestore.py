"""On-disk formats for frame-level features, phone alignments and word segments.

The feature container is a flat little-endian binary file ("AWF"):

    magic "AWF1" | u32 version=1 | u32 D | f32 frame_period_ms
    | u64 utterance_count
    | per utterance: u16 id_byte_len | UTF-8 id | u64 T | T*D f32 row-major

Alignments and word segments are tab-separated UTF-8 text, one entry per
line:

    utt_id <TAB> speaker_id <TAB> start_s <TAB> end_s <TAB> phone
    utt_id <TAB> speaker_id <TAB> start_s <TAB> end_s <TAB> word

Readers give random access without loading payloads eagerly; a FeatureStore
is immutable once opened and safe to share across reader threads.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

AWF_MAGIC = b"AWF1"
AWF_VERSION = 1

# end_s[i] may exceed start_s[i+1] by at most this much before we call the
# alignment overlapping
OVERLAP_TOLERANCE_S = 1e-6


class FeatureFileError(ValueError):
    """Malformed, truncated or mismatching feature file."""


@dataclass(frozen=True)
class FrameMatrix:
    """Frame-level representation of one utterance (T x D, float32)."""

    utt_id: str
    frames: np.ndarray
    frame_period_ms: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ValueError(f"frames must be a non-empty 2-D matrix, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError(f"non-finite values in frames of utterance '{self.utt_id}'")
        if not self.frame_period_ms > 0:
            raise ValueError(f"frame_period_ms must be positive, got {self.frame_period_ms}")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True, order=True)
class SegmentRef:
    """Half-open frame interval [start_frame, end_frame) within an utterance."""

    utt_id: str
    start_frame: int
    end_frame: int

    def __post_init__(self):
        if self.start_frame < 0:
            raise ValueError(f"start_frame must be non-negative, got {self.start_frame}")
        if self.end_frame <= self.start_frame:
            raise ValueError(
                f"empty segment ({self.start_frame}, {self.end_frame}) in '{self.utt_id}'"
            )

    @property
    def n_frames(self) -> int:
        return self.end_frame - self.start_frame


@dataclass(frozen=True)
class PhoneAlignment:
    """Phone labels with timings for one utterance, sorted and non-overlapping."""

    utt_id: str
    entries: tuple  # of (start_s, end_s, phone)
    speaker_id: str


@dataclass(frozen=True)
class WordSegment:
    utt_id: str
    start_s: float
    end_s: float
    word: str
    speaker_id: str

    def __post_init__(self):
        if self.end_s <= self.start_s:
            raise ValueError(f"word '{self.word}' in '{self.utt_id}' has non-positive duration")
        if not self.word:
            raise ValueError(f"empty word label in '{self.utt_id}'")


def write_features(records: list[FrameMatrix], path) -> None:
    """Serialize frame matrices to an AWF file.

    All records must share the feature dimension and frame period, and
    utterance ids must be unique. Output bytes are a pure function of the
    records, so rewriting identical inputs gives an identical file.
    """
    if not records:
        raise ValueError("cannot write an empty feature file")
    dim = records[0].dim
    period = records[0].frame_period_ms
    seen: set[str] = set()
    for rec in records:
        if rec.dim != dim:
            raise FeatureFileError(
                f"inconsistent dimension: '{rec.utt_id}' has D={rec.dim}, expected {dim}"
            )
        if rec.frame_period_ms != period:
            raise FeatureFileError(
                f"inconsistent frame period: '{rec.utt_id}' has {rec.frame_period_ms}, "
                f"expected {period}"
            )
        if rec.utt_id in seen:
            raise FeatureFileError(f"duplicate utt_id '{rec.utt_id}'")
        seen.add(rec.utt_id)

    path = Path(path)
    with open(path, "wb") as f:
        f.write(AWF_MAGIC)
        f.write(struct.pack("<II", AWF_VERSION, dim))
        f.write(struct.pack("<f", np.float32(period)))
        f.write(struct.pack("<Q", len(records)))
        for rec in records:
            id_bytes = rec.utt_id.encode("utf-8")
            if len(id_bytes) > 0xFFFF:
                raise FeatureFileError(f"utt_id too long: '{rec.utt_id[:32]}...'")
            f.write(struct.pack("<H", len(id_bytes)))
            f.write(id_bytes)
            f.write(struct.pack("<Q", rec.n_frames))
            f.write(np.ascontiguousarray(rec.frames, dtype="<f4").tobytes())


@dataclass
class FeatureStore:
    """Read-only random access to an AWF file.

    Payload bytes are memory-mapped; only per-utterance headers are parsed
    at open time.
    """

    path: Path
    dim: int
    frame_period_ms: float
    _offsets: dict = field(repr=False)  # utt_id -> (byte offset of payload, T)
    _mm: np.memmap = field(repr=False)

    @property
    def utt_ids(self) -> list[str]:
        return list(self._offsets.keys())

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self._offsets

    def __len__(self) -> int:
        return len(self._offsets)

    def n_frames(self, utt_id: str) -> int:
        if utt_id not in self._offsets:
            raise KeyError(f"unknown utt_id '{utt_id}'")
        return self._offsets[utt_id][1]

    def get_utterance(self, utt_id: str) -> np.ndarray:
        if utt_id not in self._offsets:
            raise KeyError(f"unknown utt_id '{utt_id}'")
        offset, n = self._offsets[utt_id]
        return self._read_rows(offset, 0, n)

    def get_frames(self, seg: SegmentRef) -> np.ndarray:
        """Rows [start_frame, end_frame) of the referenced utterance."""
        if seg.utt_id not in self._offsets:
            raise KeyError(f"unknown utt_id '{seg.utt_id}'")
        offset, n = self._offsets[seg.utt_id]
        if seg.end_frame > n:
            raise ValueError(
                f"segment exceeds utterance: ({seg.start_frame}, {seg.end_frame}) "
                f"but '{seg.utt_id}' has {n} frames"
            )
        return self._read_rows(offset, seg.start_frame, seg.end_frame)

    def _read_rows(self, payload_offset: int, row0: int, row1: int) -> np.ndarray:
        b0 = payload_offset + row0 * self.dim * 4
        b1 = payload_offset + row1 * self.dim * 4
        raw = self._mm[b0:b1]
        return np.frombuffer(raw, dtype="<f4").reshape(row1 - row0, self.dim)


def open_features(path) -> FeatureStore:
    """Open an AWF file, parse utterance headers and validate framing."""
    path = Path(path)
    size = path.stat().st_size
    mm = np.memmap(path, dtype=np.uint8, mode="r")

    def fail(msg: str):
        raise FeatureFileError(f"{path}: {msg}")

    if size < 24:
        fail("truncated header")
    if bytes(mm[0:4]) != AWF_MAGIC:
        fail("unrecognized format (bad magic)")
    version, dim = struct.unpack("<II", bytes(mm[4:12]))
    if version != AWF_VERSION:
        fail(f"version mismatch: file has {version}, reader supports {AWF_VERSION}")
    (period,) = struct.unpack("<f", bytes(mm[12:16]))
    (count,) = struct.unpack("<Q", bytes(mm[16:24]))
    if dim < 1 or not period > 0:
        fail(f"invalid header (D={dim}, frame_period_ms={period})")

    offsets: dict[str, tuple[int, int]] = {}
    pos = 24
    for _ in range(count):
        if pos + 2 > size:
            fail("truncated utterance header")
        (id_len,) = struct.unpack("<H", bytes(mm[pos : pos + 2]))
        pos += 2
        if pos + id_len + 8 > size:
            fail("truncated utterance header")
        utt_id = bytes(mm[pos : pos + id_len]).decode("utf-8")
        pos += id_len
        (n_rows,) = struct.unpack("<Q", bytes(mm[pos : pos + 8]))
        pos += 8
        payload = n_rows * dim * 4
        if pos + payload > size:
            fail(f"truncated payload for utterance '{utt_id}'")
        if utt_id in offsets:
            fail(f"duplicate utt_id '{utt_id}'")
        offsets[utt_id] = (pos, n_rows)
        pos += payload
    if pos != size:
        fail(f"{size - pos} trailing bytes after last utterance")

    return FeatureStore(
        path=path, dim=dim, frame_period_ms=float(period), _offsets=offsets, _mm=mm
    )


def get_frames(store: FeatureStore, seg: SegmentRef) -> np.ndarray:
    return store.get_frames(seg)


def _snap(x: float) -> float:
    # guard against float representation pushing an exact frame multiple
    # across the floor/ceil boundary
    r = round(x)
    return r if abs(x - r) < 1e-6 else x


def seconds_to_segment(start_s: float, end_s: float, frame_period_ms: float) -> tuple[int, int]:
    """Map a time interval in seconds to half-open frame bounds.

    Start is floored, end is ceiled; the result is widened to cover at
    least one frame so boundary-hugging intervals never come out empty.
    """
    if start_s < 0 or end_s < 0:
        raise ValueError(f"negative times ({start_s}, {end_s})")
    if end_s <= start_s:
        raise ValueError(f"interval ({start_s}, {end_s}) is empty")
    start_frame = int(math.floor(_snap(start_s * 1000.0 / frame_period_ms)))
    end_frame = int(math.ceil(_snap(end_s * 1000.0 / frame_period_ms)))
    if end_frame <= start_frame:
        end_frame = start_frame + 1
    return start_frame, end_frame


def load_alignments(path) -> list[PhoneAlignment]:
    """Parse a phone alignment file into one PhoneAlignment per utterance.

    Entries must already be in time order per utterance; out-of-order or
    overlapping phones (beyond a microsecond slack) are rejected with the
    offending line number.
    """
    per_utt: dict[str, list[tuple[float, float, str]]] = {}
    speakers: dict[str, str] = {}
    order: list[str] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
            utt_id, speaker_id, start_txt, end_txt, phone = parts
            try:
                start_s, end_s = float(start_txt), float(end_txt)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric time") from None
            if not phone:
                raise ValueError(f"{path}:{lineno}: empty phone label")
            if end_s <= start_s:
                raise ValueError(f"{path}:{lineno}: end time {end_s} not after start {start_s}")
            if utt_id not in per_utt:
                per_utt[utt_id] = []
                speakers[utt_id] = speaker_id
                order.append(utt_id)
            elif speakers[utt_id] != speaker_id:
                raise ValueError(
                    f"{path}:{lineno}: utterance '{utt_id}' has conflicting speakers "
                    f"'{speakers[utt_id]}' and '{speaker_id}'"
                )
            entries = per_utt[utt_id]
            if entries:
                prev_start, prev_end, _ = entries[-1]
                if start_s < prev_start:
                    raise ValueError(f"{path}:{lineno}: unsorted entries in '{utt_id}'")
                if prev_end > start_s + OVERLAP_TOLERANCE_S:
                    raise ValueError(f"{path}:{lineno}: overlapping phones in '{utt_id}'")
            entries.append((start_s, end_s, phone))
    return [
        PhoneAlignment(utt_id=u, entries=tuple(per_utt[u]), speaker_id=speakers[u])
        for u in order
    ]


def write_alignments(alignments: list[PhoneAlignment], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ali in alignments:
            for start_s, end_s, phone in ali.entries:
                f.write(f"{ali.utt_id}\t{ali.speaker_id}\t{start_s:.3f}\t{end_s:.3f}\t{phone}\n")


def load_word_segments(path) -> list[WordSegment]:
    segments = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
            utt_id, speaker_id, start_txt, end_txt, word = parts
            try:
                start_s, end_s = float(start_txt), float(end_txt)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric time") from None
            try:
                segments.append(
                    WordSegment(utt_id=utt_id, start_s=start_s, end_s=end_s,
                                word=word, speaker_id=speaker_id)
                )
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return segments


def write_word_segments(segments: list[WordSegment], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for seg in segments:
            f.write(f"{seg.utt_id}\t{seg.speaker_id}\t{seg.start_s:.3f}\t{seg.end_s:.3f}\t{seg.word}\n")


def filter_eval_words(
    segments: list[WordSegment],
    min_chars: int = 5,
    min_chars_alt: int = 2,
    min_dur_s: float = 0.5,
    use_alt_chars: bool = False,
) -> list[WordSegment]:
    """Keep segments long enough to evaluate: character count and duration.

    The character threshold is `min_chars` normally and `min_chars_alt` when
    the run is configured for a short-word language (`use_alt_chars`).
    Characters are Unicode scalar values, not bytes.
    """
    threshold = min_chars_alt if use_alt_chars else min_chars
    return [
        seg for seg in segments
        if len(seg.word) >= threshold and (seg.end_s - seg.start_s) >= min_dur_s
    ]
