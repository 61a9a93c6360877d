"""Export jobs: manifest in, one AWF feature file out."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .audio import load_wav, normalize, resample
from .awf import write_awf
from .encoder import SpeechEncoder


@dataclass
class ExportJob:
    manifest: list  # of (utt_id, audio_path)
    encoder_id: str
    layer: int
    out_path: Path
    sample_rate: int = 16000
    max_window_s: float = 20.0
    overlap_s: float = 1.0
    device: str = "cpu"

    def __post_init__(self):
        ids = [utt_id for utt_id, _ in self.manifest]
        if len(set(ids)) != len(ids):
            dupes = sorted({u for u in ids if ids.count(u) > 1})
            raise ValueError(f"duplicate utt_ids in manifest: {dupes[:5]}")
        if not self.manifest:
            raise ValueError("empty manifest")


def load_manifest(path) -> list:
    path = Path(path)
    entries = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected utt_id<TAB>audio_path")
            entries.append((parts[0], parts[1]))
    return entries


def export(job: ExportJob) -> Path:
    """Run the encoder over every manifest entry and write the AWF file.

    The frame period is taken from the encoder's conv stride at the
    requested sample rate, so the output is self-describing.
    """
    encoder = SpeechEncoder(job.encoder_id, device=job.device)
    encoder.check_layer(job.layer)
    max_window = int(job.max_window_s * job.sample_rate)
    overlap = int(job.overlap_s * job.sample_rate)
    records = []
    for utt_id, audio_path in job.manifest:
        samples, rate = load_wav(audio_path)
        samples = normalize(resample(samples, rate, job.sample_rate))
        frames = encoder.frames(samples, job.layer, max_window, overlap)
        records.append((utt_id, frames))
    write_awf(records, encoder.frame_period_ms(job.sample_rate), job.out_path)
    return Path(job.out_path)


def validate_alignment_passthrough(src, dst) -> int:
    """Copy a forced-alignment TSV after checking its line format.

    Returns the number of lines copied. The file itself is not rewritten,
    only validated, so pass-through is byte-exact.
    """
    src, dst = Path(src), Path(dst)
    n = 0
    with open(src, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.rstrip("\n")
            if not stripped:
                continue
            parts = stripped.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{src}:{lineno}: expected 5 tab-separated fields")
            try:
                start_s, end_s = float(parts[2]), float(parts[3])
            except ValueError:
                raise ValueError(f"{src}:{lineno}: non-numeric times") from None
            if end_s <= start_s:
                raise ValueError(f"{src}:{lineno}: end time not after start")
            n += 1
    dst.write_bytes(src.read_bytes())
    return n
