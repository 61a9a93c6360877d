"""Flat key=value run configuration.

One namespace covers every module's settings. Unknown keys are rejected,
and each command writes its fully resolved configuration next to its
outputs so a run can be reproduced from the artifact directory alone.

File format: UTF-8 text, one `key=value` per line, `#` comments allowed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


class InputError(ValueError):
    """Bad user input: unknown key, unparsable value, missing file."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{text}'")


@dataclass(frozen=True)
class _Key:
    type: type
    default: object
    help: str


REGISTRY: dict[str, _Key] = {
    # synthetic corpus
    "corpus.n_phone_types": _Key(int, 40, "distinct phone prototypes"),
    "corpus.n_word_types": _Key(int, 200, "lexicon size"),
    "corpus.phones_per_word_min": _Key(int, 3, ""),
    "corpus.phones_per_word_max": _Key(int, 8, ""),
    "corpus.n_speakers": _Key(int, 8, ""),
    "corpus.utterances_per_speaker": _Key(int, 30, ""),
    "corpus.words_per_utterance_min": _Key(int, 4, ""),
    "corpus.words_per_utterance_max": _Key(int, 9, ""),
    "corpus.frames_per_phone_min": _Key(int, 3, ""),
    "corpus.frames_per_phone_max": _Key(int, 8, ""),
    "corpus.silence_frames_min": _Key(int, 2, ""),
    "corpus.silence_frames_max": _Key(int, 4, ""),
    "corpus.feature_dim": _Key(int, 32, ""),
    "corpus.speaker_shift_scale": _Key(float, 0.25, "additive speaker offset norm"),
    "corpus.noise_scale": _Key(float, 0.3, "per-frame gaussian noise std"),
    "corpus.frame_period_ms": _Key(float, 20.0, ""),
    # phone n-gram mining
    "mine.n_min": _Key(int, 2, "shortest phone n-gram"),
    "mine.n_max": _Key(int, 5, "longest phone n-gram"),
    "mine.cap": _Key(int, 300, "max occurrences per n-gram type, 0 = unlimited"),
    "mine.exclude_overlap": _Key(bool, True, "drop same-utterance overlapping pairs"),
    "mine.silence_labels": _Key(str, "sil,sp,spn,nsn", "labels that break n-grams"),
    # knn baseline mining
    "knn.min_ms": _Key(float, 80.0, ""),
    "knn.max_ms": _Key(float, 310.0, ""),
    "knn.min_gap_ms": _Key(float, 80.0, ""),
    "knn.nlist": _Key(int, 64, "coarse cells in the inverted file"),
    "knn.nprobe": _Key(int, 16, "cells probed per query"),
    "knn.k": _Key(int, 5, "neighbors per query"),
    "knn.metric": _Key(str, "dot", "dot or cosine"),
    # learned pooler architecture
    "pooler.hidden_dim": _Key(int, 256, ""),
    "pooler.conv_kernel": _Key(int, 4, ""),
    "pooler.conv_stride": _Key(int, 2, ""),
    "pooler.n_heads": _Key(int, 4, ""),
    "pooler.max_positions": _Key(int, 512, ""),
    # contrastive training
    "train.temperature": _Key(float, 0.07, ""),
    "train.batch_size": _Key(int, 150, ""),
    "train.epochs": _Key(int, 5, ""),
    "train.max_iterations": _Key(int, 1000, "optimizer steps per epoch at most"),
    "train.learning_rate": _Key(float, 1e-4, ""),
    "train.denominator_mode": _Key(str, "standard", "standard or literal"),
    "train.clip_norm": _Key(float, 0.0, "global gradient clip, 0 = off"),
    # k-means targets
    "kmeans.k": _Key(int, 500, ""),
    "kmeans.max_iters": _Key(int, 100, ""),
    "kmeans.tol": _Key(float, 1e-4, "relative centroid shift stop rule"),
    "kmeans.sample_fraction": _Key(float, 0.1, "fraction of frames used to fit"),
    # evaluation
    "eval.cross_speaker_only": _Key(bool, False, ""),
}


class RunConfig:
    def __init__(self, values: dict | None = None):
        self._values = {key: spec.default for key, spec in REGISTRY.items()}
        for key, raw in (values or {}).items():
            self.set(key, raw)

    def set(self, key: str, raw) -> None:
        if key not in REGISTRY:
            raise InputError(f"unknown config key '{key}'")
        spec = REGISTRY[key]
        if isinstance(raw, str):
            try:
                value = _parse_bool(raw) if spec.type is bool else spec.type(raw)
            except ValueError:
                raise InputError(
                    f"config key '{key}' expects {spec.type.__name__}, got '{raw}'"
                ) from None
        else:
            value = spec.type(raw)
        self._values[key] = value

    def __getitem__(self, key: str):
        if key not in REGISTRY:
            raise InputError(f"unknown config key '{key}'")
        return self._values[key]

    def resolved_text(self) -> str:
        lines = [f"{key}={self._values[key]}" for key in sorted(self._values)]
        return "\n".join(lines) + "\n"

    def write_resolved(self, path) -> None:
        Path(path).write_text(self.resolved_text(), encoding="utf-8", newline="\n")


def load_config_file(path) -> dict:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise InputError(f"{path}:{lineno}: expected key=value")
            key, value = stripped.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def build_config(config_path=None, overrides=None) -> RunConfig:
    cfg = RunConfig()
    if config_path is not None:
        for key, value in load_config_file(config_path).items():
            cfg.set(key, value)
    for item in overrides or []:
        if "=" not in item:
            raise InputError(f"--set expects key=value, got '{item}'")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    return cfg
