"""Wrapper around a pretrained self-supervised speech encoder.

Loads any transformers model of the wav2vec2/HuBERT family (local
directory or hub identifier), exposes its transformer depth and frame
period, and produces hidden states of one chosen layer. Layers are
1-based transformer layers; layer i maps to the model's i-th encoder
block output.

Audio longer than the inference window is processed in chunks that
overlap by a fixed duration; each chunk keeps the frames nearest to its
own center (boundaries cut at the middle of the overlap), so every output
frame comes from a chunk where it had ample context on both sides.
"""

from __future__ import annotations

import numpy as np
import torch
from transformers import AutoModel


class SpeechEncoder:
    def __init__(self, identifier: str, device: str = "cpu"):
        self.model = AutoModel.from_pretrained(identifier).to(device).eval()
        self.device = device
        config = self.model.config
        if not hasattr(config, "conv_stride") or not hasattr(config, "num_hidden_layers"):
            raise ValueError(
                f"'{identifier}' does not look like a frame-level speech encoder"
            )
        self.stride_samples = int(np.prod(config.conv_stride))
        self.num_layers = int(config.num_hidden_layers)
        self.hidden_dim = int(config.hidden_size)
        # receptive field of the conv stack = samples needed for one frame
        receptive, jump = 1, 1
        for kernel, stride in zip(config.conv_kernel, config.conv_stride):
            receptive += (kernel - 1) * jump
            jump *= stride
        self._min_samples = receptive

    def frame_period_ms(self, sample_rate: int) -> float:
        return self.stride_samples / sample_rate * 1000.0

    def check_layer(self, layer: int) -> None:
        if not 1 <= layer <= self.num_layers:
            raise ValueError(
                f"layer {layer} out of range for a {self.num_layers}-layer encoder"
            )

    def _forward(self, samples: np.ndarray, layer: int) -> np.ndarray:
        with torch.no_grad():
            batch = torch.from_numpy(samples).to(self.device)[None, :]
            out = self.model(batch, output_hidden_states=True)
        return out.hidden_states[layer][0].cpu().numpy().astype(np.float32)

    def frames(self, samples: np.ndarray, layer: int,
               max_window_samples: int, overlap_samples: int) -> np.ndarray:
        """Layer activations for arbitrarily long audio, chunked if needed."""
        self.check_layer(layer)
        if samples.size < self._min_samples:
            raise ValueError(
                f"audio too short: {samples.size} samples, encoder needs "
                f"at least {self._min_samples}"
            )
        if samples.size <= max_window_samples:
            return self._forward(samples, layer)

        stride = self.stride_samples
        window = (max_window_samples // stride) * stride
        overlap = max(stride, (overlap_samples // stride) * stride)
        step = window - overlap
        if step <= 0:
            raise ValueError("overlap must be smaller than the inference window")
        overlap_frames = overlap // stride

        pieces = []
        start = 0
        prev_keep_end = 0  # in global frame index
        while start < samples.size:
            chunk = samples[start : start + window]
            last = start + window >= samples.size
            if chunk.size < self._min_samples:
                break
            frames = self._forward(chunk, layer)
            gf0 = start // stride
            keep_lo = prev_keep_end - gf0
            keep_hi = frames.shape[0] if last else frames.shape[0] - overlap_frames // 2
            keep_hi = max(keep_hi, keep_lo)
            pieces.append(frames[keep_lo:keep_hi])
            prev_keep_end = gf0 + keep_hi
            if last:
                break
            start += step
        return np.concatenate(pieces, axis=0)
