import wave

import numpy as np
import pytest
import torch
from transformers import HubertConfig, HubertModel

from awexport.audio import load_wav, normalize, resample
from awexport.cli import main as cli_main
from awexport.export import ExportJob, export, load_manifest


@pytest.fixture(scope="module")
def tiny_encoder(tmp_path_factory):
    out = tmp_path_factory.mktemp("encoder") / "tiny"
    config = HubertConfig(
        hidden_size=32, num_hidden_layers=3, num_attention_heads=2,
        intermediate_size=64, vocab_size=32,
        conv_dim=(16, 16, 16), conv_stride=(5, 4, 4), conv_kernel=(10, 3, 3),
        num_conv_pos_embeddings=16, num_conv_pos_embedding_groups=4,
        do_stable_layer_norm=False,
    )
    torch.manual_seed(0)
    HubertModel(config).eval().save_pretrained(out)
    return str(out)


def write_wav(path, samples, rate=16000):
    pcm = np.clip(samples * 32767.0, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


@pytest.fixture(scope="module")
def wavs(tmp_path_factory):
    out = tmp_path_factory.mktemp("audio")
    rng = np.random.default_rng(0)
    paths = {}
    for i, dur_s in enumerate((0.5, 0.9, 1.4)):
        t = np.arange(int(16000 * dur_s)) / 16000.0
        tone = 0.4 * np.sin(2 * np.pi * (180 + 60 * i) * t)
        samples = tone + 0.05 * rng.standard_normal(t.size)
        path = out / f"utt{i}.wav"
        write_wav(path, samples)
        paths[f"utt{i}"] = path
    return paths


@pytest.fixture(scope="module")
def manifest(wavs, tmp_path_factory):
    path = tmp_path_factory.mktemp("manifest") / "manifest.tsv"
    with open(path, "w") as f:
        for utt_id, wav in wavs.items():
            f.write(f"{utt_id}\t{wav}\n")
    return path


class TestAudio:
    def test_wav_round_trip(self, wavs):
        samples, rate = load_wav(next(iter(wavs.values())))
        assert rate == 16000
        assert samples.dtype == np.float32
        assert np.abs(samples).max() <= 1.0

    def test_resample_halves_length(self, wavs):
        samples, rate = load_wav(next(iter(wavs.values())))
        down = resample(samples, rate, 8000)
        assert abs(down.size - samples.size // 2) <= 2

    def test_normalize_stats(self):
        rng = np.random.default_rng(1)
        x = normalize(rng.standard_normal(4000).astype(np.float32) * 3 + 0.5)
        assert abs(float(x.mean())) < 1e-4
        assert abs(float(x.std()) - 1.0) < 1e-4

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="not found"):
            load_wav(tmp_path / "nope.wav")


class TestExport:
    def test_round_trip_through_primary_store(self, tiny_encoder, manifest, tmp_path):
        from awekit.featurestore import open_features

        out = tmp_path / "features.awf"
        job = ExportJob(manifest=load_manifest(manifest), encoder_id=tiny_encoder,
                        layer=2, out_path=out)
        export(job)
        store = open_features(out)
        assert store.utt_ids == ["utt0", "utt1", "utt2"]
        assert store.dim == 32
        assert store.frame_period_ms == pytest.approx(5.0)  # 80 samples at 16 kHz
        assert all(store.n_frames(u) > 10 for u in store.utt_ids)

    def test_reexport_identical(self, tiny_encoder, manifest, tmp_path):
        a, b = tmp_path / "a.awf", tmp_path / "b.awf"
        for out in (a, b):
            export(ExportJob(manifest=load_manifest(manifest),
                             encoder_id=tiny_encoder, layer=1, out_path=out))
        assert a.read_bytes() == b.read_bytes()

    def test_layers_differ(self, tiny_encoder, manifest, tmp_path):
        from awekit.featurestore import open_features

        stores = []
        for layer in (1, 3):
            out = tmp_path / f"l{layer}.awf"
            export(ExportJob(manifest=load_manifest(manifest),
                             encoder_id=tiny_encoder, layer=layer, out_path=out))
            stores.append(open_features(out))
        a = stores[0].get_utterance("utt0")
        b = stores[1].get_utterance("utt0")
        assert a.shape == b.shape
        assert not np.array_equal(a, b)

    def test_layer_out_of_range(self, tiny_encoder, manifest, tmp_path):
        for layer in (0, 99):
            job = ExportJob(manifest=load_manifest(manifest),
                            encoder_id=tiny_encoder, layer=layer,
                            out_path=tmp_path / "x.awf")
            with pytest.raises(ValueError, match="out of range"):
                export(job)

    def test_missing_audio(self, tiny_encoder, tmp_path):
        job = ExportJob(manifest=[("u", str(tmp_path / "gone.wav"))],
                        encoder_id=tiny_encoder, layer=1,
                        out_path=tmp_path / "x.awf")
        with pytest.raises(FileNotFoundError):
            export(job)

    def test_duplicate_ids(self, tiny_encoder, wavs, tmp_path):
        wav = str(next(iter(wavs.values())))
        with pytest.raises(ValueError, match="duplicate"):
            ExportJob(manifest=[("u", wav), ("u", wav)],
                      encoder_id=tiny_encoder, layer=1,
                      out_path=tmp_path / "x.awf")

    def test_chunked_long_audio(self, tiny_encoder, tmp_path):
        from awekit.featurestore import open_features

        rng = np.random.default_rng(2)
        t = np.arange(int(16000 * 3.0)) / 16000.0
        write_wav(tmp_path / "long.wav",
                  0.4 * np.sin(2 * np.pi * 200 * t)
                  + 0.05 * rng.standard_normal(t.size))
        manifest_path = tmp_path / "m.tsv"
        manifest_path.write_text(f"long\t{tmp_path / 'long.wav'}\n")

        chunked_out = tmp_path / "chunked.awf"
        export(ExportJob(manifest=load_manifest(manifest_path),
                         encoder_id=tiny_encoder, layer=2, out_path=chunked_out,
                         max_window_s=1.0, overlap_s=0.4))
        full_out = tmp_path / "full.awf"
        export(ExportJob(manifest=load_manifest(manifest_path),
                         encoder_id=tiny_encoder, layer=2, out_path=full_out))
        chunked = open_features(chunked_out).get_utterance("long")
        full = open_features(full_out).get_utterance("long")
        # chunk keep-windows tile the utterance without gaps or big losses;
        # values differ from the full pass since attention context differs
        assert abs(chunked.shape[0] - full.shape[0]) <= 4
        rerun_out = tmp_path / "chunked2.awf"
        export(ExportJob(manifest=load_manifest(manifest_path),
                         encoder_id=tiny_encoder, layer=2, out_path=rerun_out,
                         max_window_s=1.0, overlap_s=0.4))
        assert rerun_out.read_bytes() == chunked_out.read_bytes()

    def test_resampled_input(self, tiny_encoder, tmp_path):
        from awekit.featurestore import open_features

        rng = np.random.default_rng(3)
        t = np.arange(8000) / 8000.0
        write_wav(tmp_path / "low.wav",
                  0.4 * np.sin(2 * np.pi * 150 * t)
                  + 0.05 * rng.standard_normal(t.size), rate=8000)
        manifest_path = tmp_path / "m.tsv"
        manifest_path.write_text(f"low\t{tmp_path / 'low.wav'}\n")
        out = tmp_path / "low.awf"
        export(ExportJob(manifest=load_manifest(manifest_path),
                         encoder_id=tiny_encoder, layer=1, out_path=out))
        store = open_features(out)
        # 1 s of audio at 5 ms frames, minus conv edge effects
        assert 180 <= store.n_frames("low") <= 200


class TestCli:
    def test_export_command(self, tiny_encoder, manifest, tmp_path):
        out = tmp_path / "cli.awf"
        code = cli_main(["export", "--manifest", str(manifest),
                         "--encoder", tiny_encoder, "--layer", "1",
                         "--out", str(out)])
        assert code == 0 and out.exists()

    def test_bad_layer_exit_2(self, tiny_encoder, manifest, tmp_path):
        code = cli_main(["export", "--manifest", str(manifest),
                         "--encoder", tiny_encoder, "--layer", "42",
                         "--out", str(tmp_path / "x.awf")])
        assert code == 2

    def test_alignment_passthrough(self, tiny_encoder, manifest, tmp_path):
        ali = tmp_path / "ali.tsv"
        ali.write_text("utt0\tspk\t0.000\t0.100\ta\nutt0\tspk\t0.100\t0.250\tb\n")
        out = tmp_path / "cli2.awf"
        dst = tmp_path / "ali_out.tsv"
        code = cli_main(["export", "--manifest", str(manifest),
                         "--encoder", tiny_encoder, "--layer", "1",
                         "--out", str(out),
                         "--alignments", str(ali), "--alignments-out", str(dst)])
        assert code == 0
        assert dst.read_bytes() == ali.read_bytes()

    def test_bad_alignment_rejected(self, tiny_encoder, manifest, tmp_path):
        ali = tmp_path / "bad.tsv"
        ali.write_text("utt0\tspk\t0.200\t0.100\ta\n")
        code = cli_main(["export", "--manifest", str(manifest),
                         "--encoder", tiny_encoder, "--layer", "1",
                         "--out", str(tmp_path / "x.awf"),
                         "--alignments", str(ali)])
        assert code == 2
