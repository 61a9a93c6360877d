"""Command-line pipeline orchestration.

Subcommands: ingest, synth, mine, kmeans-targets, train, eval, sweep.
Every command takes `--config <file>` (flat key=value), repeatable
`--set key=value` overrides, `--seed`, `--out <dir>` and `--threads`, and
writes its resolved configuration plus a stats record next to its outputs.

Artifact files are bit-reproducible given identical inputs and config;
`stats.jsonl` and the wall_time column of sweep.csv carry timings and are
the only outputs that legitimately differ between reruns.

Exit codes: 0 success, 1 internal error, 2 bad input or configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import kmeans as kmeans_mod
from .config import REGISTRY, InputError, RunConfig, build_config
from .contrastive import TrainConfig, train_pooler
from .evaluation import collect_eval_awes, samediff_map
from .featurestore import (
    FrameMatrix,
    filter_eval_words,
    load_alignments,
    load_word_segments,
    open_features,
    write_features,
)
from .mining_knn import build_ann_index, embed_segments, knn_pairs, sample_segments
from .mining_mpr import extract_ngrams, index_ngrams, mine_pairs
from .pairs import load_pairs, write_pairs
from .pooling import PoolerConfig, init_pooler, load_pooler, save_pooler
from .synthcorpus import CorpusSpec, generate_corpus, split_utterances


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_stats(out: Path, record: dict) -> None:
    with open(out / "stats.jsonl", "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def _corpus_spec(cfg: RunConfig, seed: int) -> CorpusSpec:
    return CorpusSpec(
        n_phone_types=cfg["corpus.n_phone_types"],
        n_word_types=cfg["corpus.n_word_types"],
        phones_per_word=(cfg["corpus.phones_per_word_min"], cfg["corpus.phones_per_word_max"]),
        n_speakers=cfg["corpus.n_speakers"],
        utterances_per_speaker=cfg["corpus.utterances_per_speaker"],
        words_per_utterance=(cfg["corpus.words_per_utterance_min"],
                             cfg["corpus.words_per_utterance_max"]),
        frames_per_phone=(cfg["corpus.frames_per_phone_min"], cfg["corpus.frames_per_phone_max"]),
        silence_frames=(cfg["corpus.silence_frames_min"], cfg["corpus.silence_frames_max"]),
        feature_dim=cfg["corpus.feature_dim"],
        speaker_shift_scale=cfg["corpus.speaker_shift_scale"],
        noise_scale=cfg["corpus.noise_scale"],
        frame_period_ms=cfg["corpus.frame_period_ms"],
        seed=seed,
    )


def _pooler_config(cfg: RunConfig, input_dim: int, seed: int) -> PoolerConfig:
    return PoolerConfig(
        input_dim=input_dim,
        hidden_dim=cfg["pooler.hidden_dim"],
        conv_kernel=cfg["pooler.conv_kernel"],
        conv_stride=cfg["pooler.conv_stride"],
        n_heads=cfg["pooler.n_heads"],
        max_positions=cfg["pooler.max_positions"],
        seed=seed,
    )


def _train_config(cfg: RunConfig, seed: int) -> TrainConfig:
    clip = cfg["train.clip_norm"]
    return TrainConfig(
        temperature=cfg["train.temperature"],
        batch_size=cfg["train.batch_size"],
        epochs=cfg["train.epochs"],
        max_iterations_per_epoch=cfg["train.max_iterations"],
        learning_rate=cfg["train.learning_rate"],
        seed=seed,
        denominator_mode=cfg["train.denominator_mode"],
        clip_norm=None if clip == 0.0 else clip,
    )


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{what} not found: {path}")
    return path


def _extract_occurrences(alignments, cfg: RunConfig, frame_period_ms: float, store=None):
    silence = frozenset(cfg["mine.silence_labels"].split(","))
    occurrences = []
    for ali in alignments:
        occs = extract_ngrams(ali, cfg["mine.n_min"], cfg["mine.n_max"],
                              frame_period_ms, silence_labels=silence)
        if store is not None and occs:
            total = store.n_frames(ali.utt_id)
            worst = max(o.seg.end_frame for o in occs)
            if worst > total:
                raise InputError(
                    f"alignment for '{ali.utt_id}' extends to frame {worst} "
                    f"but features hold only {total}"
                )
        occurrences.extend(occs)
    return occurrences


def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    t0 = time.perf_counter()
    spec = _corpus_spec(cfg, args.seed)
    paths = generate_corpus(spec, out)
    wall = time.perf_counter() - t0
    cfg.write_resolved(out / "config.resolved")
    n_pairs = sum(1 for _ in open(paths.gt_pairs, encoding="utf-8"))
    _write_stats(out, {"cmd": "synth", "gt_pairs": n_pairs, "wall_time_s": wall})
    print(f"synth: corpus written to {out} ({n_pairs} ground-truth pairs)")
    return 0


def cmd_ingest(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    manifest = _require(args.manifest, "manifest")
    t0 = time.perf_counter()
    records = []
    with open(manifest, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise InputError(f"{manifest}:{lineno}: expected utt_id<TAB>npy_path")
            utt_id, npy_path = parts
            arr = np.load(_require(npy_path, f"feature file for '{utt_id}'"))
            if arr.ndim != 2:
                raise InputError(f"{npy_path}: expected a 2-D array, got shape {arr.shape}")
            records.append(FrameMatrix(utt_id, arr.astype(np.float32),
                                       cfg["corpus.frame_period_ms"]))
    if not records:
        raise InputError(f"{manifest}: no records")
    write_features(records, out / "features.awf")
    cfg.write_resolved(out / "config.resolved")
    _write_stats(out, {"cmd": "ingest", "n_utts": len(records),
                       "wall_time_s": time.perf_counter() - t0})
    print(f"ingest: {len(records)} utterances -> {out / 'features.awf'}")
    return 0


def cmd_mine(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    store = open_features(_require(args.features, "feature file"))
    if args.mode == "mpr":
        alignments = load_alignments(_require(args.alignments, "alignment file"))
        t0 = time.perf_counter()
        occurrences = _extract_occurrences(alignments, cfg, store.frame_period_ms, store)
        index = index_ngrams(occurrences)
        pairs = mine_pairs(index, cfg["mine.cap"], seed=args.seed,
                           exclude_overlap=cfg["mine.exclude_overlap"])
        wall = time.perf_counter() - t0
        distinct_keys = len(index)
    else:
        t0 = time.perf_counter()
        segments = sample_segments(store, cfg["knn.min_ms"], cfg["knn.max_ms"],
                                   cfg["knn.min_gap_ms"], seed=args.seed)
        if len(segments) < cfg["knn.nlist"]:
            raise InputError(
                f"only {len(segments)} segments sampled, fewer than knn.nlist="
                f"{cfg['knn.nlist']}"
            )
        vectors = embed_segments(store, segments)
        index = build_ann_index(vectors, segments, cfg["knn.nlist"],
                                cfg["knn.nprobe"], seed=args.seed,
                                metric=cfg["knn.metric"])
        pairs = knn_pairs(index, k=cfg["knn.k"])
        wall = time.perf_counter() - t0
        distinct_keys = 1
    write_pairs(pairs, out / "pairs.tsv")
    cfg.write_resolved(out / "config.resolved")
    _write_stats(out, {"cmd": f"mine-{args.mode}", "pair_count": len(pairs),
                       "distinct_keys": distinct_keys, "wall_time_s": wall})
    print(f"mine[{args.mode}]: {len(pairs)} pairs, {distinct_keys} keys, "
          f"{wall:.2f}s -> {out / 'pairs.tsv'}")
    return 0


def cmd_kmeans_targets(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    store = open_features(_require(args.features, "feature file"))
    t0 = time.perf_counter()
    frames = kmeans_mod.sample_frames(store, cfg["kmeans.sample_fraction"], seed=args.seed)
    k = cfg["kmeans.k"]
    if frames.shape[0] < k:
        raise InputError(
            f"sampled {frames.shape[0]} frames, fewer than kmeans.k={k}; "
            "raise kmeans.sample_fraction or lower k"
        )
    centroids = kmeans_mod.fit_kmeans(frames, k, cfg["kmeans.max_iters"],
                                      cfg["kmeans.tol"], seed=args.seed)
    kmeans_mod.export_targets(store, centroids, out / "targets.tsv")
    kmeans_mod.save_centroids(centroids, out / "centroids.awk")
    wall = time.perf_counter() - t0
    cfg.write_resolved(out / "config.resolved")
    _write_stats(out, {"cmd": "kmeans-targets", "k": k,
                       "iterations": len(centroids.inertia_history),
                       "final_inertia": centroids.inertia_history[-1],
                       "wall_time_s": wall})
    print(f"kmeans-targets: k={k}, inertia={centroids.inertia_history[-1]:.2f} -> {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    store = open_features(_require(args.features, "feature file"))
    pairs = load_pairs(_require(args.pairs, "pair file"))
    if not pairs.pairs:
        raise InputError(f"{args.pairs}: no pairs to train on")
    t0 = time.perf_counter()
    params = init_pooler(_pooler_config(cfg, store.dim, args.seed))
    trained, log = train_pooler(store, pairs, params, _train_config(cfg, args.seed))
    wall = time.perf_counter() - t0
    save_pooler(trained, out / "pooler.awp")
    log.write_csv(out / "trainlog.csv")
    cfg.write_resolved(out / "config.resolved")
    final_loss = log.entries[-1][2] if log.entries else float("nan")
    _write_stats(out, {"cmd": "train", "steps": len(log), "final_loss": final_loss,
                       "wall_time_s": wall})
    print(f"train: {len(log)} steps, final loss {final_loss:.4f} -> {out / 'pooler.awp'}")
    return 0


def _load_eval_words(args, store):
    words = load_word_segments(_require(args.words, "word segment file"))
    if args.filter_words:
        parts = args.filter_words.split(",")
        if len(parts) not in (2, 3):
            raise InputError("--filter-words expects CHARS,DUR_S or CHARS,DUR_S,ALT_CHARS")
        try:
            min_chars = int(parts[0])
            min_dur = float(parts[1])
            alt = int(parts[2]) if len(parts) == 3 else 2
        except ValueError:
            raise InputError(f"bad --filter-words '{args.filter_words}'") from None
        words = filter_eval_words(words, min_chars, alt, min_dur,
                                  use_alt_chars=args.short_words)
    known = [w for w in words if w.utt_id in store]
    if len(known) < len(words):
        missing = sorted({w.utt_id for w in words if w.utt_id not in store})
        raise InputError(f"word segments reference unknown utterances: {missing[:5]}")
    return known


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    store = open_features(_require(args.features, "feature file"))
    words = _load_eval_words(args, store)
    pooling = "mean"
    if args.pooler is not None:
        pooling = load_pooler(_require(args.pooler, "pooler checkpoint"))
        if pooling.config.input_dim != store.dim:
            raise InputError(
                f"pooler expects D={pooling.config.input_dim}, features have D={store.dim}"
            )
    t0 = time.perf_counter()
    items, dropped = collect_eval_awes(store, words, pooling)
    report = samediff_map(items, cross_speaker_only=cfg["eval.cross_speaker_only"],
                          n_workers=args.threads)
    wall = time.perf_counter() - t0
    text = report.human_text()
    if dropped:
        text += f"\n  dropped (too short for pooler): {dropped}"
    (out / "report.txt").write_text(text + "\n" + report.machine_line() + "\n",
                                    encoding="utf-8")
    cfg.write_resolved(out / "config.resolved")
    _write_stats(out, {"cmd": "eval", "map": report.map, "n_items": report.n_items,
                       "dropped": dropped, "wall_time_s": wall})
    print(report.machine_line())
    return 0


def _speaker_of_pairs(pairs, alignments):
    speaker = {ali.utt_id: ali.speaker_id for ali in alignments}
    return [(speaker[a.utt_id], speaker[b.utt_id]) for a, b, _ in pairs.pairs]


def cmd_sweep(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    store = open_features(_require(args.features, "feature file"))
    alignments = load_alignments(_require(args.alignments, "alignment file"))
    all_words = load_word_segments(_require(args.words, "word segment file"))
    points = []
    for token in args.points.split(","):
        try:
            points.append(float(token) if args.axis == "hours" else int(token))
        except ValueError:
            raise InputError(f"bad sweep point '{token}'") from None
    if points != sorted(points):
        raise InputError("sweep points must be ascending")

    train_ids, test_ids = split_utterances(store.utt_ids)
    train_set, test_set = set(train_ids), set(test_ids)
    test_words = [w for w in all_words if w.utt_id in test_set]
    train_alis = [a for a in alignments if a.utt_id in train_set]

    rows = []
    for point_idx, point in enumerate(points):
        rng = np.random.default_rng([args.seed, point_idx])
        t0 = time.perf_counter()
        if args.axis == "hours":
            budget_s = point * 3600.0
            durations = {u: store.n_frames(u) * store.frame_period_ms / 1000.0
                         for u in train_ids}
            if budget_s > sum(durations.values()):
                raise InputError(
                    f"sweep point {point} h exceeds available "
                    f"{sum(durations.values()) / 3600.0:.3f} h of training audio"
                )
            order = [train_ids[i] for i in rng.permutation(len(train_ids))]
            chosen_utts, acc = set(), 0.0
            for utt in order:
                if acc >= budget_s:
                    break
                chosen_utts.add(utt)
                acc += durations[utt]
            subset_alis = [a for a in train_alis if a.utt_id in chosen_utts]
            occurrences = _extract_occurrences(subset_alis, cfg, store.frame_period_ms)
            pairs = mine_pairs(index_ngrams(occurrences), cfg["mine.cap"],
                               seed=args.seed, exclude_overlap=cfg["mine.exclude_overlap"])
        else:
            occurrences = _extract_occurrences(train_alis, cfg, store.frame_period_ms)
            pairs = mine_pairs(index_ngrams(occurrences), cfg["mine.cap"],
                               seed=args.seed, exclude_overlap=cfg["mine.exclude_overlap"])
            eligible = pairs.pairs
            if args.single_speaker:
                spk = _speaker_of_pairs(pairs, alignments)
                counts: dict[str, int] = {}
                for sa, sb in spk:
                    if sa == sb:
                        counts[sa] = counts.get(sa, 0) + 1
                if not counts:
                    raise InputError("no same-speaker pairs available")
                best = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
                eligible = [p for p, (sa, sb) in zip(pairs.pairs, spk)
                            if sa == best and sb == best]
            if point > len(eligible):
                raise InputError(
                    f"sweep point {point} exceeds {len(eligible)} available pairs"
                )
            chosen = rng.choice(len(eligible), size=point, replace=False)
            pairs = type(pairs)(pairs=[eligible[i] for i in np.sort(chosen)],
                                provenance=pairs.provenance)

        train_seed = int(rng.integers(2**63))
        params = init_pooler(_pooler_config(cfg, store.dim, train_seed))
        trained, _ = train_pooler(store, pairs, params, _train_config(cfg, train_seed))
        items, _ = collect_eval_awes(store, test_words, trained)
        report = samediff_map(items, cross_speaker_only=cfg["eval.cross_speaker_only"],
                              n_workers=args.threads)
        wall = time.perf_counter() - t0
        rows.append((point, report.map, len(pairs), wall))
        print(f"sweep[{args.axis}] point={point}: map={report.map:.4f} "
              f"pairs={len(pairs)} ({wall:.1f}s)")

    with open(out / "sweep.csv", "w", encoding="utf-8", newline="\n") as f:
        f.write("point,map,n_pairs,wall_time\n")
        for point, m, n_pairs, wall in rows:
            f.write(f"{point},{m:.6f},{n_pairs},{wall:.3f}\n")
    cfg.write_resolved(out / "config.resolved")
    _write_stats(out, {"cmd": "sweep", "axis": args.axis, "points": len(rows),
                       "wall_time_s": sum(r[3] for r in rows)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="awekit",
        description="Acoustic word embedding toolkit: mine pairs, train pooling, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)

    p = sub.add_parser("ingest", help="convert a manifest of .npy features to AWF")
    common(p)
    p.add_argument("--manifest", required=True, help="TSV: utt_id<TAB>npy_path")

    p = sub.add_parser("mine", help="mine positive pairs")
    common(p)
    p.add_argument("--mode", choices=("mpr", "knn"), required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--alignments", default=None, help="required for --mode mpr")

    p = sub.add_parser("kmeans-targets", help="fit k-means and export frame targets")
    common(p)
    p.add_argument("--features", required=True)

    p = sub.add_parser("train", help="train the learned pooler on mined pairs")
    common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--pairs", required=True)

    p = sub.add_parser("eval", help="same-different word discrimination MAP")
    common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--words", required=True)
    p.add_argument("--pooler", default=None, help="pooler checkpoint; default mean pooling")
    p.add_argument("--filter-words", default=None, metavar="CHARS,DUR_S[,ALT_CHARS]")
    p.add_argument("--short-words", action="store_true",
                   help="use the alternate character threshold")

    p = sub.add_parser("sweep", help="data-efficiency sweep")
    common(p)
    p.add_argument("--axis", choices=("hours", "pairs"), required=True)
    p.add_argument("--points", required=True, help="comma-separated ascending points")
    p.add_argument("--single-speaker", action="store_true")
    p.add_argument("--features", required=True)
    p.add_argument("--alignments", required=True)
    p.add_argument("--words", required=True)

    return parser


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "mine": cmd_mine,
    "kmeans-targets": cmd_kmeans_targets,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "mine" and args.mode == "mpr" and args.alignments is None:
        print("mine --mode mpr requires --alignments", file=sys.stderr)
        return 2
    try:
        cfg = build_config(args.config, args.set)
        return COMMANDS[args.command](args, cfg)
    except (InputError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
