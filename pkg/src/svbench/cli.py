"""Command-line surface. Every subcommand is a thin file-in/file-out wrapper
around one library operation chain; exit codes are 0 success, 1 domain error
(single diagnostic line on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import augment as aug
from . import backend, datamodel, metrics, schedule
from .errors import SvbenchError


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SVBENCH_THREADS", "1")))
    except ValueError:
        return 1


def _parse_map(path) -> dict[str, str]:
    """Two-column "<utt_id> <speaker_id>" text file."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(" ")
            if len(fields) != 2:
                raise datamodel.FormatError(f"{path}:{lineno}: expected 2 fields")
            out[fields[0]] = fields[1]
    return out


def _parse_enroll_map(path) -> dict[str, list[str]]:
    """Lines of "<speaker_id> <utt_id> [<utt_id> ...]"."""
    out: dict[str, list[str]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            fields = line.rstrip("\n").split(" ")
            if len(fields) < 2 or not fields[0]:
                continue
            out.setdefault(fields[0], []).extend(fields[1:])
    return out


def parse_policy(path) -> tuple[aug.AugmentPolicy, dict]:
    """key=value policy text; unknown keys are collected into the extras dict
    (noise_dir.<type>, snr ranges)."""
    kwargs: dict = {}
    extras: dict = {"noise_dirs": {}, "snr_db_lo": 5.0, "snr_db_hi": 20.0}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise datamodel.FormatError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            key, value = key.strip(), value.strip()
            if key == "speed_ratios":
                kwargs["speed_ratios"] = tuple(float(v) for v in value.split(","))
            elif key == "noise_probability":
                kwargs["noise_probability"] = float(value)
            elif key == "noise_types":
                kwargs["noise_types"] = tuple(v.strip() for v in value.split(","))
            elif key == "relabel_on_speed":
                kwargs["relabel_on_speed"] = value.lower() in ("1", "true", "yes")
            elif key.startswith("noise_dir."):
                extras["noise_dirs"][key.split(".", 1)[1]] = value
            elif key == "snr_db_lo":
                extras["snr_db_lo"] = float(value)
            elif key == "snr_db_hi":
                extras["snr_db_hi"] = float(value)
            else:
                raise datamodel.FormatError(f"{path}:{lineno}: unknown key {key!r}")
    return aug.AugmentPolicy(**kwargs), extras


# ---------------------------------------------------------------------------
# subcommands


def cmd_score(args) -> int:
    store = datamodel.load_embeddings(args.emb)
    if args.enroll_map:
        averaged = backend.average_enrollment(store, _parse_enroll_map(args.enroll_map))
        for rec in store.records:
            if rec.id not in averaged:
                averaged.add(rec)
        store = averaged
    trials = datamodel.parse_trials(args.trials, labeled=args.labeled)
    records = backend.score_trials(store, trials, n_threads=_threads())
    datamodel.save_scores(records, args.out)
    return 0


def cmd_cohort(args) -> int:
    store = datamodel.load_embeddings(args.emb)
    cohort = backend.build_cohort(store, _parse_map(args.spk_map), args.size, args.seed)
    datamodel.save_embeddings(cohort.to_store(), args.out)
    return 0


def cmd_norm(args) -> int:
    store = datamodel.load_embeddings(args.emb)
    cohort = backend.Cohort.from_store(datamodel.load_embeddings(args.cohort))
    records = datamodel.load_scores(args.scores)
    params = backend.AsNormParams(top_n=min(args.top_n, len(cohort)))
    out = backend.as_norm_scores(records, store, cohort, params)
    datamodel.save_scores(out, args.out)
    return 0


def _qmf_features(records, trials, args):
    store = datamodel.load_embeddings(args.emb)
    cohort = backend.Cohort.from_store(datamodel.load_embeddings(args.cohort))
    durations = datamodel.load_durations(args.qmf_durations)
    params = backend.AsNormParams(top_n=min(args.top_n, len(cohort)))
    return [
        backend.qmf_extract(t, r.score, store, durations, cohort, params)
        for t, r in zip(trials, records)
    ]


def cmd_calibrate(args) -> int:
    trials = datamodel.parse_trials(args.trials, labeled=True)
    records = datamodel.load_scores(args.scores)
    by_key = {r.key: r for r in records}
    ordered = [by_key[t.key] for t in trials]
    feats = _qmf_features(ordered, trials, args)
    model = backend.fit_calibration(feats, [t.label for t in trials])
    model.save(args.out)
    return 0


def cmd_apply_calib(args) -> int:
    records = datamodel.load_scores(args.scores)
    if args.cnsrc:
        # CNSRC preset: calibration is skipped, scores pass through unchanged
        datamodel.save_scores(records, args.out)
        return 0
    trials = [datamodel.Trial(r.enroll_id, r.test_id) for r in records]
    feats = _qmf_features(records, trials, args)
    model = backend.CalibrationModel.load(args.model)
    out = [
        datamodel.ScoreRecord(r.enroll_id, r.test_id, backend.apply_calibration(model, q))
        for r, q in zip(records, feats)
    ]
    datamodel.save_scores(out, args.out)
    return 0


def cmd_fuse(args) -> int:
    score_sets = [datamodel.load_scores(p) for p in args.scores]
    weights = [float(v) for v in args.weights.split(",")]
    fused = backend.fuse(score_sets, weights)
    datamodel.save_scores(fused, args.out)
    return 0


def cmd_search_weights(args) -> int:
    score_sets = [datamodel.load_scores(p) for p in args.scores]
    trials = datamodel.parse_trials(args.trials, labeled=True)
    params = metrics.DcfParams(args.p_target, args.c_miss, args.c_fa)
    weights = backend.search_fusion_weights(score_sets, trials, params, args.grid_step)
    line = ",".join(datamodel.format_score(w) for w in weights)
    print(line)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(line + "\n")
    return 0


def cmd_evaluate(args) -> int:
    records = datamodel.load_scores(args.scores)
    trials = datamodel.parse_trials(args.trials, labeled=True)
    split = metrics.labeled_scores_from_records(records, trials)
    params = metrics.DcfParams(args.p_target, args.c_miss, args.c_fa)
    eer_v = metrics.eer(split)
    dcf_v, dcf_t = metrics.min_dcf(split, params)
    print(
        f"EER(%) {100.0 * eer_v:.4f}  minDCF(p={params.p_target:g}) {dcf_v:.4f} "
        f"@ t={dcf_t:.6g}"
    )
    if args.report_dir:
        from . import report

        report.ensure_dir(args.report_dir)
        report.save_score_histogram(
            split, os.path.join(args.report_dir, "score_histogram.png"), threshold=dcf_t
        )
        with open(os.path.join(args.report_dir, "metrics.tsv"), "w", encoding="utf-8") as f:
            f.write("metric\tvalue\n")
            f.write(f"eer\t{datamodel.format_score(eer_v)}\n")
            f.write(f"min_dcf\t{datamodel.format_score(dcf_v)}\n")
            f.write(f"min_dcf_threshold\t{datamodel.format_score(dcf_t)}\n")
            f.write(f"p_target\t{params.p_target:g}\n")
    return 0


def cmd_enroll_avg(args) -> int:
    store = datamodel.load_embeddings(args.emb)
    out = backend.average_enrollment(store, _parse_enroll_map(args.enroll_map))
    datamodel.save_embeddings(out, args.out)
    return 0


def cmd_make_calib_trials(args) -> int:
    manifest = datamodel.load_manifest(args.manifest)
    trials = backend.build_calibration_trials(
        manifest, args.n_pairs, args.target_fraction, args.seed
    )
    datamodel.save_trials(trials, args.out)
    return 0


def cmd_concat_short(args) -> int:
    manifest = datamodel.load_manifest(args.manifest)
    out = aug.concat_short_utterances(manifest, args.min_out_s, args.short_threshold_s)
    datamodel.save_manifest(out, args.out)
    return 0


def cmd_fbank(args) -> int:
    w = aug.read_wav(args.wav)
    config = aug.FbankConfig(n_mels=args.n_mels, mean_normalize=not args.no_cmn)
    feats = aug.fbank(w, config)
    np.save(args.out, feats)
    return 0


def _utt_rng(seed: int, utt_id: str) -> np.random.Generator:
    # per-utterance stream so results do not depend on processing order
    return np.random.default_rng([seed, *utt_id.encode("utf-8")])


def _noise_files(noise_dirs: dict[str, str]) -> dict[str, list[str]]:
    out = {}
    for ntype, d in noise_dirs.items():
        files = sorted(
            os.path.join(d, f) for f in os.listdir(d) if f.lower().endswith(".wav")
        )
        if files:
            out[ntype] = files
    return out


def cmd_augment(args) -> int:
    manifest = datamodel.load_manifest(args.manifest)
    policy, extras = parse_policy(args.policy)
    noise_files = _noise_files(extras["noise_dirs"])
    os.makedirs(args.out_dir, exist_ok=True)

    out_rows = []
    for row in manifest.rows:
        rng = _utt_rng(args.seed, row.utt_id)
        decision = aug.sample_augmentation(policy, rng)
        w = aug.read_wav(row.path)
        speaker = row.speaker_id
        if decision.speed_ratio != 1.0:
            w = aug.perturb_speed_pitch(w, decision.speed_ratio)
            if policy.relabel_on_speed:
                speaker = f"{speaker}#sp{decision.speed_ratio:g}"
        if decision.noise_type is not None and decision.noise_type in noise_files:
            files = noise_files[decision.noise_type]
            noise = aug.read_wav(files[int(rng.integers(len(files)))])
            if noise.sample_rate_hz != w.sample_rate_hz:
                noise = aug.resample(noise, w.sample_rate_hz)
            if decision.noise_type == "reverb":
                w = aug.apply_reverb(w, noise)
            else:
                snr = float(rng.uniform(extras["snr_db_lo"], extras["snr_db_hi"]))
                w, _ = aug.mix_noise(w, noise, snr)
        out_path = os.path.join(args.out_dir, f"{row.utt_id}.wav")
        aug.write_wav(w, out_path)
        out_rows.append(
            datamodel.ManifestRow(row.utt_id, speaker, row.genre, w.duration_s, out_path)
        )
    datamodel.save_manifest(datamodel.UtteranceManifest(out_rows), args.out)
    return 0


def cmd_train_toy(args) -> int:
    spec = schedule.ToyDatasetSpec(
        n_classes=args.n_classes,
        dim=args.dim,
        samples_per_class=args.samples_per_class,
        within_class_std=args.within_class_std,
        seed=args.data_seed,
    )
    stage1 = schedule.default_stage1()
    stage2 = schedule.default_stage2()
    if args.stage1_epochs is not None:
        stage1.epochs = args.stage1_epochs
    if args.stage2_epochs is not None:
        stage2.epochs = args.stage2_epochs
    if args.loss_kind:
        stage1.loss_kind = args.loss_kind
    report_obj = schedule.train_toy(spec, stage1, stage2, seed=args.seed)
    print(report_obj.format_table())
    print(
        f"margin after stage 1: {report_obj.margin_after_stage1:.6f}  "
        f"after stage 2: {report_obj.margin_after_stage2:.6f}"
    )
    if args.out_csv:
        report_obj.write_csv(args.out_csv)
    if args.report_dir:
        from . import report

        report.ensure_dir(args.report_dir)
        report.save_training_curves(
            report_obj, os.path.join(args.report_dir, "training_curves.png")
        )
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def dcf_flags(p):
        p.add_argument("--p-target", type=float, default=0.01)
        p.add_argument("--c-miss", type=float, default=1.0)
        p.add_argument("--c-fa", type=float, default=1.0)

    p = sub.add_parser("score", help="cosine-score a trial list")
    p.add_argument("--emb", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--labeled", action="store_true")
    p.add_argument("--enroll-map", help="average multi-utterance enrollments first")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("cohort", help="build speaker-averaged imposter cohort")
    p.add_argument("--emb", required=True)
    p.add_argument("--spk-map", required=True)
    p.add_argument("--size", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cohort)

    p = sub.add_parser("norm", help="adaptive score normalization")
    p.add_argument("--scores", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--top-n", type=int, default=600)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_norm)

    p = sub.add_parser("calibrate", help="fit quality-aware calibration model")
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--qmf-durations", required=True)
    p.add_argument("--top-n", type=int, default=600)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("apply-calib", help="apply calibration model to scores")
    p.add_argument("--scores", required=True)
    p.add_argument("--model")
    p.add_argument("--emb")
    p.add_argument("--cohort")
    p.add_argument("--qmf-durations")
    p.add_argument("--top-n", type=int, default=600)
    p.add_argument("--cnsrc", action="store_true", help="skip calibration (pass scores through)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_apply_calib)

    p = sub.add_parser("fuse", help="weighted sum of z-normalized score sets")
    p.add_argument("--scores", action="append", required=True)
    p.add_argument("--weights", required=True, help="comma-separated, summing to 1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("search-weights", help="grid-search fusion weights on minDCF")
    p.add_argument("--scores", action="append", required=True)
    p.add_argument("--trials", required=True)
    dcf_flags(p)
    p.add_argument("--grid-step", type=float, default=0.1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_search_weights)

    p = sub.add_parser("evaluate", help="EER / minDCF of a labeled score set")
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", required=True)
    dcf_flags(p)
    p.add_argument("--report-dir", help="write figures and metrics.tsv here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("enroll-avg", help="average enrollment embeddings per speaker")
    p.add_argument("--emb", required=True)
    p.add_argument("--enroll-map", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_enroll_avg)

    p = sub.add_parser("make-calib-trials", help="sample calibration trial pairs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--n-pairs", type=int, required=True)
    p.add_argument("--target-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_calib_trials)

    p = sub.add_parser("concat-short", help="concatenate short training utterances")
    p.add_argument("--manifest", required=True)
    p.add_argument("--min-out-s", type=float, default=5.0)
    p.add_argument("--short-threshold-s", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_concat_short)

    p = sub.add_parser("fbank", help="log-mel filterbank features for one WAV")
    p.add_argument("--wav", required=True)
    p.add_argument("--n-mels", type=int, default=80)
    p.add_argument("--no-cmn", action="store_true")
    p.add_argument("--out", required=True, help=".npy output path")
    p.set_defaults(func=cmd_fbank)

    p = sub.add_parser("augment", help="apply the online augmentation policy to a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--out", required=True, help="output manifest path")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train-toy", help="two-stage toy training run")
    p.add_argument("--n-classes", type=int, default=4)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--samples-per-class", type=int, default=16)
    p.add_argument("--within-class-std", type=float, default=0.05)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stage1-epochs", type=int)
    p.add_argument("--stage2-epochs", type=int)
    p.add_argument("--loss-kind", choices=["am", "aam", "subcenter_aam", "intertopk", "hem"])
    p.add_argument("--out-csv")
    p.add_argument("--report-dir")
    p.set_defaults(func=cmd_train_toy)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SvbenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
