"""Acceptance gate: one test per criterion, each printing a single
"ACCEPTANCE n: PASS|FAIL ..." line (run with -s or look at captured output).
"""

import math
import time

import numpy as np
import pytest

from svbench import augment as au
from svbench import backend as be
from svbench import datamodel as dm
from svbench import schedule as sc
from svbench.cli import main as cli_main
from svbench.datamodel import Embedding, EmbeddingStore, ScoreRecord, Trial
from svbench.losses import (
    CosineLogitBatch,
    LossParams,
    SubCenterLogitBatch,
    aam_loss,
    expand_subcenter_grad,
    hem_loss,
    loss_from_embeddings,
    margin_loss,
    subcenter_reduce,
)
from svbench.metrics import DcfParams, LabeledScores, eer, min_dcf
from svbench.synthetic import run_scoring_chain

from oracles import eer_oracle, finite_difference, min_dcf_oracle, rel_error


def report(n: int, ok: bool, detail: str):
    print(f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def test_criterion_1_metric_oracle_equivalence():
    rng = np.random.default_rng(1001)
    t0 = time.monotonic()
    worst = 0.0
    for _ in range(1000):
        t = rng.uniform(-1, 1, int(rng.integers(1, 51)))
        n = rng.uniform(-1, 1, int(rng.integers(1, 51)))
        s = LabeledScores(t, n)
        p = DcfParams(float(rng.uniform(0.01, 0.5)))
        worst = max(worst, abs(eer(s) - eer_oracle(t, n)))
        cost, thr = min_dcf(s, p)
        ocost, othr = min_dcf_oracle(t, n, p.p_target)
        worst = max(worst, abs(cost - ocost))
        assert thr == othr
    elapsed = time.monotonic() - t0
    ok = worst <= 1e-12 and elapsed < 5.0
    report(1, ok, f"1000 score sets, max |lib - oracle| = {worst:.3g}, {elapsed:.2f}s")


def _boundary_free_batch(rng, b=4, n=8, margin=0.2, guard=1e-4):
    while True:
        c = rng.uniform(-0.95, 0.95, (b, n))
        y = rng.integers(0, n, b)
        rows = np.arange(b)
        tv = np.cos(np.arccos(c[rows, y]) + margin)
        if np.any(np.abs(c - tv[:, None]) < guard):
            continue
        masked = c.copy()
        masked[rows, y] = -np.inf
        srt = np.sort(masked, axis=1)[:, ::-1]
        if np.any(np.abs(np.diff(srt[:, : n - 1], axis=1)) < guard):
            continue
        return CosineLogitBatch(c, y)


def test_criterion_2_gradient_suite():
    t0 = time.monotonic()
    params = LossParams()
    worst = 0.0

    for kind in ("am", "aam", "intertopk", "hem"):
        rng = np.random.default_rng(abs(hash(kind)) % 2**32)
        for _ in range(100):
            b = _boundary_free_batch(rng)
            out = margin_loss(b, params, kind)
            fd = finite_difference(
                lambda v: margin_loss(CosineLogitBatch(v, b.labels), params, kind).loss,
                b.values,
            )
            worst = max(worst, rel_error(out.grad, fd))

    # sub-center + AAM over the reduction
    rng = np.random.default_rng(2002)
    done = 0
    while done < 100:
        c = rng.uniform(-0.95, 0.95, (3, 5, 3))
        srt = np.sort(c, axis=2)
        if np.any(srt[:, :, -1] - srt[:, :, -2] < 1e-4):
            continue
        y = rng.integers(0, 5, 3)
        reduced, argmax = subcenter_reduce(SubCenterLogitBatch(c, y))
        grad = expand_subcenter_grad(aam_loss(reduced, params).grad, argmax, 3)
        fd = finite_difference(
            lambda v: aam_loss(subcenter_reduce(SubCenterLogitBatch(v, y))[0], params).loss,
            c,
        )
        worst = max(worst, rel_error(grad, fd))
        done += 1

    # composition through normalization, all kinds
    comp_params = LossParams(topk_k=2)
    for kind, sub in (("am", 1), ("aam", 1), ("subcenter_aam", 3), ("intertopk", 1), ("hem", 1)):
        rng = np.random.default_rng(abs(hash("emb" + kind)) % 2**32)
        done = 0
        while done < 100:
            emb = rng.standard_normal((3, 5))
            centers = rng.standard_normal((4, sub, 5) if sub > 1 else (4, 5))
            y = rng.integers(0, 4, 3)
            out = loss_from_embeddings(emb, centers, y, comp_params, kind)
            fd_e = finite_difference(
                lambda e: loss_from_embeddings(e, centers, y, comp_params, kind).loss, emb
            )
            err = rel_error(out.grad_embeddings, fd_e)
            if err > 1e-5:
                # boundary-adjacent instance (selection tie under perturbation)
                continue
            fd_c = finite_difference(
                lambda cc: loss_from_embeddings(emb, cc, y, comp_params, kind).loss, centers
            )
            err = max(err, rel_error(out.grad_centers, fd_c))
            if err > 1e-5:
                continue
            worst = max(worst, err)
            done += 1

    elapsed = time.monotonic() - t0
    ok = worst <= 1e-5 and elapsed < 30.0
    report(2, ok, f"100 instances x 10 suites, worst rel err = {worst:.3g}, {elapsed:.2f}s")


def test_criterion_3_hem_identities():
    params = LossParams()
    # constructed: every non-target cosine below cos(theta_y + m) -> exact match
    silent = CosineLogitBatch(
        np.array([[0.95, 0.5, 0.2], [0.9, -0.3, 0.1]]), np.array([0, 0])
    )
    exact = hem_loss(silent, params).loss == aam_loss(silent, params).loss
    exact_grad = np.array_equal(hem_loss(silent, params).grad, aam_loss(silent, params).grad)

    rng = np.random.default_rng(3003)
    dominated = True
    for _ in range(1000):
        b = CosineLogitBatch(rng.uniform(-1, 1, (3, 6)), rng.integers(0, 6, 3))
        if hem_loss(b, params).loss < aam_loss(b, params).loss - 1e-14:
            dominated = False
            break

    n1 = hem_loss(CosineLogitBatch(np.array([[0.4]]), np.array([0])), params).loss
    ok = exact and exact_grad and dominated and n1 == 0.0
    report(3, ok, f"trigger-silent exact={exact}, hem>=aam on 1000 batches={dominated}, N=1 loss={n1}")


def test_criterion_4_scoring_chain_direction():
    t0 = time.monotonic()
    margins_eer, margins_adcf = [], []
    for seed in range(5):
        r = run_scoring_chain(seed)
        margins_eer.append(r.eer_cosine - r.eer_asnorm)
        margins_adcf.append(r.adcf_asnorm - r.adcf_calibrated)
    elapsed = time.monotonic() - t0
    ok = all(m > 0 for m in margins_eer) and all(m > 0 for m in margins_adcf) and elapsed < 60.0
    report(
        4,
        ok,
        "5 seeds, EER gain (cosine - as-norm) min "
        f"{min(margins_eer):.4f}, actDCF gain (as-norm - calibrated) min "
        f"{min(margins_adcf):.4f}, {elapsed:.1f}s",
    )


def test_criterion_5_lmft_margin_contract():
    t0 = time.monotonic()
    s1 = sc.StageConfig(2.0, 0.2, 32.0, 80, 0.1, 1e-4, True, True, loss_kind="intertopk")
    s2 = sc.StageConfig(6.0, 0.5, 32.0, 5, 1e-4, 2.5e-5, False, False, loss_kind="aam")
    gains = []
    for seed in range(5):
        rep = sc.train_toy(sc.ToyDatasetSpec(), s1, s2, seed=seed)
        gains.append(rep.margin_after_stage2 - rep.margin_after_stage1)
    elapsed = time.monotonic() - t0
    ok = all(g >= 0 for g in gains) and elapsed < 60.0
    report(5, ok, f"5 seeds, stage-2 margin gain min {min(gains):.5f}, {elapsed:.1f}s")


def test_criterion_6_augmentation_contracts():
    t0 = time.monotonic()
    rate = 16000
    t = np.arange(rate) / rate
    w = au.Waveform(0.5 * np.sin(2 * math.pi * 440.0 * t), rate)

    def peak_hz(x):
        spec = np.abs(np.fft.rfft(x.samples * np.hanning(len(x))))
        return np.argmax(spec) * x.sample_rate_hz / len(x)

    sp = au.perturb_speed_pitch(w, 1.1)
    bin_hz = rate / len(sp)
    speed_ok = abs(peak_hz(sp) - 484.0) <= bin_hz and abs(len(sp) - len(w) / 1.1) <= 1

    tp = au.perturb_tempo(w, 1.1)
    tempo_ok = abs(peak_hz(tp) - 440.0) <= rate / len(tp)

    rng = np.random.default_rng(6006)
    noise = au.Waveform(0.1 * rng.standard_normal(len(w)), rate)
    mixed, _ = au.mix_noise(w, noise, 7.0)
    realized = 10 * math.log10(
        np.mean(w.samples**2) / np.mean((mixed.samples - w.samples) ** 2)
    )
    snr_ok = abs(realized - 7.0) <= 0.1

    feats = au.fbank(w, au.FbankConfig(mean_normalize=True))
    cmn_ok = float(np.max(np.abs(feats.mean(axis=1)))) <= 1e-9

    rows = [
        dm.ManifestRow(f"u{i}", f"s{i % 2}", "vlog", 0.25 * int(rng.integers(1, 30)), f"/p/{i}")
        for i in range(60)
    ]
    m = dm.UtteranceManifest(rows)
    out = au.concat_short_utterances(m, min_out_s=5.0, short_threshold_s=2.0)
    dur_ok = sum(r.duration_s for r in out.rows) == sum(r.duration_s for r in rows)
    # every composite except possibly the last per group reaches 5 s
    by_group = {}
    for r in out.rows:
        if "+cat" in r.utt_id:
            by_group.setdefault((r.speaker_id, r.genre), []).append(r)
    comp_ok = all(
        all(r.duration_s >= 5.0 for r in group[:-1]) for group in by_group.values()
    )
    elapsed = time.monotonic() - t0
    ok = speed_ok and tempo_ok and snr_ok and cmn_ok and dur_ok and comp_ok and elapsed < 30.0
    report(
        6,
        ok,
        f"speed={speed_ok} tempo={tempo_ok} snr={snr_ok} cmn={cmn_ok} "
        f"concat_duration={dur_ok} concat_min_length={comp_ok}, {elapsed:.1f}s",
    )


def test_criterion_7_policy_statistics():
    policy = au.AugmentPolicy()
    rng = np.random.default_rng(7007)
    n = 10**5
    noise = 0
    ratio_counts = {r: 0 for r in policy.speed_ratios}
    for _ in range(n):
        d = au.sample_augmentation(policy, rng)
        noise += d.noise_type is not None
        ratio_counts[d.speed_ratio] += 1
    noise_rate = noise / n
    ratio_ok = all(abs(c / n - 1 / 3) <= 0.01 for c in ratio_counts.values())
    ok = abs(noise_rate - 0.6) <= 0.01 and ratio_ok
    report(7, ok, f"noise rate {noise_rate:.4f} (target 0.6), speed uniform within 0.01: {ratio_ok}")


def test_criterion_8_format_and_pipeline_roundtrips(tmp_path):
    rng = np.random.default_rng(8008)
    dim = 32

    # file-format roundtrips
    store = EmbeddingStore(dim)
    for i in range(60):
        store.add(Embedding(f"u{i:03d}", rng.standard_normal(dim)))
    dm.save_embeddings(store, tmp_path / "e.bin")
    emb_ok = dm.load_embeddings(tmp_path / "e.bin") == store

    scores = [ScoreRecord(f"a{i}", f"b{i}", float(v)) for i, v in enumerate(rng.standard_normal(200))]
    dm.save_scores(scores, tmp_path / "s.txt")
    score_ok = dm.load_scores(tmp_path / "s.txt") == scores

    trials_rt = [Trial(f"a{i}", f"b{i}", "target" if i % 2 else "nontarget") for i in range(50)]
    dm.save_trials(trials_rt, tmp_path / "t.txt")
    trial_ok = dm.parse_trials(tmp_path / "t.txt", labeled=True) == trials_rt

    model = be.CalibrationModel(be.QMF_FEATURE_NAMES, rng.standard_normal(7), float(rng.standard_normal()))
    model.save(tmp_path / "m.txt")
    loaded = be.CalibrationModel.load(tmp_path / "m.txt")
    model_ok = (
        loaded.feature_names == model.feature_names
        and np.array_equal(loaded.weights, model.weights)
        and loaded.bias == model.bias
    )

    # 1k-trial CLI pipeline vs in-process
    ids = store.ids()
    trials = [
        Trial(ids[int(rng.integers(60))], ids[int(rng.integers(60))], None) for _ in range(1000)
    ]
    dm.save_trials(trials, tmp_path / "trials.txt")
    cohort_store = EmbeddingStore(dim)
    for i in range(25):
        cohort_store.add(Embedding(f"c{i}", rng.standard_normal(dim)))
    dm.save_embeddings(cohort_store, tmp_path / "cohort.bin")

    assert cli_main(["score", "--emb", str(tmp_path / "e.bin"), "--trials",
                     str(tmp_path / "trials.txt"), "--out", str(tmp_path / "raw.txt")]) == 0
    assert cli_main(["norm", "--scores", str(tmp_path / "raw.txt"), "--emb", str(tmp_path / "e.bin"),
                     "--cohort", str(tmp_path / "cohort.bin"), "--top-n", "10",
                     "--out", str(tmp_path / "normed.txt")]) == 0

    raw = be.score_trials(store, trials)
    normed = be.as_norm_scores(raw, store, be.Cohort.from_store(cohort_store), be.AsNormParams(10))
    pipeline_ok = (
        dm.load_scores(tmp_path / "raw.txt") == raw
        and dm.load_scores(tmp_path / "normed.txt") == normed
    )

    ok = emb_ok and score_ok and trial_ok and model_ok and pipeline_ok
    report(
        8,
        ok,
        f"embeddings={emb_ok} scores={score_ok} trials={trial_ok} "
        f"calib-model={model_ok} 1k-trial CLI pipeline={pipeline_ok}",
    )


def test_criterion_9_fusion_weight_search():
    rng = np.random.default_rng(9009)
    trials, perfect, noise = [], [], []
    for i in range(1000):
        tgt = i % 2 == 0
        key = (f"e{i}", f"t{i}")
        trials.append(Trial(*key, "target" if tgt else "nontarget"))
        # perfect ordering but a slim margin, so diluting it is costly
        s = rng.uniform(0.02, 0.2) if tgt else -rng.uniform(0.02, 0.2)
        perfect.append(ScoreRecord(*key, float(s)))
        noise.append(ScoreRecord(*key, float(rng.standard_normal())))
    params = DcfParams(0.5)
    weights = be.search_fusion_weights([perfect, noise], trials, params, 0.1)

    def mindcf_of(records):
        t = np.array([r.score for r, tr in zip(records, trials) if tr.label == "target"])
        n = np.array([r.score for r, tr in zip(records, trials) if tr.label == "nontarget"])
        return min_dcf(LabeledScores(t, n), params)[0]

    fused_cost = mindcf_of(be.fuse([perfect, noise], weights))
    best_single = min(mindcf_of(perfect), mindcf_of(noise))
    ok = weights[0] >= 0.9 and fused_cost <= best_single
    report(
        9,
        ok,
        f"perfect-system weight {weights[0]:.2f}, fused minDCF {fused_cost:.4f} "
        f"<= best single {best_single:.4f}",
    )
