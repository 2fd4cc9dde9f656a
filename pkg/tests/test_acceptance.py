"""Acceptance criteria, one test each.

Every test records its verdict in ``conftest.ACCEPTANCE`` before asserting,
so the terminal summary lists all criteria even when some fail.
"""

import time

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE
from phiaqa import attention as A
from phiaqa import diffcore as dc
from phiaqa import gmf, lcr, metrics, scoring
from phiaqa import synthdata as sd
from phiaqa.errors import BadMagicError, TruncatedPayloadError, VersionMismatchError
from phiaqa.pipeline import (Dataset, TrainConfig, compare_strategies, evaluate, load_checkpoint,
                             run_ablation, save_checkpoint, train)
from phiaqa.pipeline import model as mdl


def record(label, ok, detail):
    ACCEPTANCE[label] = (bool(ok), detail)
    assert ok, detail


def test_criterion_01_fisher_average():
    z = metrics.fisher_z_average([0.818, 0.803, 0.812, 0.805])
    record("1", abs(z - 0.810) <= 1e-3, f"fisher_z_average={z:.5f} target=0.810+-0.001")


def _micro_instances(seed):
    """Yield (name, loss_fn, params) for every loss on one seeded micro-instance."""
    rng = np.random.default_rng(seed)
    B, M, D, P = 4, 4, 8, 4
    H0, H1 = rng.normal(size=(B, M, D)), rng.normal(size=(B, M, D))
    y = rng.uniform(size=B)

    head = dc.ParamStore()
    scoring.init_head(head, D, rng)
    yield "L_S", lambda p: scoring.score_loss(scoring.predict_score(H0, scoring.HeadParams.from_store(p)), y), head

    flow = dc.ParamStore()
    gmf.init_gapnet(flow, D, D, rng)
    for teacher in (True, False):
        def l_m(p, teacher=teacher):
            phi = gmf.GapNetParams.from_store(p)
            traj = gmf.teacher_forced_trajectory(phi, H0, H1, P) if teacher else gmf.rollout(phi, H0, P)
            return gmf.flow_loss(traj, H0, H1, P)
        yield "L_M teacher-forced" if teacher else "L_M autoregressive", l_m, flow

    feats = dc.ParamStore({"F": H0.copy()})
    S = lcr.score_distance_matrix(y)
    yield "L_R", lambda p: lcr.lcr_loss(lcr.distance_matrix(p["F"]), S), feats

    # The full objective differentiates every block, so it runs at a narrower width.
    cfg = TrainConfig(batch=B, d_k=2, d_t=2, steps=P, mean_score_loss=False, flow_reduction="sum")
    Ms, Ds = 3, 4
    X = rng.normal(size=(B, Ms, Ds))
    params = mdl.init_params(cfg.replace(seed=seed), Ds, Ms)
    enc = mdl.encoder_config(cfg, Ds, Ms)
    yield "total", lambda p: mdl.stage2_loss(p, X, y, cfg, enc, True, (seed,)).total, params


def test_criterion_02_gradient_integrity():
    start = time.perf_counter()
    worst = {}
    for seed in range(20):
        for name, fn, params in _micro_instances(seed):
            _, analytic = dc.gradient_of(fn, params)
            err = dc.max_relative_error(analytic, dc.finite_diff_grad(fn, params, h=1e-5))
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = " ".join(f"{k.replace(' ', '_')}={v:.1e}" for k, v in worst.items())
    record("2", ok, f"seeds=20 max_rel_err: {detail} time={elapsed:.1f}s")


def test_criterion_03_flow_exactness():
    rng = np.random.default_rng(0)
    worst_loss, telescoping = 0.0, True
    for P in (1, 2, 4, 8):
        H0 = rng.integers(-4, 4, size=(4, 3)).astype(float)
        H1 = H0 + P * rng.integers(-3, 3, size=(4, 3))
        g = dc.Tensor((H1 - H0) / P)
        traj = gmf.FlowTrajectory(P, [g] * P, [dc.Tensor(H0 + j * g.data) for j in range(P + 1)])
        l_g, l_l = gmf.gmf_loss(traj, H0, H1, P)
        worst_loss = max(worst_loss, l_g.item(), l_l.item())

        store = dc.ParamStore()
        gmf.init_gapnet(store, 3, 5, rng)
        roll = gmf.rollout(gmf.GapNetParams.from_store(store), rng.normal(size=(4, 3)), P)
        for j in range(P):
            telescoping &= np.array_equal(roll.states[j + 1].data, roll.states[j].data + roll.gaps[j].data)
        total = sum(gg.data for gg in roll.gaps)
        telescoping &= np.allclose(total, roll.final.data - roll.states[0].data, rtol=0, atol=1e-13)
    ok = worst_loss < 1e-24 and telescoping
    record("3", ok, f"max_constant_gap_loss={worst_loss:.1e} telescoping={'exact' if telescoping else 'broken'}")


def _best_time(fn, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def test_criterion_04_complexity():
    D, d_k, d_t = 1024, 128, 32
    exact = True
    for M in (64, 128):
        exact &= A.mac_count("vanilla", 2 * M, D, d_k, core_only=True) == 4 * A.mac_count("vanilla", M, D, d_k, core_only=True)
        exact &= A.mac_count("tesa", 2 * M, D, d_k, d_t, core_only=True) == 2 * A.mac_count("tesa", M, D, d_k, d_t, core_only=True)
    rng = np.random.default_rng(0)
    scale = 1 / np.sqrt(D)
    pv = A.AttentionParams(rng.normal(size=(D, d_k)) * scale, rng.normal(size=(D, d_k)) * scale,
                           rng.normal(size=(D, D)) * scale, None, "vanilla")
    pt = A.AttentionParams(pv.wq, pv.wk, pv.wv, rng.normal(size=(d_t, d_k)), "tesa")
    H = rng.normal(size=(1024, D))
    t_vanilla = _best_time(lambda: A.vanilla_attention(H, pv))
    t_tesa = _best_time(lambda: A.tesa_attention(H, pt))
    speedup = t_vanilla / t_tesa
    record("4", exact and speedup >= 3.0,
           f"core_ratios={'4x/2x exact' if exact else 'WRONG'} wall_speedup_M1024={speedup:.1f}x (need >=3)")


def test_criterion_05_metric_oracles():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        N = int(rng.integers(3, 40))
        x, y = rng.permutation(N * 3)[:N].astype(float), rng.normal(size=N)
        d = stats.rankdata(x) - stats.rankdata(y)
        closed = 1 - 6 * (d * d).sum() / (N * (N * N - 1))
        worst = max(worst, abs(metrics.spearman(x, y) - closed))
    tied_worst = 0.0
    for _ in range(100):
        x, y = rng.integers(0, 5, 12), rng.integers(0, 5, 12)
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        pearson = np.corrcoef(stats.rankdata(x), stats.rankdata(y))[0, 1]
        tied_worst = max(tied_worst, abs(metrics.spearman(x, y) - pearson))
    perfect = metrics.relative_l2([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 3.0, 1.0)
    ok = worst < 1e-12 and tied_worst < 1e-12 and perfect == 0.0
    record("5", ok, f"closed_form_err={worst:.1e} tied_err={tied_worst:.1e} rl2_perfect={perfect}")


def test_criterion_06_lcr_properties():
    rng = np.random.default_rng(0)
    nonneg, zero_diag = True, True
    for _ in range(50):
        D = lcr.distance_matrix(rng.normal(size=(5, 3, 2)))
        S = lcr.score_distance_matrix(rng.uniform(size=5))
        nonneg &= lcr.lcr_loss(D, S).item() >= 0.0
        zero_diag &= bool(np.all(np.diag(D.data) == 0.0) and np.all(D.data >= 0))
    S = lcr.score_distance_matrix(rng.uniform(size=5))
    coincide = lcr.lcr_loss(S, S).item() == 0.0
    example = lcr.distance_matrix([np.array([[0.0], [2.0]]), np.array([[1.0], [5.0]])]).data
    ok = nonneg and zero_diag and coincide and example[0, 1] == 2.0 and example[1, 0] == 10.0
    record("6", ok, f"nonneg={nonneg} zero_diag={zero_diag} identical_rows_loss_zero={coincide} "
                    f"D_ij={example[0, 1]:g} D_ji={example[1, 0]:g}")


CI = TrainConfig(batch=8, d_k=16, d_t=4, seed=7)


@pytest.fixture(scope="module")
def benchmark_data(tmp_path_factory):
    train_path, test_path, _ = sd.generate_dataset(sd.SyntheticConfig(), tmp_path_factory.mktemp("bench"))
    return sd.load_dataset(train_path), sd.load_dataset(test_path)


def test_criterion_07_end_to_end_benchmark(benchmark_data):
    (tr, _), (te, manifest) = benchmark_data
    cfg = sd.SyntheticConfig()
    oracle = metrics.spearman(sd.oracle_predictions(cfg, sd.synthesize(cfg, "test")), sd.stack(te)[1])
    start = time.perf_counter()
    rows = dict(run_ablation(tr, te, CI, steps=(), epochs1=60, epochs2=60, test_manifest=manifest))
    elapsed = time.perf_counter() - start
    srcc = {arm: report.mean_srcc for arm, report in rows.items()}
    full = srcc.pop("full")
    ok_a = full >= 0.75 and oracle > 0.95 and elapsed < 600
    ACCEPTANCE["7a"] = (ok_a, f"full_srcc={full:.4f} (need >=0.75) oracle={oracle:.4f} time={elapsed:.0f}s")
    beaten = all(full > v for v in srcc.values())
    margins = {arm: full - srcc[arm] for arm in ("no_lcr", "no_tesa")}
    ok_b = beaten and all(m >= 0.05 for m in margins.values())
    arms = " ".join(f"{k}={v:.4f}" for k, v in srcc.items())
    ACCEPTANCE["7b"] = (ok_b, f"full={full:.4f} {arms} margins no_lcr={margins['no_lcr']:+.4f} "
                              f"no_tesa={margins['no_tesa']:+.4f} (need full above all, >=0.05 on both)")
    assert ok_a, ACCEPTANCE["7a"][1]
    assert ok_b, ACCEPTANCE["7b"][1]


def test_criterion_08_strategy_harness(benchmark_data):
    (tr, _), (te, manifest) = benchmark_data
    arms = compare_strategies(tr, te, CI, 20, 20, manifest)
    rerun = evaluate(train(Dataset.from_samples(tr), CI, 20, 20).checkpoint, te, manifest)
    complete = set(arms) == {"two_stage", "one_stage"}
    same = rerun.to_text() == arms["two_stage"].to_text()
    detail = " ".join(f"{k}_srcc={r.mean_srcc:.4f}" for k, r in arms.items())
    record("8", complete and same, f"epochs=20+20 {detail} two_stage_rerun_identical={same}")


def test_criterion_09_inference_purity(benchmark_data):
    (tr, _), (te, manifest) = benchmark_data
    ckpt = train(Dataset.from_samples(tr[:32]), CI, 1, 1).checkpoint
    before = A.TETE_CALLS.count
    evaluate(ckpt, te, manifest)
    calls = A.TETE_CALLS.count - before
    record("9", ckpt.stage == "stage2" and calls == 0, f"stage={ckpt.stage} tete_calls_during_eval={calls}")


def test_criterion_10_format_round_trips(tmp_path):
    small = sd.SyntheticConfig(n_train=8, n_test=4, M=3, D=6, d_s=2)
    train_path, _, _ = sd.generate_dataset(small, tmp_path)
    feats, scores = sd.read_phif(train_path)
    sd.write_phif(tmp_path / "again.phif", feats, scores)
    phif_ok = train_path.read_bytes() == (tmp_path / "again.phif").read_bytes()

    samples, _ = sd.load_dataset(train_path)
    cfg = TrainConfig(batch=4, epochs=1, d_k=2, d_t=2)
    ckpt = train(Dataset.from_samples(samples), cfg).checkpoint
    a = save_checkpoint(ckpt, tmp_path / "a.phck")
    b = save_checkpoint(load_checkpoint(a, cfg), tmp_path / "b.phck")
    ckpt_ok = a.read_bytes() == b.read_bytes()

    blob = train_path.read_bytes()
    cases = {"bad_magic": (b"JUNK" + blob[4:], BadMagicError),
             "version": (blob[:4] + (9).to_bytes(4, "little") + blob[8:], VersionMismatchError),
             "truncated": (blob[:-3], TruncatedPayloadError)}
    caught = {}
    for name, (data, err) in cases.items():
        path = tmp_path / f"{name}.phif"
        path.write_bytes(data)
        try:
            sd.read_phif(path)
            caught[name] = False
        except err:
            caught[name] = True
    (tmp_path / "cut.phck").write_bytes(a.read_bytes()[:-5])
    try:
        load_checkpoint(tmp_path / "cut.phck")
        caught["ckpt_truncated"] = False
    except TruncatedPayloadError:
        caught["ckpt_truncated"] = True
    ok = phif_ok and ckpt_ok and all(caught.values())
    record("10", ok, f"phif_bytes_stable={phif_ok} checkpoint_bytes_stable={ckpt_ok} "
                     + " ".join(f"{k}={'ok' if v else 'MISSED'}" for k, v in caught.items()))
