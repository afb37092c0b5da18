"""Acceptance checks for the whole package, one verdict line per criterion.

Criteria 1-4 and 8 are numerical: layer gradients against central finite
differences, the optimizers against straight-line reference loops, the
retrieval protocol against a brute-force enumeration, plus pinned worked
examples and batchnorm invariants.  Criteria 5-7 train real models on a
generated dataset and dominate the runtime (the five-seed ablation sweep
in criterion 6 is ~25 training runs).

Run with ``pytest tests/test_acceptance.py -s`` to watch the verdict lines.
"""
import contextlib
import math
import time

import numpy as np
import pytest

from deskreid.config import load_config
from deskreid.evaluation import DEFAULT_RANKS, EmbeddingSet, evaluate
from deskreid.harness import (ABLATION_ROWS, CHECKPOINT_NAME,
                              random_embedding_baseline, run_ablation,
                              run_evaluation, run_training)
from deskreid.layers import (BatchNorm1d, Linear, conv2d, global_avg_pool,
                             softmax_cross_entropy)
from deskreid.optim import Adam
from deskreid.synthetic import generate_dataset
from deskreid.tensor import Tensor


@contextlib.contextmanager
def verdict(tag):
    try:
        yield
    except Exception:
        print(f"\nACCEPTANCE {tag}: FAIL", flush=True)
        raise
    print(f"\nACCEPTANCE {tag}: PASS", flush=True)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance-data")
    return generate_dataset(out, seed=0)


def _cfg(dataset, out_dir, *extra):
    overrides = [f"data.manifest={dataset}", f"out.dir={out_dir}", *extra]
    return load_config(overrides=overrides)


# --- 1. layer gradients vs central finite differences -------------------

def _fd_max_rel_error(loss_fn, leaves, h=1e-5):
    """Worst |analytic - numeric| / max(|numeric|, 1) over all components."""
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad.reshape(-1)
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(analytic[i] - numeric) / max(abs(numeric), 1.0)
            worst = max(worst, err)
    return worst


def _project(out, rng):
    """Random fixed projection to a scalar so every output entry matters."""
    return Tensor(rng.standard_normal(out.data.shape))


def _layer_cases(rng):
    cases = []

    n = int(rng.integers(1, 3))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    h, w = int(rng.integers(4, 8)), int(rng.integers(4, 8))
    k, s, p = int(rng.integers(2, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = Tensor(rng.standard_normal((n, cin, h, w)), requires_grad=True)
    wt = Tensor(rng.standard_normal((cout, cin, k, k)) * 0.5, requires_grad=True)
    b = Tensor(rng.standard_normal(cout) * 0.5, requires_grad=True)
    c = _project(conv2d(x, wt, b, s, p), rng)
    cases.append(("conv", lambda: (conv2d(x, wt, b, s, p) * c).sum(), [x, wt, b]))

    fin, fout, nn = int(rng.integers(2, 6)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
    lin = Linear(fin, fout, rng=rng)
    xl = Tensor(rng.standard_normal((nn, fin)), requires_grad=True)
    cl = _project(lin(xl), rng)
    cases.append(("fc", lambda: (lin(xl) * cl).sum(), [xl, lin.weight, lin.bias]))

    nb, f = int(rng.integers(3, 9)), int(rng.integers(1, 5))
    bn = BatchNorm1d(f)
    bn.gamma.data = 0.5 + rng.random(f)
    bn.beta.data = rng.standard_normal(f)
    xb = Tensor(rng.standard_normal((nb, f)) * 2.0, requires_grad=True)
    cb = _project(bn(xb, train=True), rng)
    cases.append(("bn_train", lambda: (bn(xb, train=True) * cb).sum(),
                  [xb, bn.gamma, bn.beta]))

    xg = Tensor(rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                                     int(rng.integers(2, 6)), int(rng.integers(2, 6)))),
                requires_grad=True)
    cg = _project(global_avg_pool(xg), rng)
    cases.append(("gap", lambda: (global_avg_pool(xg) * cg).sum(), [xg]))

    # Keep values away from the kink so central differences stay one-sided.
    raw = rng.standard_normal((int(rng.integers(2, 5)), int(rng.integers(2, 6))))
    xr = Tensor(raw + 0.25 * np.where(raw >= 0, 1.0, -1.0), requires_grad=True)
    cr = _project(xr.relu(), rng)
    cases.append(("relu", lambda: (xr.relu() * cr).sum(), [xr]))

    ns, cc = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    logits = Tensor(rng.standard_normal((ns, cc)) * 2.0, requires_grad=True)
    labels = rng.integers(0, cc, ns)
    cases.append(("softmax_ce", lambda: softmax_cross_entropy(logits, labels), [logits]))

    return cases


def test_1_layer_gradients_match_finite_differences():
    with verdict("1 (layer gradients vs finite differences)"):
        start = time.perf_counter()
        worst = {}
        for seed in range(10):
            rng = np.random.default_rng(seed)
            for name, loss_fn, leaves in _layer_cases(rng):
                err = _fd_max_rel_error(loss_fn, leaves)
                worst[name] = max(worst.get(name, 0.0), err)
        elapsed = time.perf_counter() - start
        print(f"\nmax relative error per layer: "
              f"{ {k: float(f'{v:.3g}') for k, v in worst.items()} }, "
              f"{elapsed:.1f}s", flush=True)
        for name, err in worst.items():
            assert err < 1e-4, f"{name}: max relative error {err:.3g}"
        assert elapsed < 60.0


# --- 2. Adam vs a straight-line reference loop --------------------------

def _reference_adam(theta0, grads, lr, b1, b2, eps, wd):
    theta = [float(v) for v in theta0]
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    path = []
    for t, g in enumerate(grads, start=1):
        for j in range(len(theta)):
            gj = float(g[j]) + wd * theta[j]
            m[j] = b1 * m[j] + (1.0 - b1) * gj
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj
            m_hat = m[j] / (1.0 - b1 ** t)
            v_hat = v[j] / (1.0 - b2 ** t)
            theta[j] -= lr * m_hat / (math.sqrt(v_hat) + eps)
        path.append(list(theta))
    return np.array(path)


def test_2_adam_matches_reference_trajectory():
    with verdict("2 (Adam vs straight-line reference, 100 steps)"):
        rng = np.random.default_rng(11)
        theta0 = rng.standard_normal(7)
        grads = rng.standard_normal((100, 7))
        for lr, wd in ((0.01, 0.0), (0.00035, 5e-4)):
            p = Tensor(theta0.copy(), requires_grad=True)
            opt = Adam([p], lr=lr, weight_decay=wd)
            path = []
            for g in grads:
                p.grad = g.copy()
                opt.step()
                path.append(p.data.copy())
            ref = _reference_adam(theta0, grads, lr, opt.beta1, opt.beta2,
                                  opt.eps, wd)
            gap = float(np.max(np.abs(np.array(path) - ref)))
            assert gap <= 1e-12, f"lr={lr} wd={wd}: max deviation {gap:.3g}"


# --- 3. retrieval protocol vs brute-force enumeration -------------------

def _unit_rows(rows):
    out = []
    for r in rows:
        norm = math.sqrt(sum(v * v for v in r))
        out.append([v / norm for v in r])
    return out


def _brute_force_protocol(qf, qid, qcam, gf, gid, gcam, ranks, filtering):
    """Per query: normalize rows to the unit sphere, sort by explicit
    distances, drop same-id+same-camera junk when filtering, then read AP
    off precision at every relevant cutoff."""
    qf, gf = _unit_rows(qf), _unit_rows(gf)
    aps, first_hits = [], []
    excluded = 0
    for i in range(len(qf)):
        dists = [math.sqrt(sum((qf[i][d] - gf[j][d]) ** 2
                               for d in range(len(qf[i]))))
                 for j in range(len(gf))]
        order = sorted(range(len(gf)), key=lambda j: (dists[j], j))
        if filtering:
            order = [j for j in order
                     if not (gid[j] == qid[i] and gcam[j] == qcam[i])]
        rel = [1 if gid[j] == qid[i] else 0 for j in order]
        total = sum(rel)
        if total == 0:
            excluded += 1
            continue
        ap, hits = 0.0, 0
        for pos, r in enumerate(rel, start=1):
            if r:
                hits += 1
                ap += hits / pos
        aps.append(ap / total)
        first_hits.append(rel.index(1) + 1)
    cmc = {k: sum(1 for fh in first_hits if fh <= k) / len(first_hits)
           for k in ranks}
    return sum(aps) / len(aps), cmc, excluded


def test_3_retrieval_matches_brute_force():
    with verdict("3 (CMC/mAP vs brute force, 200 instances)"):
        start = time.perf_counter()
        rng = np.random.default_rng(23)
        total_excluded = 0
        for case in range(200):
            nq, ng = int(rng.integers(1, 21)), int(rng.integers(2, 51))
            dim = int(rng.integers(2, 8))
            n_ids, n_cams = int(rng.integers(2, 8)), int(rng.integers(2, 5))
            qid = rng.integers(0, n_ids, nq)
            qcam = rng.integers(0, n_cams, nq)
            gid = rng.integers(0, n_ids, ng)
            gcam = rng.integers(0, n_cams, ng)
            gid[0] = qid[0]
            gcam[0] = (qcam[0] + 1) % n_cams  # query 0 always stays valid
            qf = rng.standard_normal((nq, dim))
            gf = rng.standard_normal((ng, dim))
            filtering = bool(case % 2)

            report = evaluate(EmbeddingSet(qf, qid, qcam),
                              EmbeddingSet(gf, gid, gcam),
                              cross_camera_filtering=filtering)
            ref_map, ref_cmc, ref_excluded = _brute_force_protocol(
                qf, qid, qcam, gf, gid, gcam, DEFAULT_RANKS, filtering)
            total_excluded += ref_excluded

            assert report.num_excluded_queries == ref_excluded, f"case {case}"
            assert abs(report.map_score - ref_map) <= 1e-9, f"case {case}"
            for k in DEFAULT_RANKS:
                assert abs(report.cmc[k] - ref_cmc[k]) <= 1e-9, \
                    f"case {case}, cmc@{k}"
        elapsed = time.perf_counter() - start
        assert total_excluded > 0  # the sweep must exercise the excluded path
        assert elapsed < 60.0


# --- 4. pinned worked examples ------------------------------------------

def test_4_worked_examples():
    with verdict("4 (worked examples: AP, batchnorm, Adam step)"):
        # Ranking [match, miss, match, miss] with 2 relevant items:
        # AP = (1/1 + 2/3) / 2 = 0.8333...  Gallery points sit on the unit
        # circle at growing angles from the query, so ranks are strict.
        angles = np.deg2rad([10.0, 20.0, 30.0, 40.0])
        query = EmbeddingSet([[1.0, 0.0]], [5], [0])
        gallery = EmbeddingSet(np.stack([np.cos(angles), np.sin(angles)], axis=1),
                               [5, 6, 5, 6], [1, 1, 1, 1])
        report = evaluate(query, gallery)
        assert abs(report.map_score - 5.0 / 6.0) < 1e-9
        assert round(report.map_score, 4) == 0.8333

        # Normalizing the batch [1, 3]: mean 2, biased variance 1, so the
        # outputs are -/+ 1/sqrt(1 + 1e-5) = -/+ 0.999995 (to 6 places).
        bn = BatchNorm1d(1)
        out = bn(Tensor(np.array([[1.0], [3.0]])), train=True).data
        np.testing.assert_allclose(out, [[-0.999995], [0.999995]], atol=1e-6)

        # One Adam step from 0.5 with gradient 1.0 at the default learning
        # rate: both bias-corrected moments equal 1, so the step is lr.
        p = Tensor(np.array([0.5]), requires_grad=True)
        opt = Adam([p], lr=0.00035)
        p.grad = np.array([1.0])
        opt.step()
        assert abs(p.data[0] - 0.49965) < 1e-6


# --- 5. end-to-end training quality on the generated dataset ------------

def test_5_end_to_end_training(dataset, tmp_path):
    with verdict("5 (end-to-end: accuracy, wall time, retrieval vs random)"):
        cfg = _cfg(dataset, tmp_path)
        start = time.perf_counter()
        model, history = run_training(cfg)
        elapsed = time.perf_counter() - start
        best_acc = max(row["acc"] for row in history)
        report = run_evaluation(cfg, model=model)
        baseline = random_embedding_baseline(cfg)
        print(f"\nbest train acc {best_acc:.4f} in {elapsed:.0f}s, "
              f"map {report.map_score:.4f} vs random {baseline:.4f}",
              flush=True)
        assert best_acc >= 0.95
        assert elapsed < 300.0
        assert report.map_score >= 2.0 * baseline


# --- 6. ablation ordering over five seeds -------------------------------

def test_6_ablation_ordering(dataset, tmp_path):
    with verdict("6 (five-seed ablation: full recipe leads every row)"):
        cfg = _cfg(dataset, tmp_path)
        results = run_ablation(cfg, seeds=range(5))
        for row in ABLATION_ROWS:
            assert not results[row]["errors"], results[row]["errors"]
        medians = {row: float(np.median(results[row]["map"]))
                   for row in ABLATION_ROWS}
        print("\nmedian map per row: "
              + ", ".join(f"{row}={medians[row]:.4f}" for row in ABLATION_ROWS),
              flush=True)
        top = medians["good_practices"]
        for row in ABLATION_ROWS[1:]:
            assert top >= medians[row], \
                f"good_practices {top:.4f} < {row} {medians[row]:.4f}"


# --- 7. bitwise determinism ---------------------------------------------

def test_7_bitwise_determinism(dataset, tmp_path):
    with verdict("7 (same config+seed: bitwise-equal checkpoint and report)"):
        reports, blobs = [], []
        for attempt in ("first", "second"):
            cfg = _cfg(dataset, tmp_path / attempt, "train.epochs=5")
            run_training(cfg)
            run_dir = cfg.run_dir()
            chunks = []
            for name in (CHECKPOINT_NAME, CHECKPOINT_NAME + ".idx"):
                chunks.append((run_dir / name).read_bytes())
            blobs.append(chunks)
            reports.append(run_evaluation(cfg).to_text())
        assert blobs[0][0] == blobs[1][0]
        assert blobs[0][1] == blobs[1][1]
        assert reports[0] == reports[1]


# --- 8. batchnorm statistical invariants --------------------------------

def test_8_batchnorm_invariants():
    with verdict("8 (batchnorm: train-mode moments, eval-mode invariance)"):
        rng = np.random.default_rng(31)
        for trial in range(5):
            n = int(rng.integers(8, 40))
            f = int(rng.integers(1, 9))
            x = rng.standard_normal((n, f)) * 3.0 + rng.standard_normal(f) * 10.0
            bn = BatchNorm1d(f)
            bn.gamma.data = 0.5 + rng.random(f)
            out = bn(Tensor(x), train=True).data

            assert np.max(np.abs(out.mean(axis=0))) < 1e-6
            batch_var = x.var(axis=0)  # biased, matching the normalizer
            target = bn.gamma.data ** 2 * batch_var / (batch_var + bn.eps)
            assert np.max(np.abs(out.var(axis=0) - target)) < 1e-4

            # Eval mode is per-sample: any batch composition gives the
            # same bytes for the same row.
            full = bn(Tensor(x), train=False).data
            rows = np.concatenate([bn(Tensor(x[i:i + 1]), train=False).data
                                   for i in range(n)], axis=0)
            halves = np.concatenate([bn(Tensor(x[:3]), train=False).data,
                                     bn(Tensor(x[3:]), train=False).data], axis=0)
            assert np.array_equal(full, rows)
            assert np.array_equal(full, halves)
