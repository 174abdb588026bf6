"""End-to-end acceptance checks.

Each test prints one ``PASS``/``FAIL`` line (visible in ``pytest -v``
output) and then asserts the same verdict.  Run just these with
``pytest -m acceptance -v``.
"""

import csv
import io as pyio
import math
import time

import numpy as np
import pytest

from specbound import io
from specbound.augment import AugmentConfig, build_mixed_dataset
from specbound.bounds import (
    conv_noise_bound,
    fc_noise_bound,
    gaussian_matrix_bound,
    lc_noise_bound,
    sigma_choice,
    spectral_complexity,
)
from specbound.cli import main, table2_rows
from specbound.data import synthetic_dataset
from specbound.network import (
    build_cnn,
    forward,
    geometric_mean_norm,
    network_spec,
    normalize_weights,
    perturbation_experiment,
)
from specbound.structured import ConvShape, build_conv_operator, conv_spectral_norm_exact, monte_carlo_spectral
from specbound.tensor import Rng, matrix_norm, spectral_norm
from specbound.trainer import TRAJECTORY_HEADER

from test_trainer import finite_difference_check, random_coords

pytestmark = pytest.mark.acceptance


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, f"criterion {n}: {detail}"


def csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_criterion_1_monte_carlo_tracks_conv_bound(tmp_path, capsys):
    args = ["mc-spectral", "--dims", "1", "--q", "9", "--N", "100", "--a", "16", "--b", "16",
            "--sigma", "1", "--trials", "100", "--seed", "7", "--delta", "0.5", "--c", "1.5"]
    start = time.perf_counter()
    assert main(args + ["--kind", "conv", "--out", str(tmp_path / "conv.csv")]) == 0
    assert main(args + ["--kind", "locally_connected", "--out", str(tmp_path / "lc.csv")]) == 0
    elapsed = time.perf_counter() - start
    conv, lc = csv_rows(tmp_path / "conv.csv"), csv_rows(tmp_path / "lc.csv")
    assert [int(r["a_tilde"]) for r in conv] == [1, 2, 4, 8, 16]
    problems = []
    for rc, rl in zip(conv, lc):
        a = int(rc["a_tilde"])
        bound = conv_noise_bound(ConvShape(1, 9, a, a, 100), 1.0, 0.5, c=1.5)
        assert float(rc["theory_conv"]) == pytest.approx(bound, rel=1e-12)
        ratio = float(rc["empirical_mean"]) / bound
        if not 0.4 <= ratio <= 1.0:
            problems.append(f"a~={a} mean/bound={ratio:.3f}")
        if not float(rl["empirical_std"]) < float(rc["empirical_std"]):
            problems.append(f"a~={a} lc std {rl['empirical_std']} >= conv std {rc['empirical_std']}")
    if elapsed > 120:
        problems.append(f"runtime {elapsed:.0f}s > 120s")
    ratios = ", ".join(
        f"{r['a_tilde']}:{float(r['empirical_mean']) / float(r['theory_conv']):.3f}" for r in conv
    )
    detail = f"mean/bound by a~ {{{ratios}}}; {elapsed:.0f}s" + (f"; {'; '.join(problems)}" if problems else "")
    verdict(capsys, 1, not problems, detail)


def dense_oracle(fb, shape):
    return spectral_norm(build_conv_operator(fb, shape), tol=1e-14, max_iter=1_000_000)


def test_criterion_2_exact_conv_norm_matches_dense(capsys):
    start = time.perf_counter()
    worst, cases = 0.0, 0
    for dims, n_max in ((1, 12), (2, 8)):
        for q in range(1, 4):
            for N in range(q, n_max + 1):
                for a in range(1, 4):
                    for b in range(1, 4):
                        shape = ConvShape(dims, q, a, b, N)
                        for seed in range(5):
                            fb = Rng(seed).normal(shape.filter_shape)
                            exact = conv_spectral_norm_exact(fb, shape)
                            dense = dense_oracle(fb, shape)
                            worst = max(worst, abs(exact - dense) / dense)
                            cases += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-8 and elapsed <= 60
    verdict(capsys, 2, ok, f"{cases} cases, max relative gap {worst:.2e}, {elapsed:.1f}s")


def test_criterion_3_table2_scale(capsys):
    start = time.perf_counter()
    rows = {r[0]: r for r in table2_rows()}
    elapsed = time.perf_counter() - start
    targets = {"LeNet-5": (2.5, 2.0), "AlexNet": (3.5, 2.5), "VGG-16": (4.0, 2.5)}
    parts, ok = [], elapsed < 1.0
    for name, (base_target, ours_target) in targets.items():
        r = rows[name]
        log_base, log_full, log_conv = r[4], r[6], r[8]
        base_ok = abs(log_base - base_target) <= 0.5
        modes = [m for m, v in (("full", log_full), ("conv_only", log_conv)) if abs(v - ours_target) <= 1.0]
        ok &= base_ok and bool(modes)
        parts.append(f"{name} baseline {log_base:.2f} ours[{'/'.join(modes) or 'none'}]")
    verdict(capsys, 3, ok, "; ".join(parts) + f"; {elapsed * 1000:.0f}ms")


CONCENTRATION_CASES = {
    "conv": (ConvShape(1, 3, 4, 4, 32), lambda s: conv_noise_bound(s, 1.0, 0.1)),
    "locally_connected": (ConvShape(1, 3, 4, 4, 32), lambda s: lc_noise_bound(s, 1.0, 0.1)),
    "sparse_fc": ({"n": 256, "s": 8}, lambda p: fc_noise_bound(p["s"], 1.0, 0.1)),
    "dense_gaussian": ({"rows": 128, "cols": 96}, lambda p: gaussian_matrix_bound(p["rows"], p["cols"], 1.0, 0.1)),
}


def test_criterion_4_concentration(capsys):
    limit = 0.1 + 3 * math.sqrt(0.1 * 0.9 / 200)
    start = time.perf_counter()
    parts, ok = [], True
    for i, (kind, (params, bound_fn)) in enumerate(CONCENTRATION_CASES.items()):
        res = monte_carlo_spectral(kind, params, 1.0, 200, Rng(2024).child(i))
        frac = float(np.mean(np.asarray(res.samples) > bound_fn(params)))
        ok &= frac <= limit
        parts.append(f"{kind} {frac:.3f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed <= 300
    verdict(capsys, 4, ok, f"exceedance (limit {limit:.3f}): " + ", ".join(parts) + f"; {elapsed:.0f}s")


def test_criterion_5_perturbation_success_probability(capsys):
    net = normalize_weights(build_cnn(Rng(5)))
    data = synthetic_dataset(256, seed=6)
    B = data.max_norm()
    beta = geometric_mean_norm(net)
    spec = network_spec(net, B=B)
    # pilot at unit margin fixes the perturbation scale, then gamma follows it
    sigma0 = sigma_choice(spec, 1.0, B, beta).sigma
    pilot = perturbation_experiment(net, data, sigma0, 100, 1.0, Rng(50), B=B)
    gamma = 4.0 * float(np.percentile(pilot.deltas, 90))
    sigma = sigma_choice(spec, gamma, B, beta).sigma
    rep = perturbation_experiment(net, data, sigma, 100, gamma, Rng(51), B=B)
    ok = rep.fraction_within >= 0.5 and rep.violations == 0
    detail = (
        f"gamma={gamma:.4g} sigma={sigma:.3g} fraction_within={rep.fraction_within:.2f} "
        f"admissible={int(rep.admissible.sum())}/100 violations={rep.violations}"
    )
    verdict(capsys, 5, ok, detail)


def test_criterion_6_complexity_identities(capsys):
    r = Rng(8)
    w = r.normal((7, 5))
    single = abs(spectral_complexity([w]) - matrix_norm(w, "frobenius")) / matrix_norm(w, "frobenius")
    stack = [r.normal((6, 5)), r.normal((4, 6)), r.normal((3, 4))]
    norms = [spectral_norm(m) for m in stack]
    beta = math.prod(norms) ** (1 / 3)
    rebalanced = [m * (beta / n) for m, n in zip(stack, norms)]
    rw = spectral_complexity(stack)
    drift = abs(spectral_complexity(rebalanced) - rw) / rw
    net = build_cnn(Rng(9), (8, 8, 3), (4, 6), num_classes=5)
    probes = Rng(10).uniform(0, 1, (32, 8, 8, 3))
    a, b = forward(net, probes), forward(normalize_weights(net), probes)
    out_gap = float(np.max(np.abs(a - b)) / np.max(np.abs(a)))
    ok = single <= 1e-10 and drift <= 1e-9 and out_gap <= 1e-5
    verdict(capsys, 6, ok, f"single-layer {single:.1e}, rebalance drift {drift:.1e}, normalize output gap {out_gap:.1e}")


def test_criterion_7_gradient_check(capsys):
    net = build_cnn(Rng(3), (6, 6, 2), (3, 4), num_classes=4, dtype=np.float64)
    r = Rng(4)
    x = r.uniform(0, 1, (5, 6, 6, 2))
    y = r.integers(0, 4, 5)
    errs = finite_difference_check(net, x, y, random_coords(net, 50, r))
    verdict(capsys, 7, errs.max() <= 1e-4, f"max relative error {errs.max():.2e} over 50 coordinates")


def test_criterion_8_train_and_augment(tmp_path, capsys):
    data_path = tmp_path / "train.bin"
    base = synthetic_dataset(1000, seed=11)
    io.write_cifar10_binary(data_path, base)
    args = ["train", "--dataset", str(data_path), "--epochs", "20", "--seed", "1"]
    start = time.perf_counter()
    assert main(args + ["--out", str(tmp_path / "run1.csv")]) == 0
    assert main(args + ["--out", str(tmp_path / "run2.csv")]) == 0
    elapsed = time.perf_counter() - start
    text1, text2 = (tmp_path / "run1.csv").read_text(), (tmp_path / "run2.csv").read_text()
    rows = list(csv.reader(pyio.StringIO(text1)))
    valid = (
        tuple(rows[0]) == TRAJECTORY_HEADER
        and [int(r[0]) for r in rows[1:]] == list(range(1, 21))
        and all(math.isfinite(float(v)) for r in rows[1:] for v in r)
    )
    loaded = io.load_dataset(data_path)
    aug_ok = True
    for pct in (0.0, 0.25, 0.5):
        for kind in ("translate", "elastic"):
            out = build_mixed_dataset(loaded, pct, kind, AugmentConfig(seed=3))
            aug_ok &= len(out) == len(loaded)
            aug_ok &= np.array_equal(out.labels, loaded.labels[out.source])
            if pct == 0.0:
                aug_ok &= np.array_equal(out.labels, loaded.labels) and np.array_equal(out.images, loaded.images)
    # the CLI path writes and re-reads the dataset
    cli_path = tmp_path / "aug.npz"
    assert main(["augment", "--dataset", str(data_path), "--out", str(cli_path), "--pct", "0.5"]) == 0
    aug = io.load_dataset(cli_path)
    aug_ok &= len(aug) == 1000 and np.array_equal(aug.labels, loaded.labels[aug.source])
    ok = text1 == text2 and valid and aug_ok
    last = rows[-1]
    detail = (
        f"deterministic={text1 == text2} csv_valid={valid} augment_ok={aug_ok}; "
        f"final train_acc={float(last[TRAJECTORY_HEADER.index('train_acc')]):.3f}; {elapsed:.0f}s for two runs"
    )
    verdict(capsys, 8, ok, detail)
