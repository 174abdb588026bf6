"""Command-line interface: ``specbound <subcommand> ...``.

Exit codes: 0 success, 1 usage error (bad flags or arguments), 2 data
error (unreadable or malformed inputs, numerical failures).
"""

from __future__ import annotations

import argparse
import math
import sys
from contextlib import contextmanager

import numpy as np

from . import io
from .augment import AugmentConfig, build_mixed_dataset
from .bounds import NetworkSpec, baseline_psi, conv_noise_bound, ge_bound, lc_noise_bound, psi_f, sigma_choice, spectral_complexity
from .errors import SpecboundError, UsageError
from .network import build_cnn, geometric_mean_norm, network_layer_norms, network_spec, normalize_weights, perturbation_experiment
from .structured import ConvShape, monte_carlo_spectral
from .tensor import Rng
from .trainer import TRAJECTORY_HEADER, sgd_train

COMPLEXITY_HEADER = (
    "layer",
    "spectral_norm",
    "frobenius_norm",
    "two_one_t_norm",
    "stable_rank_frobenius",
    "stable_rank_two_one",
    "rw",
    "rw21",
)
MC_HEADER = ("a_tilde", "empirical_mean", "empirical_std", "theory_conv", "theory_lc")
TABLE2_HEADER = (
    "architecture",
    "depth",
    "widest",
    "baseline_psi",
    "log10_baseline_psi",
    "psi_full",
    "log10_psi_full",
    "psi_conv_only",
    "log10_psi_conv_only",
)
PERTURB_HEADER = ("trial", "max_output_change", "u_norm_sum", "lemma_rhs", "admissible", "within_gamma_over_4")


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


@contextmanager
def _output(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            yield fh


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text!r}") from None


# --- subcommands -----------------------------------------------------------------


def cmd_complexity(args):
    man = io.load_manifest(args.manifest)
    net = man.to_network()
    norms = network_layer_norms(net, tol=args.tol)
    rows = []
    for meta, n in zip(man.layers, norms):
        sr_f = (n.frobenius / n.spectral) ** 2 if n.spectral > 0 else float("nan")
        sr_21 = (n.two_one_t / n.spectral) ** 2 if n.spectral > 0 else float("nan")
        rows.append((meta["name"], n.spectral, n.frobenius, n.two_one_t, sr_f, sr_21, "", ""))
    rw = spectral_complexity(norms, "RW")
    rw21 = spectral_complexity(norms, "RW21")
    rows.append(("network", "", "", "", "", "", rw, rw21))
    with _output(args.out) as fh:
        io.write_csv(fh, COMPLEXITY_HEADER, rows)


def _arch_spec(name) -> NetworkSpec:
    archs = io.load_architectures()
    if name not in archs:
        raise UsageError(f"unknown architecture {name!r}; choose from {', '.join(archs)}")
    return archs[name]


def cmd_bound(args):
    if (args.manifest is None) == (args.arch is None):
        raise UsageError("give exactly one of --manifest or --arch")
    if args.manifest:
        net = io.load_manifest(args.manifest).to_network()
        spec = network_spec(net, B=args.B, m=args.m)
        norms = network_layer_norms(net)
        report = ge_bound(
            spec, norms, args.gamma, args.m, args.B, args.delta, args.mode, args.psi_mode, args.beta_tilde, args.rw
        )
    else:
        if args.mode == "pac_bayes":
            raise UsageError("pac_bayes mode needs --manifest (weights)")
        spec = _arch_spec(args.arch)
        rw = 1.0 if args.rw is None else args.rw
        report = ge_bound(spec, None, args.gamma, args.m, args.B, args.delta, "simplified", args.psi_mode, r_w=rw)
    with _output(args.out) as fh:
        if args.format == "csv":
            io.write_csv(fh, ("field", "value"), [("mode", report.mode), ("psi_mode", report.psi_mode)] + report.rows())
        else:
            fh.write(f"mode: {report.mode} (psi {report.psi_mode})\n")
            for k, v in report.rows():
                fh.write(f"{k}: {io.fmt(v)}\n")


def cmd_mc_spectral(args):
    if args.a_tilde:
        sweep = [(t, t, t) for t in args.a_tilde]
    elif args.a == args.b:
        sweep = [(t, t, t) for t in (2**k for k in range(int(math.log2(args.a)) + 1)) if t <= args.a]
    else:
        sweep = [(args.a, args.a, args.b)]
    rows = []
    for i, (tilde, a, b) in enumerate(sweep):
        shape = ConvShape(args.dims, args.q, a, b, args.N)
        res = monte_carlo_spectral(args.kind, shape, args.sigma, args.trials, Rng(args.seed).child(i), workers=args.workers)
        rows.append(
            (
                tilde,
                res.mean,
                res.std,
                conv_noise_bound(shape, args.sigma, args.delta, c=args.c),
                lc_noise_bound(shape, args.sigma, args.delta, eps=args.eps),
            )
        )
    with _output(args.out) as fh:
        io.write_csv(fh, MC_HEADER, rows)


def table2_rows():
    rows = []
    for key, spec in io.load_architectures().items():
        h = io.widest_layer(spec)
        base = baseline_psi(spec.depth, h)
        full = psi_f(spec, "full")
        conv = psi_f(spec, "conv_only")
        rows.append((spec.name, spec.depth, h, base, math.log10(base), full, math.log10(full), conv, math.log10(conv)))
    return rows


def cmd_table2(args):
    with _output(args.out) as fh:
        io.write_csv(fh, TABLE2_HEADER, table2_rows())


def cmd_perturb_check(args):
    man = io.load_manifest(args.manifest)
    net = man.to_network()
    data = io.load_dataset(args.dataset)
    if args.limit:
        data = data.subset(np.arange(min(args.limit, len(data))))
    B = args.B if args.B is not None else data.max_norm()
    if args.sigma is not None:
        sigma = args.sigma
    else:
        beta = geometric_mean_norm(normalize_weights(net))
        sigma = sigma_choice(network_spec(net, B=B), args.gamma, B, beta).sigma
    rep = perturbation_experiment(net, data, sigma, args.trials, args.gamma, Rng(args.seed), B=B)
    rows = [
        (t, rep.deltas[t], rep.u_norms[t].sum(), rep.rhs[t], bool(rep.admissible[t]), bool(rep.deltas[t] <= args.gamma / 4))
        for t in range(args.trials)
    ]
    with _output(args.out) as fh:
        io.write_csv(fh, PERTURB_HEADER, rows)
    print(
        f"sigma={io.fmt(sigma)} beta={io.fmt(rep.beta)} B={io.fmt(B)} "
        f"fraction_within={io.fmt(rep.fraction_within)} admissible={int(rep.admissible.sum())} "
        f"violations={rep.violations}",
        file=sys.stderr,
    )


def cmd_train(args):
    data = io.load_dataset(args.dataset)
    if args.limit:
        data = data.subset(np.arange(min(args.limit, len(data))))
    if args.test_dataset:
        train, test = data, io.load_dataset(args.test_dataset)
    else:
        n_test = int(round(args.test_fraction * len(data)))
        if not 0 <= n_test < len(data):
            raise UsageError("test fraction leaves no training data")
        train, test = data.subset(np.arange(len(data) - n_test)), data.subset(np.arange(len(data) - n_test, len(data)))
    rng = Rng(args.seed)
    if args.manifest:
        net = io.load_manifest(args.manifest).to_network()
    else:
        net = build_cnn(
            rng.child(0),
            train.image_shape,
            tuple(args.channels),
            q=args.q,
            num_classes=train.num_classes,
            padding=args.padding,
            bias=args.bias,
        )
    net, traj = sgd_train(
        net,
        train,
        test,
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        rng=rng.child(1),
        gamma_rule=args.gamma_rule,
        percentile=args.percentile,
    )
    with _output(args.out) as fh:
        io.write_csv(fh, TRAJECTORY_HEADER, traj.rows())
    if args.save_manifest:
        io.save_manifest(args.save_manifest, net)


def cmd_augment(args):
    base = io.load_dataset(args.dataset)
    cfg = AugmentConfig(args.translation, args.alpha, args.sigma_e, args.fill, args.seed)
    out = build_mixed_dataset(base, args.pct, args.kind, cfg)
    io.save_dataset(args.out, out)


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="specbound", description="Spectral-complexity bounds and structured-noise experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("complexity", help="R_W, R'_W, per-layer norms and stable ranks of a manifest")
    s.add_argument("manifest")
    s.add_argument("--tol", type=float, default=1e-12)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_complexity)

    s = sub.add_parser("bound", help="generalization-bound report")
    s.add_argument("--manifest")
    s.add_argument("--arch", help="built-in architecture: lenet5, alexnet, vgg16")
    s.add_argument("--gamma", type=float, required=True)
    s.add_argument("--m", type=int, required=True)
    s.add_argument("--B", type=float, default=1.0)
    s.add_argument("--delta", type=float, default=0.05)
    s.add_argument("--mode", choices=("simplified", "pac_bayes"), default="simplified")
    s.add_argument("--psi-mode", choices=("full", "conv_only"), default="full")
    s.add_argument("--rw", type=float, default=None, help="override R_W (simplified mode; default 1 for --arch)")
    s.add_argument("--beta-tilde", type=float, default=None)
    s.add_argument("--format", choices=("csv", "text"), default="csv")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_bound)

    s = sub.add_parser("mc-spectral", help="Monte-Carlo spectral norms of structured perturbations")
    s.add_argument("--kind", choices=("conv", "locally_connected"), default="conv")
    s.add_argument("--dims", type=int, choices=(1, 2), default=1)
    s.add_argument("--q", type=_positive_int, required=True)
    s.add_argument("--N", type=_positive_int, required=True)
    s.add_argument("--a", type=_positive_int, required=True)
    s.add_argument("--b", type=_positive_int, required=True)
    s.add_argument("--a-tilde", type=_int_list, default=None, help="explicit channel sweep (a = b = value)")
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--trials", type=_positive_int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--delta", type=float, default=0.5)
    s.add_argument("--c", type=float, default=1.5)
    s.add_argument("--eps", type=float, default=0.5)
    s.add_argument("--workers", type=_positive_int, default=1)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_mc_spectral)

    s = sub.add_parser("table2", help="Psi_f of the built-in architectures vs the d*sqrt(h) baseline")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_table2)

    s = sub.add_parser("perturb-check", help="output sensitivity under Gaussian weight noise")
    s.add_argument("--manifest", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--gamma", type=float, required=True)
    s.add_argument("--trials", type=_positive_int, default=100)
    s.add_argument("--sigma", type=float, default=None, help="noise level (default: from sigma_choice)")
    s.add_argument("--B", type=float, default=None, help="input norm bound (default: dataset maximum)")
    s.add_argument("--limit", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_perturb_check)

    s = sub.add_parser("train", help="SGD training with per-epoch trajectory CSV")
    s.add_argument("--dataset", required=True)
    s.add_argument("--test-dataset", default=None)
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.add_argument("--limit", type=int, default=None)
    s.add_argument("--manifest", default=None, help="initial weights (default: seeded CNN)")
    s.add_argument("--channels", type=_int_list, default=[32, 64])
    s.add_argument("--q", type=_positive_int, default=3)
    s.add_argument("--padding", choices=("same", "valid"), default="same")
    s.add_argument("--bias", action="store_true")
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--batch-size", type=_positive_int, default=64)
    s.add_argument("--gamma-rule", choices=("mean_correct", "percentile"), default="mean_correct")
    s.add_argument("--percentile", type=float, default=10.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--save-manifest", default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("augment", help="mixed base/augmented dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pct", type=float, required=True)
    s.add_argument("--kind", choices=("translate", "elastic"), default="translate")
    s.add_argument("--translation", type=int, default=4)
    s.add_argument("--alpha", type=float, default=8.0)
    s.add_argument("--sigma-e", type=float, default=4.0)
    s.add_argument("--fill", choices=("zero", "wrap"), default="zero")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_augment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"specbound {args.command}: usage error: {exc}", file=sys.stderr)
        return 1
    except (SpecboundError, OSError, ValueError) as exc:
        print(f"specbound {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
