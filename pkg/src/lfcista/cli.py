"""Command-line entry point: ``lfcista <subcommand> [flags]``.

Every subcommand accepts ``--config FILE``: a text file of ``key=value``
lines whose keys are flag names (``noise-sigma`` or ``noise_sigma``).  Flags
given on the command line override the file.

Exit codes: 0 success, 1 usage error, 2 I/O or format error, 3 numerical
failure.
"""
import argparse
import io
import logging
import sys

import numpy as np

from . import csc, evaluate, net, selftest, synth
from .errors import ConfigError, FormatError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

CODES_MAGIC = b"EPICS1\n"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_help()}")


def _optics_flags(p):
    g = p.add_argument_group("optics")
    g.add_argument("--theta", type=int, default=19, help="angular samples per EPI (odd)")
    g.add_argument("--n", type=int, default=63, help="spatial samples per EPI")
    g.add_argument("--kappa", type=float, default=0.025, help="EPI slope per um of depth")
    g.add_argument("--psf-sigma", type=float, default=1.0)
    g.add_argument("--depth-min", type=float, default=-18.0)
    g.add_argument("--depth-max", type=float, default=36.0)
    g.add_argument("--depth-count", type=int, default=55)


def _readout_flags(p, threshold, relative):
    g = p.add_argument_group("depth readout")
    g.add_argument("--threshold", type=float, default=threshold,
                   help="peak threshold" + (" (fraction of the maximum)" if relative else ""))
    g.add_argument("--min-separation", type=int, default=3)
    g.add_argument("--centroid-radius", type=int, default=1)


def _solver_flags(p):
    g = p.add_argument_group("CSC solver")
    g.add_argument("--lambda", dest="lambda_", type=float, default=0.1)
    g.add_argument("--max-iters", type=int, default=200)
    g.add_argument("--rel-tol", type=float, default=1e-6)
    g.add_argument("--step", default="auto", help="step size, or 'auto' for 0.99/L")


def build_parser():
    parser = _Parser(prog="lfcista", description="3-D point-source localization from light-field EPIs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="key=value file with flag defaults")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = add("gen-data", "render a labeled EPI dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--sources-min", type=int, default=1)
    p.add_argument("--sources-max", type=int, default=2)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--sigma-label", type=float, default=1.5)
    p.add_argument("--amp-min", type=float, default=0.5)
    p.add_argument("--amp-max", type=float, default=1.5)
    _optics_flags(p)

    p = add("build-dict", "build the EPI dictionary")
    p.add_argument("--out", required=True)
    p.add_argument("--atom-theta", type=int, default=19)
    p.add_argument("--atom-n", type=int, default=31)
    _optics_flags(p)

    p = add("solve", "sparse-code one EPI with convolutional ISTA and print its depths")
    p.add_argument("--dict", required=True)
    p.add_argument("--epi", required=True, help="dataset file or .npy matrix")
    p.add_argument("--index", type=int, default=0, help="sample index inside a dataset file")
    p.add_argument("--out", help="write the code stack here")
    _solver_flags(p)
    _readout_flags(p, 0.1, relative=True)

    p = add("train", "train a CISTA-net")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kernel-sizes", default="3,5,7,9,11,13")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--single-thread", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--init-dict", help="initialize W filters from this dictionary")
    p.add_argument("--bias-sign", choices=["-", "+"], default="-")
    p.add_argument("--input-norm", choices=list(net.INPUT_NORMS), default="none",
                   help="'max' scales each EPI to unit peak before the first layer")
    p.add_argument("--report-csv", help="per-epoch losses (default: <out>.csv)")

    p = add("infer", "print the depths the network finds in one EPI")
    p.add_argument("--model", required=True)
    p.add_argument("--epi", required=True, help="dataset file or .npy matrix")
    p.add_argument("--index", type=int, default=0)
    _readout_flags(p, 0.5, relative=False)

    p = add("eval", "localize a dataset and report RMSE")
    p.add_argument("--data", required=True)
    p.add_argument("--model")
    p.add_argument("--dict")
    p.add_argument("--out", help="CSV of matched predictions")
    p.add_argument("--gate", type=float, default=3.0, help="z matching gate in um")
    p.add_argument("--limit", type=int, help="evaluate only the first LIMIT samples")
    p.add_argument("--net-threshold", type=float, default=0.5)
    p.add_argument("--csc-threshold", type=float, default=0.1, help="fraction of the maximum")
    p.add_argument("--min-separation", type=int, default=3)
    p.add_argument("--centroid-radius", type=int, default=1)
    _solver_flags(p)

    p = add("bench", "time csc-solve against cista-infer")
    p.add_argument("--model", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--n-epis", type=int, default=5)
    p.add_argument("--csc-iters", type=int, default=200)
    p.add_argument("--lambda", dest="lambda_", type=float, default=0.1)
    p.add_argument("--out", help="timing CSV (default: stdout)")

    add("selftest", "run adjoint, gradient and ISTA-descent checks")
    return parser


def read_config(path):
    cfg = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            cfg[key.strip().replace("-", "_")] = value.strip()
    return cfg


def _config_path(argv):
    """Value of ``--config`` in ``argv``, found before full parsing."""
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser, argv):
    """Parse ``argv`` with defaults taken from the ``--config`` file, if any."""
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _config_path(argv)
    command = next((tok for tok in argv if tok in COMMANDS), None)
    if path is not None and command is not None:
        sub = parser._subparsers._group_actions[0].choices[command]
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in read_config(path).items():
            dest = "lambda_" if key == "lambda" else key
            action = actions.get(dest)
            if action is None or dest in ("help", "config"):
                raise UsageError(f"unknown config key {key!r} for {command}")
            if isinstance(action, argparse.BooleanOptionalAction):
                defaults[dest] = value.lower() in ("1", "true", "yes", "on")
            else:
                defaults[dest] = value
                action.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _optics(args):
    return synth.OpticsConfig(theta_u=args.theta, theta_v=args.theta, n_x=args.n, n_y=args.n,
                              kappa=args.kappa, psf_sigma=args.psf_sigma,
                              depth_min=args.depth_min, depth_max=args.depth_max,
                              depth_count=args.depth_count)


def load_epi(path, index=0):
    """One EPI from a dataset file (sample ``index``) or a 2-D ``.npy`` array."""
    with open(path, "rb") as fh:
        head = fh.read(len(synth.DATASET_MAGIC))
    if head == synth.DATASET_MAGIC:
        data = synth.read_dataset(path)
        if not 0 <= index < len(data):
            raise UsageError(f"--index {index} outside dataset of {len(data)} samples")
        return data.epis[index]
    try:
        epi = np.load(path, allow_pickle=False)
    except ValueError as exc:
        raise FormatError(f"{path}: neither a dataset file nor a .npy array ({exc})") from None
    if epi.ndim != 2:
        raise FormatError(f"{path}: expected a 2-D array, got shape {epi.shape}")
    return np.asarray(epi, dtype=np.float64)


def save_codes(path, z, trace, lam):
    items = [("version", 1), ("m", z.shape[0]), ("theta", z.shape[1]), ("n", z.shape[2]),
             ("lambda", float(lam)), ("iterations", trace.iterations),
             ("converged", int(trace.converged)), ("gamma", float(trace.gamma)),
             ("lipschitz", float(trace.lipschitz))]
    with open(path, "wb") as fh:
        fh.write(synth.format_header(CODES_MAGIC, items))
        fh.write(np.asarray(z, dtype="<f4").tobytes())


def _readout(args, threshold, relative):
    return evaluate.DepthReadoutOptions(threshold, relative, args.min_separation,
                                        args.centroid_radius)


def _solver(args, max_iters=None):
    step = args.step if args.step == "auto" else float(args.step)
    return csc.SolverOptions(lambda_sparsity=args.lambda_, max_iters=max_iters or args.max_iters,
                             rel_tol=args.rel_tol, step_gamma=step, seed=args.seed)


def cmd_gen_data(args, out):
    header = synth.generate_dataset(_optics(args), args.count, args.sources_min, args.sources_max,
                                    args.noise_sigma, args.sigma_label, args.seed, args.out,
                                    (args.amp_min, args.amp_max))
    out(f"wrote {header.count} samples to {args.out}")


def cmd_build_dict(args, out):
    cfg = _optics(args)
    d = synth.build_dictionary(cfg, args.atom_theta, args.atom_n)
    synth.save_dictionary(d, cfg, args.out)
    out(f"wrote {d.m} atoms of {args.atom_theta}x{args.atom_n} to {args.out}")


def cmd_solve(args, out):
    d = synth.load_dictionary(args.dict)
    x = load_epi(args.epi, args.index)
    z, trace = csc.solve(x, d, _solver(args))
    if args.out:
        save_codes(args.out, z, trace, args.lambda_)
    for depth in evaluate.detect_depths(csc.code_evidence(z), d.depths,
                                        _readout(args, args.threshold, True)):
        out(f"{depth:.6g}")


def cmd_train(args, out):
    header = synth.read_dataset(args.data).header
    kernels = tuple(int(k) for k in args.kernel_sizes.split(","))
    arch = net.Architecture(m=header.m, theta=header.theta, n=header.n, kernel_sizes=kernels,
                            depth_min=header.depth_min, depth_max=header.depth_max,
                            bias_sign=args.bias_sign, input_norm=args.input_norm)
    hyper = net.TrainingHyper(epochs=args.epochs, batch=args.batch, lr=args.lr, seed=args.seed,
                              val_fraction=args.val_fraction, single_thread=args.single_thread)
    init = synth.load_dictionary(args.init_dict) if args.init_dict else None
    csv_path = args.report_csv or args.out + ".csv"
    _, report = net.train(args.data, arch, hyper, args.out, init, csv_path)
    out(f"best epoch {report.best_epoch} validation loss {report.best_val_loss:.6f}; "
        f"model written to {args.out}, losses to {csv_path}")


def cmd_infer(args, out):
    model = net.load_model(args.model)
    probs = net.infer(load_epi(args.epi, args.index), model)
    for depth in evaluate.detect_depths(probs, model.arch.depth_grid(),
                                        _readout(args, args.threshold, False)):
        out(f"{depth:.6g}")


def cmd_eval(args, out):
    if not args.model and not args.dict:
        raise UsageError("eval needs --model and/or --dict")
    data = synth.read_dataset(args.data)
    if args.limit is not None:
        data = synth.Dataset(data.header, data.epis[:args.limit], data.labels[:args.limit],
                             data.sources[:args.limit])
    reports = []
    if args.model:
        model = net.load_model(args.model)
        reports.append(evaluate.evaluate(
            "cista-net", data, model=model,
            readout=_readout(args, args.net_threshold, False), gate_um=args.gate))
    if args.dict:
        d = synth.load_dictionary(args.dict)
        reports.append(evaluate.evaluate(
            "csc", data, dictionary=d, solver=_solver(args),
            readout=_readout(args, args.csc_threshold, True), gate_um=args.gate))
    if args.out:
        evaluate.write_eval_csv(reports, args.out)
    for rep in reports:
        out(rep.summary())


def cmd_bench(args, out):
    model = net.load_model(args.model)
    d = synth.load_dictionary(args.dict)
    data = synth.read_dataset(args.data)
    rows = evaluate.bench(model, d, data.epis[:args.n_epis], args.repeats, args.csc_iters,
                          args.lambda_)
    if args.out:
        evaluate.write_bench_csv(rows, args.out)
    buf = io.StringIO()
    evaluate.write_bench_csv(rows, buf)
    out(buf.getvalue().rstrip("\n"))


def cmd_selftest(args, out):
    if not selftest.run(seed=args.seed, out=out):
        raise NumericalError("self-test failed")


COMMANDS = {
    "gen-data": cmd_gen_data, "build-dict": cmd_build_dict, "solve": cmd_solve,
    "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "bench": cmd_bench,
    "selftest": cmd_selftest,
}


def cli_main(argv=None, out=print):
    """Run the CLI and return its exit code instead of exiting."""
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main():
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
