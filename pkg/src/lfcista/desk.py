"""Fully synthetic desk benchmark: generate, train, localize with both methods, time.

Run ``python -m lfcista.desk WORKDIR`` to reproduce it from scratch.
"""
import argparse
import json
import logging
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import csc, evaluate, net, synth

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskConfig:
    theta: int = 19
    n: int = 31
    depth_min: float = -10.0
    depth_max: float = 10.0
    depth_count: int = 21
    n_train: int = 2000
    n_test: int = 200
    noise_sigma: float = 0.05
    sigma_label: float = 1.0
    train_seed: int = 1
    test_seed: int = 2
    kernel_sizes: tuple = (5, 9, 13)
    input_norm: str = "max"
    epochs: int = 30
    batch: int = 32
    lr: float = 3e-3
    net_seed: int = 0
    atom_theta: int = 19
    atom_n: int = 15
    csc_lambda: float = 0.1
    csc_max_iters: int = 200
    bench_epis: int = 5
    bench_repeats: int = 3

    def optics(self):
        return synth.OpticsConfig(theta_u=self.theta, theta_v=self.theta, n_x=self.n, n_y=self.n,
                                  depth_min=self.depth_min, depth_max=self.depth_max,
                                  depth_count=self.depth_count)

    def architecture(self):
        return net.Architecture(m=self.depth_count, theta=self.theta, n=self.n,
                                kernel_sizes=self.kernel_sizes, depth_min=self.depth_min,
                                depth_max=self.depth_max, input_norm=self.input_norm)


@dataclass
class DeskResult:
    net: evaluate.EvalReport
    csc: evaluate.EvalReport
    net_noiseless: evaluate.EvalReport
    training: net.TrainingReport
    bench: list
    seconds: dict

    def miss_rate_noiseless(self):
        """(missed + spurious) / true sources for the network on noiseless EPIs."""
        r = self.net_noiseless
        return (r.missed + r.spurious) / max(r.matched + r.missed, 1)

    def val_ratio(self):
        """Validation loss after the last epoch over that after epoch 1."""
        v = self.training.val_loss
        return v[-1] / v[0]

    def train_loss_moving_average(self, window=5):
        return np.convolve(self.training.train_loss, np.ones(window) / window, mode="valid")

    def speedup(self):
        return self.bench[1].speedup_vs_csc

    def ordering(self):
        """Per-axis flag: is the network RMSE at most the CSC RMSE?"""
        return {ax: getattr(self.net, f"rmse_{ax}") <= getattr(self.csc, f"rmse_{ax}")
                for ax in "xyz"}

    def lines(self):
        out = [self.net.summary(), self.csc.summary(),
               "cista-net noiseless: " + self.net_noiseless.summary(),
               f"validation loss epoch {len(self.training.val_loss)} / epoch 1 = {self.val_ratio():.3f}",
               f"cista-infer speedup over csc-solve: {self.speedup():.1f}x"]
        out.append("cista-net <= csc per axis: " +
                   ", ".join(f"{k}={v}" for k, v in self.ordering().items()))
        out.append("stage seconds: " + json.dumps({k: round(v, 1) for k, v in self.seconds.items()}))
        return out


def run(workdir, cfg=DeskConfig()):
    """Run the whole benchmark in ``workdir`` and return a :class:`DeskResult`."""
    os.makedirs(workdir, exist_ok=True)
    path = lambda name: os.path.join(workdir, name)  # noqa: E731
    optics = cfg.optics()
    seconds = {}

    t = time.perf_counter()
    synth.generate_dataset(optics, cfg.n_train, 1, 2, cfg.noise_sigma, cfg.sigma_label,
                           cfg.train_seed, path("train.bin"))
    synth.generate_dataset(optics, cfg.n_test, 1, 1, cfg.noise_sigma, cfg.sigma_label,
                           cfg.test_seed, path("test.bin"))
    # same seed, same sources; only the noise is dropped
    synth.generate_dataset(optics, cfg.n_test, 1, 1, 0.0, cfg.sigma_label, cfg.test_seed,
                           path("test_noiseless.bin"))
    dictionary = synth.build_dictionary(optics, cfg.atom_theta, cfg.atom_n)
    synth.save_dictionary(dictionary, optics, path("dict.bin"))
    seconds["generate"] = time.perf_counter() - t

    t = time.perf_counter()
    hyper = net.TrainingHyper(epochs=cfg.epochs, batch=cfg.batch, lr=cfg.lr, seed=cfg.net_seed)
    model, training = net.train(path("train.bin"), cfg.architecture(), hyper, path("model.bin"),
                                csv_path=path("training.csv"))
    seconds["train"] = time.perf_counter() - t

    test = synth.read_dataset(path("test.bin"))
    clean = synth.read_dataset(path("test_noiseless.bin"))
    t = time.perf_counter()
    net_rep = evaluate.evaluate("cista-net", test, model=model)
    clean_rep = evaluate.evaluate("cista-net", clean, model=model)
    seconds["eval_net"] = time.perf_counter() - t

    t = time.perf_counter()
    solver = csc.SolverOptions(lambda_sparsity=cfg.csc_lambda, max_iters=cfg.csc_max_iters)
    csc_rep = evaluate.evaluate("csc", test, dictionary=dictionary, solver=solver)
    seconds["eval_csc"] = time.perf_counter() - t
    evaluate.write_eval_csv([net_rep, csc_rep], path("localization.csv"))

    t = time.perf_counter()
    rows = evaluate.bench(model, dictionary, test.epis[:cfg.bench_epis], cfg.bench_repeats,
                          cfg.csc_max_iters, cfg.csc_lambda)
    evaluate.write_bench_csv(rows, path("bench.csv"))
    seconds["bench"] = time.perf_counter() - t
    return DeskResult(net_rep, csc_rep, clean_rep, training, rows, seconds)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="python -m lfcista.desk", description=__doc__)
    parser.add_argument("workdir")
    parser.add_argument("--epochs", type=int, default=DeskConfig.epochs)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    cfg = DeskConfig(epochs=args.epochs)
    result = run(args.workdir, cfg)
    with open(os.path.join(args.workdir, "config.json"), "w") as fh:
        json.dump(asdict(cfg), fh, indent=2)
    for line in result.lines():
        print(line)


if __name__ == "__main__":
    main()
