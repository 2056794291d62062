"""Depth readout, localization scoring and timing of the two localizers."""
import csv
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import csc, lightfield, net, synth


@dataclass
class DepthReadoutOptions:
    """Peak picking on a per-depth evidence vector.

    ``peak_threshold`` is absolute when ``relative`` is false, otherwise a
    fraction of the largest evidence value.
    """
    peak_threshold: float = 0.5
    relative: bool = False
    min_separation: int = 3
    centroid_radius: int = 1

    def __post_init__(self):
        if self.min_separation < 1:
            raise ValueError("min_separation must be >= 1")
        if self.centroid_radius < 0:
            raise ValueError("centroid_radius must be >= 0")


NETWORK_READOUT = DepthReadoutOptions(0.5, relative=False)
CSC_READOUT = DepthReadoutOptions(0.1, relative=True)


def detect_peaks(evidence, opts):
    """Indices of accepted 1-D peaks, strongest first (before centroid refinement)."""
    ev = np.asarray(evidence, dtype=np.float64)
    if ev.ndim != 1 or not np.all(np.isfinite(ev)):
        raise ValueError("evidence must be a finite 1-D vector")
    if ev.size == 0:
        return []
    tau = opts.peak_threshold * ev.max() if opts.relative else opts.peak_threshold
    padded = np.pad(ev, 1, constant_values=-np.inf)
    is_max = (ev >= padded[:-2]) & (ev >= padded[2:]) & (ev > tau)
    cand = np.flatnonzero(is_max)
    order = cand[np.argsort(-ev[cand], kind="stable")]
    accepted = []
    for i in order:
        if all(abs(int(i) - j) >= opts.min_separation for j in accepted):
            accepted.append(int(i))
    return accepted


def detect_depths(evidence, grid, opts=NETWORK_READOUT):
    """Depths (um) of the peaks of an evidence vector, strongest first.

    Each accepted peak index is refined by the evidence-weighted centroid over
    ``[m - r, m + r]`` (clipped to the grid) and mapped through the affine depth
    grid.
    """
    grid = np.asarray(grid, dtype=np.float64)
    ev = np.asarray(evidence, dtype=np.float64)
    if grid.shape != ev.shape:
        raise ValueError("evidence and depth grid differ in length")
    if grid.size == 1:
        return [float(grid[0])] if detect_peaks(ev, opts) else []
    step = (grid[-1] - grid[0]) / (grid.size - 1)
    depths = []
    for m in detect_peaks(ev, opts):
        lo = max(0, m - opts.centroid_radius)
        hi = min(ev.size, m + opts.centroid_radius + 1)
        w = np.maximum(ev[lo:hi], 0.0)
        pos = float(m)
        if w.sum() > 0:
            pos = float(np.dot(w, np.arange(lo, hi)) / w.sum())
        depths.append(float(grid[m]) if pos == m else float(grid[0] + pos * step))
    return depths


@dataclass
class MatchResult:
    pairs: list
    matched: int
    missed: int
    spurious: int
    rmse_x: float
    rmse_y: float
    rmse_z: float


def _rmse(values):
    return math.sqrt(sum(v * v for v in values) / len(values)) if values else 0.0


def match_and_rmse(pred, truth, gate_um=3.0):
    """Greedy nearest-neighbour matching in z within ``gate_um``, then per-axis RMSE.

    Candidate pairs are taken in order of increasing ``|dz|``; ties are broken
    by full 3-D distance and then by coordinate values, so the outcome does
    not depend on the order of ``pred``.  RMSE is 0 when nothing matched.
    """
    if not gate_um > 0:
        raise ValueError("gate_um must be positive")
    pred = [tuple(map(float, p)) for p in pred]
    truth = [tuple(map(float, t)) for t in truth]
    cands = []
    for i, p in enumerate(pred):
        for j, t in enumerate(truth):
            dz = abs(p[2] - t[2])
            if dz <= gate_um:
                d3 = sum((a - b) ** 2 for a, b in zip(p, t) if not math.isnan(a - b))
                cands.append((dz, d3, _sort_key(p), j, i))
    cands.sort(key=lambda c: c[:4])
    used_p, used_t, pairs = set(), set(), []
    for _, _, _, j, i in cands:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        pairs.append((pred[i], truth[j]))
    return MatchResult(
        pairs=pairs, matched=len(pairs), missed=len(truth) - len(pairs),
        spurious=len(pred) - len(pairs),
        rmse_x=_rmse(_diffs(pairs, 0)),
        rmse_y=_rmse(_diffs(pairs, 1)),
        rmse_z=_rmse(_diffs(pairs, 2)))


def _sort_key(p):
    return tuple(math.inf if math.isnan(v) else v for v in p)


def _diffs(pairs, axis):
    # predictions without a lateral partner carry NaN x/y and are skipped
    d = (p[axis] - t[axis] for p, t in pairs)
    return [v for v in d if not math.isnan(v)]


@dataclass
class EvalReport:
    method: str
    rows: list = field(default_factory=list)
    matched: int = 0
    missed: int = 0
    spurious: int = 0
    rmse_x: float = 0.0
    rmse_y: float = 0.0
    rmse_z: float = 0.0
    seconds_per_epi: float = 0.0

    def summary(self):
        return (f"{self.method}: RMSE x={self.rmse_x:.3f} y={self.rmse_y:.3f} z={self.rmse_z:.3f} "
                f"matched={self.matched} missed={self.missed} spurious={self.spurious} "
                f"time/EPI={self.seconds_per_epi:.3e}s")

    def write_csv(self, path):
        write_eval_csv([self], path)


EVAL_HEADER = ["method", "sample", "pred_x", "pred_y", "pred_z", "true_x", "true_y", "true_z"]


def write_eval_csv(reports, path):
    """Matched prediction/truth rows of one or more reports; NaN is written as an empty cell."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        for rep in reports:
            for r in rep.rows:
                w.writerow([rep.method] + [_csv_num(v) for v in r])


def _csv_num(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def aggregate(method, per_sample):
    """Fold ``(sample_index, MatchResult)`` items into one report."""
    rep = EvalReport(method)
    pairs = []
    for i, res in per_sample:
        rep.matched += res.matched
        rep.missed += res.missed
        rep.spurious += res.spurious
        pairs.extend(res.pairs)
        rep.rows.extend((i,) + p + t for p, t in res.pairs)
    rep.rmse_x = _rmse(_diffs(pairs, 0))
    rep.rmse_y = _rmse(_diffs(pairs, 1))
    rep.rmse_z = _rmse(_diffs(pairs, 2))
    return rep


def lateral_detections(sources, cfg, noise_sigma, seed, threshold=None, min_separation=3):
    """Detect sources on the rendered central view of their light field.

    The default threshold is half the brightest pixel.
    """
    lf = synth.render_lightfield(sources, cfg, noise_sigma, seed)
    view = lightfield.central_view(lf)
    thr = 0.5 * float(view.max()) if threshold is None else threshold
    return lightfield.detect_lateral(view, max(thr, 0.0), min_separation)


def combine(lateral, depths):
    """Pair the k-th brightest lateral detection with the k-th strongest depth.

    Depths without a lateral partner are kept with NaN x, y so that they still
    count as predictions in z.
    """
    out = []
    for k, z in enumerate(depths):
        if k < len(lateral):
            out.append((float(lateral[k].x), float(lateral[k].y), z))
        else:
            out.append((math.nan, math.nan, z))
    return out


def predict_depths(method, epis, grid, model=None, dictionary=None, solver=None, readout=None):
    """Depth lists for a stack of EPIs with ``method`` in {"cista-net", "csc"}."""
    if method == "cista-net":
        readout = readout or NETWORK_READOUT
        probs = net.infer(epis, model)
        return [detect_depths(p, grid, readout) for p in probs]
    if method == "csc":
        readout = readout or CSC_READOUT
        solver = solver or csc.SolverOptions()
        out = []
        for x in epis:
            z, _ = csc.solve(x, dictionary, solver)
            out.append(detect_depths(csc.code_evidence(z), grid, readout))
        return out
    raise ValueError(f"unknown method {method!r}")


def lateral_seed(seed, i):
    """Noise seed of the light field rendered for sample ``i``."""
    return int(np.random.default_rng([seed, i, 1]).integers(0, 2 ** 63 - 1))


def evaluate(method, data, model=None, dictionary=None, solver=None, readout=None, gate_um=3.0,
             lateral_threshold=None, lateral_min_separation=3, epis=None):
    """Localize every sample of a dataset and score it against the ground truth.

    x and y come from the rendered central view of each sample's sources, at
    the dataset's noise level; z comes from ``method`` applied to the sample's
    EPI (or to ``epis[i]`` when given).
    """
    cfg = data.header.optics()
    grid = synth.depth_grid(cfg)
    epis = data.epis if epis is None else epis
    t0 = time.perf_counter()
    depth_lists = predict_depths(method, epis, grid, model, dictionary, solver, readout)
    elapsed = time.perf_counter() - t0
    per_sample = []
    for i, depths in enumerate(depth_lists):
        srcs = data.source_list(i)
        truth = [(s.x0, s.y0, s.z) for s in srcs]
        lat = lateral_detections(srcs, cfg, data.header.noise_sigma,
                                 lateral_seed(data.header.seed, i),
                                 lateral_threshold, lateral_min_separation)
        per_sample.append((i, match_and_rmse(combine(lat, depths), truth, gate_um)))
    rep = aggregate(method, per_sample)
    rep.seconds_per_epi = elapsed / max(len(epis), 1)
    return rep


BENCH_HEADER = ["method", "n_epis", "median_s", "mad_s", "speedup_vs_csc"]


@dataclass
class BenchRow:
    method: str
    n_epis: int
    median_s: float
    mad_s: float
    speedup_vs_csc: float


def _time_per_epi(fn, epis, repeats):
    fn(epis)  # warm-up
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(epis)
        samples.append((time.perf_counter() - t0) / len(epis))
    med = statistics.median(samples)
    mad = statistics.median(abs(s - med) for s in samples)
    return med, mad


def bench(model, dictionary, epis, repeats=3, csc_iters=200, lambda_sparsity=0.1):
    """Per-EPI wall time of ``csc-solve`` and ``cista-infer`` on one thread.

    Each method runs once as warm-up, then ``repeats`` timed passes over
    ``epis``; the median and median absolute deviation of the per-EPI time
    are reported.  The CSC solver runs exactly ``csc_iters`` iterations.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    epis = np.asarray(epis, dtype=np.float64)
    if epis.ndim == 2:
        epis = epis[None]
    opts = csc.SolverOptions(lambda_sparsity=lambda_sparsity, max_iters=csc_iters,
                             fixed_iters=True)

    def run_csc(xs):
        for x in xs:
            csc.solve(x, dictionary, opts)

    def run_net(xs):
        for x in xs:
            net.infer(x, model)

    with threadpool_limits(1):
        csc_med, csc_mad = _time_per_epi(run_csc, epis, repeats)
        net_med, net_mad = _time_per_epi(run_net, epis, repeats)
    return [BenchRow("csc-solve", len(epis), csc_med, csc_mad, 1.0),
            BenchRow("cista-infer", len(epis), net_med, net_mad, csc_med / net_med)]


def write_bench_csv(rows, dest):
    """Write timing rows to a path or an open text stream."""
    if hasattr(dest, "write"):
        _write_bench(rows, dest)
        return
    with open(dest, "w", newline="") as fh:
        _write_bench(rows, fh)


def _write_bench(rows, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(BENCH_HEADER)
    for r in rows:
        w.writerow([r.method, r.n_epis, repr(r.median_s), repr(r.mad_s), repr(r.speedup_vs_csc)])


def read_bench_csv(path):
    """Parse a timing CSV written by :func:`write_bench_csv`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != BENCH_HEADER:
            raise ValueError(f"unexpected bench CSV header {header}")
        return [BenchRow(r[0], int(r[1]), float(r[2]), float(r[3]), float(r[4])) for r in reader]
