"""Parametric light-field forward model, EPI dictionary and labeled datasets.

A point source at lateral position ``(x0, y0)`` and depth ``z`` (um) traces a
line in every EPI: in angular row ``u`` (centered, ``u = -(T-1)/2 .. (T-1)/2``)
the source appears at ``x0 + s*u`` with slope ``s = kappa * z``.  The line is
blurred by a Gaussian PSF of width ``psf_sigma`` pixels.

Row ``r`` of a rendered EPI holds angular sample ``u = r - (T-1)/2``.
"""
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DepthRangeError,
    FormatError,
    MagicError,
    ShapeError,
    TruncationError,
    VersionError,
)

DATASET_MAGIC = b"EPIDS1\n"
DICTIONARY_MAGIC = b"EPIDC1\n"
FORMAT_VERSION = 1

# slack when checking a depth against the grid ends
_DEPTH_EPS = 1e-9


@dataclass(frozen=True)
class OpticsConfig:
    theta_u: int = 19
    theta_v: int = 19
    n_x: int = 63
    n_y: int = 63
    kappa: float = 0.025
    psf_sigma: float = 1.0
    depth_min: float = -18.0
    depth_max: float = 36.0
    depth_count: int = 55

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("theta_u", "theta_v"):
            v = getattr(self, name)
            if v < 1 or v % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd count, got {v}")
        if self.n_x < 1 or self.n_y < 1:
            raise ConfigError("spatial sizes must be >= 1")
        if not math.isfinite(self.kappa):
            raise ConfigError("kappa must be finite")
        if not self.psf_sigma > 0:
            raise ConfigError("psf_sigma must be positive")
        if not self.depth_min < self.depth_max:
            raise ConfigError("depth_min must be below depth_max")
        if self.depth_count < 2:
            raise ConfigError("depth_count must be >= 2")
        if self.frame_margin() >= self.n_x / 2:
            raise ConfigError(
                f"EPI lines leave the frame: margin {self.frame_margin():.3f} >= n_x/2 = {self.n_x / 2}")

    @property
    def depth_step(self):
        return (self.depth_max - self.depth_min) / (self.depth_count - 1)

    def frame_margin(self, theta=None):
        """Largest lateral excursion of a line from its center, plus 3 PSF widths."""
        theta = self.theta_u if theta is None else theta
        zmax = max(abs(self.depth_min), abs(self.depth_max))
        return abs(self.kappa) * zmax * (theta - 1) / 2 + 3 * self.psf_sigma

    def replace(self, **changes):
        return OpticsConfig(**{**asdict(self), **changes})


def depth_grid(cfg):
    """Depths (um) of the M dictionary atoms, ``depth_min + m * step``."""
    m = np.arange(cfg.depth_count)
    return cfg.depth_min + m * cfg.depth_step


def depth_index(z, cfg):
    """Nearest grid index for depth ``z``."""
    return int(round((z - cfg.depth_min) / cfg.depth_step))


@dataclass(frozen=True)
class Source:
    """A point emitter: pixel position ``(x0, y0)``, depth ``z`` in um, and amplitude."""
    x0: float
    y0: float
    z: float
    amplitude: float = 1.0

    def check(self, cfg):
        if not self.amplitude > 0:
            raise ConfigError(f"source amplitude must be positive, got {self.amplitude}")
        if not cfg.depth_min - _DEPTH_EPS <= self.z <= cfg.depth_max + _DEPTH_EPS:
            raise DepthRangeError(f"depth {self.z} outside [{cfg.depth_min}, {cfg.depth_max}]")
        if not (0 <= self.x0 < cfg.n_x and 0 <= self.y0 < cfg.n_y):
            raise ConfigError(f"source position ({self.x0}, {self.y0}) outside the frame")


def epi_slope(z, cfg):
    """Lateral shift in pixels per angular step for a source at depth ``z`` um."""
    if not cfg.depth_min - _DEPTH_EPS <= z <= cfg.depth_max + _DEPTH_EPS:
        raise DepthRangeError(f"depth {z} outside [{cfg.depth_min}, {cfg.depth_max}]")
    return cfg.kappa * z


def _angular_offsets(theta):
    h = (theta - 1) // 2
    return np.arange(-h, h + 1, dtype=np.float64)


def _line_profile(x0, slope, amplitude, u, ncols, sigma):
    """``amplitude * exp(-(x - (x0 + slope*u))^2 / 2 sigma^2)`` for every row u, column x."""
    x = np.arange(ncols, dtype=np.float64)
    centers = x0 + slope * u
    return amplitude * np.exp(-((x[None, :] - centers[:, None]) ** 2) / (2.0 * sigma ** 2))


def _add_noise(img, noise_sigma, seed):
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")
    if noise_sigma == 0:
        return img
    rng = np.random.default_rng(seed)
    img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    return np.maximum(img, 0.0)


def render_epi(sources, cfg, noise_sigma=0.0, seed=0):
    """Render the ``theta_u x n_x`` EPI of ``sources``.

    Noise is i.i.d. Gaussian with standard deviation ``noise_sigma`` and the
    result is clipped at zero.  The output depends only on the arguments.
    """
    u = _angular_offsets(cfg.theta_u)
    epi = np.zeros((cfg.theta_u, cfg.n_x))
    for src in sources:
        src.check(cfg)
        s = epi_slope(src.z, cfg)
        epi += _line_profile(src.x0, s, src.amplitude, u, cfg.n_x, cfg.psf_sigma)
    return _add_noise(epi, noise_sigma, seed)


def render_lightfield(sources, cfg, noise_sigma=0.0, seed=0):
    """Render a 4-D light field ``L[u, v, x, y]`` with the separable line model."""
    u = _angular_offsets(cfg.theta_u)
    v = _angular_offsets(cfg.theta_v)
    lf = np.zeros((cfg.theta_u, cfg.theta_v, cfg.n_x, cfg.n_y))
    for src in sources:
        src.check(cfg)
        s = epi_slope(src.z, cfg)
        gx = _line_profile(src.x0, s, src.amplitude, u, cfg.n_x, cfg.psf_sigma)
        gy = _line_profile(src.y0, s, 1.0, v, cfg.n_y, cfg.psf_sigma)
        lf += gx[:, None, :, None] * gy[None, :, None, :]
    return _add_noise(lf, noise_sigma, seed)


@dataclass
class EpiDictionary:
    """M unit-norm atoms ``(M, atom_theta, atom_n)`` and their depths in um."""
    atoms: np.ndarray
    depths: np.ndarray

    @property
    def m(self):
        return self.atoms.shape[0]

    @property
    def atom_shape(self):
        return self.atoms.shape[1:]


def build_dictionary(cfg, atom_theta=19, atom_n=31):
    """One atom per grid depth: a noiseless unit source centered in the atom window.

    The atom keeps the central ``atom_theta`` angular rows.  Each atom is scaled
    to unit Frobenius norm.
    """
    if atom_theta < 1 or atom_theta % 2 == 0 or atom_n < 1 or atom_n % 2 == 0:
        raise ConfigError(f"atom dimensions must be odd, got {atom_theta}x{atom_n}")
    if atom_theta > cfg.theta_u or atom_n > cfg.n_x:
        raise ConfigError(
            f"atom {atom_theta}x{atom_n} larger than EPI {cfg.theta_u}x{cfg.n_x}")
    depths = depth_grid(cfg)
    u = _angular_offsets(atom_theta)
    center = (atom_n - 1) / 2
    atoms = np.empty((cfg.depth_count, atom_theta, atom_n))
    for m, z in enumerate(depths):
        atom = _line_profile(center, epi_slope(z, cfg), 1.0, u, atom_n, cfg.psf_sigma)
        atoms[m] = atom / np.linalg.norm(atom)
    return EpiDictionary(atoms=atoms, depths=depths)


def make_soft_label(depth_indices, sigma_label, m):
    """Gaussian-smoothed depth label of length ``m``, peak 1 at each true index.

    Several sources are combined by elementwise maximum; ``sigma_label == 0``
    gives a hard (one-hot) label.
    """
    if sigma_label < 0:
        raise ConfigError("sigma_label must be >= 0")
    label = np.zeros(m)
    grid = np.arange(m)
    for idx in depth_indices:
        if not 0 <= idx < m:
            raise ConfigError(f"depth index {idx} outside [0, {m})")
        if sigma_label == 0:
            g = (grid == idx).astype(np.float64)
        else:
            g = np.exp(-((grid - idx) ** 2) / (2.0 * sigma_label ** 2))
        np.maximum(label, g, out=label)
    return label


@dataclass
class DatasetHeader:
    count: int
    m: int
    theta: int
    n: int
    seed: int
    noise_sigma: float
    sigma_label: float
    depth_min: float
    depth_max: float
    kappa: float
    psf_sigma: float
    version: int = FORMAT_VERSION

    _KEYS = ("version", "count", "m", "theta", "n", "seed", "noise_sigma", "sigma_label",
             "depth_min", "depth_max", "kappa", "psf_sigma")

    def optics(self):
        """Optics of the dataset; the light field is assumed square (theta_v = theta, n_y = n)."""
        return OpticsConfig(theta_u=self.theta, theta_v=self.theta, n_x=self.n, n_y=self.n,
                            kappa=self.kappa, psf_sigma=self.psf_sigma, depth_min=self.depth_min,
                            depth_max=self.depth_max, depth_count=self.m)

    def items(self):
        return [(k, getattr(self, k)) for k in self._KEYS]

    @classmethod
    def from_items(cls, kv):
        try:
            return cls(
                version=int(kv["version"]), count=int(kv["count"]), m=int(kv["m"]),
                theta=int(kv["theta"]), n=int(kv["n"]), seed=int(kv["seed"]),
                noise_sigma=float(kv["noise_sigma"]), sigma_label=float(kv["sigma_label"]),
                depth_min=float(kv["depth_min"]), depth_max=float(kv["depth_max"]),
                kappa=float(kv["kappa"]), psf_sigma=float(kv["psf_sigma"]))
        except KeyError as exc:
            raise FormatError(f"dataset header lacks key {exc}") from None
        except ValueError as exc:
            raise FormatError(f"bad dataset header value: {exc}") from None


@dataclass
class Dataset:
    header: DatasetHeader
    epis: np.ndarray
    labels: np.ndarray
    sources: list = field(default_factory=list)

    def __len__(self):
        return self.epis.shape[0]

    def source_list(self, i):
        return [Source(*map(float, row)) for row in self.sources[i]]


def format_header(magic, items):
    """Serialize ``magic`` plus ``key=value`` lines and the terminating blank line."""
    lines = [f"{k}={_fmt(v)}" for k, v in items]
    return magic + ("\n".join(lines) + "\n\n").encode("utf-8")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_header(fh, magic):
    """Read the magic line and ``key=value`` header block from a binary stream."""
    got = fh.read(len(magic))
    if got != magic:
        raise MagicError(f"bad magic {got!r}, expected {magic!r}")
    kv = {}
    while True:
        line = fh.readline()
        if not line:
            raise TruncationError("header not terminated by a blank line")
        line = line.decode("utf-8").rstrip("\n")
        if line == "":
            return kv
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed header line {line!r}")
        kv[key.strip()] = value.strip()


def read_exact(fh, nbytes, what):
    buf = fh.read(nbytes)
    if len(buf) != nbytes:
        raise TruncationError(f"file truncated while reading {what}")
    return buf


def sample_sources(rng, cfg, n_min, n_max, amplitude_range=(0.5, 1.5)):
    """Draw the ground truth of one sample: distinct grid depths, in-frame positions."""
    k = int(rng.integers(n_min, n_max + 1))
    if k > cfg.depth_count:
        raise ConfigError("more sources than depth planes")
    depths = depth_grid(cfg)
    idx = rng.choice(cfg.depth_count, size=k, replace=False)
    margin_x = cfg.frame_margin(cfg.theta_u)
    margin_y = cfg.frame_margin(cfg.theta_v)
    if margin_y >= cfg.n_y / 2:
        raise ConfigError("light-field lines leave the frame along y")
    sources = []
    for m in idx:
        x0 = rng.uniform(margin_x, cfg.n_x - 1 - margin_x)
        y0 = rng.uniform(margin_y, cfg.n_y - 1 - margin_y)
        amp = rng.uniform(*amplitude_range)
        sources.append(Source(float(x0), float(y0), float(depths[m]), float(amp)))
    return [int(i) for i in idx], sources


def sample_rng(seed, i):
    """Independent random stream of sample ``i``."""
    return np.random.default_rng([seed, i])


def generate_sample(cfg, i, seed, sources_min, sources_max, noise_sigma, sigma_label,
                    amplitude_range=(0.5, 1.5)):
    """Render sample ``i`` of a dataset; depends only on ``(seed, i)`` and the settings."""
    rng = sample_rng(seed, i)
    idx, sources = sample_sources(rng, cfg, sources_min, sources_max, amplitude_range)
    noise_seed = int(rng.integers(0, 2 ** 63 - 1))
    epi = render_epi(sources, cfg, noise_sigma, noise_seed)
    label = make_soft_label(idx, sigma_label, cfg.depth_count)
    return epi, label, sources


def generate_dataset(cfg, count, sources_min, sources_max, noise_sigma, sigma_label, seed,
                     out_path, amplitude_range=(0.5, 1.5)):
    """Write ``count`` labeled EPIs to ``out_path`` and return the header.

    Sample ``i`` draws from a random stream keyed by ``(seed, i)``: its source
    count is uniform in ``[sources_min, sources_max]``, depths are distinct grid
    points, and positions keep every line inside the frame.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    if not 0 <= sources_min <= sources_max:
        raise ConfigError("need 0 <= sources_min <= sources_max")
    header = DatasetHeader(count=count, m=cfg.depth_count, theta=cfg.theta_u, n=cfg.n_x,
                           seed=int(seed), noise_sigma=float(noise_sigma),
                           sigma_label=float(sigma_label), depth_min=float(cfg.depth_min),
                           depth_max=float(cfg.depth_max), kappa=float(cfg.kappa),
                           psf_sigma=float(cfg.psf_sigma))
    with open(out_path, "wb") as fh:
        fh.write(format_header(DATASET_MAGIC, header.items()))
        for i in range(count):
            epi, label, sources = generate_sample(cfg, i, seed, sources_min, sources_max,
                                                  noise_sigma, sigma_label, amplitude_range)
            fh.write(encode_sample(epi, label, sources))
    return header


def encode_sample(epi, label, sources):
    parts = [np.asarray(epi, dtype="<f4").tobytes(), np.asarray(label, dtype="<f4").tobytes(),
             struct.pack("<I", len(sources))]
    for s in sources:
        parts.append(np.array([s.x0, s.y0, s.z, s.amplitude], dtype="<f4").tobytes())
    return b"".join(parts)


def read_dataset(path):
    """Load a dataset file written by :func:`generate_dataset`; values are upcast to float64."""
    with open(path, "rb") as fh:
        header = DatasetHeader.from_items(parse_header(fh, DATASET_MAGIC))
        if header.version != FORMAT_VERSION:
            raise VersionError(f"unsupported dataset version {header.version}")
        t, n, m = header.theta, header.n, header.m
        epis = np.empty((header.count, t, n))
        labels = np.empty((header.count, m))
        sources = []
        for i in range(header.count):
            epis[i] = np.frombuffer(read_exact(fh, 4 * t * n, f"EPI of sample {i}"), "<f4").reshape(t, n)
            labels[i] = np.frombuffer(read_exact(fh, 4 * m, f"label of sample {i}"), "<f4")
            (k,) = struct.unpack("<I", read_exact(fh, 4, f"source count of sample {i}"))
            src = np.frombuffer(read_exact(fh, 16 * k, f"sources of sample {i}"), "<f4")
            sources.append(src.reshape(k, 4).astype(np.float64))
        if fh.read(1):
            raise ShapeError("trailing bytes after the last sample")
    return Dataset(header=header, epis=epis, labels=labels, sources=sources)


def save_dictionary(dictionary, cfg, path):
    theta, n = dictionary.atom_shape
    items = [("version", FORMAT_VERSION), ("m", dictionary.m), ("atom_theta", theta),
             ("atom_n", n), ("depth_min", float(cfg.depth_min)), ("depth_max", float(cfg.depth_max)),
             ("kappa", float(cfg.kappa)), ("psf_sigma", float(cfg.psf_sigma))]
    with open(path, "wb") as fh:
        fh.write(format_header(DICTIONARY_MAGIC, items))
        fh.write(np.asarray(dictionary.atoms, dtype="<f4").tobytes())


def load_dictionary(path):
    with open(path, "rb") as fh:
        kv = parse_header(fh, DICTIONARY_MAGIC)
        try:
            version = int(kv["version"])
            m, theta, n = int(kv["m"]), int(kv["atom_theta"]), int(kv["atom_n"])
            dmin, dmax = float(kv["depth_min"]), float(kv["depth_max"])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad dictionary header: {exc}") from None
        if version != FORMAT_VERSION:
            raise VersionError(f"unsupported dictionary version {version}")
        buf = read_exact(fh, 4 * m * theta * n, "dictionary atoms")
        if fh.read(1):
            raise ShapeError("trailing bytes after the dictionary atoms")
    atoms = np.frombuffer(buf, "<f4").reshape(m, theta, n).astype(np.float64)
    depths = dmin + np.arange(m) * ((dmax - dmin) / (m - 1))
    return EpiDictionary(atoms=atoms, depths=depths)
