"""Synthetic interfered GNSS baseband signals and their spectrogram images.

A received record is ``r[n] = s[n] + j[n] + w[n]`` where ``s`` is a GNSS-like
chipping sequence, ``j`` the jammer waveform of the requested class and ``w``
white Gaussian noise. Records are rendered into 8-bit grayscale spectrogram
images (frequency bins along rows, STFT frames along columns).

All frequencies are in Hz and all durations in seconds; with the default
``sample_rate_hz=1.0`` they are simply cycles/sample and samples.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal as sps
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._seeding import derive_seed, rng_from
from .exceptions import ConfigurationError, InputError

LOG_EPS = 1e-12
# DME pulse pairs are 12 us apart with 3.5 us half-amplitude width
_DME_SPACING_OVER_FWHM = 12.0 / 3.5
_FWHM_OVER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
_DME_TRUNCATE_SIGMAS = 4.0


class JammerClass(enum.IntEnum):
    NoJam = 0
    AM = 1
    Chirp = 2
    FM = 3
    DME = 4
    NB = 5

    @classmethod
    def parse(cls, value) -> "JammerClass":
        """Accept a member, its integer code, or its (case-insensitive) name."""
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)):
            try:
                return cls(int(value))
            except ValueError:
                raise ConfigurationError(f"unknown jammer class code {value}") from None
        lowered = str(value).strip().lower()
        for member in cls:
            if member.name.lower() == lowered:
                return member
        raise ConfigurationError(f"unknown jammer class {value!r}")


CLASS_NAMES = [c.name for c in JammerClass]


@dataclass(frozen=True)
class JammerParams:
    """Waveform parameters for every jammer class.

    Only the fields relevant to the class being synthesized are read.
    ``chirp_period_s=None`` sweeps once from start to stop over the record.
    """

    carrier_hz: float = 0.2
    am_mod_hz: float = 0.03
    am_depth: float = 0.8
    fm_mod_hz: float = 3e-4
    fm_deviation_hz: float = 0.03
    chirp_start_hz: float = 0.05
    chirp_stop_hz: float = 0.45
    chirp_period_s: Optional[float] = 4096.0
    dme_pulse_sigma_s: float = 8.0
    dme_duty_cycle: float = 0.1
    nb_bandwidth_hz: float = 0.02
    chip_rate_hz: float = 0.5


@dataclass(frozen=True)
class SignalConfig:
    sample_rate_hz: float = 1.0
    num_samples: int = 16384
    jsr_db: float = 30.0
    noise_power: float = 0.1
    signal_power: float = 1.0
    class_params: JammerParams = field(default_factory=JammerParams)
    rng_seed: int = 0

    @property
    def jammer_power(self) -> float:
        return self.signal_power * 10.0 ** (self.jsr_db / 10.0)

    def validate(self, jammer_class=None) -> None:
        if not self.sample_rate_hz > 0:
            raise ConfigurationError("sample_rate_hz must be positive")
        if int(self.num_samples) < 1:
            raise ConfigurationError("num_samples must be at least 1")
        if not math.isfinite(self.jsr_db):
            raise ConfigurationError("jsr_db must be finite")
        if self.noise_power < 0 or self.signal_power < 0:
            raise ConfigurationError("signal and noise powers must be non-negative")
        if not 0 <= self.rng_seed < 2**64:
            raise ConfigurationError("rng_seed must be an unsigned 64-bit integer")
        if jammer_class is not None and jammer_class != JammerClass.NoJam:
            if not self.jammer_power > 0:
                raise ConfigurationError(
                    "jammer amplitude must be positive: signal_power * 10^(jsr_db/10) == 0"
                )


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 128
    hop: int = 64
    window: str = "hann"

    def validate(self) -> None:
        n = int(self.window_len)
        if n < 1 or n & (n - 1):
            raise ConfigurationError("window_len must be a positive power of two")
        if not 1 <= self.hop <= n:
            raise ConfigurationError("hop must lie in [1, window_len]")
        if self.window not in ("hann", "rectangular"):
            raise ConfigurationError(f"unknown window {self.window!r}")

    def num_frames(self, num_samples: int) -> int:
        return (num_samples - self.window_len) // self.hop + 1


@dataclass
class Spectrogram:
    """One labelled image: ``pixels`` is ``(height, width)`` uint8."""

    pixels: np.ndarray
    label: JammerClass
    jsr_db: float = float("nan")
    seed: int = 0

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


# --------------------------------------------------------------------------
# waveforms


def chirp_phase(t, start_hz, stop_hz, period_s):
    """Phase (radians) of a sawtooth linear chirp sweeping start -> stop every period."""
    tau = np.mod(t, period_s)
    rate = (stop_hz - start_hz) / period_s
    return 2.0 * np.pi * (start_hz * tau + 0.5 * rate * tau**2)


def gnss_component(cfg: SignalConfig, rng: np.random.Generator) -> np.ndarray:
    """Pseudo-random +/-1 chips held for ``fs/chip_rate`` samples, scaled to signal_power."""
    n = cfg.num_samples
    samples_per_chip = max(1, int(round(cfg.sample_rate_hz / cfg.class_params.chip_rate_hz)))
    chips = rng.integers(0, 2, size=-(-n // samples_per_chip)) * 2.0 - 1.0
    return math.sqrt(cfg.signal_power) * np.repeat(chips, samples_per_chip)[:n]


def _dme_envelope(cfg: SignalConfig, rng: np.random.Generator):
    p = cfg.class_params
    fs = cfg.sample_rate_hz
    n = cfg.num_samples
    sigma = p.dme_pulse_sigma_s * fs
    if not sigma > 0 or not 0 < p.dme_duty_cycle <= 1:
        raise ConfigurationError("DME needs a positive pulse width and duty cycle in (0, 1]")
    half = max(1, int(round(_DME_TRUNCATE_SIGMAS * sigma)))
    width = 2 * half + 1
    spacing = max(width, int(round(_DME_SPACING_OVER_FWHM * _FWHM_OVER_SIGMA * sigma)))
    pair_len = spacing + width
    period = max(pair_len, int(round(pair_len / p.dme_duty_cycle)))

    k = np.arange(-half, half + 1)
    pulse = np.exp(-(k**2) / (2.0 * sigma**2))
    env = np.zeros(n)
    active = np.zeros(n, dtype=bool)
    # first pair starts within the record even when the period exceeds it
    offset = int(rng.integers(0, max(1, min(period, n - pair_len + 1))))
    for start in range(offset - period, n, period):
        for centre in (start + half, start + half + spacing):
            lo, hi = centre - half, centre + half + 1
            a, b = max(lo, 0), min(hi, n)
            if a < b:
                env[a:b] = pulse[a - lo : b - lo]
                active[a:b] = True
    return env, active


def _jammer_unit(cfg: SignalConfig, jclass: JammerClass, rng: np.random.Generator):
    """Unscaled jammer waveform and the mask of samples where it is active."""
    p = cfg.class_params
    n = cfg.num_samples
    t = np.arange(n) / cfg.sample_rate_hz
    nyq = cfg.sample_rate_hz / 2.0
    active = np.ones(n, dtype=bool)
    if jclass == JammerClass.AM:
        phi_c, phi_m = rng.uniform(0, 2 * np.pi, size=2)
        u = np.cos(2 * np.pi * p.carrier_hz * t + phi_c) * (
            1.0 + p.am_depth * np.cos(2 * np.pi * p.am_mod_hz * t + phi_m)
        )
    elif jclass == JammerClass.FM:
        phi_c, phi_m = rng.uniform(0, 2 * np.pi, size=2)
        index = p.fm_deviation_hz / p.fm_mod_hz
        u = np.cos(2 * np.pi * p.carrier_hz * t + phi_c + index * np.sin(2 * np.pi * p.fm_mod_hz * t + phi_m))
    elif jclass == JammerClass.Chirp:
        period = p.chirp_period_s
        if period is None:
            period = (n - 1) / cfg.sample_rate_hz
            tau = t
            u = np.cos(2 * np.pi * (p.chirp_start_hz * tau + 0.5 * (p.chirp_stop_hz - p.chirp_start_hz) / period * tau**2))
        else:
            if not period > 0:
                raise ConfigurationError("chirp_period_s must be positive")
            shift = rng.uniform(0, period)
            u = np.cos(chirp_phase(t + shift, p.chirp_start_hz, p.chirp_stop_hz, period))
    elif jclass == JammerClass.DME:
        env, active = _dme_envelope(cfg, rng)
        phi_c = rng.uniform(0, 2 * np.pi)
        u = env * np.cos(2 * np.pi * p.carrier_hz * t + phi_c)
    elif jclass == JammerClass.NB:
        if not 0 < p.carrier_hz < nyq or not p.nb_bandwidth_hz > 0:
            raise ConfigurationError("NB needs 0 < carrier < fs/2 and a positive bandwidth")
        b, a = sps.iirpeak(p.carrier_hz, p.carrier_hz / p.nb_bandwidth_hz, fs=cfg.sample_rate_hz)
        burn = min(8192, int(math.ceil(20.0 * cfg.sample_rate_hz / (math.pi * p.nb_bandwidth_hz))))
        u = sps.lfilter(b, a, rng.standard_normal(n + burn))[burn:]
    else:
        raise ConfigurationError(f"no jammer waveform for class {jclass!r}")
    return u, active


def synthesize_components(cfg: SignalConfig, jammer_class) -> dict:
    """Return the separate terms ``s``, ``j``, ``w`` and the jammer ``active`` mask.

    The jammer is scaled so that its mean power over the active samples equals
    ``signal_power * 10**(jsr_db/10)``.
    """
    jclass = JammerClass.parse(jammer_class)
    cfg.validate(jclass)
    rng = np.random.default_rng(cfg.rng_seed)
    n = cfg.num_samples
    s = gnss_component(cfg, rng)
    if jclass == JammerClass.NoJam:
        j = np.zeros(n)
        active = np.zeros(n, dtype=bool)
    else:
        u, active = _jammer_unit(cfg, jclass, rng)
        unit_power = float(np.mean(u[active] ** 2))
        if not unit_power > 0:
            raise ConfigurationError("generated jammer waveform has zero power")
        j = u * math.sqrt(cfg.jammer_power / unit_power)
    w = math.sqrt(cfg.noise_power) * rng.standard_normal(n)
    return {"s": s, "j": j, "w": w, "active": active}


def synthesize_signal(cfg: SignalConfig, jammer_class) -> np.ndarray:
    """Real-valued received samples ``s + j + w`` of length ``cfg.num_samples``."""
    parts = synthesize_components(cfg, jammer_class)
    return parts["s"] + parts["j"] + parts["w"]


# --------------------------------------------------------------------------
# spectrogram


def stft_window(stft: StftConfig) -> np.ndarray:
    n = stft.window_len
    if stft.window == "rectangular":
        return np.ones(n)
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_magnitude(x, stft: StftConfig = StftConfig()) -> np.ndarray:
    """One-sided STFT magnitude, shape ``(window_len // 2 + 1, num_frames)``."""
    stft.validate()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError("signal must be one-dimensional")
    if x.size < stft.window_len:
        raise InputError(f"signal has {x.size} samples, fewer than window_len={stft.window_len}")
    frames = sliding_window_view(x, stft.window_len)[:: stft.hop]
    return np.abs(np.fft.rfft(frames * stft_window(stft), axis=1)).T


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with corner pixels aligned to corner pixels."""
    grid = np.asarray(grid, dtype=np.float64)
    in_h, in_w = grid.shape

    def axis_weights(n_in, n_out):
        pos = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
        lo = np.clip(np.floor(pos).astype(int), 0, max(n_in - 2, 0))
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis_weights(in_h, out_h)
    c0, c1, fc = axis_weights(in_w, out_w)
    # lerp form a + (b - a) * f keeps flat regions exactly flat
    top = grid[r0][:, c0] + (grid[r0][:, c1] - grid[r0][:, c0]) * fc
    bottom = grid[r1][:, c0] + (grid[r1][:, c1] - grid[r1][:, c0]) * fc
    return top + (bottom - top) * fr[:, None]


def render_spectrogram(grid, out_h: int, out_w: int, log_scale: bool = True, binarize: bool = False) -> np.ndarray:
    """Log-compress, resize and min-max quantize a magnitude grid to uint8 pixels.

    Quantization rounds half to even. A constant grid yields all-zero pixels.
    ``binarize`` thresholds the quantized image at 128 into {0, 255}.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.size == 0:
        raise InputError("magnitude grid must be a non-empty 2-D array")
    if out_h < 2 or out_w < 2:
        raise InputError("output dimensions must be at least 2x2")
    if log_scale:
        grid = 20.0 * np.log10(grid + LOG_EPS)
    img = bilinear_resize(grid, out_h, out_w)
    lo, hi = img.min(), img.max()
    if not hi > lo:
        return np.zeros((out_h, out_w), dtype=np.uint8)
    pixels = np.rint((img - lo) * (255.0 / (hi - lo))).astype(np.uint8)
    if binarize:
        pixels = np.where(pixels >= 128, 255, 0).astype(np.uint8)
    return pixels


# --------------------------------------------------------------------------
# dataset generation


@dataclass(frozen=True)
class GenerationConfig:
    """Ranges from which per-record signal parameters are drawn uniformly."""

    sample_rate_hz: float = 1.0
    num_samples: int = 16384
    noise_power: float = 0.1
    signal_power: float = 1.0
    jsr_db_range: tuple = (20.0, 40.0)
    carrier_range: tuple = (0.05, 0.45)
    am_mod_range: tuple = (0.02, 0.06)
    am_depth_range: tuple = (0.5, 1.0)
    fm_mod_range: tuple = (1.25e-4, 5e-4)
    fm_deviation_range: tuple = (0.01, 0.04)
    chirp_low_range: tuple = (0.02, 0.15)
    chirp_high_range: tuple = (0.3, 0.48)
    chirp_period_range: tuple = (2048.0, 8192.0)
    dme_sigma_range: tuple = (6.0, 12.0)
    dme_duty_range: tuple = (0.1, 0.3)
    nb_bandwidth_range: tuple = (0.005, 0.02)
    log_scale: bool = True
    binarize: bool = False

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if name.endswith("_range"):
                lo, hi = value
                if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                    raise ConfigurationError(f"{name} must be a finite (low, high) pair, got {value}")
        if self.num_samples < 1:
            raise ConfigurationError("num_samples must be at least 1")


def draw_signal_config(gen: GenerationConfig, jammer_class, seed: int) -> SignalConfig:
    """Per-record SignalConfig drawn from ``gen`` ranges, fully determined by ``seed``."""
    jclass = JammerClass.parse(jammer_class)
    rng = rng_from(seed, 0x5EED)
    fs = gen.sample_rate_hz
    u = lambda r: float(rng.uniform(r[0] * 1.0, r[1] * 1.0))  # noqa: E731
    jsr = u(gen.jsr_db_range)
    lo_c, hi_c = gen.carrier_range[0] * fs, gen.carrier_range[1] * fs
    kw = {}
    if jclass == JammerClass.AM:
        fm = u(gen.am_mod_range) * fs
        kw = dict(am_mod_hz=fm, am_depth=u(gen.am_depth_range), carrier_hz=u((lo_c + fm, hi_c - fm)))
    elif jclass == JammerClass.FM:
        dev = u(gen.fm_deviation_range) * fs
        kw = dict(fm_mod_hz=u(gen.fm_mod_range) * fs, fm_deviation_hz=dev, carrier_hz=u((lo_c + dev, hi_c - dev)))
    elif jclass == JammerClass.Chirp:
        a, b = u(gen.chirp_low_range) * fs, u(gen.chirp_high_range) * fs
        if rng.integers(0, 2):
            a, b = b, a
        kw = dict(chirp_start_hz=a, chirp_stop_hz=b, chirp_period_s=u(gen.chirp_period_range) / fs)
    elif jclass == JammerClass.DME:
        kw = dict(carrier_hz=u((lo_c, hi_c)), dme_pulse_sigma_s=u(gen.dme_sigma_range) / fs, dme_duty_cycle=u(gen.dme_duty_range))
    elif jclass == JammerClass.NB:
        kw = dict(carrier_hz=u((lo_c, hi_c)), nb_bandwidth_hz=u(gen.nb_bandwidth_range) * fs)
    return SignalConfig(
        sample_rate_hz=fs,
        num_samples=gen.num_samples,
        jsr_db=jsr,
        noise_power=gen.noise_power,
        signal_power=gen.signal_power,
        class_params=replace(JammerParams(chip_rate_hz=fs / 2.0), **kw),
        rng_seed=seed,
    )


def make_record(gen: GenerationConfig, jammer_class, seed: int, stft: StftConfig, out_dims) -> Spectrogram:
    jclass = JammerClass.parse(jammer_class)
    cfg = draw_signal_config(gen, jclass, seed)
    grid = stft_magnitude(synthesize_signal(cfg, jclass), stft)
    pixels = render_spectrogram(grid, out_dims[0], out_dims[1], gen.log_scale, gen.binarize)
    return Spectrogram(pixels=pixels, label=jclass, jsr_db=cfg.jsr_db, seed=seed)


def generate_dataset(
    per_class: int,
    classes: Sequence = tuple(JammerClass),
    gen: GenerationConfig = GenerationConfig(),
    stft: StftConfig = StftConfig(),
    out_dims=(64, 64),
    master_seed: int = 0,
    n_jobs: Optional[int] = None,
) -> list:
    """Balanced list of ``per_class * len(classes)`` spectrogram records.

    Records are ordered class by class; record ``i`` is generated from seed
    ``derive_seed(master_seed, i)``, so any subset can be regenerated alone.
    """
    if per_class < 1:
        raise ConfigurationError("per_class must be at least 1")
    classes = [JammerClass.parse(c) for c in classes]
    if not classes or len(set(classes)) != len(classes):
        raise ConfigurationError("classes must be non-empty and distinct")
    gen.validate()
    stft.validate()
    if gen.num_samples < stft.window_len:
        raise ConfigurationError("num_samples must be at least the STFT window length")
    jobs = [
        (c, derive_seed(master_seed, ci * per_class + k))
        for ci, c in enumerate(classes)
        for k in range(per_class)
    ]
    if n_jobs in (None, 1):
        return [make_record(gen, c, s, stft, out_dims) for c, s in jobs]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=n_jobs)(delayed(make_record)(gen, c, s, stft, out_dims) for c, s in jobs)


def write_pgm(spec: Spectrogram, path) -> None:
    """Binary PGM (P5, maxval 255) export of one image."""
    header = f"P5\n{spec.width} {spec.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(spec.pixels, dtype=np.uint8).tobytes())


class SpectrogramTransformer(TransformerMixin, BaseEstimator):
    """Turn raw sample sequences ``(n_records, n_samples)`` into flattened images.

    Output is ``(n_records, out_h * out_w)`` uint8, row-major per image.
    """

    def __init__(self, window_len=128, hop=64, window="hann", out_h=64, out_w=64, log_scale=True, binarize=False):
        self.window_len = window_len
        self.hop = hop
        self.window = window
        self.out_h = out_h
        self.out_w = out_w
        self.log_scale = log_scale
        self.binarize = binarize

    def _stft(self):
        cfg = StftConfig(self.window_len, self.hop, self.window)
        cfg.validate()
        return cfg

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] < self.window_len:
            raise InputError(f"records have {X.shape[1]} samples, fewer than window_len={self.window_len}")
        self._stft()
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InputError(f"expected {self.n_features_in_} samples per record, got {X.shape[1]}")
        stft = self._stft()
        out = np.empty((X.shape[0], self.out_h * self.out_w), dtype=np.uint8)
        for i, row in enumerate(X):
            grid = stft_magnitude(row, stft)
            out[i] = render_spectrogram(grid, self.out_h, self.out_w, self.log_scale, self.binarize).ravel()
        return out
