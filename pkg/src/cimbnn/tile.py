"""Bit-accurate behavioral model of one CIM tile.

A tile holds ``rows x words_per_row`` words.  Each word has a sign-magnitude
mu field stored differentially (two cells per bit) and an unsigned sigma field
whose cells are gated by the word's own GRNG pulse.  Every bit column feeds a
dedicated differential SAR ADC; reduction logic removes per-ADC offsets and
shift-adds the bit columns back into words.

Charges are in units of one cell current times one input LSB for the whole
compute window, so the mu path is exact integer arithmetic before the ADC.
Inputs may carry leading batch dimensions: ``x`` of shape ``(..., rows)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .grng import (NOMINAL_TEMP, NOMINAL_V_R, GrngInstance, GrngPhysics, RngStream,
                   nominal_t_unit, sample_epsilon)


class TileError(ValueError):
    pass


@dataclass(frozen=True)
class TileConfig:
    rows: int = 64
    words_per_row: int = 8
    mu_bits: int = 8
    sigma_bits: int = 4
    input_bits: int = 4
    adc_bits: int = 6
    # None: rows * (2**input_bits - 1), the worst-case single-bit-column charge
    adc_full_scale: float | None = None
    # seconds; None: nominal differential GRNG SD at the tile's operating point
    t_unit: float | None = None
    # seconds; None: 6 * t_unit
    compute_window: float | None = None

    def __post_init__(self):
        for name in ("rows", "words_per_row", "mu_bits", "sigma_bits", "input_bits", "adc_bits"):
            if getattr(self, name) < 1:
                raise TileError(f"{name} must be >= 1")
        if self.mu_bits < 2:
            raise TileError("mu_bits must leave room for a sign")
        if self.adc_full_scale is not None and self.adc_full_scale <= 0:
            raise TileError("adc_full_scale must be positive")

    @property
    def mu_columns(self) -> int:
        return self.mu_bits - 1

    @property
    def mu_max(self) -> int:
        return (1 << (self.mu_bits - 1)) - 1

    @property
    def sigma_max(self) -> int:
        return (1 << self.sigma_bits) - 1

    @property
    def input_max(self) -> int:
        return (1 << self.input_bits) - 1

    @property
    def full_scale(self) -> float:
        if self.adc_full_scale is not None:
            return float(self.adc_full_scale)
        return float(self.rows * self.input_max)

    @property
    def lsb(self) -> float:
        """Charge represented by one ADC code step."""
        return self.full_scale / ((1 << (self.adc_bits - 1)) - 1)

    @classmethod
    def ideal(cls, **kw) -> "TileConfig":
        """Lossless readout: ADC wide enough that one code equals one charge unit."""
        base = cls(**kw)
        window = 6.0
        if base.t_unit and base.compute_window:
            window = base.compute_window / base.t_unit
        worst = base.rows * base.input_max * max(1.0, window)
        bits = int(math.ceil(math.log2(worst + 1))) + 2
        return replace(base, adc_bits=bits, adc_full_scale=float((1 << (bits - 1)) - 1))


@dataclass(frozen=True)
class SarAdc:
    offset_code: int = 0
    bits: int = 6

    def quantize(self, q_diff, full_scale):
        return adc_quantize(self, q_diff, full_scale)


def idac_convert(x, input_bits: int = 4) -> np.ndarray:
    """Ideal linear IDAC: row drive equals the digital input."""
    a = np.asarray(x)
    if not np.issubdtype(a.dtype, np.integer):
        if not np.all(np.equal(np.mod(a, 1), 0)):
            raise TileError("inputs must be integers")
        a = a.astype(np.int64)
    if np.any(a < 0) or np.any(a > (1 << input_bits) - 1):
        raise TileError(f"inputs must lie in [0, {(1 << input_bits) - 1}]")
    return a.astype(np.int64)


def encode_mu(value: int, mu_bits: int = 8) -> list:
    """Per-bit differential cell pairs, LSB first: +bit (0,1), -bit (1,0), 0 (0,0)."""
    mag = abs(int(value))
    if mag > (1 << (mu_bits - 1)) - 1:
        raise TileError(f"mu {value} does not fit {mu_bits}-bit sign-magnitude")
    pairs = []
    for k in range(mu_bits - 1):
        bit = (mag >> k) & 1
        pairs.append((0, 0) if not bit else ((0, 1) if value > 0 else (1, 0)))
    return pairs


def decode_mu(pairs) -> int:
    total = 0
    for k, (neg, pos) in enumerate(pairs):
        if neg and pos:
            raise TileError("both cells of a differential pair set")
        total += (pos - neg) << k
    return total


def mu_bit_planes(mu, mu_bits: int) -> np.ndarray:
    """Signed bit planes of shape ``mu.shape + (mu_bits - 1,)`` with entries in {-1, 0, 1}."""
    mu = np.asarray(mu, np.int64)
    mag = np.abs(mu)
    k = np.arange(mu_bits - 1)
    return ((mag[..., None] >> k) & 1) * np.sign(mu)[..., None]


def sigma_bit_planes(sigma, sigma_bits: int) -> np.ndarray:
    sigma = np.asarray(sigma, np.int64)
    return (sigma[..., None] >> np.arange(sigma_bits)) & 1


def adc_quantize(adc: SarAdc, q_diff, full_scale: float):
    """Round, add static offset and clamp to the signed code range."""
    if full_scale <= 0:
        raise TileError("full_scale must be positive")
    top = (1 << (adc.bits - 1)) - 1
    code = np.floor(np.asarray(q_diff, float) * top / full_scale + 0.5).astype(np.int64)
    code = np.clip(code + np.asarray(adc.offset_code, np.int64), -top - 1, top)
    return int(code) if code.ndim == 0 else code


def reduce(codes, offsets=0) -> np.ndarray:
    """Shift-add bit-column codes (last axis, LSB first) after offset removal."""
    c = np.asarray(codes, np.int64) - np.asarray(offsets, np.int64)
    weights = np.int64(1) << np.arange(c.shape[-1], dtype=np.int64)
    return (c * weights).sum(axis=-1)


def ideal_mvm(mu, sigma, x, eps=0.0) -> np.ndarray:
    """Unquantized reference: ``sum_i x_i mu_ij + sum_i x_i sigma_ij eps_ij``."""
    mu = np.asarray(mu, float)
    sigma = np.asarray(sigma, float)
    x = np.asarray(x, float)
    if mu.shape != sigma.shape or x.shape[-1] != mu.shape[0]:
        raise TileError(f"dimension mismatch: x {x.shape}, mu {mu.shape}, sigma {sigma.shape}")
    eps = np.broadcast_to(np.asarray(eps, float), x.shape[:-1] + mu.shape)
    return x @ mu + np.einsum("...i,...ij->...j", x, sigma * eps)


@dataclass
class Tile:
    """One tile: weights, in-word GRNGs, ADC offsets and operating point."""

    config: TileConfig
    mu: np.ndarray
    sigma: np.ndarray
    grng: GrngInstance = field(default_factory=GrngInstance)
    physics: GrngPhysics = field(default_factory=GrngPhysics)
    v_r: float = NOMINAL_V_R
    temp: float = NOMINAL_TEMP
    mu_adc_offsets: np.ndarray | None = None
    sigma_adc_offsets: np.ndarray | None = None
    calibration: object = None
    ledger: object = None

    def __post_init__(self):
        cfg = self.config
        shape = (cfg.rows, cfg.words_per_row)
        for name in ("mu", "sigma"):
            value = np.array(getattr(self, name), np.int64)
            if value.size != cfg.rows * cfg.words_per_row:
                raise TileError(f"{name} has {value.size} entries, expected {shape}")
            setattr(self, name, value.reshape(shape))
        if np.any(np.abs(self.mu) > cfg.mu_max):
            raise TileError(f"mu outside {cfg.mu_bits}-bit sign-magnitude range")
        if np.any(self.sigma < 0) or np.any(self.sigma > cfg.sigma_max):
            raise TileError(f"sigma outside [0, {cfg.sigma_max}]")
        if self.grng.shape not in ((), shape):
            raise TileError(f"GRNG array shape {self.grng.shape} does not match {shape}")
        if self.grng.shape == ():
            g = self.grng
            self.grng = GrngInstance(*(np.full(shape, float(getattr(g, n))) for n in
                                       ("i_n1_scale", "i_n2_scale", "c_p_scale", "c_n_scale")))
        if self.mu_adc_offsets is None:
            self.mu_adc_offsets = np.zeros((cfg.words_per_row, cfg.mu_columns), np.int64)
        if self.sigma_adc_offsets is None:
            self.sigma_adc_offsets = np.zeros((cfg.words_per_row, cfg.sigma_bits), np.int64)
        self.mu_adc_offsets = np.asarray(self.mu_adc_offsets, np.int64)
        self.sigma_adc_offsets = np.asarray(self.sigma_adc_offsets, np.int64)
        if self.mu_adc_offsets.shape != (cfg.words_per_row, cfg.mu_columns) or \
                self.sigma_adc_offsets.shape != (cfg.words_per_row, cfg.sigma_bits):
            raise TileError("ADC offset arrays do not match the column layout")
        self.t_unit = cfg.t_unit or nominal_t_unit(self.physics, self.v_r, self.temp)
        self.compute_window = cfg.compute_window or 6.0 * self.t_unit

    @classmethod
    def random(cls, config: TileConfig, stream: RngStream, mismatch_sd: float = 0.0,
               mu_range: int | None = None, sigma_range: int | None = None, **kw) -> "Tile":
        """Tile with uniformly random weights and optional GRNG current mismatch."""
        g = stream.generator
        shape = (config.rows, config.words_per_row)
        mr = config.mu_max if mu_range is None else mu_range
        sr = config.sigma_max if sigma_range is None else sigma_range
        mu = g.integers(-mr, mr + 1, size=shape)
        sigma = g.integers(0, sr + 1, size=shape)
        inst = GrngInstance.mismatched(shape, mismatch_sd, stream.child(1)) if mismatch_sd else GrngInstance()
        return cls(config, mu, sigma, grng=inst, **kw)

    @property
    def eps_limit(self) -> float:
        return self.compute_window / self.t_unit

    @property
    def lsb(self) -> float:
        return self.config.lsb

    def grng_at(self, row: int, word: int) -> GrngInstance:
        return self.grng.at(row, word)

    @property
    def adcs(self) -> dict:
        """Per-column SAR ADCs keyed by (subarray, word, bit)."""
        bits = self.config.adc_bits
        out = {}
        for j in range(self.config.words_per_row):
            for k in range(self.config.mu_columns):
                out["mu", j, k] = SarAdc(int(self.mu_adc_offsets[j, k]), bits)
            for k in range(self.config.sigma_bits):
                out["sigma", j, k] = SarAdc(int(self.sigma_adc_offsets[j, k]), bits)
        return out

    def fingerprint(self) -> str:
        """Hash of everything a stored offset map depends on (not weights or ADC range)."""
        h = hashlib.sha256()
        h.update(json.dumps([self.config.rows, self.config.words_per_row, self.t_unit,
                             self.compute_window]).encode())
        h.update(json.dumps([self.physics.c_p, self.physics.c_n, self.physics.v_dd,
                             asdict(self.physics.leak_model), self.v_r, self.temp]).encode())
        for name in ("i_n1_scale", "i_n2_scale", "c_p_scale", "c_n_scale"):
            h.update(np.ascontiguousarray(getattr(self.grng, name), np.float64).tobytes())
        return h.hexdigest()[:16]

    def draw_eps(self, stream: RngStream, batch_shape=()) -> np.ndarray:
        """Raw per-word GRNG samples in epsilon units, shape ``batch + (rows, words)``."""
        size = tuple(batch_shape) or None
        value, _ = sample_epsilon(self.physics, self.grng, self.v_r, self.temp, stream,
                                       t_unit=self.t_unit, size=size)
        return np.asarray(value)


def _check_x(tile: Tile, x) -> np.ndarray:
    x = idac_convert(x, tile.config.input_bits)
    if x.ndim == 0 or x.shape[-1] != tile.config.rows:
        raise TileError(f"input length {x.shape[-1:]} does not match {tile.config.rows} rows")
    return x


def analog_mvm_mu(tile: Tile, x) -> np.ndarray:
    """Differential bit-column charges of the mu subarray, shape ``(..., words, mu_bits-1)``."""
    x = _check_x(tile, x)
    planes = mu_bit_planes(tile.mu, tile.config.mu_bits)
    return np.einsum("...i,ijk->...jk", x, planes)


def analog_mvm_sigma(tile: Tile, x, stream: RngStream | None = None, eps=None):
    """Bit-column charges of the sigma-epsilon subarray and the epsilon matrix used.

    Each word's cells conduct for the pulse duration, clipped to the compute
    window, onto BL_P or BL_N according to the pulse polarity.  Pass ``eps``
    to force GRNG outputs (broadcast to ``(..., rows, words)``).
    """
    x = _check_x(tile, x)
    shape = x.shape[:-1] + tile.mu.shape
    if eps is None:
        if stream is None:
            raise TileError("stochastic sigma path needs an RngStream")
        eps = tile.draw_eps(stream, x.shape[:-1])
    eps = np.broadcast_to(np.asarray(eps, float), shape)
    lim = tile.eps_limit
    gated = np.clip(eps, -lim, lim)
    planes = sigma_bit_planes(tile.sigma, tile.config.sigma_bits)
    q = np.einsum("...i,...ij,ijk->...jk", x.astype(float), gated, planes)
    return q, eps


MODES = ("stochastic", "mean_only", "forced_eps")


def tile_mvm(tile: Tile, x, stream: RngStream | None = None, mode: str = "stochastic",
             forced_eps=None, return_eps: bool = False):
    """One compute cycle: both subarrays, per-column ADCs, offset-corrected reduction.

    Returns integer word outputs in ADC LSB units (``tile.lsb`` charge each).
    """
    if mode not in MODES:
        raise TileError(f"mode must be one of {MODES}")
    cfg = tile.config
    bits = cfg.adc_bits
    q_mu = analog_mvm_mu(tile, x)
    codes_mu = adc_quantize(SarAdc(tile.mu_adc_offsets, bits), q_mu, cfg.full_scale)
    y = reduce(codes_mu, tile.mu_adc_offsets)
    eps = None
    if mode != "mean_only":
        if mode == "forced_eps":
            if forced_eps is None:
                raise TileError("forced_eps mode needs forced_eps")
            q_sig, eps = analog_mvm_sigma(tile, x, eps=forced_eps)
        else:
            q_sig, eps = analog_mvm_sigma(tile, x, stream)
        codes_sig = adc_quantize(SarAdc(tile.sigma_adc_offsets, bits), q_sig, cfg.full_scale)
        y = y + reduce(codes_sig, tile.sigma_adc_offsets)
    if tile.ledger is not None:
        n = int(np.prod(np.shape(x)[:-1], dtype=np.int64))
        tile.ledger.record(cycles=n, mvm_ops=n * mvm_ops_per_cycle(cfg),
                           grng_samples=n * cfg.rows * cfg.words_per_row if mode == "stochastic" else 0)
    return (y, eps) if return_eps else y


def mvm_ops_per_cycle(cfg: TileConfig) -> int:
    """Multiply and add per weight, for both subarrays."""
    return 2 * 2 * cfg.rows * cfg.words_per_row
