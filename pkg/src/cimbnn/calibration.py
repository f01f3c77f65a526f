"""Static-offset calibration of the in-word GRNGs.

Mismatch gives each GRNG a constant mean offset.  The tile measures it once by
storing sigma = 1 in every word and driving one row at a time with x = 1, then
folds ``sigma * offset`` into the stored mu so that the effective weight has a
zero-mean random part.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grng import RngStream, sample_epsilon
from .tile import Tile

OFFSET_MAP_VERSION = 1


class CalibrationError(ValueError):
    pass


class StaleCalibration(CalibrationError):
    """Offset map was measured on a tile with different GRNGs or configuration."""


class ClampWarning(UserWarning):
    """Corrected mu hit the end of its range; the offset is only partly removed."""


@dataclass
class OffsetMap:
    offsets: np.ndarray  # (rows, words), epsilon units
    n_cal: int
    fingerprint: str

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, float)
        if self.offsets.ndim != 2:
            raise CalibrationError("offsets must be a rows x words matrix")
        if self.n_cal < 1:
            raise CalibrationError("n_cal must be >= 1")

    def __getitem__(self, index):
        return self.offsets[index]

    def to_dict(self) -> dict:
        return {"format": "cimbnn-offset-map", "version": OFFSET_MAP_VERSION,
                "n_cal": self.n_cal, "fingerprint": self.fingerprint,
                "offsets": self.offsets.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "OffsetMap":
        if d.get("format") != "cimbnn-offset-map":
            raise CalibrationError("not an offset map")
        if d.get("version") != OFFSET_MAP_VERSION:
            raise CalibrationError(f"unsupported offset map version {d.get('version')}")
        return cls(np.array(d["offsets"], float), int(d["n_cal"]), d["fingerprint"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "OffsetMap":
        return cls.from_dict(json.loads(Path(path).read_text()))


def measure_offsets(tile: Tile, n_cal: int, stream: RngStream) -> OffsetMap:
    """Estimate every word's GRNG offset in epsilon units.

    With sigma = 1 and a unit input on row i only, the bit-0 column of word j
    carries exactly that word's gated pulse, so row i's readouts are its GRNG
    samples clipped to the compute window.  Rows are measured in order, n_cal
    cycles each; sigma is restored afterwards.
    """
    if n_cal < 1:
        raise CalibrationError("n_cal must be >= 1")
    cfg = tile.config
    saved = tile.sigma.copy()
    lim = tile.eps_limit
    est = np.empty((cfg.rows, cfg.words_per_row))
    try:
        tile.sigma[...] = 1
        for i in range(cfg.rows):
            eps, _ = sample_epsilon(tile.physics, tile.grng[i], tile.v_r, tile.temp, stream,
                                    t_unit=tile.t_unit, size=n_cal)
            readout = np.clip(eps, -lim, lim) * tile.sigma[i]
            est[i] = readout.mean(axis=0)
    finally:
        tile.sigma[...] = saved
    if tile.ledger is not None:
        tile.ledger.record(calibrations=1, cycles=cfg.rows * n_cal)
    return OffsetMap(est, int(n_cal), tile.fingerprint())


def _round_half_away(v):
    v = np.asarray(v, float)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def apply_correction(mu, sigma, offset, mu_bits: int = 8):
    """``mu - round(sigma * offset)`` on the integer grid, clamped to the mu range.

    Returns ``(corrected_mu, clamped)``; a ``ClampWarning`` is also issued when
    any entry clamps.
    """
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma)) and np.all(np.isfinite(offset))):
        raise CalibrationError("inputs must be finite")
    top = (1 << (mu_bits - 1)) - 1
    raw = np.asarray(mu, np.int64) - _round_half_away(np.multiply(sigma, offset)).astype(np.int64)
    out = np.clip(raw, -top, top)
    clamped = out != raw
    if np.any(clamped):
        warnings.warn(f"{int(np.sum(clamped))} corrected mu value(s) clamped to +/-{top}",
                      ClampWarning, stacklevel=2)
    if out.ndim == 0:
        return int(out), bool(clamped)
    return out, clamped


def _check_fresh(tile: Tile, offsets: OffsetMap) -> None:
    if offsets.fingerprint != tile.fingerprint():
        raise StaleCalibration(f"offset map {offsets.fingerprint} does not belong to tile "
                               f"{tile.fingerprint()}")
    if offsets.offsets.shape != tile.mu.shape:
        raise StaleCalibration("offset map dimensions do not match the tile")


def load_weights(tile: Tile, mu, sigma, offsets: OffsetMap) -> np.ndarray:
    """Write a full weight matrix with the offsets folded in; returns the clamp mask."""
    _check_fresh(tile, offsets)
    sigma = np.asarray(sigma, np.int64).reshape(tile.mu.shape)
    corrected, clamped = apply_correction(np.asarray(mu).reshape(tile.mu.shape), sigma,
                                          offsets.offsets, tile.config.mu_bits)
    tile.mu = np.asarray(corrected, np.int64)
    tile.sigma = sigma.copy()
    tile.calibration = offsets
    return clamped


def update_weight(tile: Tile, row: int, word: int, new_mu: int, new_sigma: int,
                  offsets: OffsetMap) -> bool:
    """Store one word with its offset folded in; no re-measurement.  Returns the clamp flag."""
    _check_fresh(tile, offsets)
    if not 0 <= new_sigma <= tile.config.sigma_max:
        raise CalibrationError(f"sigma {new_sigma} out of range")
    mu_c, clamped = apply_correction(new_mu, new_sigma, offsets[row, word], tile.config.mu_bits)
    tile.mu[row, word] = mu_c
    tile.sigma[row, word] = new_sigma
    tile.calibration = offsets
    return clamped
