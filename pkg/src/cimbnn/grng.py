"""Behavioral model of the in-word thermal-noise Gaussian RNG.

Two capacitors are precharged to V_DD and discharged by subthreshold
leakage through a pair of bias transistors.  Thermal (shot) noise makes each
crossing of V_DD/2 a Gaussian random time; the signed difference between the
two crossings is the random sample, encoded as a pulse width.

All times are seconds, currents amperes, capacitances farads.  Parameters may
be scalars or numpy arrays (e.g. one entry per memory word) and broadcast.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

Q_E = 1.602176634e-19
K_B = 1.380649e-23
ZERO_CELSIUS = 273.15

_U64 = 1 << 64


class InvalidArgument(ValueError):
    pass


class SingularityError(ArithmeticError):
    """Raised when a timing quantity would divide by a zero current or spread."""


def _finite(*values) -> None:
    for v in values:
        if not np.all(np.isfinite(v)):
            raise InvalidArgument(f"non-finite input: {v!r}")


def celsius(t: float) -> float:
    return t + ZERO_CELSIUS


@dataclass(frozen=True)
class LeakageModel:
    """Subthreshold leakage of one bias transistor.

    ``I = i_0 * exp((v_r - v_ref) / (n_factor * kT/q)) * exp(temp_coeff * (T - t_ref))``
    """

    i_0: float
    v_ref: float
    n_factor: float = 1.5
    t_ref: float = celsius(28.0)
    temp_coeff: float = 0.0

    def __post_init__(self):
        _finite(self.i_0, self.v_ref, self.n_factor, self.t_ref, self.temp_coeff)
        if self.i_0 <= 0:
            raise InvalidArgument("i_0 must be positive")
        if self.n_factor < 1:
            raise InvalidArgument("n_factor must be >= 1")
        if self.t_ref <= 0:
            raise InvalidArgument("t_ref must be positive")

    def current(self, v_r, temp):
        return leakage_current(self, v_r, temp)


@dataclass(frozen=True)
class GrngPhysics:
    c_p: float = 1e-15
    c_n: float = 1e-15
    v_dd: float = 1.2
    # Kept for completeness; the timing equations assume crossing at V_DD/2.
    v_thr: float = 0.6
    leak_model: LeakageModel = field(default_factory=lambda: nominal_leakage())
    q_e: float = Q_E

    def __post_init__(self):
        _finite(self.c_p, self.c_n, self.v_dd, self.v_thr)
        if self.c_p <= 0 or self.c_n <= 0 or self.v_dd <= 0:
            raise InvalidArgument("capacitances and v_dd must be positive")
        if not 0 < self.v_thr < self.v_dd:
            raise InvalidArgument("v_thr must lie in (0, v_dd)")


@dataclass(frozen=True)
class GrngInstance:
    """Mismatch multipliers of one GRNG (or an array of them).

    Branch p discharges C_p through N1, branch n discharges C_n through N2.
    A scale of 1.0 is the nominal device.
    """

    i_n1_scale: float | np.ndarray = 1.0
    i_n2_scale: float | np.ndarray = 1.0
    c_p_scale: float | np.ndarray = 1.0
    c_n_scale: float | np.ndarray = 1.0

    def __post_init__(self):
        for name in ("i_n1_scale", "i_n2_scale", "c_p_scale", "c_n_scale"):
            v = getattr(self, name)
            _finite(v)
            if np.any(np.asarray(v) <= 0):
                raise InvalidArgument(f"{name} must be positive")

    @property
    def shape(self) -> tuple[int, ...]:
        return np.broadcast_shapes(*(np.shape(getattr(self, n)) for n in
                                     ("i_n1_scale", "i_n2_scale", "c_p_scale", "c_n_scale")))

    def swapped(self) -> "GrngInstance":
        return replace(self, i_n1_scale=self.i_n2_scale, i_n2_scale=self.i_n1_scale)

    def __getitem__(self, index) -> "GrngInstance":
        shape = self.shape
        return GrngInstance(*(np.broadcast_to(getattr(self, n), shape)[index] for n in
                              ("i_n1_scale", "i_n2_scale", "c_p_scale", "c_n_scale")))

    def at(self, *index) -> "GrngInstance":
        """Scalar instance at ``index`` of an array of instances."""
        shape = self.shape
        pick = lambda v: float(np.broadcast_to(v, shape)[index])
        return GrngInstance(pick(self.i_n1_scale), pick(self.i_n2_scale),
                            pick(self.c_p_scale), pick(self.c_n_scale))

    @classmethod
    def mismatched(cls, shape, current_sd: float, stream: "RngStream",
                   cap_sd: float = 0.0) -> "GrngInstance":
        """Draw log-normal mismatch with the given relative standard deviations."""
        g = stream.generator
        def draw(sd):
            if sd == 0:
                return np.ones(shape)
            s2 = math.log1p(sd * sd)
            return np.exp(g.normal(-s2 / 2, math.sqrt(s2), size=shape))
        return cls(draw(current_sd), draw(current_sd), draw(cap_sd), draw(cap_sd))


class PulseSample(NamedTuple):
    signed_width: float | np.ndarray
    latency: float | np.ndarray
    censored: bool | np.ndarray


class DischargeParams(NamedTuple):
    mu_p: float | np.ndarray
    sigma_p: float | np.ndarray
    mu_n: float | np.ndarray
    sigma_n: float | np.ndarray


class RngStream:
    """Reproducible random stream addressed by ``(seed, stream_id)``.

    Identical pairs give bit-identical sequences; distinct stream ids are
    independent (numpy SeedSequence spawn keys).
    """

    def __init__(self, seed: int, stream_id: int = 0):
        for v in (seed, stream_id):
            if not 0 <= int(v) < _U64:
                raise InvalidArgument("seed and stream_id must be 64-bit unsigned integers")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, stream_id: int) -> "RngStream":
        """A fresh stream sharing this seed; ``stream_id`` is offset from ours."""
        return RngStream(self.seed, (self.stream_id * 1_000_003 + 1 + int(stream_id)) % _U64)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def thermal_voltage(temp):
    return K_B * temp / Q_E


def leakage_current(model: LeakageModel, v_r, temp):
    _finite(v_r, temp)
    if np.any(np.asarray(v_r) < 0):
        raise InvalidArgument("v_r must be >= 0")
    if np.any(np.asarray(temp) <= 0):
        raise InvalidArgument("temperature must be positive (kelvin)")
    if np.ndim(v_r) == 0 and np.ndim(temp) == 0 and v_r == model.v_ref and temp == model.t_ref:
        return model.i_0
    bias = (np.asarray(v_r, float) - model.v_ref) / (model.n_factor * thermal_voltage(temp))
    out = model.i_0 * np.exp(bias + model.temp_coeff * (np.asarray(temp, float) - model.t_ref))
    return float(out) if np.ndim(out) == 0 else out


def _branch_terms(physics: GrngPhysics, instance: GrngInstance, v_r, temp):
    i_l = leakage_current(physics.leak_model, v_r, temp)
    i_p = np.multiply(instance.i_n1_scale, i_l)
    i_n = np.multiply(instance.i_n2_scale, i_l)
    if np.any(i_p <= 0) or np.any(i_n <= 0):
        raise SingularityError("effective leakage current must be positive")
    c_p = np.multiply(physics.c_p, instance.c_p_scale)
    c_n = np.multiply(physics.c_n, instance.c_n_scale)
    return c_p, c_n, i_p, i_n


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def discharge_params(physics: GrngPhysics, instance: GrngInstance, v_r, temp) -> DischargeParams:
    """Mean and SD of each branch's V_DD/2 crossing time."""
    c_p, c_n, i_p, i_n = _branch_terms(physics, instance, v_r, temp)
    mu_p = c_p * physics.v_dd / (2 * i_p)
    mu_n = c_n * physics.v_dd / (2 * i_n)
    sigma_p = np.sqrt(mu_p * physics.q_e / (2 * i_p))
    sigma_n = np.sqrt(mu_n * physics.q_e / (2 * i_n))
    return DischargeParams(_scalar(mu_p), _scalar(sigma_p), _scalar(mu_n), _scalar(sigma_n))


def static_offset(physics: GrngPhysics, instance: GrngInstance, v_r, temp):
    """Mismatch-induced offset ``mu_p - mu_n`` in closed form."""
    c_p, c_n, i_p, i_n = _branch_terms(physics, instance, v_r, temp)
    return _scalar(physics.v_dd * (c_p * i_n - c_n * i_p) / (2 * i_p * i_n))


def nominal_t_unit(physics: GrngPhysics, v_r, temp) -> float:
    """Differential SD of a mismatch-free GRNG; maps pulse width to unit variance."""
    d = discharge_params(physics, GrngInstance(), v_r, temp)
    return math.hypot(d.sigma_p, d.sigma_n)


def sample_pulse(physics: GrngPhysics, instance: GrngInstance, v_r, temp, stream: RngStream,
                 size=None, ledger=None) -> PulseSample:
    """Draw crossing times of both branches and form the signed pulse.

    ``signed_width = T_n - T_p``: positive when branch p crosses first (signal P).
    ``size`` prepends sample dimensions to the instance shape.
    """
    d = discharge_params(physics, instance, v_r, temp)
    shape = np.broadcast_shapes(np.shape(d.mu_p), np.shape(d.mu_n))
    if size is not None:
        shape = tuple(np.atleast_1d(size)) + shape
    z = stream.generator.standard_normal((2,) + shape)
    t_p = d.mu_p + d.sigma_p * z[0]
    t_n = d.mu_n + d.sigma_n * z[1]
    width = t_n - t_p
    latency = np.maximum(t_p, t_n)
    if ledger is not None:
        ledger.record(grng_samples=int(np.prod(shape)))
    if width.ndim == 0:
        return PulseSample(float(width), float(latency), False)
    return PulseSample(width, latency, np.zeros(width.shape, bool))


def sample_epsilon(physics: GrngPhysics, instance: GrngInstance, v_r, temp, stream: RngStream,
                   t_unit: float | None = None, offset=0.0, size=None, ledger=None):
    """Unit-variance sample from one pulse.

    ``t_unit`` defaults to the nominal differential SD at this operating point,
    so a mismatched instance shows its offset as a non-zero mean.  ``offset``
    (seconds) is subtracted first when a time-domain correction is applied.
    """
    if t_unit is None:
        t_unit = nominal_t_unit(physics, v_r, temp)
    if not t_unit > 0:
        raise SingularityError("t_unit must be positive")
    pulse = sample_pulse(physics, instance, v_r, temp, stream, size=size, ledger=ledger)
    value = (pulse.signed_width - offset) / t_unit
    return _scalar(value), pulse


def censor(sample: PulseSample, floor: float) -> PulseSample:
    """Flag pulses shorter than the off-chip measurement floor."""
    if floor < 0:
        raise InvalidArgument("floor must be >= 0")
    flag = np.abs(sample.signed_width) < floor
    if np.ndim(flag) == 0:
        flag = bool(flag)
    return sample._replace(censored=flag)


def sample_pulse_reference(physics: GrngPhysics, instance: GrngInstance, v_r, temp,
                           stream: RngStream, n: int, chunk: int = 256) -> np.ndarray:
    """Slow oracle: integrate discrete leakage events until each capacitor
    has lost half its charge, for a scalar instance.

    Each event removes a packet of ``q_e/2``; with that packet the crossing
    time is a sum of exponential waits whose mean and variance reproduce the
    analytic ``discharge_params``.  Returns ``n`` signed widths ``T_n - T_p``.
    """
    c_p, c_n, i_p, i_n = (float(v) for v in _branch_terms(physics, instance, v_r, temp))
    packet = physics.q_e / 2
    g = stream.generator

    def crossing(c, i):
        events = int(round(c * physics.v_dd / 2 / packet))
        out = np.empty(n)
        for start in range(0, n, chunk):
            m = min(chunk, n - start)
            t = np.zeros(m)
            left = events
            while left:
                step = min(left, 2048)
                t += g.exponential(packet / i, size=(m, step)).sum(axis=1)
                left -= step
            out[start:start + m] = t
        return out

    return crossing(c_n, i_n) - crossing(c_p, i_p)


def _fit_current_from_latency(latency, c, v_dd):
    return c * v_dd / (2 * latency)


def fit_temperature_model(latency_points, c: float = 1e-15, v_dd: float = 1.2,
                          v_ref: float = 0.18, n_factor: float = 1.5) -> LeakageModel:
    """Fit ``i_0`` and the temperature coefficient to measured mean latencies.

    Latencies are converted to currents with the mean-latency relation and a
    line is fitted to log-current vs temperature; the reference temperature is
    the first point.  Two points are matched exactly.  ``v_ref`` is the bias at
    which the latencies were measured.
    """
    pts = [(float(t), float(lat)) for t, lat in latency_points]
    if len(pts) < 2:
        raise InvalidArgument("need at least two points")
    temps = np.array([p[0] for p in pts])
    lats = np.array([p[1] for p in pts])
    _finite(temps, lats)
    if len(np.unique(temps)) != len(temps):
        raise InvalidArgument("duplicate temperatures")
    if np.any(lats <= 0) or np.any(temps <= 0):
        raise InvalidArgument("latencies and temperatures must be positive")
    log_i = np.log(_fit_current_from_latency(lats, c, v_dd))
    t_ref = temps[0]
    # the bias term also depends on T through kT/q, but vanishes at v_r = v_ref
    slope, intercept = np.polyfit(temps - t_ref, log_i, 1)
    if len(pts) == 2:
        slope = (log_i[1] - log_i[0]) / (temps[1] - temps[0])
        intercept = log_i[0]
    return LeakageModel(i_0=float(math.exp(intercept)), v_ref=v_ref, n_factor=n_factor,
                        t_ref=float(t_ref), temp_coeff=float(slope))


# Measured mean latency vs temperature (degC, seconds).
TABLE_I_LATENCY = ((28.0, 1.931e-6), (40.0, 1.297e-6), (50.0, 1.051e-6), (60.0, 0.7749e-6))
TABLE_I_SD = ((28.0, 197.1e-9), (40.0, 201.9e-9), (50.0, 242.2e-9), (60.0, 515.5e-9))

NOMINAL_V_R = 0.18
NOMINAL_TEMP = celsius(28.0)
NOMINAL_LATENCY = 69e-9
NOMINAL_I_L = 8.7e-9


def table_i_temp_coeff() -> float:
    (t0, l0), (t1, l1) = TABLE_I_LATENCY[0], TABLE_I_LATENCY[-1]
    return math.log(l0 / l1) / (t1 - t0)


def nominal_leakage() -> LeakageModel:
    """8.7 nA at 180 mV and 28 degC, with the Table I temperature coefficient."""
    return LeakageModel(i_0=NOMINAL_I_L, v_ref=NOMINAL_V_R, n_factor=1.5,
                        t_ref=NOMINAL_TEMP, temp_coeff=table_i_temp_coeff())


@dataclass(frozen=True)
class GrngConfig:
    """Operating point plus device description, as read from a config file."""

    physics: GrngPhysics
    instance: GrngInstance
    v_r: float = NOMINAL_V_R
    temp: float = NOMINAL_TEMP
    censor_floor: float = 0.0

    def to_dict(self) -> dict:
        lm = self.physics.leak_model
        inst = self.instance
        return {
            "physics": {"c_p": self.physics.c_p, "c_n": self.physics.c_n,
                        "v_dd": self.physics.v_dd, "v_thr": self.physics.v_thr},
            "leakage": {"i_0": lm.i_0, "v_ref": lm.v_ref, "n_factor": lm.n_factor,
                        "t_ref": lm.t_ref, "temp_coeff": lm.temp_coeff},
            "instance": {k: float(np.asarray(getattr(inst, k)).ravel()[0]) for k in
                         ("i_n1_scale", "i_n2_scale", "c_p_scale", "c_n_scale")},
            "v_r": self.v_r, "temp": self.temp, "censor_floor": self.censor_floor,
        }


GRNG_CONFIG_KEYS = {
    "physics": {"c_p", "c_n", "v_dd", "v_thr"},
    "leakage": {"i_0", "v_ref", "n_factor", "t_ref", "temp_coeff"},
    "instance": {"i_n1_scale", "i_n2_scale", "c_p_scale", "c_n_scale"},
    "mismatch": {"current_sd", "cap_sd", "seed"},
}


def grng_config_from_dict(d: dict) -> GrngConfig:
    """Build a config from a mapping; every section is optional.

    Sections: ``physics``, ``leakage``, ``instance`` (explicit scales) or
    ``mismatch`` (random draw: ``current_sd``, ``cap_sd``, ``seed``), plus
    top-level ``v_r`` (V), ``temp`` (K) or ``temp_c`` (degC), ``censor_floor`` (s).
    """
    for section, allowed in GRNG_CONFIG_KEYS.items():
        extra = set(d.get(section, {})) - allowed
        if extra:
            raise InvalidArgument(f"unknown keys in [{section}]: {sorted(extra)}")
    if "instance" in d and "mismatch" in d:
        raise InvalidArgument("give either [instance] or [mismatch], not both")
    leak = replace(nominal_leakage(), **d.get("leakage", {}))
    physics = GrngPhysics(leak_model=leak, **d.get("physics", {}))
    if "mismatch" in d:
        m = d["mismatch"]
        instance = GrngInstance.mismatched((), m.get("current_sd", 0.0),
                                           RngStream(int(m.get("seed", 0))), m.get("cap_sd", 0.0))
        instance = instance.at()
    else:
        instance = GrngInstance(**d.get("instance", {}))
    temp = d.get("temp", celsius(d["temp_c"]) if "temp_c" in d else NOMINAL_TEMP)
    return GrngConfig(physics, instance, float(d.get("v_r", NOMINAL_V_R)), float(temp),
                      float(d.get("censor_floor", 0.0)))


def load_grng_config(path) -> GrngConfig:
    return grng_config_from_dict(json.loads(Path(path).read_text()))
