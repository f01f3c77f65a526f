"""Energy, latency and throughput bookkeeping.

The constants are reporting configuration taken from the measured chip, not
derived from circuit physics.  Simulator operations push counts into a
``Ledger``; ``tally`` turns counts into joules and throughputs.
"""

from __future__ import annotations

import csv
import io
import json
import threading
from dataclasses import asdict, dataclass, field, fields


class ConfigurationError(ValueError):
    pass


def _default_breakdown() -> dict:
    # Only the SRAM row is a measured figure; the remaining split is a placeholder.
    return {
        "sram": (0.63, 0.48),
        "adc": (0.20, 0.27),
        "grng": (0.10, 0.15),
        "idac": (0.07, 0.10),
    }


@dataclass(frozen=True)
class EnergyModel:
    e_grng_sample: float = 360e-15
    e_mvm_op: float = 672e-15
    e_calibration_total: float = 3.6e-9
    cycle_time: float = 100e-9
    grng_count: int = 512
    ops_per_cycle: int = 2048
    # component -> (energy fraction, area fraction)
    breakdown_fractions: dict = field(default_factory=_default_breakdown)

    def __post_init__(self):
        for f in ("e_grng_sample", "e_mvm_op", "e_calibration_total"):
            if getattr(self, f) < 0:
                raise ConfigurationError(f"{f} must be >= 0")
        if self.cycle_time <= 0 or self.grng_count < 0 or self.ops_per_cycle < 0:
            raise ConfigurationError("cycle_time must be positive and counts non-negative")


@dataclass(frozen=True)
class WorkloadCounts:
    grng_samples: int = 0
    mvm_ops: int = 0
    calibrations: int = 0
    cycles: int = 0

    def __post_init__(self):
        if any(getattr(self, f.name) < 0 for f in fields(self)):
            raise ConfigurationError("counts must be non-negative")

    def scaled(self, k) -> "WorkloadCounts":
        return WorkloadCounts(*(getattr(self, f.name) * k for f in fields(self)))


class Ledger:
    """Thread-safe workload counters; ``snapshot`` is consistent across fields."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts = {f.name: 0 for f in fields(WorkloadCounts)}
        self.events = 0

    def record(self, **counts) -> None:
        unknown = set(counts) - set(self._counts)
        if unknown:
            raise KeyError(f"unknown counters: {sorted(unknown)}")
        if any(v < 0 for v in counts.values()):
            raise ValueError("ledger counts only increase")
        with self._lock:
            for k, v in counts.items():
                self._counts[k] += int(v)
            self.events += 1

    def snapshot(self) -> WorkloadCounts:
        with self._lock:
            return WorkloadCounts(**self._counts)


@dataclass(frozen=True)
class EnergyReport:
    total: float
    components: dict
    rng_throughput: float  # samples/s
    nn_throughput: float  # ops/s
    rng_efficiency: float  # J/sample
    nn_efficiency: float  # J/op
    elapsed: float  # s

    def to_dict(self) -> dict:
        return asdict(self)


def tally(model: EnergyModel, counts: WorkloadCounts) -> EnergyReport:
    components = {
        "grng": counts.grng_samples * model.e_grng_sample,
        "mvm": counts.mvm_ops * model.e_mvm_op,
        "calibration": counts.calibrations * model.e_calibration_total,
    }
    return EnergyReport(
        total=sum(components.values()),
        components=components,
        rng_throughput=model.grng_count / model.cycle_time,
        nn_throughput=model.ops_per_cycle / model.cycle_time,
        rng_efficiency=model.e_grng_sample,
        nn_efficiency=model.e_mvm_op,
        elapsed=counts.cycles * model.cycle_time,
    )


def breakdown_report(model: EnergyModel) -> list:
    """Rows of (component, energy %, area %)."""
    fr = model.breakdown_fractions
    for i, what in enumerate(("energy", "area")):
        s = sum(v[i] for v in fr.values())
        if abs(s - 1.0) > 1e-6:
            raise ConfigurationError(f"{what} fractions sum to {s}, not 1")
    return [(name, 100.0 * e, 100.0 * a) for name, (e, a) in fr.items()]


# Comparison rows of the published accelerator survey; display only.
REFERENCE_TABLE = {
    "columns": ("This work", "ASIC 22nm", "Sim 45nm", "FPGA Cyclone V", "FPGA ZU9EG", "FPGA Arria 10"),
    "rows": (
        ("Implementation", ("ASIC", "ASIC", "Simulated", "FPGA", "FPGA", "FPGA")),
        ("Technology [nm]", ("65", "22", "45 (PTM)", "28", "16", "20")),
        ("RNG", ("Analog (Thermal)", "TI-Hadamard", "Analog (Vth)", "Wallace", "Box-Muller", "MC Dropout")),
        ("Precision", ("INT8/4", "INT8/16/32 FP8/16/32 BF16", "INT4", "INT8", "INT16", "INT8")),
        ("Area [mm2]", ("0.45", "3.88", "---", "80/17/100/39", "2.9/1.4/6.6/8.6", "71/52/97/86")),
        ("Norm. RNG Tput [GSa/s/mm2]", ("11.4 (62.3)", "1.20-1.88", "---", "---", "---", "---")),
        ("RNG Tput [GSa/s]", ("5.12 (28.0)", "4.65-7.31", "---", "13.63", "8.88", "---")),
        ("RNG Eff. [pJ/Sa]", ("0.36", "1.08-1.69", "0.37", "38.8", "5.40", "---")),
        ("Norm. NN Tput [GOp/s/mm2]", ("228 (1246)", "309-515", "---", "---", "---", "---")),
        ("NN Tput [GOp/s]", ("102", "1200-2000", "---", "59.6", "---", "533-1590")),
        ("NN Eff. [fJ/Op]", ("672", "31-65", "---", "---", "---", "24000-51000")),
    ),
}


def comparison_table(model: EnergyModel | None = None) -> str:
    """Aligned plain-text comparison; the first column is replaced by simulator figures."""
    cols = list(REFERENCE_TABLE["columns"])
    rows = [(name, list(vals)) for name, vals in REFERENCE_TABLE["rows"]]
    if model is not None:
        sim = {
            "RNG Tput [GSa/s]": f"{model.grng_count / model.cycle_time / 1e9:.2f}",
            "RNG Eff. [pJ/Sa]": f"{model.e_grng_sample * 1e12:.2f}",
            "NN Eff. [fJ/Op]": f"{model.e_mvm_op * 1e15:.0f}",
            "NN Tput [GOp/s]": f"{model.ops_per_cycle / model.cycle_time / 1e9:.2f}",
        }
        cols[0] = "Simulator"
        for name, vals in rows:
            if name in sim:
                vals[0] = sim[name]
    head = [""] + cols
    body = [[name] + vals for name, vals in rows]
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    fmt = lambda r: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
    lines = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]
    return "\n".join(lines) + "\n"


def report_csv(report: EnergyReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("quantity", "value", "unit"))
    w.writerow(("total_energy", repr(report.total), "J"))
    for k, v in report.components.items():
        w.writerow((f"energy_{k}", repr(v), "J"))
    w.writerow(("rng_throughput", repr(report.rng_throughput), "Sa/s"))
    w.writerow(("nn_throughput", repr(report.nn_throughput), "Op/s"))
    w.writerow(("rng_efficiency", repr(report.rng_efficiency), "J/Sa"))
    w.writerow(("nn_efficiency", repr(report.nn_efficiency), "J/Op"))
    w.writerow(("elapsed", repr(report.elapsed), "s"))
    return buf.getvalue()


def breakdown_csv(model: EnergyModel) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("component", "energy_percent", "area_percent"))
    for name, e, a in breakdown_report(model):
        w.writerow((name, repr(e), repr(a)))
    return buf.getvalue()


def counts_to_json(counts: WorkloadCounts) -> str:
    return json.dumps(asdict(counts), sort_keys=True)
