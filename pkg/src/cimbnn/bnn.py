"""Partial-Bayesian classifier: deterministic ReLU features and a Bayesian
linear head trained by mean-field variational inference.

Only the head is Bayesian.  At inference the head runs on a backend: exact
floating point, the unquantized ``ideal_mvm`` reference, or the simulated
tile with quantized 8-bit mu / 4-bit sigma weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import stats
from .calibration import load_weights, measure_offsets
from .grng import RngStream
from .tile import Tile, TileConfig, analog_mvm_mu, analog_mvm_sigma, ideal_mvm, tile_mvm

MODEL_FORMAT = "cimbnn-model"
MODEL_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


class ShapeMismatch(ValueError):
    pass


class QuantizationError(ValueError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    y = np.asarray(y, float)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, float)))


def softmax(z):
    z = np.asarray(z, float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def relu(x):
    return np.maximum(x, 0.0)


ACTIVATIONS = {"relu": relu, "identity": lambda x: x, "softmax": softmax}


@dataclass
class DenseLayer:
    w: np.ndarray  # out x in
    b: np.ndarray

    def __call__(self, h):
        return relu(h @ self.w.T + self.b)


@dataclass
class BayesLinearLayer:
    """Gaussian weights ``mu + softplus(rho) * eps``; deterministic bias."""

    mu: np.ndarray  # out x in
    rho: np.ndarray
    bias: np.ndarray
    activation: str = "softmax"

    def __post_init__(self):
        self.mu = np.asarray(self.mu, float)
        self.rho = np.asarray(self.rho, float)
        self.bias = np.asarray(self.bias, float)
        if self.mu.shape != self.rho.shape or self.bias.shape != self.mu.shape[:1]:
            raise ShapeMismatch("mu, rho and bias shapes disagree")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation}")

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho)

    @classmethod
    def from_sigma(cls, mu, sigma, bias, activation="softmax"):
        return cls(mu, inv_softplus(sigma), bias, activation)

    def logits(self, h, eps):
        """Pre-activation outputs for weight noise ``eps`` (shape ``(..., out, in)`` or 0)."""
        w = self.mu + self.sigma * eps
        return np.einsum("...i,...oi->...o", h, np.broadcast_to(w, np.shape(h)[:-1] + self.mu.shape)) \
            + self.bias


def kl_divergence(mu, sigma, prior_sd: float = 1.0) -> float:
    """KL(N(mu, sigma^2) || N(0, prior_sd^2)) summed over weights."""
    mu = np.asarray(mu, float)
    sigma = np.asarray(sigma, float)
    v = prior_sd * prior_sd
    return float(np.sum(np.log(prior_sd / sigma) + (sigma * sigma + mu * mu) / (2 * v) - 0.5))


def head_objective(layer: BayesLinearLayer, h, y, eps, beta: float, prior_sd: float = 1.0):
    """Summed NLL of a batch plus ``beta * KL`` for fixed noise ``eps`` (out x in).

    Returns ``(loss, grads, dh, (nll, kl))``: grads for mu, rho and bias, and
    the gradient with respect to the head inputs.
    """
    sigma = layer.sigma
    w = layer.mu + sigma * eps
    z = h @ w.T + layer.bias
    p = softmax(z)
    n = h.shape[0]
    nll = -float(np.sum(np.log(np.clip(p[np.arange(n), y], 1e-300, None))))
    kl = kl_divergence(layer.mu, sigma, prior_sd)
    dz = p.copy()
    dz[np.arange(n), y] -= 1.0
    dw = dz.T @ h
    v = prior_sd * prior_sd
    grads = {
        "mu": dw + beta * layer.mu / v,
        "rho": (dw * eps + beta * (sigma / v - 1.0 / sigma)) * sigmoid(layer.rho),
        "bias": dz.sum(axis=0),
    }
    return nll + beta * kl, grads, dz @ w, (nll, kl)


@dataclass
class Architecture:
    input_dim: int = 2
    hidden: tuple = (32, 32)
    n_classes: int = 2


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 0.01
    # None: 1 / number of minibatches per epoch
    beta: float | None = None
    prior_sd: float = 1.0
    init_rho: float = -5.0


@dataclass
class QuantizedBayesLayer:
    mu_q: np.ndarray  # out x in, sign-magnitude integers
    sigma_q: np.ndarray  # out x in, unsigned integers
    scale: float
    input_scale: float
    mu_bits: int = 8
    sigma_bits: int = 4

    def dequantized(self):
        return self.mu_q * self.scale, self.sigma_q * self.scale


@dataclass
class BayesModel:
    arch: Architecture
    features: list
    head: BayesLinearLayer
    quantized: QuantizedBayesLayer | None = None
    history: dict = field(default_factory=dict)

    def feature_map(self, x) -> np.ndarray:
        h = np.asarray(x, float)
        for layer in self.features:
            h = layer(h)
        return h

    def predict_mean(self, x) -> np.ndarray:
        """Class probabilities with the head at its mean weights."""
        return softmax(self.head.logits(self.feature_map(x), 0.0))


def _glorot(g, n_out, n_in):
    lim = math.sqrt(6.0 / (n_in + n_out))
    return g.uniform(-lim, lim, size=(n_out, n_in))


def init_model(arch: Architecture, cfg: TrainConfig, stream: RngStream) -> BayesModel:
    g = stream.generator
    dims = (arch.input_dim,) + tuple(arch.hidden)
    feats = [DenseLayer(_glorot(g, dims[i + 1], dims[i]), np.zeros(dims[i + 1]))
             for i in range(len(dims) - 1)]
    head = BayesLinearLayer(_glorot(g, arch.n_classes, dims[-1]),
                            np.full((arch.n_classes, dims[-1]), cfg.init_rho),
                            np.zeros(arch.n_classes))
    return BayesModel(arch, feats, head)


class _Adam:
    def __init__(self, params: dict, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _params(model: BayesModel) -> dict:
    p = {"head.mu": model.head.mu, "head.rho": model.head.rho, "head.bias": model.head.bias}
    for i, layer in enumerate(model.features):
        p[f"f{i}.w"] = layer.w
        p[f"f{i}.b"] = layer.b
    return p


def train_vi(x, y, arch: Architecture, cfg: TrainConfig, stream: RngStream) -> BayesModel:
    """Minimize summed minibatch NLL + beta * KL with one reparameterized draw per step."""
    x = np.asarray(x, float)
    y = np.asarray(y, int)
    if len(np.unique(y)) < 2 or y.min() < 0 or y.max() >= arch.n_classes:
        raise ValueError("need labels 0..n_classes-1 with at least two classes present")
    model = init_model(arch, cfg, stream.child(0))
    g = stream.child(1).generator
    n = len(x)
    n_batches = max(1, math.ceil(n / cfg.batch_size))
    beta = 1.0 / n_batches if cfg.beta is None else cfg.beta
    params = _params(model)
    opt = _Adam(params, cfg.lr)
    scale = 1.0 / cfg.batch_size
    order = g.permutation(n)
    pos = 0
    loss = nll = kl = float("nan")
    for step in range(cfg.steps):
        if pos + cfg.batch_size > n:
            order = g.permutation(n)
            pos = 0
        idx = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        acts = [x[idx]]
        for layer in model.features:
            acts.append(layer(acts[-1]))
        eps = g.standard_normal(model.head.mu.shape)
        loss, hg, dh, (nll, kl) = head_objective(model.head, acts[-1], y[idx], eps, beta, cfg.prior_sd)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        grads = {"head.mu": hg["mu"], "head.rho": hg["rho"], "head.bias": hg["bias"]}
        for i in range(len(model.features) - 1, -1, -1):
            dh = dh * (acts[i + 1] > 0)
            grads[f"f{i}.w"] = dh.T @ acts[i]
            grads[f"f{i}.b"] = dh.sum(axis=0)
            dh = dh @ model.features[i].w
        opt.step(params, {k: v * scale for k, v in grads.items()})
    model.history = {"final_loss": loss, "final_nll": nll, "final_kl": kl, "beta": beta,
                     "steps": cfg.steps}
    return model


def _round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize(layer: BayesLinearLayer, mu_bits: int = 8, sigma_bits: int = 4,
             input_scale: float = 1.0) -> QuantizedBayesLayer:
    """Symmetric quantization onto a shared grid sized so both fields fit."""
    mu_top = (1 << (mu_bits - 1)) - 1
    sig_top = (1 << sigma_bits) - 1
    sigma = layer.sigma
    scale = max(float(np.max(np.abs(layer.mu))) / mu_top, float(np.max(sigma)) / sig_top)
    if not scale > 0 or not math.isfinite(scale):
        raise QuantizationError("layer has no non-zero weights to set a scale")
    mu_q = np.clip(_round_half_away(layer.mu / scale), -mu_top, mu_top).astype(np.int64)
    sigma_q = np.clip(np.floor(sigma / scale + 0.5), 0, sig_top).astype(np.int64)
    return QuantizedBayesLayer(mu_q, sigma_q, scale, float(input_scale), mu_bits, sigma_bits)


def quantize_model(model: BayesModel, calib_x, input_bits: int = 4, mu_bits: int = 8,
                   sigma_bits: int = 4) -> BayesModel:
    """Attach a quantized head; the input scale maps the largest calibration feature to full scale."""
    h = model.feature_map(calib_x)
    top = float(np.max(h))
    input_scale = top / ((1 << input_bits) - 1) if top > 0 else 1.0
    model.quantized = quantize(model.head, mu_bits, sigma_bits, input_scale)
    return model


# -- inference backends -------------------------------------------------------

class SoftwareBackend:
    """Float head with weights ``mu + sigma * eps``."""

    def __init__(self, model: BayesModel, deterministic: bool = False):
        self.model = model
        self.deterministic = deterministic

    def draw(self, stream: RngStream, s: int) -> np.ndarray:
        return stream.generator.standard_normal((s,) + self.model.head.mu.shape)

    def logits(self, h, stream: RngStream, s: int) -> np.ndarray:
        head = self.model.head
        if self.deterministic:
            return np.broadcast_to(head.logits(h, 0.0), (s, head.mu.shape[0])).copy()
        eps = self.draw(stream, s)
        return head.logits(np.broadcast_to(h, (s, h.shape[-1])), eps)


class IdealBackend(SoftwareBackend):
    """Unquantized crossbar reference via ``ideal_mvm``; same noise layout as software."""

    def logits(self, h, stream: RngStream, s: int) -> np.ndarray:
        head = self.model.head
        eps = self.draw(stream, s)
        out = np.stack([ideal_mvm(head.mu.T, head.sigma.T, h, e.T) for e in eps])
        return out + head.bias


class TileBackend:
    """Quantized head on a simulated tile with calibrated in-word GRNGs."""

    def __init__(self, model: BayesModel, tile: Tile):
        q = model.quantized
        if q is None:
            raise ShapeMismatch("model has no quantized head")
        k, n_in = q.mu_q.shape
        cfg = tile.config
        if n_in > cfg.rows or k > cfg.words_per_row:
            raise ShapeMismatch(f"head {k}x{n_in} does not fit a {cfg.rows}x{cfg.words_per_row} tile")
        if q.mu_bits != cfg.mu_bits or q.sigma_bits != cfg.sigma_bits:
            raise ShapeMismatch("quantization precision does not match the tile")
        self.model = model
        self.tile = tile
        self.k = k
        self.n_in = n_in

    @classmethod
    def build(cls, model: BayesModel, config: TileConfig | None = None, mismatch_sd: float = 0.0,
              n_cal: int = 1024, stream: RngStream | None = None, ledger=None,
              calib_x=None) -> "TileBackend":
        """Tile with the head loaded (mu transposed onto rows = inputs), calibrated.

        When ``calib_x`` is given and the config leaves ``adc_full_scale``
        unset, the ADC range is fitted to the largest mu column charge and the
        99.9th percentile sigma column charge seen on those inputs.
        """
        config = config or TileConfig()
        stream = stream or RngStream(0)
        q = model.quantized
        mu = np.zeros((config.rows, config.words_per_row), np.int64)
        sigma = np.zeros_like(mu)
        k, n_in = q.mu_q.shape
        mu[:n_in, :k] = q.mu_q.T
        sigma[:n_in, :k] = q.sigma_q.T
        tile = Tile.random(config, stream.child(0), mismatch_sd=mismatch_sd, ledger=ledger)
        offsets = measure_offsets(tile, n_cal, stream.child(1))
        load_weights(tile, mu, sigma, offsets)
        backend = cls(model, tile)
        if calib_x is not None and config.adc_full_scale is None:
            x = backend.quantize_input(model.feature_map(calib_x))
            q_mu = np.abs(analog_mvm_mu(tile, x))
            q_sig = np.abs(analog_mvm_sigma(tile, x, stream.child(2))[0])
            fs = max(float(q_mu.max()), float(np.percentile(q_sig, 99.9)), 1.0)
            tile.config = replace(config, adc_full_scale=fs)
        return backend

    def quantize_input(self, h) -> np.ndarray:
        q = self.model.quantized
        top = self.tile.config.input_max
        xq = np.clip(np.floor(np.asarray(h) / q.input_scale + 0.5), 0, top).astype(np.int64)
        x = np.zeros(xq.shape[:-1] + (self.tile.config.rows,), np.int64)
        x[..., :self.n_in] = xq
        return x

    def logits(self, h, stream: RngStream, s: int) -> np.ndarray:
        q = self.model.quantized
        x = np.broadcast_to(self.quantize_input(h), (s, self.tile.config.rows))
        y = tile_mvm(self.tile, x, stream, mode="stochastic")[:, :self.k]
        return y * (self.tile.lsb * q.scale * q.input_scale) + self.model.head.bias


@dataclass
class InferenceResult:
    mean_probs: np.ndarray
    per_sample_logits: np.ndarray
    entropy: float
    score_variance: np.ndarray
    s_samples: int

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.mean_probs))

    def to_dict(self) -> dict:
        return {"mean_probs": self.mean_probs.tolist(),
                "per_sample_logits": self.per_sample_logits.tolist(),
                "entropy": self.entropy, "score_variance": self.score_variance.tolist(),
                "s_samples": self.s_samples}


def repeated_inference(model: BayesModel, backend, x, s: int, stream: RngStream) -> InferenceResult:
    """S stochastic passes of the Bayesian head for one input vector."""
    if s < 1:
        raise ValueError("s must be >= 1")
    x = np.asarray(x, float)
    if x.shape != (model.arch.input_dim,):
        raise ShapeMismatch(f"input shape {x.shape}, model expects ({model.arch.input_dim},)")
    h = model.feature_map(x)
    logits = np.asarray(backend.logits(h, stream, s))
    probs = softmax(logits)
    mean = probs.mean(axis=0)
    mean = mean / mean.sum()
    # shifted by the first pass so identical samples give exactly zero
    d = probs - probs[0]
    var = np.maximum((d * d).mean(axis=0) - d.mean(axis=0) ** 2, 0.0)
    return InferenceResult(mean, logits, stats.predictive_entropy(mean), var, s)


@dataclass
class UncertaintyReport:
    accuracy: float
    ape_correct: float
    ape_incorrect: float
    calibration: stats.CalibrationReport
    recovery: list  # (threshold, retained_fraction, accuracy_delta)
    entropies: np.ndarray
    correct: np.ndarray
    confidences: np.ndarray

    @property
    def ece(self) -> float:
        return self.calibration.ece

    @property
    def mean_recovery(self) -> float:
        deltas = [d for _, _, d in self.recovery if not math.isnan(d)]
        return float(np.mean(deltas)) if deltas else float("nan")

    def summary(self) -> dict:
        return {"accuracy": self.accuracy, "ape_correct": self.ape_correct,
                "ape_incorrect": self.ape_incorrect, "ece": self.ece,
                "ece_percent": self.calibration.ece_percent, "mean_recovery": self.mean_recovery}


def infer_dataset(model: BayesModel, backend, x, s: int, stream: RngStream, ids=None) -> list:
    """Repeated inference per input; input ``ids[n]`` always uses stream child ``ids[n]``."""
    x = np.asarray(x, float)
    ids = np.arange(len(x)) if ids is None else np.asarray(ids)
    return [repeated_inference(model, backend, xi, s, stream.child(int(i))) for xi, i in zip(x, ids)]


def evaluate_uncertainty(model: BayesModel, backend, x, y, s: int, stream: RngStream,
                         thresholds=None, n_bins: int = 15, ids=None) -> UncertaintyReport:
    y = np.asarray(y, int)
    if len(y) == 0:
        raise ValueError("empty test set")
    results = infer_dataset(model, backend, x, s, stream, ids)
    probs = np.stack([r.mean_probs for r in results])
    pred = probs.argmax(axis=1)
    correct = pred == y
    conf = probs.max(axis=1)
    ent = np.array([r.entropy for r in results])
    thresholds = stats.default_thresholds() if thresholds is None else thresholds
    ape = lambda m: float(ent[m].mean()) if m.any() else float("nan")
    return UncertaintyReport(
        accuracy=float(correct.mean()),
        ape_correct=ape(correct),
        ape_incorrect=ape(~correct),
        calibration=stats.ece(conf, correct, n_bins),
        recovery=stats.recovery_curve(ent, correct, thresholds),
        entropies=ent, correct=correct, confidences=conf,
    )


# -- datasets -------------------------------------------------------------------

def two_moons(n: int, noise: float, stream: RngStream):
    """Interleaved half circles with Gaussian jitter; balanced labels."""
    g = stream.generator
    n0 = n // 2
    n1 = n - n0
    t0 = g.uniform(0, math.pi, n0)
    t1 = g.uniform(0, math.pi, n1)
    a = np.column_stack([np.cos(t0), np.sin(t0)])
    b = np.column_stack([1 - np.cos(t1), 0.5 - np.sin(t1)])
    x = np.vstack([a, b]) + noise * g.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n0, int), np.ones(n1, int)])
    perm = g.permutation(n)
    return x[perm], y[perm]


def far_from_support(n: int, stream: RngStream, radius: float = 6.0):
    """Out-of-distribution probe: points on a ring well outside the moons."""
    g = stream.generator
    t = g.uniform(0, 2 * math.pi, n)
    r = radius + g.uniform(0, 2.0, n)
    return np.column_stack([0.5 + r * np.cos(t), 0.25 + r * np.sin(t)])


# -- model file -----------------------------------------------------------------

def model_to_dict(model: BayesModel) -> dict:
    d = {
        "format": MODEL_FORMAT, "version": MODEL_VERSION,
        "architecture": {"input_dim": model.arch.input_dim, "hidden": list(model.arch.hidden),
                         "n_classes": model.arch.n_classes},
        "features": [{"w": l.w.tolist(), "b": l.b.tolist()} for l in model.features],
        "head": {"mu": model.head.mu.tolist(), "rho": model.head.rho.tolist(),
                 "bias": model.head.bias.tolist(), "activation": model.head.activation},
        "history": model.history,
        "quantized": None,
    }
    q = model.quantized
    if q is not None:
        d["quantized"] = {"mu_q": q.mu_q.tolist(), "sigma_q": q.sigma_q.tolist(),
                          "scale": q.scale, "input_scale": q.input_scale,
                          "mu_bits": q.mu_bits, "sigma_bits": q.sigma_bits}
    return d


def model_from_dict(d: dict) -> BayesModel:
    if d.get("format") != MODEL_FORMAT:
        raise ValueError("not a model file")
    if d.get("version") != MODEL_VERSION:
        raise SchemaVersionError(f"model file version {d.get('version')}, expected {MODEL_VERSION}")
    a = d["architecture"]
    arch = Architecture(a["input_dim"], tuple(a["hidden"]), a["n_classes"])
    feats = [DenseLayer(np.array(l["w"], float), np.array(l["b"], float)) for l in d["features"]]
    h = d["head"]
    head = BayesLinearLayer(np.array(h["mu"], float), np.array(h["rho"], float),
                            np.array(h["bias"], float), h.get("activation", "softmax"))
    q = d.get("quantized")
    quant = None
    if q is not None:
        quant = QuantizedBayesLayer(np.array(q["mu_q"], np.int64), np.array(q["sigma_q"], np.int64),
                                    float(q["scale"]), float(q["input_scale"]),
                                    int(q["mu_bits"]), int(q["sigma_bits"]))
    return BayesModel(arch, feats, head, quant, dict(d.get("history", {})))


class SchemaVersionError(ValueError):
    pass


def save_model(model: BayesModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)) + "\n")


def load_model(path) -> BayesModel:
    return model_from_dict(json.loads(Path(path).read_text()))
