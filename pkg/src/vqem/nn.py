"""Small dense encoder/decoder with hand-written backpropagation and the training step."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import bottleneck
from .codebook import Codebook, ema_update, usage_stats

ACTIVATIONS = ("relu", "identity")
MODES = ("hard_ema", "soft_em")
LOSSES = ("mse", "bce")
OPTIMIZERS = ("sgd", "adam")


class DivergenceError(FloatingPointError):
    """Raised when a training step produces a non-finite loss or parameter."""


class StaleCacheError(RuntimeError):
    """Raised when backward is given a cache from an older parameter version."""


@dataclass
class TrainConfig:
    K: int = 256
    D: int = 16
    m: int = 10
    decay: float = 0.999
    beta: float = 0.25
    seed: int = 0
    learning_rate: float = 0.05
    batch_size: int = 128
    max_steps: int = 2000
    mode: str = "hard_ema"
    downsample_factor: int = 3
    hidden: int = 64
    input_dim: int = 32
    loss: str = "mse"
    optimizer: str = "sgd"
    warmup_steps: int = 100
    lr_half_life: float = 2000.0
    epsilon: float = 1e-6

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        for name in ("K", "D", "m", "batch_size", "hidden", "input_dim"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        for name in ("max_steps", "downsample_factor", "warmup_steps", "seed"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0")
        if not 0.0 <= self.decay <= 1.0:
            out.append("decay must lie in [0, 1]")
        if self.beta < 0:
            out.append("beta must be >= 0")
        if self.learning_rate < 0:
            out.append("learning_rate must be >= 0")
        if self.lr_half_life <= 0:
            out.append("lr_half_life must be > 0")
        if self.epsilon <= 0:
            out.append("epsilon must be > 0")
        if self.mode not in MODES:
            out.append(f"mode must be one of {MODES}")
        if self.loss not in LOSSES:
            out.append(f"loss must be one of {LOSSES}")
        if self.optimizer not in OPTIMIZERS:
            out.append(f"optimizer must be one of {OPTIMIZERS}")
        return out

    @property
    def n_latents(self) -> int:
        """Latent positions per example: input_dim halved downsample_factor times."""
        return max(1, self.input_dim >> self.downsample_factor)

    def replace(self, **changes) -> "TrainConfig":
        values = asdict(self)
        values.update(changes)
        return TrainConfig(**values)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "identity"


class DenseNet:
    """Stack of affine layers, each followed by relu or identity."""

    def __init__(self, layers: list[Layer]):
        for a, b in zip(layers, layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ValueError("consecutive layer dimensions do not chain")
        for layer in layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.weight.shape[1],):
                raise ValueError("bias length must match layer output")
        self.layers = layers
        self.version = 0

    @classmethod
    def init(cls, sizes: list[int], rng: np.random.Generator, final_activation: str = "identity") -> "DenseNet":
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
            last = i == len(sizes) - 2
            act = final_activation if last else "relu"
            scale = math.sqrt((1.0 if last else 2.0) / n_in)
            layers.append(Layer(rng.standard_normal((n_in, n_out)) * scale, np.zeros(n_out), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def param_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def bump(self) -> None:
        self.version += 1

    def copy(self) -> "DenseNet":
        net = DenseNet([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])
        net.version = self.version
        return net


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    version: int


def forward(net: DenseNet, x) -> tuple[np.ndarray, ForwardCache]:
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != net.input_dim:
        raise ValueError(f"input must be N x {net.input_dim}, got {h.shape}")
    inputs, pre = [], []
    for layer in net.layers:
        inputs.append(h)
        a = h @ layer.weight + layer.bias
        pre.append(a)
        h = np.maximum(a, 0.0) if layer.activation == "relu" else a
    return h, ForwardCache(inputs, pre, net.version)


def backward(net: DenseNet, cache: ForwardCache, upstream_grad) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse-mode pass. Returns ``(param_grads, input_grad)``.

    ``param_grads`` is ordered like ``net.params()``: weight, bias per layer.
    """
    if cache.version != net.version:
        raise StaleCacheError(f"cache from version {cache.version}, net is at {net.version}")
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != cache.pre_activations[-1].shape:
        raise ValueError(f"upstream gradient shape {g.shape} != output shape {cache.pre_activations[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        if layer.activation == "relu":
            g = g * (cache.pre_activations[idx] > 0)
        grads[2 * idx] = cache.inputs[idx].T @ g
        grads[2 * idx + 1] = g.sum(axis=0)
        g = g @ layer.weight.T
    return grads, g


def _log1pexp(a: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, a)


def reconstruction_loss(x_hat, x, kind: str = "mse") -> float:
    """Mean per-element loss. ``bce`` treats ``x_hat`` as logits of Bernoulli targets."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch: {x_hat.shape} vs {x.shape}")
    if kind == "mse":
        diff = x_hat - x
        return float(np.mean(diff * diff))
    if kind == "bce":
        return float(np.mean(_log1pexp(x_hat) - x * x_hat))
    raise ValueError(f"unknown loss {kind!r}")


def reconstruction_grad(x_hat, x, kind: str = "mse") -> np.ndarray:
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if kind == "mse":
        return 2.0 * (x_hat - x) / x.size
    if kind == "bce":
        return (1.0 / (1.0 + np.exp(-x_hat)) - x) / x.size
    raise ValueError(f"unknown loss {kind!r}")


@dataclass
class Metrics:
    step: int
    l_r: float
    commitment: float
    total_loss: float
    usage_perplexity: float
    dead_codes: int
    lr: float = 0.0


@dataclass
class AutoencoderState:
    encoder: DenseNet
    decoder: DenseNet
    config: TrainConfig
    step: int = 0
    opt_state: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: TrainConfig, rng: np.random.Generator) -> "AutoencoderState":
        latent = config.n_latents * config.D
        encoder = DenseNet.init([config.input_dim, config.hidden, latent], rng)
        decoder = DenseNet.init([latent, config.hidden, config.input_dim], rng)
        if encoder.output_dim != decoder.input_dim:
            raise AssertionError("encoder output must feed the decoder")
        return cls(encoder, decoder, config)

    def copy(self) -> "AutoencoderState":
        return AutoencoderState(
            self.encoder.copy(), self.decoder.copy(), self.config, self.step, copy.deepcopy(self.opt_state)
        )

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.decoder.params()


def learning_rate_at(config: TrainConfig, step: int) -> float:
    """Linear warm-up followed by exponential decay with the configured half-life."""
    lr = config.learning_rate
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return lr * (step + 1) / config.warmup_steps
    return lr * 0.5 ** ((step - config.warmup_steps) / config.lr_half_life)


def encode(state: AutoencoderState, x) -> tuple[np.ndarray, ForwardCache]:
    """Encoder outputs reshaped to one row per latent position: (N * n_latents, D)."""
    h, cache = forward(state.encoder, x)
    return h.reshape(-1, state.config.D), cache


def decode(state: AutoencoderState, z_q: np.ndarray, n: int) -> tuple[np.ndarray, ForwardCache]:
    return forward(state.decoder, z_q.reshape(n, -1))


def quantize(state: AutoencoderState, z_e: np.ndarray, cb: Codebook, seed: int) -> bottleneck.BottleneckOutput:
    cfg = state.config
    if cfg.mode == "soft_em":
        return bottleneck.quantize_soft(z_e, cb, cfg.m, seed, cfg.beta)
    return bottleneck.quantize_hard(z_e, cb, cfg.beta)


def _apply_update(state: AutoencoderState, grads: list[np.ndarray], lr: float) -> None:
    params = state.params()
    cfg = state.config
    if cfg.optimizer == "adam":
        b1, b2, eps = 0.9, 0.999, 1e-8
        t = state.opt_state.get("t", 0) + 1
        ms = state.opt_state.setdefault("m", [np.zeros_like(p) for p in params])
        vs = state.opt_state.setdefault("v", [np.zeros_like(p) for p in params])
        state.opt_state["t"] = t
        for p, g, mo, ve in zip(params, grads, ms, vs):
            mo *= b1
            mo += (1 - b1) * g
            ve *= b2
            ve += (1 - b2) * g * g
            p -= lr * (mo / (1 - b1**t)) / (np.sqrt(ve / (1 - b2**t)) + eps)
    else:
        for p, g in zip(params, grads):
            p -= lr * g
    state.encoder.bump()
    state.decoder.bump()


def train_step(
    state: AutoencoderState, cb: Codebook, batch, seed: int
) -> tuple[AutoencoderState, Codebook, Metrics]:
    """One pass: encode, quantize, decode, backpropagate, update the nets, EMA-update the codebook.

    ``seed`` drives the Monte-Carlo sampling in soft mode. Inputs are not
    modified; new state and codebook objects are returned.
    """
    cfg = state.config
    x = np.asarray(batch, dtype=np.float64)
    n = x.shape[0]
    state = state.copy()

    # overflow in a diverging run is caught by the explicit finiteness checks below
    with np.errstate(over="ignore", invalid="ignore"):
        z_e, enc_cache = encode(state, x)
        out = quantize(state, z_e, cb, seed)
        x_hat, dec_cache = decode(state, out.quantized, n)
        l_r = reconstruction_loss(x_hat, x, cfg.loss)
        total = bottleneck.total_loss(l_r, out)
        if not math.isfinite(total):
            raise DivergenceError(f"non-finite loss at step {state.step}: l_r={l_r}, commitment={out.commitment_loss}")

        dec_grads, grad_zq = backward(state.decoder, dec_cache, reconstruction_grad(x_hat, x, cfg.loss))
        grad_ze = bottleneck.backward(grad_zq.reshape(out.quantized.shape), out, z_e)
        enc_grads, _ = backward(state.encoder, enc_cache, grad_ze.reshape(n, -1))

        lr = learning_rate_at(cfg, state.step)
        _apply_update(state, enc_grads + dec_grads, lr)
        if not all(np.all(np.isfinite(p)) for p in state.params()):
            raise DivergenceError(f"non-finite parameters after step {state.step}")

    try:
        new_cb = ema_update(cb, z_e, out.weights)
    except FloatingPointError as exc:
        raise DivergenceError(f"codebook update failed at step {state.step}: {exc}") from exc
    codes = out.nearest
    stats = usage_stats(codes, cb.K)
    metrics = Metrics(
        step=state.step,
        l_r=l_r,
        commitment=out.commitment_loss,
        total_loss=total,
        usage_perplexity=stats.usage_perplexity,
        dead_codes=stats.dead_codes,
        lr=lr,
    )
    state.step += 1
    return state, new_cb, metrics
