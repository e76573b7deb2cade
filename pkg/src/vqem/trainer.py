"""Training loop, checkpoints, metrics records, stability experiment and bits/dim evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import bottleneck, codebook, latent_prior
from .codebook import Codebook, nearest_code, usage_stats
from .config import RunConfig, parse_mode
from .nn import (
    AutoencoderState,
    DenseNet,
    DivergenceError,
    Layer,
    Metrics,
    TrainConfig,
    decode,
    encode,
    quantize,
    reconstruction_loss,
    train_step,
)

logger = logging.getLogger(__name__)

CODEBOOK_FILE = "codebook.vqcb"
MODEL_FILE = "model.vqnn"
MODEL_MAGIC = b"VQNN"
MODEL_VERSION = 1

COLLAPSE_NOTE = (
    "collapse is measured by usage perplexity of nearest-code assignments, "
    "a codebook-side proxy; it is not a task metric"
)


@dataclass
class MetricsRecord:
    step: int
    l_r: float | None
    commitment: float | None
    total_loss: float | None
    usage_perplexity: float | None
    dead_codes: int | None
    mode: str
    seed: int
    wall_ms: float
    diverged: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), allow_nan=False)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        return cls(**json.loads(line))


# --- checkpoints -------------------------------------------------------------


def save_model(path, state: AutoencoderState, mean=None, std=None) -> None:
    """Binary model file: magic, version, JSON header length, JSON header, float64 payload."""
    arrays: list[tuple[str, np.ndarray]] = []
    layers = []
    for net_name, net in (("encoder", state.encoder), ("decoder", state.decoder)):
        for i, layer in enumerate(net.layers):
            layers.append({"net": net_name, "activation": layer.activation})
            arrays.append((f"{net_name}.{i}.weight", layer.weight))
            arrays.append((f"{net_name}.{i}.bias", layer.bias))
    if mean is not None:
        arrays.append(("norm.mean", np.asarray(mean)))
        arrays.append(("norm.std", np.asarray(std)))
    header = {
        "config": asdict(state.config),
        "step": state.step,
        "layers": layers,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path) -> tuple[AutoencoderState, np.ndarray | None, np.ndarray | None]:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    header = json.loads(raw[12:12 + hlen])
    offset = 12 + hlen
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        if offset + 8 * count > len(raw):
            raise ValueError(f"{path}: truncated payload")
        arrays[spec["name"]] = np.frombuffer(raw, "<f8", count, offset).reshape(spec["shape"]).copy()
        offset += 8 * count
    nets = {"encoder": [], "decoder": []}
    for spec in header["layers"]:
        i = len(nets[spec["net"]])
        name = f"{spec['net']}.{i}"
        nets[spec["net"]].append(Layer(arrays[f"{name}.weight"], arrays[f"{name}.bias"], spec["activation"]))
    state = AutoencoderState(
        DenseNet(nets["encoder"]), DenseNet(nets["decoder"]), TrainConfig(**header["config"]), header["step"]
    )
    return state, arrays.get("norm.mean"), arrays.get("norm.std")


def save_checkpoint(out_dir, state: AutoencoderState, cb: Codebook, mean=None, std=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # write to temporary names first so an interrupted save keeps the last good pair
    tmp_cb, tmp_model = out / (CODEBOOK_FILE + ".tmp"), out / (MODEL_FILE + ".tmp")
    codebook.save(cb, tmp_cb)
    save_model(tmp_model, state, mean, std)
    tmp_cb.replace(out / CODEBOOK_FILE)
    tmp_model.replace(out / MODEL_FILE)


def load_checkpoint(ckpt_dir):
    ckpt = Path(ckpt_dir)
    state, mean, std = load_model(ckpt / MODEL_FILE)
    cb = codebook.load(ckpt / CODEBOOK_FILE, decay=state.config.decay, epsilon=state.config.epsilon)
    return state, cb, mean, std


# --- training ----------------------------------------------------------------


def derive_seed(seed: int, step: int) -> int:
    """Per-step sampling seed mixed from the run seed and step index."""
    a, b = np.random.SeedSequence([seed, step]).generate_state(2, np.uint64)
    return (int(a) << 64) | int(b)


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of minibatch row indices, reshuffled every epoch."""
    size = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - size + 1, size):
            yield perm[start:start + size]


def init_codebook(cfg: RunConfig, tc: TrainConfig, z_e: np.ndarray, rng: np.random.Generator) -> Codebook:
    if cfg.codebook_init == "tight":
        center = z_e.mean(axis=0) + cfg.init_offset
        emb = center + cfg.init_radius * rng.standard_normal((tc.K, tc.D))
        return Codebook(emb, np.ones(tc.K), tc.decay, tc.epsilon)
    return Codebook.from_data(z_e, tc.K, rng, tc.decay, tc.epsilon)


def evaluate_batch(state: AutoencoderState, cb: Codebook, batch, seed: int) -> Metrics:
    """Losses and usage on a batch without updating anything."""
    x = np.asarray(batch, dtype=np.float64)
    z_e, _ = encode(state, x)
    out = quantize(state, z_e, cb, seed)
    x_hat, _ = decode(state, out.quantized, x.shape[0])
    l_r = reconstruction_loss(x_hat, x, state.config.loss)
    stats = usage_stats(out.nearest, cb.K)
    return Metrics(state.step, l_r, out.commitment_loss, bottleneck.total_loss(l_r, out),
                   stats.usage_perplexity, stats.dead_codes)


def full_usage(state: AutoencoderState, cb: Codebook, data: np.ndarray):
    z_e, _ = encode(state, data)
    return usage_stats(nearest_code(z_e, cb), cb.K)


@dataclass
class TrainResult:
    state: AutoencoderState
    codebook: Codebook
    records: list[MetricsRecord] = field(default_factory=list)


def mode_label(tc: TrainConfig) -> str:
    return "hard_ema" if tc.mode == "hard_ema" else f"soft_em:m={tc.m}"


def run_training(
    cfg: RunConfig,
    data: np.ndarray,
    out_dir=None,
    sink: Callable[[MetricsRecord], None] | None = None,
    norm: tuple | None = None,
) -> TrainResult:
    """Train for ``cfg.train.max_steps`` steps, emitting a record every ``log_every`` steps.

    Records for step ``s`` carry the losses computed during step ``s`` (before
    its parameter update). The last step is always logged. On divergence a
    record marked ``diverged`` is emitted, the last checkpoint is left in place
    and :class:`DivergenceError` propagates.
    """
    data = np.asarray(data, dtype=np.float64)
    tc = cfg.train.replace(input_dim=data.shape[1])
    label = mode_label(tc)
    mean, std = norm if norm is not None else (None, None)
    rng = np.random.default_rng(tc.seed)
    state = AutoencoderState.init(tc, rng)
    stream = batch_indices(data.shape[0], tc.batch_size, rng)
    idx = next(stream)
    z_e, _ = encode(state, data[idx])
    cb = init_codebook(cfg, tc, z_e, rng)

    t0 = time.perf_counter()
    records: list[MetricsRecord] = []

    def emit(metrics: Metrics | None, step: int, diverged: bool = False, full_state=None):
        wall = (time.perf_counter() - t0) * 1000.0 if cfg.wall_clock else 0.0
        if metrics is None:
            rec = MetricsRecord(step, None, None, None, None, None, label, tc.seed, wall, diverged)
        else:
            usage, dead = metrics.usage_perplexity, metrics.dead_codes
            if full_state is not None:
                stats = full_usage(full_state[0], full_state[1], data)
                usage, dead = stats.usage_perplexity, stats.dead_codes
            rec = MetricsRecord(step, metrics.l_r, metrics.commitment, metrics.total_loss,
                                usage, int(dead), label, tc.seed, wall, diverged)
        records.append(rec)
        if sink is not None:
            sink(rec)

    if out_dir is not None:
        save_checkpoint(out_dir, state, cb, mean, std)

    if tc.max_steps == 0:
        m0 = evaluate_batch(state, cb, data[idx], derive_seed(tc.seed, 0))
        emit(m0, 0, full_state=(state, cb) if cfg.usage_eval == "full" else None)
        return TrainResult(state, cb, records)

    for step in range(tc.max_steps):
        if step > 0:
            idx = next(stream)
        try:
            state, cb, metrics = train_step(state, cb, data[idx], derive_seed(tc.seed, step))
        except DivergenceError:
            logger.error("training diverged at step %d (mode %s)", step, label)
            emit(None, step, diverged=True)
            raise
        last = step == tc.max_steps - 1
        if step % cfg.log_every == 0 or last:
            emit(metrics, step, full_state=(state, cb) if cfg.usage_eval == "full" else None)
        if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and not last:
            save_checkpoint(out_dir, state, cb, mean, std)

    if out_dir is not None:
        save_checkpoint(out_dir, state, cb, mean, std)
    return TrainResult(state, cb, records)


# --- stability experiment ----------------------------------------------------


@dataclass
class ModeReport:
    mode: str
    final_usage_perplexity: float
    steps_to_collapse: int | None
    steps: list[int]
    usage_perplexity: list[float]
    total_loss: list[float]


@dataclass
class StabilityReport:
    K: int
    collapse_threshold: float
    modes: list[ModeReport]
    note: str = COLLAPSE_NOTE

    def mode(self, label: str) -> ModeReport:
        for m in self.modes:
            if m.mode == label:
                return m
        raise KeyError(label)

    def to_dict(self) -> dict:
        return asdict(self)


def collapse_step(steps, usage, threshold: float):
    """First logged step from which usage stays below ``threshold`` until the end, else None.

    A transient dip (a tight initial codebook starts below threshold) is not a collapse.
    """
    start = None
    for step, u in zip(steps, usage):
        if u < threshold:
            if start is None:
                start = step
        else:
            start = None
    return start


def summarize_mode(records: list[MetricsRecord], threshold: float) -> ModeReport:
    usable = [r for r in records if not r.diverged]
    collapse = collapse_step([r.step for r in usable], [r.usage_perplexity for r in usable], threshold)
    return ModeReport(
        mode=records[0].mode,
        final_usage_perplexity=usable[-1].usage_perplexity if usable else math.nan,
        steps_to_collapse=collapse,
        steps=[r.step for r in usable],
        usage_perplexity=[r.usage_perplexity for r in usable],
        total_loss=[r.total_loss for r in usable],
    )


def stability_report(streams: dict[str, list[MetricsRecord]], K: int, collapse_fraction: float) -> StabilityReport:
    threshold = collapse_fraction * K
    return StabilityReport(K, threshold, [summarize_mode(recs, threshold) for recs in streams.values()])


def run_stability(cfg: RunConfig, data: np.ndarray, sink=None) -> tuple[StabilityReport, dict[str, list[MetricsRecord]]]:
    """Train every configured mode on identical data and seed; summarise codebook collapse."""
    streams: dict[str, list[MetricsRecord]] = {}
    for spec in cfg.modes:
        mode, m = parse_mode(spec)
        changes = {"mode": mode}
        if m is not None:
            changes["m"] = m
        result = run_training(dataclasses.replace(cfg, train=cfg.train.replace(**changes)), data, sink=sink)
        streams[result.records[0].mode] = result.records
    return stability_report(streams, cfg.train.K, cfg.collapse_fraction), streams


def stability_csv(report: StabilityReport) -> str:
    lines = ["step,mode,usage_perplexity,total_loss"]
    for m in report.modes:
        for step, usage, loss in zip(m.steps, m.usage_perplexity, m.total_loss):
            lines.append(f"{step},{m.mode},{usage!r},{loss!r}")
    return "\n".join(lines) + "\n"


# --- evaluation --------------------------------------------------------------


def run_eval(cfg: RunConfig, state: AutoencoderState, cb: Codebook, data: np.ndarray, seed: int = 0) -> dict:
    """Fit the latent prior on a train split, score the held-out split, combine into bits/dim.

    ``l_p`` is the held-out per-element reconstruction loss in nats (Bernoulli
    cross-entropy for ``loss = bce``; for ``mse`` the squared error is used as
    a stand-in and flagged in the output).
    """
    tc = state.config
    data = np.asarray(data, dtype=np.float64)
    if data.shape[1] != tc.input_dim:
        raise ValueError(f"data has {data.shape[1]} features, checkpoint expects {tc.input_dim}")
    n = data.shape[0]
    if n < 2:
        raise ValueError("evaluation needs at least two rows (train and held-out split)")
    n_train = min(max(1, int(round(cfg.eval_split * n))), n - 1)
    train, held = data[:n_train], data[n_train:]

    L = tc.n_latents
    z_train, _ = encode(state, train)
    z_held, _ = encode(state, held)
    codes_held = nearest_code(z_held, cb).reshape(-1, L)
    if tc.mode == "soft_em":
        out = bottleneck.quantize_soft(z_train, cb, tc.m, derive_seed(seed, 0), tc.beta)
        targets = out.weights.reshape(-1, L, cb.K)
        prior = latent_prior.fit_smoothed(list(targets), cfg.prior_order, cfg.prior_alpha)
    else:
        codes_train = nearest_code(z_train, cb).reshape(-1, L)
        prior = latent_prior.fit(list(codes_train), cfg.prior_order, cb.K, cfg.prior_alpha)
    l_lp = latent_prior.log_perplexity(prior, list(codes_held))

    out_held = quantize(state, z_held, cb, derive_seed(seed, 1))
    x_hat, _ = decode(state, out_held.quantized, held.shape[0])
    l_p = reconstruction_loss(x_hat, held, tc.loss)
    bpd = latent_prior.bits_per_dim(l_p, l_lp, tc.input_dim, L)
    usage = usage_stats(codes_held.reshape(-1), cb.K)
    return {
        "bits_per_dim": bpd.value,
        "l_p": bpd.l_p,
        "l_lp": bpd.l_lp,
        "n_x": bpd.n_x,
        "n_z": bpd.n_z,
        "l_p_kind": "bernoulli_nll" if tc.loss == "bce" else "mse_proxy",
        "reconstruction_loss": l_p,
        "commitment": out_held.commitment_loss,
        "usage_perplexity": usage.usage_perplexity,
        "dead_codes": usage.dead_codes,
        "prior_order": cfg.prior_order,
        "prior_alpha": cfg.prior_alpha,
        "n_train": int(train.shape[0]),
        "n_heldout": int(held.shape[0]),
        "mode": mode_label(tc),
    }
