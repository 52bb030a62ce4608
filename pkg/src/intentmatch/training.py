"""Mini-batch Adam training with deterministic seeding and checkpoints.

Checkpoint format (little-endian throughout):

    magic b"MMAN" | u32 version | u32 json_len | canonical JSON config
    | per tensor: u64 byte_len | raw f64 payload

Tensors appear in the model's parameter declaration order; if optimizer
state is included, each parameter's first- and second-moment buffers
follow the parameter payloads in the same order.  Canonical JSON (sorted
keys, no whitespace) makes save -> load -> save byte-identical.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (
    ConfigError,
    ConfigMismatchError,
    CorruptCheckpointError,
    VersionMismatchError,
)
from .model import Model, ModelConfig, multilabel_loss

CHECKPOINT_MAGIC = b"MMAN"
CHECKPOINT_VERSION = 1


@dataclass
class AdamState:
    """Bias-corrected Adam moments for one named parameter list."""

    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, named_params, lr=5e-5):
        state = cls(lr=lr)
        for name, tensor in named_params:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        return state


def adam_step(named_params, state):
    """One in-place Adam update; gradients are consumed and zeroed."""
    state.step += 1
    b1c = 1.0 - state.beta1**state.step
    b2c = 1.0 - state.beta2**state.step
    for name, tensor in named_params:
        g = tensor.grad
        m = state.m[name]
        v = state.v[name]
        if m.shape != g.shape:
            raise ValueError(
                f"adam buffer for {name} has shape {m.shape}, parameter has {g.shape}"
            )
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        tensor.data -= state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
        tensor.grad[...] = 0.0


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 5e-5
    seed: int = 42
    workers: int = 1


def _chunk_forward(model, chunk, cats, inv_batch):
    """Forward one chunk on its own tape; returns (tape, scaled loss, sum)."""
    with ad.Tape() as tape:
        cat_enc = model.encode_categories(cats)
        total = None
        for ex in chunk:
            loss = multilabel_loss(model.forward(ex.query, cat_enc), ex.labels)
            total = loss if total is None else total + loss
        scaled = total * inv_batch
    return tape, scaled, float(total.data)


def batch_gradients(model, batch, cats, workers=1):
    """Accumulate d(mean batch loss)/d(params); returns the mean loss.

    Workers build per-chunk forward tapes in parallel; backward replays
    run on the calling thread in fixed chunk order, so the gradient
    summation order depends only on (batch, workers), never on thread
    scheduling.
    """
    inv_batch = 1.0 / len(batch)
    n_chunks = max(1, min(workers, len(batch)))
    if n_chunks == 1:
        results = [_chunk_forward(model, batch, cats, inv_batch)]
    else:
        bounds = np.linspace(0, len(batch), n_chunks + 1).astype(int)
        chunks = [batch[a:b] for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(
                pool.map(lambda c: _chunk_forward(model, c, cats, inv_batch), chunks)
            )
    for tape, scaled, _ in results:
        ad.backward(scaled, tape)
    return sum(s for _, _, s in results) * inv_batch


def train(model, data, cats, config, log_fn=None):
    """Seeded shuffled mini-batch loop; returns (loss history, AdamState).

    The model's parameters are updated in place.  log_fn, when given, is
    called with (epoch_index, mean_loss) after every epoch.
    """
    if not data:
        raise ConfigError("training data is empty")
    n_cats = model.config.num_categories
    for i, ex in enumerate(data):
        if ex.labels.shape != (n_cats,):
            raise ConfigError(
                f"example {i} has {ex.labels.shape[0]} labels, model expects {n_cats}"
            )
    named = model.parameters()
    state = AdamState.for_params(named, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    history = []
    n = len(data)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            batch = [data[i] for i in order[start : start + config.batch_size]]
            mean_loss = batch_gradients(model, batch, cats, config.workers)
            adam_step(named, state)
            loss_sum += mean_loss * len(batch)
        history.append(loss_sum / n)
        if log_fn is not None:
            log_fn(epoch, history[-1])
    return history, state


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class LoadedCheckpoint:
    model: Model
    adam_state: AdamState | None
    extra: dict


def _model_config_dict(config):
    return {
        "vocab_size": config.vocab_size,
        "num_categories": config.num_categories,
        "d": config.d,
        "l_q": config.l_q,
        "l_c": config.l_c,
        "encoder_layers": config.encoder_layers,
        "encoder_heads": config.encoder_heads,
        "encoder_ffn": config.encoder_ffn,
        "conv_filters": config.conv_filters,
        "conv_window": list(config.conv_window),
        "conv_stride": list(config.conv_stride),
        "pool_window": list(config.pool_window),
        "pool_stride": list(config.pool_stride),
        "conv_blocks": config.conv_blocks,
        "variant": config.variant,
    }


def _write_tensor(f, arr):
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    f.write(struct.pack("<Q", len(payload)))
    f.write(payload)


def save_checkpoint(path, model, vocab, cats, adam_state=None, extra=None):
    manifest = [[name, list(t.shape)] for name, t in model.parameters()]
    header = {
        "model": _model_config_dict(model.config),
        "vocab_sha256": vocab.fingerprint(),
        "categories_sha256": cats.fingerprint(),
        "params": manifest,
        "optimizer": None
        if adam_state is None
        else {
            "algo": "adam",
            "lr": adam_state.lr,
            "beta1": adam_state.beta1,
            "beta2": adam_state.beta2,
            "eps": adam_state.eps,
            "step": adam_state.step,
        },
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, tensor in model.parameters():
            _write_tensor(f, tensor.data)
        if adam_state is not None:
            for name, _ in model.parameters():
                _write_tensor(f, adam_state.m[name])
                _write_tensor(f, adam_state.v[name])


class _Reader:
    def __init__(self, raw, path):
        self.raw = raw
        self.path = path
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise CorruptCheckpointError(
                f"{self.path}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, have {len(self.raw) - self.pos})"
            )
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def tensor(self, shape, what):
        (nbytes,) = struct.unpack("<Q", self.take(8, f"{what} length"))
        expected = int(np.prod(shape, dtype=np.int64)) * 8
        if nbytes != expected:
            raise CorruptCheckpointError(
                f"{self.path}: {what} payload is {nbytes} bytes, expected {expected}"
            )
        buf = self.take(nbytes, what)
        return np.frombuffer(buf, dtype="<f8").reshape(shape).copy()


def load_checkpoint(path, vocab, cats):
    """Rebuild model (and optimizer state, if saved) from a checkpoint."""
    with open(path, "rb") as f:
        raw = f.read()
    r = _Reader(raw, path)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, this build reads {CHECKPOINT_VERSION}"
        )
    (blob_len,) = struct.unpack("<I", r.take(4, "config length"))
    blob = r.take(blob_len, "config")
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable config block: {exc}") from exc

    model_cfg = header["model"]
    if model_cfg["num_categories"] != len(cats):
        raise ConfigMismatchError(
            f"checkpoint built for {model_cfg['num_categories']} categories, "
            f"category set has {len(cats)}"
        )
    if model_cfg["vocab_size"] != len(vocab):
        raise ConfigMismatchError(
            f"checkpoint built for vocab size {model_cfg['vocab_size']}, "
            f"vocab file has {len(vocab)}"
        )
    if header["vocab_sha256"] != vocab.fingerprint():
        raise ConfigMismatchError(
            f"vocabulary fingerprint mismatch: checkpoint {header['vocab_sha256'][:12]}..., "
            f"loaded vocab {vocab.fingerprint()[:12]}..."
        )
    if header["categories_sha256"] != cats.fingerprint():
        raise ConfigMismatchError(
            f"category-set fingerprint mismatch: checkpoint "
            f"{header['categories_sha256'][:12]}..., loaded set {cats.fingerprint()[:12]}..."
        )

    config = ModelConfig(**model_cfg)
    model = Model(config, np.random.default_rng(0))
    manifest = [[name, list(t.shape)] for name, t in model.parameters()]
    if manifest != header["params"]:
        raise CorruptCheckpointError(
            f"{path}: parameter manifest does not match the stored config"
        )
    for name, tensor in model.parameters():
        tensor.data[...] = r.tensor(tensor.shape, name)

    adam_state = None
    opt = header["optimizer"]
    if opt is not None:
        adam_state = AdamState(
            lr=opt["lr"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"],
            step=opt["step"],
        )
        for name, tensor in model.parameters():
            adam_state.m[name] = r.tensor(tensor.shape, f"adam m[{name}]")
            adam_state.v[name] = r.tensor(tensor.shape, f"adam v[{name}]")
    if r.pos != len(raw):
        raise CorruptCheckpointError(
            f"{path}: {len(raw) - r.pos} trailing bytes after the last tensor"
        )
    return LoadedCheckpoint(model, adam_state, header.get("extra", {}))
