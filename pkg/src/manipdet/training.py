"""Joint training of the detector: the five-term objective, an adaptive
optimizer with decoupled weight decay, warmup+cosine learning-rate schedule,
EMA bookkeeping for the momentum branch, negative-queue maintenance, and
versioned binary checkpoints.

Everything is deterministic given the config seed: data order, initialization,
and every numeric step reproduce bitwise across runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .contrastive import EmbeddingQueue, alignment_contrastive_loss
from .data import collate
from .grounding import box_grounding_loss
from .metrics import MetricsReport, PredictionRecord, compute_report
from .model import DetectorModel, ModelConfig, MomentumBranch
from .reasoning import binary_loss, multi_label_loss, token_grounding_loss

log = logging.getLogger(__name__)

LOSS_TERMS = ("mac", "img", "mlc", "bic", "tmg")


@dataclasses.dataclass
class TrainConfig:
    """Flat run configuration; also the schema of the key=value config file."""

    # model
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    image_layers: int = 4
    text_layers: int = 2
    agg_layers: int = 2
    d_proj: int = 32
    # optimization
    batch_size: int = 32
    epochs: int = 10
    peak_lr: float = 1e-4
    floor_lr: float = 1e-5
    warmup_steps: int = 200
    weight_decay: float = 0.02
    grad_clip: float = 1.0
    ema_momentum: float = 0.995
    temperature: float = 0.07
    distill_alpha: float = 0.4
    queue_size: int = 1024
    seed: int = 0
    # objective structure
    enable_mac: bool = True
    enable_img: bool = True
    enable_mlc: bool = True
    enable_bic: bool = True
    enable_tmg: bool = True
    weight_mac: float = 1.0
    weight_img: float = 1.0
    weight_mlc: float = 1.0
    weight_bic: float = 1.0
    weight_tmg: float = 1.0
    infonce_include_positive: bool = True

    def validate(self) -> None:
        positive = ("d_model", "n_heads", "d_ff", "image_layers", "text_layers",
                    "agg_layers", "d_proj", "batch_size", "epochs", "peak_lr",
                    "floor_lr", "warmup_steps", "ema_momentum", "temperature",
                    "queue_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"config field {name} must be positive")
        if not 0.0 <= self.distill_alpha <= 1.0:
            raise ValueError("distill_alpha must lie in [0, 1]")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model, n_heads=self.n_heads, d_ff=self.d_ff,
            image_layers=self.image_layers, text_layers=self.text_layers,
            agg_layers=self.agg_layers, d_proj=self.d_proj,
        )

    def canonical(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}"
                         for f in dataclasses.fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def parse_config_file(path) -> TrainConfig:
    """Read `key = value` lines (# comments allowed); unknown keys rejected."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value, got {raw!r}")
            key, _, text = (part.strip() for part in line.partition("="))
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            ftype = fields[key].type
            if ftype in ("bool", bool):
                if text.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(f"{path}:{lineno}: bad boolean {text!r}")
                values[key] = text.lower() in ("true", "1")
            elif ftype in ("int", int):
                values[key] = int(text)
            elif ftype in ("float", float):
                values[key] = float(text)
            else:
                values[key] = text
    config = TrainConfig(**values)
    config.validate()
    return config


def learning_rate(step: int, config: TrainConfig, total_steps: int) -> float:
    """Linear ramp to the peak over warmup, cosine decay to the floor after.

    Both phases meet at the peak: the ramp reaches it at ``warmup - 1`` (the
    ramp is (step+1)/warmup, so the very first step already trains) and the
    cosine starts there at ``warmup``.
    """
    if step < config.warmup_steps:
        return config.peak_lr * (step + 1) / config.warmup_steps
    span = max(1, total_steps - config.warmup_steps)
    t = min(1.0, (step - config.warmup_steps) / span)
    return config.floor_lr + 0.5 * (config.peak_lr - config.floor_lr) * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Per-coordinate adaptive moments with decoupled weight decay.

    Weight decay shrinks every parameter by lr*wd*theta regardless of its
    gradient; a step with any non-finite gradient is rejected wholesale.
    """

    def __init__(self, params: dict[str, Tensor], weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> bool:
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                log.error("non-finite gradient in %s; step rejected", name)
                return False
            grads[name] = g
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = p.data - lr * self.weight_decay * p.data - lr * update
        return True

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


@dataclasses.dataclass
class LossResult:
    total: Tensor
    breakdown: dict
    outputs: object
    momentum_targets: dict


def joint_loss(model: DetectorModel, momentum: MomentumBranch, batch: dict,
               image_queue: EmbeddingQueue, text_queue: EmbeddingQueue,
               config: TrainConfig) -> LossResult:
    """Five-term objective with per-term toggles; disabled terms vanish from
    both the value and the gradient."""
    outputs = model.forward(batch["images"], batch["tokens"], batch["pad_mask"])
    targets = momentum.forward_targets(batch["images"], batch["tokens"], batch["pad_mask"])

    terms: dict[str, Tensor] = {}
    if config.enable_mac:
        terms["mac"] = alignment_contrastive_loss(
            outputs.proj_image, outputs.proj_text,
            targets["proj_image"], targets["proj_text"],
            batch["pristine"], image_queue, text_queue,
            config.temperature, config.infonce_include_positive,
        ) * config.weight_mac
    if config.enable_img:
        terms["img"] = box_grounding_loss(
            outputs.box_logits, batch["y_box"], batch["has_box"]
        ) * config.weight_img
    if config.enable_mlc:
        terms["mlc"] = multi_label_loss(outputs.type_logits, batch["y_mul"]) * config.weight_mlc
    if config.enable_bic:
        terms["bic"] = binary_loss(outputs.binary_logits, batch["y_bin"]) * config.weight_bic
    if config.enable_tmg:
        terms["tmg"] = token_grounding_loss(
            outputs.token_logits,
            targets["token_logits"] if config.distill_alpha > 0 else None,
            batch["y_tok"], batch["pad_mask"], config.distill_alpha,
        ) * config.weight_tmg

    total = Tensor(0.0)
    for term in terms.values():
        total = total + term
    breakdown = {name: term.item() for name, term in terms.items()}
    breakdown["total"] = total.item()
    return LossResult(total, breakdown, outputs, targets)


class Trainer:
    """Owns all mutable training state: model, momentum twin, queues, optimizer."""

    def __init__(self, config: TrainConfig):
        config.validate()
        self.config = config
        self.model = DetectorModel(config.model_config(), seed=config.seed)
        self.momentum = MomentumBranch(self.model)
        self.image_queue = EmbeddingQueue(config.queue_size, config.d_proj)
        self.text_queue = EmbeddingQueue(config.queue_size, config.d_proj)
        self.optimizer = AdamW(self.model.parameters(), config.weight_decay)
        self.step_count = 0
        self._shuffle_rng = np.random.default_rng(np.random.SeedSequence([0x57EB, config.seed]))

    def train_step(self, samples, total_steps: int) -> dict:
        batch = collate(samples)
        self.optimizer.zero_grad()
        with Tape() as tape:
            result = joint_loss(self.model, self.momentum, batch,
                                self.image_queue, self.text_queue, self.config)
            if result.total.requires_grad:
                backward(tape, result.total)
        grad_norm = clip_gradients(self.model.parameters(), self.config.grad_clip)
        lr = learning_rate(self.step_count, self.config, total_steps)
        applied = self.optimizer.step(lr)
        if applied:
            self.momentum.update(self.model, self.config.ema_momentum)
        manipulated = ~batch["pristine"]
        self.image_queue.push(result.momentum_targets["proj_image"], manipulated)
        self.text_queue.push(result.momentum_targets["proj_text"], manipulated)
        self.step_count += 1
        result.breakdown.update(lr=lr, grad_norm=grad_norm, applied=applied)
        return result.breakdown

    def train(self, pool, epochs: int | None = None, log_fn=None) -> list[dict]:
        """Seeded-order epochs over full batches; returns the per-step logs."""
        if not pool:
            raise ValueError("training pool is empty")
        epochs = self.config.epochs if epochs is None else epochs
        steps_per_epoch = len(pool) // self.config.batch_size
        if steps_per_epoch == 0:
            raise ValueError("pool smaller than one batch")
        total_steps = epochs * steps_per_epoch
        if self.config.warmup_steps >= total_steps:
            log.warning("warmup (%d) spans the whole run (%d steps)",
                        self.config.warmup_steps, total_steps)
        history = []
        for epoch in range(epochs):
            order = self._shuffle_rng.permutation(len(pool))
            for b in range(steps_per_epoch):
                idx = order[b * self.config.batch_size:(b + 1) * self.config.batch_size]
                entry = self.train_step([pool[i] for i in idx], total_steps)
                entry.update(epoch=epoch, step=self.step_count)
                history.append(entry)
                if log_fn is not None:
                    log_fn(entry)
        return history

    def predict(self, samples) -> list[PredictionRecord]:
        """Probabilities for a list of samples (no tape, no state mutation)."""
        records = []
        for start in range(0, len(samples), self.config.batch_size):
            chunk = samples[start:start + self.config.batch_size]
            batch = collate(chunk)
            out = self.model.forward(batch["images"], batch["tokens"], batch["pad_mask"])
            fake = ad.softmax(out.binary_logits).data[:, 1]
            types = ad.sigmoid(out.type_logits).data
            boxes = ad.sigmoid(out.box_logits).data
            tokens = ad.softmax(out.token_logits).data[:, :, 1]
            for i, sample in enumerate(chunk):
                records.append(PredictionRecord(
                    id=sample.id, fake_prob=float(fake[i]), type_probs=types[i],
                    box=boxes[i], token_probs=tokens[i],
                ))
        return records

    def evaluate(self, samples) -> MetricsReport:
        return compute_report(self.predict(samples), samples)


# ---------------------------------------------------------------------------
# checkpointing

CHECKPOINT_MAGIC = b"HMRD"
CHECKPOINT_VERSION = 1


def _checkpoint_blobs(trainer: Trainer) -> dict[str, np.ndarray]:
    blobs = {}
    for name, p in trainer.model.parameters().items():
        blobs[f"model/{name}"] = p.data
    for name, p in trainer.momentum.parameters().items():
        blobs[f"momentum/{name}"] = p.data
    for name in trainer.optimizer.params:
        blobs[f"adam_m/{name}"] = trainer.optimizer.m[name]
        blobs[f"adam_v/{name}"] = trainer.optimizer.v[name]
    for tag, queue in (("image", trainer.image_queue), ("text", trainer.text_queue)):
        blobs[f"queue_{tag}/storage"] = queue.storage
        blobs[f"queue_{tag}/flags"] = queue.flags.astype(np.float64)
    return blobs


def save_checkpoint(trainer: Trainer, path) -> None:
    """Versioned binary container: magic, version, counters, then
    length-prefixed named float64 little-endian blobs."""
    blobs = _checkpoint_blobs(trainer)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        digest = trainer.config.digest().encode()
        fh.write(struct.pack("<I", len(digest)))
        fh.write(digest)
        fh.write(struct.pack("<QQ", trainer.step_count, trainer.optimizer.t))
        fh.write(struct.pack("<QQQQ", trainer.image_queue.length, trainer.image_queue.cursor,
                             trainer.text_queue.length, trainer.text_queue.cursor))
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs.items():
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


class CheckpointError(ValueError):
    pass


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("checkpoint truncated")
    return buf


def load_checkpoint(trainer: Trainer, path) -> None:
    """Restore a trainer in place; parses everything before touching state,
    so a corrupt file never leaves partial state behind."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (digest_len,) = struct.unpack("<I", _read_exact(fh, 4))
        digest = _read_exact(fh, digest_len).decode()
        step_count, adam_t = struct.unpack("<QQ", _read_exact(fh, 16))
        iq_len, iq_cur, tq_len, tq_cur = struct.unpack("<QQQQ", _read_exact(fh, 32))
        (n_blobs,) = struct.unpack("<I", _read_exact(fh, 4))
        blobs = {}
        for _ in range(n_blobs):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode()
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            (nbytes,) = struct.unpack("<Q", _read_exact(fh, 8))
            arr = np.frombuffer(_read_exact(fh, nbytes), dtype="<f8").reshape(shape)
            blobs[name] = arr.astype(np.float64)

    if digest != trainer.config.digest():
        log.warning("checkpoint config hash %s differs from current %s; loading anyway",
                    digest, trainer.config.digest())

    expected = _checkpoint_blobs(trainer)
    if set(blobs) != set(expected):
        raise CheckpointError("checkpoint parameter names do not match this model")
    for name, arr in expected.items():
        if blobs[name].shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}")

    for name, p in trainer.model.parameters().items():
        p.data = blobs[f"model/{name}"].copy()
    for name, p in trainer.momentum.parameters().items():
        p.data = blobs[f"momentum/{name}"].copy()
    for name in trainer.optimizer.params:
        trainer.optimizer.m[name] = blobs[f"adam_m/{name}"].copy()
        trainer.optimizer.v[name] = blobs[f"adam_v/{name}"].copy()
    trainer.optimizer.t = adam_t
    trainer.step_count = step_count
    for tag, queue, qlen, qcur in (("image", trainer.image_queue, iq_len, iq_cur),
                                   ("text", trainer.text_queue, tq_len, tq_cur)):
        queue.storage = blobs[f"queue_{tag}/storage"].copy()
        queue.flags = blobs[f"queue_{tag}/flags"].astype(bool)
        queue.length, queue.cursor = int(qlen), int(qcur)


# ---------------------------------------------------------------------------
# gradient-check suite over the whole objective


def _toy_setup(seed: int = 0):
    from .data import apply_image_manip, apply_text_manip, gen_pristine

    config = TrainConfig(
        d_model=8, n_heads=2, d_ff=16, image_layers=1, text_layers=1,
        agg_layers=1, d_proj=4, batch_size=2, queue_size=8, seed=seed,
        warmup_steps=1, epochs=1,
    )
    trainer = Trainer(config)
    rng = np.random.default_rng(seed)
    negs = rng.normal(size=(6, config.d_proj))
    negs /= np.linalg.norm(negs, axis=1, keepdims=True)
    trainer.image_queue.push(negs)
    trainer.text_queue.push(negs[::-1].copy())
    # one pristine anchor plus one doubly manipulated sample, so every loss
    # term sees the inputs it supervises (box, token bits, both classifiers)
    pristine = gen_pristine(seed)
    fake = apply_text_manip(apply_image_manip(gen_pristine(seed + 1), "FS", seed=3), "TA", seed=4)
    batch = collate([pristine, fake])
    return trainer, batch


def gradient_check_suite(coords_per_tensor: int = 3, seed: int = 0) -> dict[str, float]:
    """Finite-difference check of each loss term and the joint objective on a
    2-sample toy batch; returns the max relative error per term."""
    results = {}
    for term in list(LOSS_TERMS) + ["joint"]:
        trainer, batch = _toy_setup(seed)
        for name in LOSS_TERMS:
            setattr(trainer.config, f"enable_{name}", term in (name, "joint"))

        def loss_fn():
            return joint_loss(trainer.model, trainer.momentum, batch,
                              trainer.image_queue, trainer.text_queue, trainer.config).total

        errs = ad.finite_diff_params(loss_fn, trainer.model.parameters(),
                                     coords_per_tensor=coords_per_tensor, seed=seed)
        results[term] = max(errs.values())
    return results
