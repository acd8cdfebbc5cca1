"""Alternating-schedule training with AdamW and binary checkpoints.

One schedule cycle is m clip batches, then n phase batches, then l video
batches; training length is configured in cycles. Alternative modes reuse
the same total batch budget: "single" pools all levels into one loss per
step, "sequential" runs each level's full budget back-to-back instead of
interleaved, and "clip" / "clip_phase" restrict the levels (ablations).

Everything is a pure function of (config, corpus): the same seed gives
bit-identical parameters, logs, and checkpoints, and a saved checkpoint
carries the sampler state needed to resume mid-run bit-exactly.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass
from hashlib import sha256
from typing import Callable

import numpy as np

from .corpus import Corpus, sample_clip_batch, sample_phase_batch, sample_video_batch
from .encoders import (
    EncoderDims,
    ModelParams,
    TextEncoderParams,
    VisualEncoderParams,
)
from .errors import (
    CheckpointIntegrityError,
    ConfigError,
    InsufficientDataError,
    NumericError,
    SchemaVersionError,
)
from .numerics import Matrix
from .objectives import LossValue, loss_clip, loss_phase, loss_single, loss_video
from .seeding import substream

CKPT_MAGIC = b"HECV"
CKPT_VERSION = 1

MODES = ("hecvl", "single", "sequential", "clip", "clip_phase")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tau: float = 0.07
    m: int = 25
    n: int = 15
    l: int = 115
    b_clip: int = 16
    b_phase: int = 8
    b_video: int = 4
    k_clip: int = 4
    k_phase: int = 8
    k_video: int = 32
    cycles: int = 50
    seed: int = 0
    mode: str = "hecvl"
    d_tok: int = 32
    hidden: int = 64
    d_emb: int = 16

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        for field in ("m", "n", "l", "b_clip", "b_phase", "b_video",
                      "k_clip", "k_phase", "k_video", "cycles",
                      "d_tok", "hidden", "d_emb"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1, got {getattr(self, field)}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}, expected one of {MODES}")

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        """The published batch sizes; the plain constructor is desk scale."""
        merged = {"b_clip": 120, "b_phase": 60, "b_video": 10}
        merged.update(overrides)
        return cls(**merged)

    @property
    def total_batches(self) -> int:
        return self.cycles * (self.m + self.n + self.l)

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return sha256(payload).hexdigest()


def schedule_level(index: int, m: int, n: int, l: int) -> str:
    """Level of the batch at a global index under the alternating schedule."""
    if index < 0:
        raise ConfigError(f"batch index must be >= 0, got {index}")
    r = index % (m + n + l)
    if r < m:
        return "clip"
    if r < m + n:
        return "phase"
    return "video"


def _level_at(cfg: TrainConfig, index: int) -> str:
    if cfg.mode == "hecvl":
        return schedule_level(index, cfg.m, cfg.n, cfg.l)
    if cfg.mode == "single":
        return "single"
    if cfg.mode == "clip":
        return "clip"
    if cfg.mode == "clip_phase":
        r = index % (cfg.m + cfg.n)
        return "clip" if r < cfg.m else "phase"
    # sequential: the same per-level budget as hecvl, run back-to-back
    if index < cfg.cycles * cfg.m:
        return "clip"
    if index < cfg.cycles * (cfg.m + cfg.n):
        return "phase"
    return "video"


@dataclass(frozen=True)
class OptimizerState:
    first: dict[str, Matrix]
    second: dict[str, Matrix]
    step: int

    @classmethod
    def initialize(cls, params: ModelParams) -> "OptimizerState":
        zeros = {name: Matrix.zeros(m.rows, m.cols) for name, m in params.leaves()}
        return cls(first=dict(zeros), second=dict(zeros), step=0)


def adamw_step(params: ModelParams, grads: dict[str, Matrix],
               state: OptimizerState, cfg: TrainConfig) -> tuple[ModelParams, OptimizerState]:
    """One bias-corrected Adam update with decoupled weight decay."""
    t = state.step + 1
    new_first, new_second, updates = {}, {}, {}
    for name, theta in params.leaves():
        g = grads[name].array
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter block {name}")
        m1 = cfg.beta1 * state.first[name].array + (1.0 - cfg.beta1) * g
        m2 = cfg.beta2 * state.second[name].array + (1.0 - cfg.beta2) * (g * g)
        m1_hat = m1 / (1.0 - cfg.beta1 ** t)
        m2_hat = m2 / (1.0 - cfg.beta2 ** t)
        step = cfg.lr * (m1_hat / (np.sqrt(m2_hat) + cfg.eps))
        decay = cfg.lr * cfg.weight_decay * theta.array
        new_first[name] = Matrix._wrap(m1)
        new_second[name] = Matrix._wrap(m2)
        updates[name] = Matrix._wrap(theta.array - step - decay)
    return (
        params.with_leaves(updates),
        OptimizerState(first=new_first, second=new_second, step=t),
    )


@dataclass(frozen=True)
class Checkpoint:
    config: TrainConfig
    global_batch: int
    params: ModelParams
    opt_state: OptimizerState
    rng_state: dict
    version: int = CKPT_VERSION


@dataclass(frozen=True)
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]


def _loss_at_level(level: str, corpus: Corpus, cfg: TrainConfig, params: ModelParams,
                   rng: np.random.Generator) -> LossValue:
    if level == "clip":
        batch = sample_clip_batch(corpus, cfg.b_clip, rng, k=cfg.k_clip)
        return loss_clip(batch, params, cfg.tau)
    if level == "phase":
        batch = sample_phase_batch(corpus, cfg.b_phase, rng, k=cfg.k_phase)
        return loss_phase(batch, params, cfg.tau)
    if level == "video":
        batch = sample_video_batch(corpus, cfg.b_video, rng, k=cfg.k_video)
        return loss_video(batch, params, cfg.tau)
    clip = sample_clip_batch(corpus, cfg.b_clip, rng, k=cfg.k_clip)
    phase = sample_phase_batch(corpus, cfg.b_phase, rng, k=cfg.k_phase)
    video = sample_video_batch(corpus, cfg.b_video, rng, k=cfg.k_video)
    return loss_single(clip, phase, video, params, cfg.tau)


def _check_capacity(cfg: TrainConfig, corpus: Corpus) -> None:
    counts = corpus.pair_counts()
    used = {lvl for i in range(cfg.total_batches) for lvl in [_level_at(cfg, i)]}
    needs = {"clip": cfg.b_clip, "phase": cfg.b_phase, "video": cfg.b_video}
    if "single" in used:
        used = {"clip", "phase", "video"}
    for level in ("clip", "phase", "video"):
        if level in used and counts[level] < needs[level]:
            raise InsufficientDataError(
                f"{level} level: corpus has {counts[level]} pairs, "
                f"batch size {needs[level]} requested"
            )


def initialize_run(cfg: TrainConfig, corpus: Corpus) -> tuple[ModelParams, OptimizerState, np.random.Generator]:
    """Fresh parameters, optimizer state, and sampler stream for a run."""
    dims = EncoderDims(
        d_in=corpus.config.d_in,
        d_tok=cfg.d_tok,
        hidden=cfg.hidden,
        d_emb=cfg.d_emb,
        vocab_size=corpus.config.vocab_size,
    )
    rng = substream(cfg.seed, "train")
    params = ModelParams.initialize(dims, rng)
    return params, OptimizerState.initialize(params), rng


def train(cfg: TrainConfig, corpus: Corpus, log_path=None,
          resume: Checkpoint | None = None,
          on_batch: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the configured schedule to completion (or from a checkpoint)."""
    _check_capacity(cfg, corpus)
    if resume is not None:
        if resume.config != cfg:
            raise ConfigError("checkpoint was written under a different config")
        params, opt, start = resume.params, resume.opt_state, resume.global_batch
        rng = substream(cfg.seed, "train")
        rng.bit_generator.state = resume.rng_state
    else:
        params, opt, rng = initialize_run(cfg, corpus)
        start = 0

    log: list[dict] = []
    log_file = open(log_path, "a" if resume is not None else "w",
                    encoding="utf-8") if log_path else None
    try:
        for i in range(start, cfg.total_batches):
            level = _level_at(cfg, i)
            try:
                lv = _loss_at_level(level, corpus, cfg, params, rng)
                params, opt = adamw_step(params, lv.grads, opt, cfg)
            except NumericError as e:
                raise NumericError(f"batch {i} ({level} level): {e}") from e
            entry = {"batch": i, "level": level, "loss": lv.loss,
                     "pos_sim": lv.pos_sim, "neg_sim": lv.neg_sim}
            log.append(entry)
            if log_file:
                log_file.write(json.dumps(entry) + "\n")
            if on_batch:
                on_batch(entry)
    finally:
        if log_file:
            log_file.close()
    ckpt = Checkpoint(
        config=cfg,
        global_batch=cfg.total_batches,
        params=params,
        opt_state=opt,
        rng_state=rng.bit_generator.state,
    )
    return TrainResult(checkpoint=ckpt, log=log)


def untrained_checkpoint(cfg: TrainConfig, corpus: Corpus) -> Checkpoint:
    """Initialization-only checkpoint (the zero-shot chance baseline)."""
    params, opt, rng = initialize_run(cfg, corpus)
    return Checkpoint(config=cfg, global_batch=0, params=params, opt_state=opt,
                      rng_state=rng.bit_generator.state)


# ---------------------------------------------------------------------------
# Checkpoint file format: magic, version, JSON header, raw arrays, checksum.
# ---------------------------------------------------------------------------


def _array_entries(ckpt: Checkpoint) -> list[tuple[str, Matrix]]:
    entries = [(f"param:{name}", m) for name, m in ckpt.params.leaves()]
    entries += [(f"first:{name}", ckpt.opt_state.first[name])
                for name, _ in ckpt.params.leaves()]
    entries += [(f"second:{name}", ckpt.opt_state.second[name])
                for name, _ in ckpt.params.leaves()]
    return entries


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays = _array_entries(ckpt)
    header = {
        "config": asdict(ckpt.config),
        "config_digest": ckpt.config.digest(),
        "global_batch": ckpt.global_batch,
        "opt_step": ckpt.opt_state.step,
        "rng_state": ckpt.rng_state,
        "arrays": [{"name": n, "rows": m.rows, "cols": m.cols} for n, m in arrays],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<I", CKPT_VERSION)
    blob += struct.pack("<I", len(header_bytes))
    blob += header_bytes
    for _, m in arrays:
        raw = m.array.astype("<f8").tobytes()
        blob += struct.pack("<Q", len(raw))
        blob += raw
    blob += sha256(bytes(blob)).digest()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(bytes(blob))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(CKPT_MAGIC) + 8 + 32:
        raise CheckpointIntegrityError(f"{path}: file too short to be a checkpoint")
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointIntegrityError(
            f"{path}: bad magic {blob[:4]!r}, expected {CKPT_MAGIC!r}"
        )
    body, checksum = blob[:-32], blob[-32:]
    if sha256(body).digest() != checksum:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch, payload corrupted")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != CKPT_VERSION:
        raise SchemaVersionError(
            f"{path}: checkpoint version {version}, this build reads {CKPT_VERSION}"
        )
    header_len = struct.unpack_from("<I", blob, 8)[0]
    off = 12
    try:
        header = json.loads(blob[off:off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointIntegrityError(f"{path}: unreadable header: {e}") from e
    off += header_len
    arrays = {}
    for spec in header["arrays"]:
        n_bytes = struct.unpack_from("<Q", blob, off)[0]
        off += 8
        expected = spec["rows"] * spec["cols"] * 8
        if n_bytes != expected:
            raise CheckpointIntegrityError(
                f"{path}: array {spec['name']} has {n_bytes} bytes, expected {expected}"
            )
        data = np.frombuffer(body, dtype="<f8", count=spec["rows"] * spec["cols"],
                             offset=off)
        arrays[spec["name"]] = Matrix(data.reshape(spec["rows"], spec["cols"]))
        off += n_bytes
    cfg = TrainConfig(**header["config"])
    if cfg.digest() != header["config_digest"]:
        raise CheckpointIntegrityError(f"{path}: config digest mismatch")
    params = ModelParams(
        visual=VisualEncoderParams(
            w1=arrays["param:visual.w1"], b1=arrays["param:visual.b1"],
            w2=arrays["param:visual.w2"], b2=arrays["param:visual.b2"],
        ),
        text=TextEncoderParams(
            embed=arrays["param:text.embed"], w1=arrays["param:text.w1"],
            b1=arrays["param:text.b1"], w2=arrays["param:text.w2"],
            b2=arrays["param:text.b2"],
        ),
    )
    opt = OptimizerState(
        first={name: arrays[f"first:{name}"] for name, _ in params.leaves()},
        second={name: arrays[f"second:{name}"] for name, _ in params.leaves()},
        step=header["opt_step"],
    )
    return Checkpoint(
        config=cfg,
        global_batch=header["global_batch"],
        params=params,
        opt_state=opt,
        rng_state=_restore_rng_state(header["rng_state"]),
        version=version,
    )


def _restore_rng_state(state: dict) -> dict:
    # JSON round-trips Python's big ints exactly; only the nesting needs care.
    inner = dict(state["state"])
    return {
        "bit_generator": state["bit_generator"],
        "state": {k: int(v) for k, v in inner.items()},
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def run_to_batch(cfg: TrainConfig, corpus: Corpus, stop_at: int) -> Checkpoint:
    """Train the first `stop_at` batches only and return that checkpoint."""
    if not 0 < stop_at <= cfg.total_batches:
        raise ConfigError(f"stop_at must lie in [1, {cfg.total_batches}], got {stop_at}")
    params, opt, rng = initialize_run(cfg, corpus)
    for i in range(stop_at):
        level = _level_at(cfg, i)
        lv = _loss_at_level(level, corpus, cfg, params, rng)
        params, opt = adamw_step(params, lv.grads, opt, cfg)
    return Checkpoint(config=cfg, global_batch=stop_at, params=params,
                      opt_state=opt, rng_state=rng.bit_generator.state)
