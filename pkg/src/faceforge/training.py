"""Optimization loop: Adam(0.001, 0.5, 0.999), batch 4, KL coefficient 1.

All randomness flows through named seeded streams (parameter init, sampling
noise, per-epoch data order), so runs are reproducible and ablation flags
change exactly one component. Checkpoints capture parameters, optimizer
moments, RNG state and the focal bank; resuming continues bit-identically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch

from .datasets import Batch, Corpus, iterate_batches, n_batches
from .focalbank import FocalBank, build_focal_bank
from .geometry import GROUP_NAMES
from .losses import LossBreakdown, batch_focal_weights, load_extractor, total_loss
from .nn import FaceVAE, ModelConfig, build_model

CHECKPOINT_FORMAT = "faceforge-checkpoint"
CHECKPOINT_VERSION = 1
METRICS_COLUMNS = ("step", "rec_l1", "rec_feat", "kl", "total")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    kl_coeff: float = 1.0
    seed: int = 0
    bank_k: int = 8
    extractor: str = "random"
    lambdas: tuple | None = None
    boundary_mode: str = "single"
    blur_sigma: float = 1.0
    mc_samples: int = 16
    checkpoint_every: int = 500
    # ablation switches; each alters exactly one component
    no_kl: bool = False
    gmm_prior: bool = False
    no_pixel_shuffle: bool = False
    no_wn: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        for b in (self.beta1, self.beta2):
            if not 0.0 <= b < 1.0:
                raise ValueError("Adam betas must lie in [0, 1)")
        if self.lambdas is not None:
            self.lambdas = tuple(float(l) for l in self.lambdas)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict):
        return cls(**d)


def apply_ablations(model_cfg: ModelConfig, cfg: TrainConfig) -> ModelConfig:
    d = model_cfg.to_dict()
    if cfg.no_pixel_shuffle:
        d["upsample"] = "transposed"
    if cfg.no_wn:
        d["norm"] = "none"
    return ModelConfig.from_dict(d)


def default_model_config(corpus: Corpus, cfg: TrainConfig) -> ModelConfig:
    h, w = corpus.size
    if h != w:
        raise ValueError("training expects square images")
    boundary_channels = 1 if cfg.boundary_mode == "single" else len(GROUP_NAMES)
    return ModelConfig(input_size=h, boundary_channels=boundary_channels)


@dataclass
class TrainState:
    model: FaceVAE
    optimizer: torch.optim.Adam
    bank: FocalBank
    cfg: TrainConfig
    model_cfg: ModelConfig
    noise_gen: torch.Generator
    step: int = 0
    running: dict = field(default_factory=dict)
    extractor: object = None
    weight_cache: dict = field(default_factory=dict, repr=False)

    def batch_weights(self, batch: Batch) -> np.ndarray:
        missing = [i for i, uid in enumerate(batch.uids) if uid not in self.weight_cache]
        if missing:
            fresh = batch_focal_weights(batch.boundaries[missing], self.bank)
            for row, i in enumerate(missing):
                self.weight_cache[batch.uids[i]] = fresh[row]
        return np.stack([self.weight_cache[uid] for uid in batch.uids])


def init_state(cfg: TrainConfig, model_cfg: ModelConfig, bank: FocalBank) -> TrainState:
    model_cfg = apply_ablations(model_cfg, cfg)
    model = build_model(model_cfg, seed=cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    noise_gen = torch.Generator().manual_seed(cfg.seed * 3 + 2)
    extractor = load_extractor(cfg.extractor, model_cfg.image_channels)
    return TrainState(model, optimizer, bank, cfg, model_cfg, noise_gen, extractor=extractor)


def train_step(state: TrainState, batch: Batch):
    """One forward/backward/Adam update; returns (state, LossBreakdown)."""
    cfg = state.cfg
    x = torch.as_tensor(batch.images)
    c = torch.as_tensor(batch.boundaries)
    noise = torch.randn(
        (x.shape[0], state.model_cfg.d_z), generator=state.noise_gen, dtype=x.dtype
    )
    loss, breakdown = total_loss(
        x,
        c,
        state.model,
        state.bank,
        extractor=state.extractor,
        lambdas=cfg.lambdas,
        kl_coeff=cfg.kl_coeff,
        include_kl=not cfg.no_kl,
        noise=noise,
        weights=state.batch_weights(batch),
        gmm_prior=cfg.gmm_prior,
        mc_samples=cfg.mc_samples,
        generator=state.noise_gen,
    )
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss at step {state.step}: {json.dumps(breakdown.to_dict())}"
        )
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.step += 1
    for key, val in breakdown.to_dict().items():
        if key != "step":
            prev = state.running.get(key, val)
            state.running[key] = 0.98 * prev + 0.02 * val
    return state, breakdown


def save_checkpoint(path, state: TrainState) -> Path:
    path = Path(path)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "step": state.step,
            "model_cfg": state.model_cfg.to_dict(),
            "train_cfg": state.cfg.to_dict(),
            "model_state": state.model.state_dict(),
            "optimizer_state": state.optimizer.state_dict(),
            "noise_rng_state": state.noise_gen.get_state(),
            "bank": state.bank.state_dict(),
            "running": dict(state.running),
        },
        path,
    )
    return path


def load_checkpoint(path) -> TrainState:
    blob = torch.load(path, weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a faceforge checkpoint")
    cfg = TrainConfig.from_dict(blob["train_cfg"])
    model_cfg = ModelConfig.from_dict(blob["model_cfg"])
    model = build_model(model_cfg, seed=cfg.seed)
    model.load_state_dict(blob["model_state"])
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    optimizer.load_state_dict(blob["optimizer_state"])
    noise_gen = torch.Generator()
    noise_gen.set_state(blob["noise_rng_state"])
    state = TrainState(
        model,
        optimizer,
        FocalBank.from_state_dict(blob["bank"]),
        cfg,
        model_cfg,
        noise_gen,
        step=int(blob["step"]),
        running=dict(blob.get("running", {})),
        extractor=load_extractor(cfg.extractor, model_cfg.image_channels),
    )
    return state


def load_model(path):
    """(model.eval(), bank, model_cfg, train_cfg) from a checkpoint, no optimizer."""
    blob = torch.load(path, weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a faceforge checkpoint")
    model_cfg = ModelConfig.from_dict(blob["model_cfg"])
    model = FaceVAE(model_cfg)
    model.load_state_dict(blob["model_state"])
    model.eval()
    bank = FocalBank.from_state_dict(blob["bank"])
    return model, bank, model_cfg, TrainConfig.from_dict(blob["train_cfg"])


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def run_training(
    cfg: TrainConfig,
    corpus: Corpus,
    out_dir,
    model_cfg: ModelConfig | None = None,
    bank: FocalBank | None = None,
    resume=None,
):
    """Train to cfg.steps, writing checkpoints plus a per-step metrics log.

    Returns (checkpoint_path, metrics_path, state). The metrics log is
    line-delimited JSON with keys (step, rec_l1, rec_feat, kl, total).
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise RuntimeError(f"checkpoint directory {out} is not writable: {e}") from e

    if model_cfg is None:
        model_cfg = default_model_config(corpus, cfg)
    if resume is not None:
        state = load_checkpoint(resume)
        state.cfg = TrainConfig.from_dict({**state.cfg.to_dict(), "steps": cfg.steps})
        cfg = state.cfg
    else:
        if bank is None:
            bank = build_focal_bank(
                corpus,
                k=cfg.bank_k,
                d_z=apply_ablations(model_cfg, cfg).d_z,
                seed=cfg.seed,
                boundary_mode=cfg.boundary_mode,
                blur_sigma=cfg.blur_sigma,
            )
        state = init_state(cfg, model_cfg, bank)

    metrics_path = out / "metrics.jsonl"
    ckpt_path = out / "checkpoint.pt"
    nb = n_batches(corpus, cfg.batch_size)
    mode = "a" if (resume is not None and metrics_path.exists()) else "w"
    with open(metrics_path, mode) as log:
        while state.step < cfg.steps:
            epoch = state.step // nb
            skip = state.step % nb
            stream = iterate_batches(
                corpus,
                cfg.batch_size,
                shuffle=True,
                seed=_epoch_seed(cfg.seed, epoch),
                boundary_mode=cfg.boundary_mode,
                blur_sigma=cfg.blur_sigma,
            )
            for i, batch in enumerate(stream):
                if i < skip:
                    continue
                state, breakdown = train_step(state, batch)
                log.write(json.dumps({"step": state.step, **breakdown.to_dict()}) + "\n")
                if state.step % cfg.checkpoint_every == 0:
                    save_checkpoint(ckpt_path, state)
                if state.step >= cfg.steps:
                    break
        log.flush()
    save_checkpoint(ckpt_path, state)
    return ckpt_path, metrics_path, state


def read_metrics(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def smoothed_series(rows: list[dict], key: str, window: int = 50) -> list[float]:
    """Trailing-window moving average of a metrics column."""
    vals = [float(r[key]) for r in rows]
    out = []
    for i in range(len(vals)):
        lo = max(0, i - window + 1)
        out.append(sum(vals[lo : i + 1]) / (i + 1 - lo))
    return out
