"""Training loop: Adam with warmup + cosine decay, EMA weights, checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from . import dsp
from .data import AugmentConfig, ExcerptPair, Track, sample_excerpt
from .diffusion import SigmaDistribution, sample_sigma, training_loss
from .model import ModelConfig, SpectrogramUNet, build

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MAGIC = b"DIFFSEP\x00"


class NonFiniteLossError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 1e-4
    warmup_steps: int = 4000
    total_steps: int = 1_000_000
    batch_size: int = 12
    ema_decay: float = 0.999
    seed: int = 0
    checkpoint_every: int = 10_000
    p_mean: float = -1.2
    p_std: float = 1.2
    excerpt_seconds: float = 6.0
    grad_clip: float = 1.0  # 0 disables clipping
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    augment: bool = True

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def sigma_distribution(self) -> SigmaDistribution:
        return SigmaDistribution(self.p_mean, self.p_std)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}; valid: {sorted(known)}")
        return cls(**d)


PAPER_PROFILE = TrainConfig()
# Desk scale: short excerpts and a compressed schedule so a CPU run finishes in minutes.
DESK_PROFILE = TrainConfig(
    lr_init=1e-3,
    warmup_steps=100,
    total_steps=5000,
    batch_size=4,
    checkpoint_every=1000,
    excerpt_seconds=0.5,
    # short runs: a 0.999 average still carries weights from the first third
    ema_decay=0.995,
)
PROFILES = {"paper": PAPER_PROFILE, "desk": DESK_PROFILE}


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_init`` then half-cosine decay to zero."""
    if step < cfg.warmup_steps:
        return cfg.lr_init * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    progress = min(max(progress, 0.0), 1.0)
    return cfg.lr_init * 0.5 * (1 + math.cos(math.pi * progress))


@dataclass
class TrainState:
    net: SpectrogramUNet
    ema: SpectrogramUNet
    optimizer: torch.optim.Adam
    model_config: ModelConfig
    train_config: TrainConfig
    data_rng: np.random.Generator
    noise_gen: torch.Generator
    step: int = 0
    losses: list[float] = field(default_factory=list)


def seed_streams(seed: int) -> dict[str, int]:
    """Independent named sub-seeds derived from one seed."""
    names = ("init", "data", "noise", "sampler")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(c.generate_state(1, np.uint64)[0] >> 1) for n, c in zip(names, children)}


def _make_optimizer(net, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        net.parameters(), lr=lr_schedule(0, cfg), betas=cfg.adam_betas, eps=cfg.adam_eps
    )


def init_state(model_config: ModelConfig, train_config: TrainConfig) -> TrainState:
    seeds = seed_streams(train_config.seed)
    net = build(model_config, generator_seed=seeds["init"])
    ema = copy.deepcopy(net)
    for p in ema.parameters():
        p.requires_grad_(False)
    return TrainState(
        net=net,
        ema=ema,
        optimizer=_make_optimizer(net, train_config),
        model_config=model_config,
        train_config=train_config,
        data_rng=np.random.default_rng(seeds["data"]),
        noise_gen=torch.Generator().manual_seed(seeds["noise"]),
    )


def prepare_pair(
    pair: ExcerptPair, n_splits: int = dsp.N_SPLITS
) -> tuple[np.ndarray, np.ndarray]:
    """Peak-normalize by the mixture peak and encode ``(target, condition)``."""
    mix = dsp.peak_normalize(pair.mixture)
    target = dsp.StereoWaveform(pair.target.samples / mix.peak_gain)
    return (
        dsp.encode(target, n_splits=n_splits).values.astype(np.float32),
        dsp.encode(mix, n_splits=n_splits).values.astype(np.float32),
    )


def make_batch(pairs: Iterable[ExcerptPair]) -> tuple[torch.Tensor, torch.Tensor]:
    targets, conds = zip(*(prepare_pair(p) for p in pairs))
    return torch.from_numpy(np.stack(targets)), torch.from_numpy(np.stack(conds))


def estimate_sigma_data(
    tracks: list[Track],
    excerpt_seconds: float,
    n_excerpts: int = 256,
    seed: int = 0,
    augment: bool = True,
) -> float:
    """RMS of encoded training targets, the data scale the preconditioning expects."""
    if n_excerpts < 1:
        raise ValueError("n_excerpts must be >= 1")
    rng = np.random.default_rng(seed)
    aug = AugmentConfig() if augment else AugmentConfig.none()
    total = 0.0
    count = 0
    for _ in range(n_excerpts):
        target, _ = prepare_pair(sample_excerpt(tracks, excerpt_seconds, aug, rng))
        total += float(np.sum(target.astype(np.float64) ** 2))
        count += target.size
    value = math.sqrt(total / count)
    if not value > 0:
        raise ValueError("training targets are silent; cannot estimate sigma_data")
    return value


@torch.no_grad()
def ema_update(ema: torch.nn.Module, net: torch.nn.Module, decay: float) -> None:
    for pe, p in zip(ema.parameters(), net.parameters()):
        pe.mul_(decay).add_(p.detach(), alpha=1 - decay)


def train_step(state: TrainState, batch: list[ExcerptPair] | tuple[torch.Tensor, torch.Tensor]) -> float:
    """One optimizer update on ``batch``; returns the loss before the update."""
    cfg = state.train_config
    target, cond = make_batch(batch) if isinstance(batch, list) else batch
    sigma = sample_sigma(cfg.sigma_distribution, state.noise_gen, size=target.shape[0])
    state.net.train()
    loss = training_loss(state.net, target, cond, sigma, state.noise_gen, state.model_config.sigma_data)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss.item()} at step {state.step}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.net.parameters(), cfg.grad_clip)
    for group in state.optimizer.param_groups:
        group["lr"] = lr_schedule(state.step + 1, cfg)
    state.optimizer.step()
    ema_update(state.ema, state.net, cfg.ema_decay)
    state.step += 1
    value = float(loss.item())
    state.losses.append(value)
    return value


def train(
    tracks: list[Track],
    model_config: ModelConfig,
    train_config: TrainConfig,
    checkpoint_path: str | Path | None = None,
    state: TrainState | None = None,
    callback: Callable[[TrainState, float], None] | None = None,
) -> TrainState:
    """Run (or resume) training until ``total_steps``."""
    if state is None:
        state = init_state(model_config, train_config)
    cfg = state.train_config
    aug = AugmentConfig() if cfg.augment else AugmentConfig.none()
    while state.step < cfg.total_steps:
        batch = [
            sample_excerpt(tracks, cfg.excerpt_seconds, aug, state.data_rng)
            for _ in range(cfg.batch_size)
        ]
        loss = train_step(state, batch)
        if callback is not None:
            callback(state, loss)
        if state.step % 100 == 0:
            log.info("step %d loss %.4f lr %.2e", state.step, loss, lr_schedule(state.step, cfg))
        if checkpoint_path is not None and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(state, checkpoint_path)
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path)
    return state


# -- checkpoint format ------------------------------------------------------
#
#   magic      8 bytes  b"DIFFSEP\0"
#   version    uint32 little-endian
#   header_len uint64 little-endian
#   header     UTF-8 JSON (sorted keys): configs, step, rng states, loss history,
#              tensor index [{name, dtype, shape, offset, nbytes}], payload
#              length and CRC-32
#   payload    raw little-endian tensor bytes, concatenated in index order

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.uint8: "|u1",
}


def _state_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    tensors = {}
    for name, p in state.net.named_parameters():
        tensors[f"model.{name}"] = p.detach()
    for name, p in state.ema.named_parameters():
        tensors[f"ema.{name}"] = p.detach()
    opt = state.optimizer.state_dict()
    for idx, st in sorted(opt["state"].items()):
        for key, value in sorted(st.items()):
            tensors[f"opt.{idx}.{key}"] = torch.as_tensor(value)
    tensors["rng.noise"] = state.noise_gen.get_state()
    return tensors


def _encode_tensor(t: torch.Tensor) -> tuple[str, bytes]:
    t = t.detach().cpu().contiguous()
    if t.dtype not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {t.dtype}")
    code = _DTYPES[t.dtype]
    return code, t.numpy().astype(np.dtype(code), copy=False).tobytes()


def checkpoint_bytes(state: TrainState) -> bytes:
    index, chunks, offset = [], [], 0
    for name, tensor in _state_tensors(state).items():
        code, raw = _encode_tensor(tensor)
        index.append(
            {"name": name, "dtype": code, "shape": list(tensor.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    opt = state.optimizer.state_dict()
    header = {
        "schema_version": SCHEMA_VERSION,
        "model_config": state.model_config.to_dict(),
        "train_config": state.train_config.to_dict(),
        "step": state.step,
        "losses": state.losses,
        "data_rng": state.data_rng.bit_generator.state,
        "optimizer_groups": [
            {k: v for k, v in g.items() if k != "params"} for g in opt["param_groups"]
        ],
        "tensors": index,
        "payload_len": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<IQ", SCHEMA_VERSION, len(head)) + head + payload


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Atomically write ``state`` (write to a temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = checkpoint_bytes(state)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Parse and validate a checkpoint file into ``(header, tensors)``."""
    blob = Path(path).read_bytes()
    fixed = len(MAGIC) + 12
    if len(blob) < fixed or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a diffsep checkpoint")
    version, head_len = struct.unpack("<IQ", blob[len(MAGIC) : fixed])
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: schema version {version}, expected {SCHEMA_VERSION}")
    if len(blob) < fixed + head_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[fixed : fixed + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: corrupt header ({err})") from err
    payload = blob[fixed + head_len :]
    if len(payload) != header["payload_len"]:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, header declares {header['payload_len']}"
        )
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))
    return header, tensors


def _load_params(net: torch.nn.Module, tensors: dict, prefix: str) -> None:
    with torch.no_grad():
        for name, p in net.named_parameters():
            key = f"{prefix}.{name}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint lacks {key}")
            if tuple(tensors[key].shape) != tuple(p.shape):
                raise CheckpointError(f"{key}: shape {tuple(tensors[key].shape)} != {tuple(p.shape)}")
            p.copy_(tensors[key])


def load_checkpoint(path: str | Path) -> TrainState:
    header, tensors = read_checkpoint(path)
    model_config = ModelConfig.from_dict(header["model_config"])
    train_config = TrainConfig.from_dict(header["train_config"])
    state = init_state(model_config, train_config)
    _load_params(state.net, tensors, "model")
    _load_params(state.ema, tensors, "ema")

    opt_state = {"state": {}, "param_groups": []}
    n_params = len(list(state.net.parameters()))
    for idx in range(n_params):
        entries = {
            key.split(".", 2)[2]: t.clone()
            for key, t in tensors.items()
            if key.startswith(f"opt.{idx}.")
        }
        if entries:
            opt_state["state"][idx] = entries
    for group in header["optimizer_groups"]:
        g = dict(group)
        g["betas"] = tuple(g["betas"])
        opt_state["param_groups"].append(g)
    opt_state["param_groups"][0]["params"] = list(range(n_params))
    state.optimizer.load_state_dict(opt_state)

    state.step = header["step"]
    state.losses = list(header["losses"])
    state.data_rng.bit_generator.state = header["data_rng"]
    state.noise_gen.set_state(tensors["rng.noise"].clone())
    return state


def load_denoiser_net(path: str | Path, use_ema: bool = True) -> SpectrogramUNet:
    """Network weights for inference (EMA by default)."""
    header, tensors = read_checkpoint(path)
    net = build(ModelConfig.from_dict(header["model_config"]))
    _load_params(net, tensors, "ema" if use_ema else "model")
    net.eval()
    return net


def with_overrides(cfg: TrainConfig, **overrides) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
