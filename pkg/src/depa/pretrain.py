"""Convolutional encoder-decoder that predicts a center spectrogram block from its context.

The encoder is fully convolutional over time and average-pools the time axis
before projecting to the embedding, so the same weights embed the fixed-size
training contexts and variable-length responses.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from . import formats
from .losses import embed_loss
from .slicing import SliceConfig, TrainingSample

log = logging.getLogger(__name__)

SECTION = b"PRTN"


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 256
    channels: Tuple[int, int, int] = (32, 64, 128)
    kernel_size: int = 3
    pool: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 3:
            raise ValueError("encoder needs exactly 3 downsampling blocks")
        if self.embed_dim < 1 or min(self.channels) < 1:
            raise ValueError("embed_dim and channel widths must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        if self.pool < 1:
            raise ValueError("pool must be positive")

    @property
    def min_frames(self) -> int:
        return self.pool ** 3


@dataclass(frozen=True)
class DecoderConfig:
    channels: Tuple[int, int, int] = (128, 64, 32)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 3:
            raise ValueError("decoder needs exactly 3 upsampling blocks")
        if min(self.channels) < 1:
            raise ValueError("channel widths must be positive")


@dataclass(frozen=True)
class PretrainConfig:
    learning_rate: float = 0.004
    epochs: int = 400
    batch_size: int = 32
    seed: int = 0
    betas: Tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def _uniform_fan_in_(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = m.weight.shape[0] * m.weight[0, 0].numel()
            else:
                fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.empty_like(m.weight).uniform_(-bound, bound, generator=gen))
                if m.bias is not None:
                    m.bias.copy_(torch.empty_like(m.bias).uniform_(-bound, bound, generator=gen))


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, n_features: int):
        super().__init__()
        if n_features < cfg.min_frames:
            raise ValueError(f"need at least {cfg.min_frames} feature bins, got {n_features}")
        self.cfg = cfg
        self.n_features = n_features
        blocks = []
        c_in = 1
        for c_out in cfg.channels:
            blocks += [
                nn.Conv2d(c_in, c_out, cfg.kernel_size, padding=cfg.kernel_size // 2),
                nn.AvgPool2d(cfg.pool),
                nn.BatchNorm2d(c_out, momentum=0.1),
                nn.ReLU(),
            ]
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        f_out = n_features // cfg.min_frames
        self.proj = nn.Linear(cfg.channels[-1] * f_out, cfg.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, S, F) -> (B, embed_dim)
        if x.shape[1] < self.cfg.min_frames:
            raise ValueError("segment too short")
        if x.shape[2] != self.n_features:
            raise ValueError("feature dimension mismatch")
        h = self.blocks(x.unsqueeze(1))
        h = h.mean(dim=2)
        return self.proj(h.flatten(1))


class Decoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, embed_dim: int, T: int, F: int):
        super().__init__()
        self.cfg, self.embed_dim, self.T, self.F = cfg, embed_dim, T, F
        self.t0, self.f0 = -(-T // 8), -(-F // 8)
        c = cfg.channels
        self.seed = nn.Linear(embed_dim, c[0] * self.t0 * self.f0)
        blocks = []
        for c_in, c_out in ((c[0], c[1]), (c[1], c[2]), (c[2], c[2])):
            blocks += [
                nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1),
                nn.BatchNorm2d(c_out, momentum=0.1),
                nn.ReLU(),
            ]
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Conv2d(c[2], 1, 1)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        # v: (B, embed_dim) -> (B, T, F)
        if v.shape[-1] != self.embed_dim:
            raise ValueError(f"embedding has {v.shape[-1]} entries, expected {self.embed_dim}")
        h = self.seed(v).view(v.shape[0], self.cfg.channels[0], self.t0, self.f0)
        out = self.head(self.blocks(h)).squeeze(1)
        return out[:, : self.T, : self.F]


class EncoderDecoder(nn.Module):
    def __init__(self, enc: EncoderConfig, dec: DecoderConfig, T: int, F: int, seed: int = 0):
        super().__init__()
        self.encoder = Encoder(enc, F)
        self.decoder = Decoder(dec, enc.embed_dim, T, F)
        gen = torch.Generator().manual_seed(int(seed))
        _uniform_fan_in_(self, gen)

    def forward(self, context: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(context))


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    config: dict
    epoch: int = 0
    final_loss: float = float("nan")
    loss_trace: List[float] = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return int(self.config["slicing"]["F"])

    @property
    def embed_dim(self) -> int:
        return int(self.config["encoder"]["embed_dim"])

    def build_model(self) -> EncoderDecoder:
        return model_from_checkpoint(self)


def _configs_from_dict(config: dict):
    s = SliceConfig(**config["slicing"])
    return s, EncoderConfig(**config["encoder"]), DecoderConfig(**config["decoder"])


def make_config_echo(slicing: SliceConfig, enc: EncoderConfig, dec: DecoderConfig,
                     cfg: PretrainConfig | None = None) -> dict:
    echo = {"slicing": asdict(slicing), "encoder": asdict(enc), "decoder": asdict(dec)}
    if cfg is not None:
        echo["pretrain"] = asdict(cfg)
    return json_safe(echo)


def json_safe(d):
    if isinstance(d, dict):
        return {k: json_safe(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [json_safe(v) for v in d]
    return d


def state_to_numpy(model: nn.Module) -> Dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}


def load_state(model: nn.Module, params: Dict[str, np.ndarray]) -> None:
    target = model.state_dict()
    missing = set(target) - set(params)
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)}")
    model.load_state_dict({k: torch.as_tensor(params[k]).to(target[k].dtype) for k in target})


def model_from_checkpoint(ckpt: Checkpoint) -> EncoderDecoder:
    slicing, enc, dec = _configs_from_dict(ckpt.config)
    model = EncoderDecoder(enc, dec, slicing.T, slicing.F)
    load_state(model, ckpt.params)
    model.eval()
    return model


def random_checkpoint(slicing: SliceConfig, enc: EncoderConfig, dec: DecoderConfig, seed: int = 0) -> Checkpoint:
    """Untrained encoder-decoder, used as the no-pretraining baseline."""
    model = EncoderDecoder(enc, dec, slicing.T, slicing.F, seed=seed)
    return Checkpoint(state_to_numpy(model), make_config_echo(slicing, enc, dec), epoch=0)


def _as_model(model_or_ckpt) -> EncoderDecoder:
    if isinstance(model_or_ckpt, Checkpoint):
        return model_from_checkpoint(model_or_ckpt)
    return model_or_ckpt


def encoder_forward(model, x: np.ndarray) -> np.ndarray:
    """Embed one S' x F matrix (eval mode, running batchnorm statistics)."""
    model = _as_model(model)
    enc = model.encoder
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != enc.n_features:
        raise ValueError("feature dimension mismatch")
    dtype = next(enc.parameters()).dtype
    was_training = enc.training
    enc.eval()
    with torch.no_grad():
        v = enc(torch.as_tensor(x, dtype=dtype).unsqueeze(0))[0]
    enc.train(was_training)
    return v.numpy()


def decoder_forward(model, v: np.ndarray) -> np.ndarray:
    model = _as_model(model)
    dec = model.decoder
    v = np.asarray(v).reshape(-1)
    if v.size != dec.embed_dim:
        raise ValueError(f"embedding has {v.size} entries, expected {dec.embed_dim}")
    dtype = next(dec.parameters()).dtype
    was_training = dec.training
    dec.eval()
    with torch.no_grad():
        out = dec(torch.as_tensor(v, dtype=dtype).unsqueeze(0))[0]
    dec.train(was_training)
    return out.numpy()


class PretrainDiverged(RuntimeError):
    def __init__(self, epoch: int, checkpoint: Checkpoint):
        super().__init__(f"diverged at epoch {epoch}")
        self.epoch = epoch
        self.checkpoint = checkpoint


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # a lone trailing sample would give batchnorm a single value per channel
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def pretrain(
    samples: Sequence[TrainingSample],
    cfg: PretrainConfig,
    enc: EncoderConfig,
    dec: DecoderConfig,
    slicing: SliceConfig,
    log_every: int = 0,
) -> Checkpoint:
    """Fit the encoder-decoder with Adam on mean center-reconstruction error."""
    if len(samples) == 0:
        raise ValueError("empty training archive")
    shapes = {(s.context.shape, s.center.shape) for s in samples}
    expected = ((slicing.context_frames, slicing.F), (slicing.T, slicing.F))
    if shapes != {expected}:
        raise ValueError(f"archive shapes {sorted(shapes)} do not match slicing config {expected}")

    torch.manual_seed(cfg.seed)
    model = EncoderDecoder(enc, dec, slicing.T, slicing.F, seed=cfg.seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    contexts = torch.as_tensor(np.stack([s.context for s in samples]), dtype=torch.float32)
    centers = torch.as_tensor(np.stack([s.center for s in samples]), dtype=torch.float32)
    rng = np.random.default_rng(cfg.seed)
    echo = make_config_echo(slicing, enc, dec, cfg)

    trace: List[float] = []
    good = Checkpoint(state_to_numpy(model), echo, epoch=0)
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for idx in _batches(len(samples), cfg.batch_size, rng):
            ix = torch.as_tensor(idx)
            loss = embed_loss(centers[ix], model(contexts[ix]))
            if not torch.isfinite(loss):
                log.error("non-finite loss at epoch %d", epoch)
                raise PretrainDiverged(epoch, good)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        mean = total / len(samples)
        trace.append(mean)
        good = Checkpoint(state_to_numpy(model), echo, epoch=epoch, final_loss=mean, loss_trace=list(trace))
        if log_every and (epoch % log_every == 0 or epoch == 1):
            log.info("pretrain epoch %d/%d loss %.5f", epoch, cfg.epochs, mean)
    return good


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {"config": ckpt.config, "epoch": ckpt.epoch, "final_loss": ckpt.final_loss}
    with open(path, "wb") as f:
        formats.write_container(f, SECTION, meta, ckpt.params)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        _, meta, arrays = formats.read_container(f, SECTION)
    return Checkpoint(arrays, meta["config"], epoch=int(meta["epoch"]), final_loss=float(meta["final_loss"]))


def write_loss_csv(path, trace: Sequence[float]) -> None:
    with open(path, "w") as f:
        f.write("epoch,mean_loss\n")
        for i, v in enumerate(trace, 1):
            f.write(f"{i},{v!r}\n")
