"""Multi-task BLSTM over a patient's response sequence.

Each step emits (classification logit, PHQ-8 score); the patient-level
prediction is the step-0 output, which the backward direction computes after
seeing the whole sequence.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import formats
from .losses import PROB_CLAMP, multitask_loss

log = logging.getLogger(__name__)

SECTION = b"DTCT"
STD_EPS = 1e-8
PHQ8_MAX = 24.0


@dataclass
class PatientSequence:
    patient_id: str
    features: np.ndarray  # (n_responses, input_dim)
    y_c: Optional[int] = None
    y_r: Optional[float] = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if self.features.shape[0] < 1:
            raise ValueError(f"patient {self.patient_id} has no responses")


@dataclass
class Standardizer:
    mean: np.ndarray
    var: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.mean.shape[0]:
            raise ValueError(f"feature width {x.shape[-1]} does not match standardizer width {self.mean.shape[0]}")
        return (x - self.mean) / np.sqrt(self.var + STD_EPS)

    def as_float32(self) -> "Standardizer":
        # what a checkpoint can hold; training uses this so reloads are exact
        return Standardizer(self.mean.astype(np.float32).astype(np.float64),
                            self.var.astype(np.float32).astype(np.float64))


def fit_standardizer(train: Sequence[PatientSequence]) -> Standardizer:
    if not train:
        raise ValueError("no training patients")
    pool = np.concatenate([p.features for p in train], axis=0)
    if pool.shape[0] < 2:
        raise ValueError("need at least 2 response rows to fit a standardizer")
    mean = pool.mean(axis=0)
    return Standardizer(mean, ((pool - mean) ** 2).mean(axis=0))


@dataclass(frozen=True)
class DetectorConfig:
    layers: int = 4
    hidden: int = 128
    dropout: float = 0.1
    learning_rate: float = 0.004
    epochs: int = 100
    accumulate: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0 or self.accumulate < 1:
            raise ValueError("epochs must be >= 0 and accumulate >= 1")


class BLSTMDetector(nn.Module):
    def __init__(self, input_dim: int, cfg: DetectorConfig, seed: int = 0):
        super().__init__()
        self.input_dim = input_dim
        self.lstm = nn.LSTM(
            input_dim, cfg.hidden, num_layers=cfg.layers, batch_first=True,
            bidirectional=True, dropout=cfg.dropout if cfg.layers > 1 else 0.0,
        )
        self.drop = nn.Dropout(cfg.dropout)
        self.head = nn.Linear(2 * cfg.hidden, 2)
        gen = torch.Generator().manual_seed(int(seed))
        bound = 1.0 / math.sqrt(cfg.hidden)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.empty_like(p).uniform_(-bound, bound, generator=gen))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, n, input_dim) -> (B, 2) taken at step 0
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"feature width {x.shape[-1]} does not match detector input {self.input_dim}")
        h, _ = self.lstm(x)
        return self.head(self.drop(h))[:, 0, :]


@dataclass
class Prediction:
    logit: float
    probability: float
    phq8_estimate: float
    binary: int


@dataclass
class Detector:
    model: BLSTMDetector
    standardizer: Standardizer
    config: DetectorConfig
    loss_trace: List[float] = field(default_factory=list)


def detector_forward(model: BLSTMDetector, features: np.ndarray) -> tuple:
    """Evaluation-mode step-0 output ``(logit, raw_score)`` for one standardized sequence."""
    x = np.atleast_2d(np.asarray(features))
    if x.shape[0] < 1:
        raise ValueError("empty response sequence")
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(torch.as_tensor(x, dtype=dtype).unsqueeze(0))[0]
    model.train(was_training)
    return float(out[0]), float(out[1])


def _check_labels(train: Sequence[PatientSequence]) -> None:
    if len(train) < 2:
        raise ValueError("need at least 2 training patients")
    for p in train:
        if p.y_c not in (0, 1) or p.y_r is None:
            raise ValueError(f"patient {p.patient_id} lacks labels")
    if len({p.y_c for p in train}) < 2:
        raise ValueError("degenerate labels: training set has a single class")


def train_detector(train: Sequence[PatientSequence], cfg: DetectorConfig,
                   standardizer: Standardizer, log_every: int = 0) -> Detector:
    """Adam on the summed BCE + Huber loss, one patient per forward pass.

    Gradients are accumulated over ``cfg.accumulate`` patients per optimizer step.
    """
    _check_labels(train)
    standardizer = standardizer.as_float32()
    torch.manual_seed(cfg.seed)
    input_dim = train[0].features.shape[1]
    model = BLSTMDetector(input_dim, cfg, seed=cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    xs = [torch.as_tensor(standardizer.apply(p.features), dtype=torch.float32).unsqueeze(0) for p in train]
    ycs = [torch.tensor(float(p.y_c)) for p in train]
    yrs = [torch.tensor(float(p.y_r)) for p in train]
    rng = np.random.default_rng(cfg.seed)

    trace: List[float] = []
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        total = 0.0
        for g in range(0, len(order), cfg.accumulate):
            group = order[g:g + cfg.accumulate]
            opt.zero_grad()
            for i in group:
                out = model(xs[i])[0]
                loss = multitask_loss(out[0], ycs[i], out[1], yrs[i])
                (loss / len(group)).backward()
                total += loss.item()
            opt.step()
        trace.append(total / len(train))
        if log_every and (epoch % log_every == 0 or epoch == 1):
            log.info("detector epoch %d/%d loss %.4f", epoch, cfg.epochs, trace[-1])
    model.eval()
    return Detector(model, standardizer, cfg, trace)


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def make_prediction(logit: float, raw_score: float) -> Prediction:
    p = min(max(sigmoid(logit), PROB_CLAMP), 1.0 - PROB_CLAMP)
    return Prediction(
        logit=logit,
        probability=p,
        phq8_estimate=min(max(raw_score, 0.0), PHQ8_MAX),
        binary=int(p >= 0.5),
    )


def predict(detector: Detector, patient: PatientSequence) -> Prediction:
    x = detector.standardizer.apply(patient.features)
    return make_prediction(*detector_forward(detector.model, x))


def write_predictions(path, ids: Sequence[str], preds: Sequence[Prediction]) -> None:
    with open(path, "w") as f:
        f.write("patient_id,probability,binary,phq8_estimate\n")
        for pid, p in zip(ids, preds):
            f.write(f"{pid},{p.probability:.6f},{p.binary},{p.phq8_estimate:.6f}\n")


def read_predictions(path) -> dict:
    out = {}
    with open(path) as f:
        next(f)
        for line in f:
            pid, prob, binary, score = line.strip().split(",")
            out[pid] = Prediction(float("nan"), float(prob), float(score), int(binary))
    return out


def save_detector(det: Detector, path) -> None:
    arrays = {k: v.detach().numpy().astype(np.float32) for k, v in det.model.state_dict().items()}
    arrays["standardizer.mean"] = det.standardizer.mean.astype(np.float32)
    arrays["standardizer.var"] = det.standardizer.var.astype(np.float32)
    meta = {"config": asdict(det.config), "input_dim": det.model.input_dim,
            "final_loss": det.loss_trace[-1] if det.loss_trace else None}
    with open(path, "wb") as f:
        formats.write_container(f, SECTION, meta, arrays)


def load_detector(path) -> Detector:
    with open(path, "rb") as f:
        _, meta, arrays = formats.read_container(f, SECTION)
    cfg = DetectorConfig(**meta["config"])
    model = BLSTMDetector(int(meta["input_dim"]), cfg)
    model.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items() if not k.startswith("standardizer.")})
    model.eval()
    std = Standardizer(arrays["standardizer.mean"].astype(np.float64), arrays["standardizer.var"].astype(np.float64))
    return Detector(model, std, cfg)
