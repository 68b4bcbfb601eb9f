"""Tool classifier: which tool turns the current dough into the target."""

import logging
from collections import Counter
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.model_selection import train_test_split

from . import autodiff as ad
from .checkpoint import adam_state_from, load_checkpoint, make_checkpoint, resume_epoch
from .config import ToolselConfig
from .errors import DataError
from .models import Checkpoint, Episode, PairSample, PointCloud, TrainResult
from .nn import MLP, Adam, Module, loss_eval
from .point_encoder import INPUT_SCALE, PointEncoder, batch_inputs, fixed_count

logger = logging.getLogger(__name__)

ARCHITECTURE = "toolsel-v1"


class ToolClassifier(Module):
    """Point encoder and an MLP over tool logits; starts uniform."""

    def __init__(
        self,
        labels: Sequence[str],
        widths: Sequence[int] = (64, 128),
        head_hidden: int = 64,
        n_points: int = 300,
        scale: float = INPUT_SCALE,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        self.labels = list(labels)
        self.head_hidden = head_hidden
        self.n_points = n_points
        self.scale = scale
        self.encoder = PointEncoder(widths, rng)
        self.head = MLP([self.encoder.out_features, head_hidden, len(self.labels)], rng, zero_last=True)

    def meta(self) -> Dict:
        return {
            "labels": self.labels,
            "widths": self.encoder.widths,
            "head_hidden": self.head_hidden,
            "n_points": self.n_points,
            "scale": self.scale,
        }

    def __call__(self, inputs: np.ndarray) -> ad.Tensor:
        return self.head(self.encoder(inputs))


def build_pairs(episodes: Sequence[Episode], n_points: Optional[int] = None, seed: int = 0) -> List[PairSample]:
    """Every (s_i, s_j), i < j, of each episode, labelled with its tool.

    Order: episode, then i, then j.
    """
    pairs = []
    for ep in episodes:
        states = ep.states()
        if n_points is not None:
            states = [PointCloud(fixed_count(s, n_points, seed)) for s in states]
        for i in range(len(states)):
            for j in range(i + 1, len(states)):
                pairs.append(PairSample(states[i], states[j], ep.tool))
    return pairs


def _split(pairs: Sequence[PairSample], fraction: float, seed: int):
    labels = [p.label for p in pairs]
    indices = np.arange(len(pairs))
    if fraction <= 0 or len(pairs) < 5:
        return indices, indices[:0]
    counts = Counter(labels)
    stratify = labels if min(counts.values()) >= 2 and fraction * len(pairs) >= len(counts) else None
    train, hold = train_test_split(indices, test_size=fraction, random_state=seed, stratify=stratify)
    return np.sort(train), np.sort(hold)


def _inputs(model: ToolClassifier, pairs: Sequence[PairSample]) -> np.ndarray:
    return batch_inputs(
        [fixed_count(p.before, model.n_points) for p in pairs],
        [fixed_count(p.after, model.n_points) for p in pairs],
        model.scale,
    )


def classifier_loss(model: ToolClassifier, pairs: Sequence[PairSample]) -> ad.Tensor:
    target = np.array([model.labels.index(p.label) for p in pairs])
    return loss_eval("softmax_ce", model(_inputs(model, pairs)), target)


def probabilities(model: ToolClassifier, current: PointCloud, target: PointCloud) -> np.ndarray:
    logits = model(_inputs(model, [PairSample(current, target, model.labels[0])]))
    return ad.softmax(logits.data.astype(np.float64))[0]


def predict_topk(model: ToolClassifier, current: PointCloud, target: PointCloud, k: int = 3) -> List[Tuple[str, float]]:
    """k most probable tools, descending; ties keep label (registry) order."""
    probs = probabilities(model, current, target)
    order = np.lexsort((np.arange(len(probs)), -probs))
    return [(model.labels[i], float(probs[i])) for i in order[:k]]


def accuracy(model: ToolClassifier, pairs: Sequence[PairSample], k: int = 1) -> float:
    """Fraction of pairs whose label is among the k most probable tools."""
    if not pairs:
        return float("nan")
    probs = ad.softmax(model(_inputs(model, pairs)).data.astype(np.float64))
    hits = 0
    for row, pair in zip(probs, pairs):
        order = np.lexsort((np.arange(len(row)), -row))[:k]
        hits += model.labels.index(pair.label) in order
    return hits / len(pairs)


def _to_checkpoint(model: ToolClassifier, cfg_hash: str, optimizer: Adam, epoch: int, curve) -> Checkpoint:
    meta = model.meta()
    meta["curve"] = list(curve)
    return make_checkpoint(
        ARCHITECTURE,
        [p.data for p in model.parameters()],
        {"encoder": model.encoder.widths, "head_hidden": model.head_hidden, "classes": len(model.labels)},
        cfg_hash,
        meta=meta,
        optimizer=optimizer.state,
        epoch=epoch,
    )


def train_toolsel(
    pairs: Sequence[PairSample],
    labels: Sequence[str],
    cfg: Optional[ToolselConfig] = None,
    seed: int = 0,
    cfg_hash: str = "",
    resume: Optional[Checkpoint] = None,
    on_epoch=None,
) -> TrainResult:
    """Train the classifier with cross-entropy over the tools in labels.

    Args:
        pairs: Labelled (before, after) pairs
        labels: Tool ids in registry order; only those present are classes

    Raises:
        DataError: DEGENERATE_LABELS with fewer than two classes present
    """
    cfg = cfg or ToolselConfig()
    present = [t for t in labels if any(p.label == t for p in pairs)]
    if len(present) < 2:
        raise DataError(f"tool classification needs at least two tools, got {present}", code="DEGENERATE_LABELS")
    train_idx, hold_idx = _split(pairs, cfg.holdout_fraction, seed)
    train = [pairs[i] for i in train_idx]
    hold = [pairs[i] for i in hold_idx]

    model = ToolClassifier(present, cfg.encoder_widths, cfg.head_hidden, cfg.n_points, seed=seed)
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    start_epoch, curve = 0, []
    if resume is not None:
        model = load_toolsel(resume)
        optimizer = Adam(model.parameters(), lr=cfg.lr, state=adam_state_from(resume))
        start_epoch = resume_epoch(resume)
        curve = [c for c in resume.meta.get("curve", []) if c["epoch"] < start_epoch]

    logger.info("Training tool classifier over %s on %d pairs (%d held out)", present, len(train), len(hold))
    params = model.parameters()
    epoch = start_epoch - 1
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(train))
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[b:b + cfg.batch_size]]
            with ad.Tape() as tape:
                loss = classifier_loss(model, batch)
            losses.append(loss.item())
            if not np.isfinite(losses[-1]):
                break
            optimizer.step(tape.backward(loss, params))
        value = float(np.mean(losses))
        curve.append({"epoch": epoch, "loss": value})
        if not np.isfinite(value):
            logger.error("Non-finite classifier loss at epoch %d; stopping", epoch)
            break
        logger.info("epoch %d/%d  loss %.6f", epoch + 1, cfg.epochs, value)
        if on_epoch is not None:
            on_epoch(epoch, _to_checkpoint(model, cfg_hash, optimizer, epoch, curve))

    metrics = {"train_pairs": float(len(train)), "classes": float(len(present))}
    if hold:
        metrics["holdout_accuracy"] = accuracy(model, hold)
        metrics["holdout_top3"] = accuracy(model, hold, k=3)
    final = curve[-1]["loss"] if curve else float("nan")
    return TrainResult(_to_checkpoint(model, cfg_hash, optimizer, epoch, curve), curve, final, metrics)


def load_toolsel(source: Union[str, Checkpoint]) -> ToolClassifier:
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source, ARCHITECTURE)
    if ckpt.architecture != ARCHITECTURE:
        raise DataError(f"checkpoint architecture '{ckpt.architecture}' is not {ARCHITECTURE}", code="ARCHITECTURE")
    meta = ckpt.meta
    model = ToolClassifier(meta["labels"], meta["widths"], meta["head_hidden"], meta["n_points"], meta["scale"])
    model.load_arrays(ckpt.params)
    return model
