"""Goal-conditioned multi-bin policy: (current, subgoal) clouds -> tool action.

One policy per tool. The policy is trained on synthetic triples produced by
rolling a dynamics model from recorded dough states under random actions.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.model_selection import train_test_split

from . import autodiff as ad
from .checkpoint import adam_state_from, load_checkpoint, make_checkpoint, resume_epoch
from .config import PolicyConfig
from .dynamics import DynModel, rollout
from .errors import DataError
from .models import Action, BinSpec, Checkpoint, Episode, ParamKind, PointCloud, PolicySample, ToolSpec, TrainResult
from .multibin import bins_for_tool, decode, encode_target
from .nn import MLP, Adam, Module, loss_eval
from .point_encoder import INPUT_SCALE, PointEncoder, batch_inputs, fixed_count

logger = logging.getLogger(__name__)

ARCHITECTURE = "policy-multibin-v1"


class PolicyModel(Module):
    """Point encoder with a confidence head and a residual head per parameter.

    Residual heads predict (value - center) / width for every bin.
    """

    def __init__(
        self,
        tool: str,
        kinds: Sequence[ParamKind],
        bins: Sequence[BinSpec],
        widths: Sequence[int] = (64, 128),
        head_hidden: int = 128,
        n_points: int = 300,
        scale: float = INPUT_SCALE,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        self.tool = tool
        self.kinds = list(kinds)
        self.bins = list(bins)
        self.n_points = n_points
        self.scale = scale
        self.head_hidden = head_hidden
        self.encoder = PointEncoder(widths, rng)
        feat = self.encoder.out_features
        self.conf_heads = [MLP([feat, head_hidden, b.count], rng, zero_last=True) for b in self.bins]
        self.delta_heads = [MLP([feat, head_hidden, b.count], rng, zero_last=True) for b in self.bins]

    @classmethod
    def for_tool(cls, spec: ToolSpec, cfg: Optional[PolicyConfig] = None, seed: int = 0) -> "PolicyModel":
        cfg = cfg or PolicyConfig()
        return cls(
            spec.id,
            [p.kind for p in spec.params],
            bins_for_tool(spec, cfg),
            cfg.encoder_widths,
            cfg.head_hidden,
            cfg.n_points,
            seed=seed,
        )

    def meta(self) -> Dict:
        return {
            "tool": self.tool,
            "kinds": [k.value for k in self.kinds],
            "bins": [[b.low, b.high, b.n] for b in self.bins],
            "widths": self.encoder.widths,
            "head_hidden": self.head_hidden,
            "n_points": self.n_points,
            "scale": self.scale,
        }

    def __call__(self, inputs: np.ndarray) -> List[Tuple[ad.Tensor, ad.Tensor]]:
        """(B, 2n, 4) inputs -> per parameter (confidence logits, residuals), each (B, count)."""
        feat = self.encoder(inputs)
        return [(conf(feat), delta(feat)) for conf, delta in zip(self.conf_heads, self.delta_heads)]


def _targets(model: PolicyModel, params: np.ndarray):
    """Per parameter: (probabilities, mask, residual / width), each (B, count)."""
    out = []
    for j, bins in enumerate(model.bins):
        encoded = [encode_target(v, bins) for v in params[:, j]]
        mask = np.stack([e.mask for e in encoded]).astype(np.float64)
        probs = np.stack([e.probabilities for e in encoded])
        deltas = np.stack([e.deltas for e in encoded]) / bins.width
        out.append((probs, mask, deltas))
    return out


def multibin_loss(model: PolicyModel, inputs: np.ndarray, params: np.ndarray, w: float = 1.0) -> ad.Tensor:
    """Sum over parameters of confidence loss + w * localization loss, batch mean.

    The confidence term is the KL divergence from the uniform covering-bin
    target, so a perfect fit scores zero. Localization acts on covering bins
    only: smooth L1 on residuals, or 1 - cos of the angle error for rotations.
    """
    batch = len(params)
    total = ad.Tensor(0.0)
    for (conf, delta), kind, bins, (probs, mask, target) in zip(model(inputs), model.kinds, model.bins, _targets(model, params)):
        entropy = float(-(probs * np.log(np.where(probs > 0, probs, 1.0))).sum(axis=1).mean())
        conf_loss = loss_eval("softmax_ce", conf, probs) - entropy
        if kind == ParamKind.ROTATION:
            per_bin = loss_eval("neg_cosine", delta * bins.width, target * bins.width, reduction="none") + 1.0
        else:
            per_bin = loss_eval("smooth_l1", delta, target, reduction="none")
        loc_loss = (per_bin * mask).sum() * (1.0 / batch)
        total = total + conf_loss + w * loc_loss
    return total


def predict_params(model: PolicyModel, currents: Sequence[np.ndarray], goals: Sequence[np.ndarray]) -> np.ndarray:
    """(B, n_params) decoded parameters for a batch of equal-size pairs."""
    heads = model(batch_inputs(currents, goals, model.scale))
    out = np.zeros((len(currents), len(model.bins)))
    for j, ((conf, delta), bins) in enumerate(zip(heads, model.bins)):
        for i in range(len(currents)):
            out[i, j] = decode(conf.data[i], delta.data[i] * bins.width, bins)
    return out


def infer_action(model: PolicyModel, current: PointCloud, subgoal: PointCloud) -> Action:
    """Single forward pass; clouds of another size are resampled first."""
    a = fixed_count(current, model.n_points)
    b = fixed_count(subgoal, model.n_points)
    return Action(model.tool, predict_params(model, [a], [b])[0])


def initial_states(episodes: Sequence[Episode], n_states: int, seed: int) -> List[PointCloud]:
    """Pick n_states recorded dough states (with replacement if too few)."""
    states = [s for ep in episodes for s in ep.states()]
    if not states:
        raise DataError("no recorded dough states to start from", code="NO_DATA")
    rng = np.random.default_rng([seed, 2])
    picked = rng.choice(len(states), size=n_states, replace=n_states > len(states))
    return [states[i] for i in picked]


def _walks_from(model: DynModel, spec: ToolSpec, local_points, state: PointCloud, cfg: PolicyConfig, seed_seq: np.random.SeedSequence) -> List[PolicySample]:
    rng = np.random.default_rng(seed_seq)
    samples = []
    for _ in range(cfg.actions_per_state):
        current = state
        for _ in range(cfg.walk_length):
            action = Action(spec.id, rng.uniform(spec.lows, spec.highs))
            result = rollout(model, current, spec, local_points, [action])[-1]
            samples.append(PolicySample(
                fixed_count(current, cfg.n_points),
                fixed_count(result, cfg.n_points),
                action.params.copy(),
            ))
            current = result
    return samples


def gen_synthetic_dataset(
    model: DynModel,
    spec: ToolSpec,
    local_points: List[np.ndarray],
    states: Sequence[PointCloud],
    cfg: Optional[PolicyConfig] = None,
    seed: int = 0,
    threads: int = 1,
) -> List[PolicySample]:
    """Triples (current, predicted result, action) from random action walks.

    Every start state gets its own child seed, and results are collected in
    state order, so the dataset does not depend on the thread count.

    Returns:
        len(states) * actions_per_state * walk_length triples
    """
    cfg = cfg or PolicyConfig()
    children = np.random.SeedSequence(seed).spawn(len(states))
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = [pool.submit(_walks_from, model, spec, local_points, s, cfg, c) for s, c in zip(states, children)]
        samples = [sample for f in futures for sample in f.result()]
    logger.info("Generated %d synthetic %s triples from %d states", len(samples), spec.id, len(states))
    return samples


def _stack(samples: Sequence[PolicySample]):
    return [s.current for s in samples], [s.result for s in samples], np.stack([s.params for s in samples])


def within_half_width(model: PolicyModel, samples: Sequence[PolicySample]) -> np.ndarray:
    """(B, n_params) booleans: |predicted - true| below the bin half-width."""
    currents, results, params = _stack(samples)
    pred = predict_params(model, currents, results)
    half = np.array([b.width / 2.0 for b in model.bins])
    return np.abs(pred - params) < half


def _to_checkpoint(model: PolicyModel, cfg_hash: str, optimizer: Adam, epoch: int, curve, w: float) -> Checkpoint:
    meta = model.meta()
    meta.update({"w": w, "curve": list(curve)})
    return make_checkpoint(
        ARCHITECTURE,
        [p.data for p in model.parameters()],
        {"encoder": model.encoder.widths, "head_hidden": model.head_hidden, "bins": [b.count for b in model.bins]},
        cfg_hash,
        meta=meta,
        optimizer=optimizer.state,
        epoch=epoch,
    )


def train_policy(
    samples: Sequence[PolicySample],
    spec: ToolSpec,
    cfg: Optional[PolicyConfig] = None,
    seed: int = 0,
    cfg_hash: str = "",
    resume: Optional[Checkpoint] = None,
    on_epoch=None,
) -> TrainResult:
    """Fit a multi-bin policy on synthetic triples.

    Raises:
        DataError: NO_DATA when samples is empty
    """
    cfg = cfg or PolicyConfig()
    if not samples:
        raise DataError("policy training needs at least one triple", code="NO_DATA")
    indices = np.arange(len(samples))
    if cfg.holdout_fraction > 0 and len(samples) >= 5:
        train_idx, hold_idx = train_test_split(indices, test_size=cfg.holdout_fraction, random_state=seed)
    else:
        train_idx, hold_idx = indices, indices[:0]
    train = [samples[i] for i in sorted(train_idx)]
    hold = [samples[i] for i in sorted(hold_idx)]

    model = PolicyModel.for_tool(spec, cfg, seed)
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    start_epoch, curve = 0, []
    if resume is not None:
        model = load_policy(resume)
        optimizer = Adam(model.parameters(), lr=cfg.lr, state=adam_state_from(resume))
        start_epoch = resume_epoch(resume)
        curve = [c for c in resume.meta.get("curve", []) if c["epoch"] < start_epoch]

    logger.info("Training %s policy on %d triples (%d held out)", spec.id, len(train), len(hold))
    params = model.parameters()
    epoch = start_epoch - 1
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(train))
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[b:b + cfg.batch_size]]
            currents, results, targets = _stack(batch)
            with ad.Tape() as tape:
                loss = multibin_loss(model, batch_inputs(currents, results, model.scale), targets, cfg.w)
            losses.append(loss.item())
            if not np.isfinite(losses[-1]):
                break
            optimizer.step(tape.backward(loss, params))
        value = float(np.mean(losses))
        curve.append({"epoch": epoch, "loss": value})
        if not np.isfinite(value):
            logger.error("Non-finite policy loss at epoch %d; stopping", epoch)
            break
        logger.info("epoch %d/%d  loss %.6f", epoch + 1, cfg.epochs, value)
        if on_epoch is not None:
            on_epoch(epoch, _to_checkpoint(model, cfg_hash, optimizer, epoch, curve, cfg.w))

    metrics = {"train_triples": float(len(train))}
    if hold:
        ok = within_half_width(model, hold)
        metrics["holdout_within_half_width"] = float(ok.all(axis=1).mean())
        for name, frac in zip(spec.param_names, ok.mean(axis=0)):
            metrics[f"holdout_{name}"] = float(frac)
    final = curve[-1]["loss"] if curve else float("nan")
    return TrainResult(_to_checkpoint(model, cfg_hash, optimizer, epoch, curve, cfg.w), curve, final, metrics)


def load_policy(source: Union[str, Checkpoint]) -> PolicyModel:
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source, ARCHITECTURE)
    if ckpt.architecture != ARCHITECTURE:
        raise DataError(f"checkpoint architecture '{ckpt.architecture}' is not {ARCHITECTURE}", code="ARCHITECTURE")
    meta = ckpt.meta
    model = PolicyModel(
        meta["tool"],
        [ParamKind(k) for k in meta["kinds"]],
        [BinSpec(*b) for b in meta["bins"]],
        meta["widths"],
        meta["head_hidden"],
        meta["n_points"],
        meta["scale"],
    )
    model.load_arrays(ckpt.params)
    return model
