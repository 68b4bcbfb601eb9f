"""Learned particle dynamics: a message-passing network over dough + tool graphs.

One model step advances the dough by ``stride`` recorded frames. The network
predicts one rigid transform for the whole dough (from mean-pooled dough node
embeddings) plus a per-particle non-rigid displacement; both heads start at
zero, so an untrained model copies its input.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.model_selection import train_test_split

from . import autodiff as ad
from .checkpoint import adam_state_from, load_checkpoint, make_checkpoint, resume_epoch
from .config import DynamicsConfig, GraphConfig, SimConfig
from .errors import DataError
from .geometry import estimate_normals
from .graph import EDGE_FEATURES, NODE_FEATURES, build_graph, default_radius, encode_features
from .metrics import combined_loss, point_cloud_loss
from .models import Action, Checkpoint, Episode, LossWeights, PointCloud, ToolSpec, TrainResult
from .nn import MLP, Adam, Module
from .tool_scripts import AUTODIFF_OPS, NUMPY_OPS, PHASES, ActionContext, tool_particles

logger = logging.getLogger(__name__)

ARCHITECTURE = "dyn-gnn-v1"
ROT_SCALE = 0.1  # radians per unit of rigid-head output

# vec(K) = k @ _SKEW, K the cross-product matrix of k (row-major 3x3)
_SKEW = np.zeros((3, 9))
_SKEW[2, 1], _SKEW[1, 2], _SKEW[2, 3] = -1.0, 1.0, 1.0
_SKEW[0, 5], _SKEW[1, 6], _SKEW[0, 7] = -1.0, -1.0, 1.0
_ROT_ROWS = np.eye(6)[:, :3]
_TRANS_ROWS = np.eye(6)[:, 3:]


class DynModel(Module):
    """Encoder, residual message-passing blocks and rigid/non-rigid heads.

    Args:
        hidden: Latent width of nodes and edges
        blocks: Number of message-passing blocks
        radius: Neighbour radius, also the length scale of all features
        max_tool_edges: Cap on tool-dough edges per tool particle
        stride: Recorded frames advanced per model step
        frames: Recorded frames per action the model was trained on
        normal_k: Neighbours used for dough normals
        roll_factor: Rolling distance factor used by the tool scripts
        tool: Tool id the model was trained for
        seed: Weight initialization seed
    """

    def __init__(
        self,
        hidden: int = 64,
        blocks: int = 3,
        radius: float = 0.01,
        max_tool_edges: int = 4,
        stride: int = 3,
        frames: int = 16,
        normal_k: int = 8,
        roll_factor: float = 1.5,
        tool: str = "",
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        self.hidden = hidden
        self.blocks = blocks
        self.radius = float(radius)
        self.max_tool_edges = max_tool_edges
        self.stride = stride
        self.frames = frames
        self.normal_k = normal_k
        self.roll_factor = roll_factor
        self.tool = tool

        self.node_encoder = MLP([NODE_FEATURES, hidden, hidden], rng)
        self.edge_encoder = MLP([EDGE_FEATURES, hidden, hidden], rng)
        self.edge_blocks = [MLP([3 * hidden, hidden, hidden], rng) for _ in range(blocks)]
        self.node_blocks = [MLP([2 * hidden, hidden, hidden], rng) for _ in range(blocks)]
        self.nonrigid_head = MLP([hidden, hidden, 3], rng, zero_last=True)
        self.rigid_head = MLP([hidden, hidden, 6], rng, zero_last=True)

    @property
    def steps_per_action(self) -> int:
        return (self.frames - 1) // self.stride

    @property
    def step_progress(self) -> float:
        """Action progress covered by one model step."""
        return self.stride * PHASES / (self.frames - 1)

    def meta(self) -> Dict:
        return {
            "hidden": self.hidden,
            "blocks": self.blocks,
            "radius": self.radius,
            "max_tool_edges": self.max_tool_edges,
            "stride": self.stride,
            "frames": self.frames,
            "normal_k": self.normal_k,
            "roll_factor": self.roll_factor,
            "tool": self.tool,
        }

    def step(self, dough, tool, tool_next, normals: Optional[np.ndarray] = None) -> ad.Tensor:
        """Dough positions one model step later.

        Args:
            dough: (n, 3) dough positions (array or tensor)
            tool: (m, 3) tool positions now (array or tensor)
            tool_next: (m, 3) tool positions after the step
            normals: Optional precomputed (n, 3) dough normals

        Returns:
            (n, 3) tensor of predicted dough positions
        """
        dough = ad.tensor(dough)
        tool = ad.tensor(tool)
        n = dough.shape[0]
        if normals is None:
            normals = estimate_normals(PointCloud(dough.data), min(self.normal_k, n))

        graph = build_graph(dough.data, tool.data, self.radius, self.max_tool_edges)
        positions = ad.concat([dough, tool], axis=0)
        nodes, edges = encode_features(graph, positions, normals, ad.tensor(tool_next) - tool, self.radius)

        h = self.node_encoder(nodes)
        e = self.edge_encoder(edges)
        for edge_mlp, node_mlp in zip(self.edge_blocks, self.node_blocks):
            m = edge_mlp(ad.concat([e, ad.gather(h, graph.receivers), ad.gather(h, graph.senders)], axis=1))
            e = e + m
            agg = ad.scatter_add(m, graph.receivers, graph.n_nodes)
            h = h + node_mlp(ad.concat([h, agg], axis=1))

        h_dough = ad.gather(h, np.arange(n))
        nonrigid = self.nonrigid_head(h_dough) * self.radius
        rigid = self.rigid_head(h_dough.mean(axis=0, keepdims=True))
        omega = (rigid @ _ROT_ROWS) * ROT_SCALE
        translation = (rigid @ _TRANS_ROWS) * self.radius
        return dough + _rotation_displacement(dough, omega) + translation + nonrigid


def _rotation_displacement(points: ad.Tensor, omega: ad.Tensor) -> ad.Tensor:
    """Displacement of points rotated by axis-angle omega (1, 3) about their centroid."""
    r = points - points.mean(axis=0, keepdims=True)
    theta = ad.sqrt(ad.square(omega).sum(axis=1, keepdims=True) + 1e-16)
    k = omega / theta
    skew = (k @ _SKEW).reshape(3, 3)
    cos, sin = ad.cos(theta), ad.sin(theta)
    return r * (cos - 1.0) + (r @ skew.T) * sin + ((r @ k.T) @ k) * (1.0 - cos)


def predict_step(model: DynModel, dough: PointCloud, tool: np.ndarray, tool_next: np.ndarray) -> PointCloud:
    """One model step on plain arrays; normals of the result are recomputed."""
    out = model.step(dough.positions, tool, tool_next, dough.normals).data.astype(np.float64)
    cloud = PointCloud(out)
    return cloud.with_normals(estimate_normals(cloud, min(model.normal_k, len(cloud))))


def action_tool_frames(model: DynModel, spec: ToolSpec, local_points, params, ctx: ActionContext, steps: int, ops=NUMPY_OPS) -> list:
    """Tool particle positions at model steps 0..steps of one action."""
    return [
        tool_particles(spec, local_points, params, k * model.step_progress, ctx, ops)
        for k in range(steps + 1)
    ]


def rollout_poses(model: DynModel, dough0, tool_frames: Sequence) -> List[ad.Tensor]:
    """Iterate the model over a list of tool poses, feeding predictions back."""
    states = [ad.tensor(dough0)]
    for now, nxt in zip(tool_frames[:-1], tool_frames[1:]):
        states.append(model.step(states[-1], now, nxt))
    return states


def rollout(
    model: DynModel,
    dough0: PointCloud,
    spec: ToolSpec,
    local_points: List[np.ndarray],
    actions: Sequence[Action],
    n_steps: Optional[int] = None,
) -> List[PointCloud]:
    """Dough predictions S_0..S_N for a chain of actions of one tool.

    Each action is anchored to the predicted dough at its start, the same way
    the simulator anchors it to the real one. ``n_steps`` defaults to every
    step of every action and never exceeds that.
    """
    clouds = [PointCloud(dough0.positions)]
    remaining = len(actions) * model.steps_per_action if n_steps is None else n_steps
    for action in actions:
        if remaining <= 0:
            break
        steps = min(model.steps_per_action, remaining)
        ctx = ActionContext.from_cloud(clouds[-1], model.roll_factor)
        frames = action_tool_frames(model, spec, local_points, action.params, ctx, steps)
        states = rollout_poses(model, clouds[-1].positions, frames)
        clouds.extend(PointCloud(s.data.astype(np.float64)) for s in states[1:])
        remaining -= steps
    return clouds


def rollout_tensor(model: DynModel, dough0: np.ndarray, spec: ToolSpec, local_points, params: ad.Tensor, n_steps: int) -> ad.Tensor:
    """Final dough of a single-action rollout, differentiable in params."""
    steps = min(n_steps, model.steps_per_action)
    ctx = ActionContext.from_cloud(PointCloud(dough0), model.roll_factor)
    frames = action_tool_frames(model, spec, local_points, params, ctx, steps, AUTODIFF_OPS)
    return rollout_poses(model, dough0, frames)[-1]


def _split(frame: PointCloud) -> Tuple[np.ndarray, np.ndarray]:
    return frame.dough().positions, frame.tool().positions


def training_windows(episodes: Sequence[Episode], frames: int, s: int, stride: int) -> List[Tuple[int, int, int]]:
    """(episode, sequence, start frame) of every window spanning s model steps."""
    last = frames - 1 - s * stride
    return [
        (e, q, t)
        for e, ep in enumerate(episodes)
        for q in range(len(ep.sequences))
        for t in range(last + 1)
    ]


def window_loss(model: DynModel, episodes: Sequence[Episode], window, s: int, w: LossWeights) -> ad.Tensor:
    """Multi-step loss: prediction i is fed back to produce prediction i+1.

    The i=0 term compares the input with itself and is zero.
    """
    e, q, t = window
    frames = episodes[e].sequences[q].frames
    dough, tool = _split(frames[t])
    pred = ad.tensor(dough)
    loss = ad.Tensor(0.0)
    for i in range(1, s + 1):
        target, tool_next = _split(frames[t + i * model.stride])
        pred = model.step(pred, tool, tool_next)
        loss = loss + point_cloud_loss(pred, target, w)
        tool = tool_next
    return loss


def static_loss(episodes: Sequence[Episode], window, s: int, stride: int, w: LossWeights) -> float:
    """Same windows scored against a model that never moves the dough."""
    e, q, t = window
    frames = episodes[e].sequences[q].frames
    start = frames[t].dough().positions
    return float(sum(combined_loss(start, frames[t + i * stride].dough().positions, w) for i in range(1, s + 1)))


def _holdout_split(n_episodes: int, fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    indices = list(range(n_episodes))
    if fraction <= 0 or n_episodes < 2:
        return indices, []
    n_hold = max(1, int(round(fraction * n_episodes)))
    train, hold = train_test_split(indices, test_size=n_hold, random_state=seed, shuffle=True)
    return sorted(train), sorted(hold)


def _to_checkpoint(model: DynModel, cfg_hash: str, optimizer: Adam, epoch: int, curve: List[Dict[str, float]]) -> Checkpoint:
    layer_sizes = {"hidden": model.hidden, "blocks": model.blocks, "node_features": NODE_FEATURES, "edge_features": EDGE_FEATURES}
    meta = model.meta()
    meta["curve"] = list(curve)
    return make_checkpoint(
        ARCHITECTURE,
        [p.data for p in model.parameters()],
        layer_sizes,
        cfg_hash,
        meta=meta,
        optimizer=optimizer.state,
        epoch=epoch,
    )


def train_dynamics(
    episodes: Sequence[Episode],
    cfg: Optional[DynamicsConfig] = None,
    graph_cfg: Optional[GraphConfig] = None,
    sim_cfg: Optional[SimConfig] = None,
    seed: int = 0,
    cfg_hash: str = "",
    resume: Optional[Checkpoint] = None,
    on_epoch=None,
) -> TrainResult:
    """Train a dynamics model on recorded episodes of one tool.

    Every epoch draws ``windows_per_epoch`` windows with a generator seeded by
    (seed, epoch) and takes one Adam step per ``batch_size`` windows, so a
    resumed run repeats the uninterrupted one exactly.

    Args:
        episodes: Episodes of a single tool
        cfg: Training settings
        graph_cfg: Radius and tool edge cap
        sim_cfg: Frame count, normals and rolling factor of the recorded data
        seed: Seed for initialization, the holdout split and window draws
        cfg_hash: Config hash embedded in the checkpoint
        resume: Checkpoint (with optimizer state) to continue from
        on_epoch: Optional callback(epoch, checkpoint) after every epoch

    Returns:
        TrainResult with holdout and static-baseline losses in metrics

    Raises:
        DataError: NO_DATA if there are no usable windows
    """
    cfg = cfg or DynamicsConfig()
    graph_cfg = graph_cfg or GraphConfig()
    sim_cfg = sim_cfg or SimConfig()
    if not episodes or not any(ep.sequences for ep in episodes):
        raise DataError("dynamics training needs at least one sequence", code="NO_DATA")

    frames = len(episodes[0].sequences[0].frames)
    w = LossWeights(cfg.w1, cfg.w2)
    train_idx, hold_idx = _holdout_split(len(episodes), cfg.holdout_fraction, seed)
    train_eps = [episodes[i] for i in train_idx]
    hold_eps = [episodes[i] for i in hold_idx]
    windows = training_windows(train_eps, frames, cfg.s, cfg.stride)
    if not windows:
        raise DataError(f"no {cfg.s}-step windows fit in {frames} frames at stride {cfg.stride}", code="NO_DATA")

    radius = graph_cfg.radius or default_radius(train_eps[0].sequences[0].frames[0].dough().positions, graph_cfg.radius_factor)
    model = DynModel(
        hidden=cfg.hidden,
        blocks=cfg.blocks,
        radius=radius,
        max_tool_edges=graph_cfg.max_tool_edges,
        stride=cfg.stride,
        frames=frames,
        normal_k=sim_cfg.normal_k,
        roll_factor=sim_cfg.roll_factor,
        tool=episodes[0].tool,
        seed=seed,
    )
    optimizer = Adam(model.parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
    start_epoch = 0
    curve: List[Dict[str, float]] = []
    if resume is not None:
        model = load_dynamics(resume)
        optimizer = Adam(model.parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm, state=adam_state_from(resume))
        start_epoch = resume_epoch(resume)
        curve = [c for c in resume.meta.get("curve", []) if c["epoch"] < start_epoch]
        logger.info("Resuming dynamics training at epoch %d", start_epoch)

    logger.info(
        "Training %s dynamics: %d windows from %d episodes (%d held out), %d parameters",
        model.tool, len(windows), len(train_eps), len(hold_eps), model.parameter_count(),
    )
    params = model.parameters()
    epoch = start_epoch - 1
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng([seed, epoch])
        picked = rng.choice(len(windows), size=min(cfg.windows_per_epoch, len(windows)), replace=False)
        losses = []
        finite = True
        for b in range(0, len(picked), cfg.batch_size):
            batch = picked[b:b + cfg.batch_size]
            grads = [np.zeros_like(p.data) for p in params]
            for k in batch:
                with ad.Tape() as tape:
                    loss = window_loss(model, train_eps, windows[k], cfg.s, w)
                for acc, g in zip(grads, tape.backward(loss, params)):
                    acc += g / len(batch)
                losses.append(loss.item())
            finite = np.isfinite(losses).all() and all(np.all(np.isfinite(g)) for g in grads)
            if not finite:
                break
            optimizer.step(grads)
        loss_value = float(np.mean(losses)) if finite else float("nan")
        curve.append({"epoch": epoch, "loss": loss_value})
        if not finite:
            logger.error("Non-finite dynamics loss at epoch %d; stopping", epoch)
            break
        logger.info("epoch %d/%d  loss %.6f", epoch + 1, cfg.epochs, loss_value)
        if on_epoch is not None:
            on_epoch(epoch, _to_checkpoint(model, cfg_hash, optimizer, epoch, curve))

    ckpt = _to_checkpoint(model, cfg_hash, optimizer, epoch, curve)
    metrics = {"train_windows": float(len(windows))}
    if hold_eps:
        hold_windows = training_windows(hold_eps, frames, cfg.s, cfg.stride)
        rng = np.random.default_rng([seed, -1])
        chosen = rng.permutation(len(hold_windows))[:cfg.holdout_windows]
        metrics["holdout_loss"] = float(np.mean([window_loss(model, hold_eps, hold_windows[k], cfg.s, w).item() for k in chosen]))
        metrics["static_loss"] = float(np.mean([static_loss(hold_eps, hold_windows[k], cfg.s, cfg.stride, w) for k in chosen]))
    final = curve[-1]["loss"] if curve else float("nan")
    return TrainResult(checkpoint=ckpt, curve=curve, final_loss=final, metrics=metrics)


def load_dynamics(source: Union[str, Checkpoint]) -> DynModel:
    """Rebuild a dynamics model from a checkpoint file or object."""
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source, ARCHITECTURE)
    if ckpt.architecture != ARCHITECTURE:
        raise DataError(f"checkpoint architecture '{ckpt.architecture}' is not {ARCHITECTURE}", code="ARCHITECTURE")
    meta = ckpt.meta
    model = DynModel(
        hidden=meta["hidden"],
        blocks=meta["blocks"],
        radius=meta["radius"],
        max_tool_edges=meta["max_tool_edges"],
        stride=meta["stride"],
        frames=meta["frames"],
        normal_k=meta["normal_k"],
        roll_factor=meta["roll_factor"],
        tool=meta["tool"],
    )
    model.load_arrays(ckpt.params)
    return model
