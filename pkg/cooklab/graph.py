"""Scene graphs over dough and tool particles.

Nodes are the dough particles followed by the tool particles. Dough-dough edges
join every pair within the radius; each tool particle links to at most
``max_tool_edges`` nearest dough particles inside the same radius. Every
undirected edge is stored as two directed (receiver, sender) edges.
"""

from typing import Optional, Tuple

import numpy as np
from sklearn.neighbors import NearestNeighbors

from . import autodiff as ad
from .geometry import mean_spacing, radius_pairs
from .models import SceneGraph

DOUGH_EDGE = 0
TOOL_EDGE = 1
NODE_FEATURES = 8  # is_dough, is_tool, normal(3), tool motion(3)
EDGE_FEATURES = 6  # relative position(3), distance, dough-dough flag, tool-dough flag


def default_radius(dough_positions: np.ndarray, factor: float = 1.5) -> float:
    """Neighbour radius as a multiple of the mean particle spacing."""
    return factor * mean_spacing(dough_positions)


def tool_dough_pairs(dough: np.ndarray, tool: np.ndarray, radius: float, max_edges: int) -> np.ndarray:
    """(tool index, dough index) pairs: up to max_edges nearest within radius."""
    if len(tool) == 0 or len(dough) == 0 or max_edges <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    k = min(max_edges, len(dough))
    dist, idx = NearestNeighbors(n_neighbors=k).fit(dough).kneighbors(tool)
    keep = dist <= radius
    t_idx = np.repeat(np.arange(len(tool)), k).reshape(len(tool), k)
    return np.stack([t_idx[keep], idx[keep]], axis=1).astype(np.int64)


def build_graph(
    dough: np.ndarray,
    tool: np.ndarray,
    radius: float,
    max_tool_edges: int = 4,
    normals: Optional[np.ndarray] = None,
    tool_motion: Optional[np.ndarray] = None,
) -> SceneGraph:
    """Build the edge set; features are filled when normals are given.

    Args:
        dough: (n, 3) dough positions
        tool: (m, 3) tool positions
        radius: Neighbour radius for both edge kinds
        max_tool_edges: Cap on tool-dough edges per tool particle
        normals: Optional (n, 3) dough normals
        tool_motion: Optional (m, 3) tool displacement over the step

    Returns:
        SceneGraph with directed receivers/senders
    """
    dough = np.asarray(dough, dtype=np.float64).reshape(-1, 3)
    tool = np.asarray(tool, dtype=np.float64).reshape(-1, 3)
    n = len(dough)

    dd = radius_pairs(dough, radius)
    td = tool_dough_pairs(dough, tool, radius, max_tool_edges)
    tool_nodes = n + td[:, 0]
    receivers = np.concatenate([dd[:, 0], dd[:, 1], td[:, 1], tool_nodes])
    senders = np.concatenate([dd[:, 1], dd[:, 0], tool_nodes, td[:, 1]])
    kind = np.concatenate([np.full(2 * len(dd), DOUGH_EDGE), np.full(2 * len(td), TOOL_EDGE)]).astype(np.int64)

    graph = SceneGraph(n_dough=n, n_tool=len(tool), receivers=receivers, senders=senders, edge_kind=kind)
    if normals is not None:
        motion = np.zeros_like(tool) if tool_motion is None else tool_motion
        nodes, edges = encode_features(graph, np.concatenate([dough, tool]), normals, motion, radius)
        graph.node_features, graph.edge_features = nodes.data, edges.data
    return graph


def encode_features(graph: SceneGraph, positions, normals: np.ndarray, tool_motion, scale: float) -> Tuple[ad.Tensor, ad.Tensor]:
    """Node and edge feature tensors; only relative geometry enters them.

    Args:
        graph: Edge structure
        positions: (n_nodes, 3) array or tensor, dough rows first
        normals: (n_dough, 3) dough normals (constant)
        tool_motion: (n_tool, 3) array or tensor
        scale: Length used to normalize positions

    Returns:
        (node features (n_nodes, 8), edge features (E, 6))
    """
    n, m = graph.n_dough, graph.n_tool
    flags = np.zeros((n + m, 2))
    flags[:n, 0] = 1.0
    flags[n:, 1] = 1.0
    normal_rows = np.concatenate([np.asarray(normals).reshape(n, 3), np.zeros((m, 3))])
    motion_rows = ad.concat([np.zeros((n, 3)), ad.tensor(tool_motion) * (1.0 / scale)], axis=0) if m else np.zeros((n, 3))
    nodes = ad.concat([flags, normal_rows, motion_rows], axis=1)

    pos = ad.tensor(positions)
    rel = (ad.gather(pos, graph.receivers) - ad.gather(pos, graph.senders)) * (1.0 / scale)
    dist = ad.sqrt(ad.square(rel).sum(axis=1, keepdims=True) + 1e-12)
    kind = np.stack([graph.edge_kind == DOUGH_EDGE, graph.edge_kind == TOOL_EDGE], axis=1).astype(np.float64)
    edges = ad.concat([rel, dist, kind], axis=1)
    return nodes, edges
