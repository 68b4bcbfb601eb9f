"""Tool registry loaded from YAML files."""

import copy
import zlib
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from .errors import DataError
from .geometry import sample_surface
from .models import ParamKind, ParamSpec, ToolPart, ToolSpec
from .sdf import SdfShape

# registry order; also the tie-break order for tool ranking
REGISTRY_ORDER = [
    "gripper_two_rod",
    "gripper_asym",
    "gripper_two_plane",
    "press_circle",
    "punch_circle",
    "press_square",
    "punch_square",
    "roller_large",
    "roller_small",
    "knife",
]

SCRIPTS = ("gripper", "press", "roller", "knife")


def part_shape(part: ToolPart) -> SdfShape:
    """SDF of a part in the tool's local frame."""
    return SdfShape(part.primitive, tuple(part.dims), translation=part.offset)


class ToolRegistry:
    """Loads tool specifications from YAML files."""

    def __init__(self, tools_dir: Optional[str] = None, overrides: Optional[Dict[str, Dict[str, Any]]] = None):
        """Initialize registry.

        Args:
            tools_dir: Directory containing tool YAML files
            overrides: Per-tool dictionaries merged over the file contents
                ({"parts": {name: {...}}, "params": {name: {...}}, ...})
        """
        if tools_dir is None:
            # Default to tools/ directory in project root
            self.tools_dir = Path(__file__).parent.parent / "tools"
        else:
            self.tools_dir = Path(tools_dir)

        self.overrides = overrides or {}
        self._cache: Dict[str, ToolSpec] = {}
        self._points: Dict[str, List[np.ndarray]] = {}

    def load(self, tool_id: str) -> ToolSpec:
        """Load a tool specification.

        Args:
            tool_id: Name of tool file (without .yaml extension)

        Returns:
            ToolSpec object

        Raises:
            DataError: If the tool file is missing or invalid
        """
        if tool_id in self._cache:
            return self._cache[tool_id]

        tool_file = self.tools_dir / f"{tool_id}.yaml"
        if not tool_file.exists():
            raise DataError(f"Unknown tool '{tool_id}' (no {tool_file})", code="UNKNOWN_TOOL")

        with open(tool_file, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)

        required_fields = ["id", "category", "script", "parts", "params"]
        missing = [field for field in required_fields if field not in data]
        if missing:
            raise DataError(f"Missing required fields in {tool_file}: {missing}", code="BAD_TOOL")
        if data["script"] not in SCRIPTS:
            raise DataError(f"{tool_file}: unknown script '{data['script']}'", code="BAD_TOOL")

        data = self._apply_overrides(tool_id, data)

        spec = ToolSpec(
            id=data["id"],
            category=str(data["category"]),
            script=data["script"],
            parts=[
                ToolPart(
                    name=p["name"],
                    primitive=p["primitive"],
                    dims=[float(v) for v in p["dims"]],
                    offset=[float(v) for v in p.get("offset", [0.0, 0.0, 0.0])],
                )
                for p in data["parts"]
            ],
            params=[
                ParamSpec(
                    name=p["name"],
                    kind=ParamKind(p["kind"]),
                    low=float(p["low"]),
                    high=float(p["high"]),
                    bins=int(p["bins"]) if "bins" in p else None,
                )
                for p in data["params"]
            ],
            points_per_part=int(data.get("points_per_part", 40)),
            depth_offset=float(data.get("depth_offset", 0.0)),
            has_dynamics=bool(data.get("has_dynamics", True)),
            extra=dict(data.get("extra") or {}),
        )

        self._cache[tool_id] = spec
        return spec

    def _apply_overrides(self, tool_id: str, data: Dict[str, Any]) -> Dict[str, Any]:
        override = self.overrides.get(tool_id)
        if not override:
            return data
        data = copy.deepcopy(data)
        for section in ("parts", "params"):
            by_name = {item["name"]: item for item in data[section]}
            for name, fields in (override.get(section) or {}).items():
                if name not in by_name:
                    raise DataError(f"Override for unknown {section[:-1]} '{name}' of tool '{tool_id}'", code="BAD_TOOL")
                by_name[name].update(fields)
        for key, value in override.items():
            if key not in ("parts", "params"):
                data[key] = value
        return data

    def list_tools(self) -> List[str]:
        """List all available tool ids in registry order.

        Returns:
            Tool ids; files outside REGISTRY_ORDER follow alphabetically
        """
        found = {f.stem for f in self.tools_dir.glob("*.yaml")}
        known = [t for t in REGISTRY_ORDER if t in found]
        return known + sorted(found - set(REGISTRY_ORDER))

    def index(self, tool_id: str) -> int:
        return self.list_tools().index(tool_id)

    def tool_points(self, tool_id: str) -> List[np.ndarray]:
        """Surface particles of every part in the tool's local frame.

        Sampling is seeded by the tool id, so every run sees the same points.
        """
        if tool_id not in self._points:
            spec = self.load(tool_id)
            points = []
            for k, part in enumerate(spec.parts):
                rng = np.random.default_rng([zlib.crc32(tool_id.encode("utf-8")), k])
                points.append(sample_surface(part_shape(part), spec.points_per_part, rng))
            self._points[tool_id] = points
        return self._points[tool_id]
