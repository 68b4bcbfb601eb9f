"""Main orchestrator: wires components from configuration and runs commands."""

import csv
import logging
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .bench import SUITES, run_bench, to_csv
from .checkpoint import load_checkpoint, write_checkpoint
from .config import config_hash, load_config, thread_count
from .dataset import load_episodes, load_triples, prepare_output, save_episodes, save_pairs, save_triples, triples_bins
from .dynamics import ARCHITECTURE as DYN_ARCHITECTURE
from .dynamics import load_dynamics, train_dynamics
from .errors import CookLabError, DataError, UsageError
from .geometry import estimate_normals
from .metrics import metric_report
from .models import CommandResult, Episode, LossWeights, PairSample, PointCloud, SubgoalPlan, SubgoalStage, TraceStatus, TrainResult
from .multibin import bins_for_tool
from .planner import Planner, ToolModels, read_trace, trace_records, write_trace
from .ply_io import read_ply, write_ply
from .policy import ARCHITECTURE as POLICY_ARCHITECTURE
from .policy import gen_synthetic_dataset, initial_states, load_policy, train_policy
from .report_generator import ReportGenerator
from .simulator import Simulator, SimWorld, make_dough
from .tasks import build_task, load_task, perturb, save_task
from .tool_registry import ToolRegistry
from .toolselect import ARCHITECTURE as TOOLSEL_ARCHITECTURE
from .toolselect import build_pairs, load_toolsel, train_toolsel

logger = logging.getLogger(__name__)

BUDGET_EXHAUSTED = 4

# (episodes, sequences per episode) by tool script
DEFAULT_EPISODES = {
    "gripper": (60, 5),
    "press": (90, 3),
    "roller": (90, 3),
    "knife": (30, 1),
}


def dynamics_path(models_dir: str, tool: str) -> Path:
    return Path(models_dir) / f"dyn_{tool}.ckpt"


def policy_path(models_dir: str, tool: str) -> Path:
    return Path(models_dir) / f"policy_{tool}.ckpt"


def toolsel_path(models_dir: str) -> Path:
    return Path(models_dir) / "toolsel.ckpt"


def write_curve(path: Path, curve: List[Dict[str, float]]) -> str:
    """Training curve as CSV (epoch, loss)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["epoch", "loss"])
        writer.writeheader()
        for row in curve:
            writer.writerow({"epoch": row["epoch"], "loss": repr(float(row["loss"]))})
    return str(path)


class CookLab:
    """Orchestrator for data generation, training, planning and evaluation."""

    def __init__(self, config_path: Optional[str] = None, overrides: Optional[Dict] = None):
        """Initialize components from configuration.

        Args:
            config_path: Path to config YAML file (missing file -> defaults)
            overrides: Nested config values applied over the file
        """
        self.config = load_config(config_path, overrides)
        self.config_hash = config_hash(self.config)
        self.threads = thread_count(self.config)

        self.registry = ToolRegistry(self.config.paths.tools_dir, self.config.tool_overrides)
        self.simulator = Simulator(self.registry, self.config.sim, self.config.workspace)
        self.report_generator = ReportGenerator()

    # ----------------------------------------------------------------- shell

    def _run(self, title: str, body: Callable[[], CommandResult]) -> CommandResult:
        """Banner, timing and the error-to-exit-code mapping around a command."""
        start_time = time.time()
        print("=" * 60)
        print(title)
        print("=" * 60)
        try:
            result = body()
        except CookLabError as e:
            print(f"\nError: {e}")
            result = CommandResult(exit_code=e.exit_code, statistics={"error": str(e), "code": e.code})
        except Exception as e:
            print(f"\nError: {e}")
            traceback.print_exc()
            result = CommandResult(exit_code=1, statistics={"error": str(e)})

        execution_time = time.time() - start_time
        result.statistics.setdefault("execution_time", execution_time)
        print("\n" + "=" * 60)
        print(f"Completed in {execution_time:.1f}s")
        print(f"Exit code: {result.exit_code}")
        print("=" * 60)
        return result

    def _seed(self, seed: Optional[int]) -> int:
        return self.config.seed if seed is None else seed

    def _info(self, seed: int, **extra) -> Dict:
        info = {"config_hash": self.config_hash, "seed": seed}
        info.update(extra)
        return info

    # ------------------------------------------------------------- gen-data

    def gen_data(
        self,
        tool: str,
        episodes: Optional[int] = None,
        seq_per_episode: Optional[int] = None,
        seed: Optional[int] = None,
        out: Optional[str] = None,
        force: bool = False,
    ) -> CommandResult:
        """Record random-action episodes of one tool into a dataset directory."""
        def body():
            spec = self.registry.load(tool)
            default_eps, default_seq = DEFAULT_EPISODES[spec.script]
            n_eps = episodes or default_eps
            n_seq = seq_per_episode or default_seq
            run_seed = self._seed(seed)
            out_dir = Path(out or Path(self.config.paths.data_dir) / tool)
            if out_dir.exists() and not force:
                raise UsageError(f"output exists: {out_dir} (use --force to overwrite)", code="OUTPUT_EXISTS")

            print(f"\n[1/2] Simulating {n_eps} episodes x {n_seq} sequences of {tool}...")
            seeds = np.random.SeedSequence(run_seed).generate_state(n_eps)
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                futures = [pool.submit(self.simulator.run_episode, tool, n_seq, int(s)) for s in seeds]
                recorded: List[Episode] = [f.result() for f in futures]
            print(f"  Recorded {sum(len(ep.sequences) for ep in recorded)} sequences")

            print("\n[2/2] Writing dataset...")
            manifest = save_episodes(
                out_dir, recorded,
                self._info(run_seed, param_names=spec.param_names, sim=self.config.sim.model_dump()),
                force=force,
            )
            print(f"  Written: {manifest}")
            return CommandResult(
                exit_code=0,
                outputs={"dataset": str(out_dir)},
                statistics={"episodes": n_eps, "sequences": n_eps * n_seq},
            )

        return self._run(f"Generating data: {tool}", body)

    # -------------------------------------------------------------- training

    def _checkpoint_writer(self, out_path: Path) -> Callable:
        def on_epoch(epoch, ckpt):
            write_checkpoint(out_path, ckpt)
        return on_epoch

    def _prepare_model_output(self, out_path: Path, resume: bool, force: bool, architecture: str):
        """Checkpoint to resume from, after refusing to clobber an existing output."""
        if resume:
            if not out_path.exists():
                raise DataError(f"nothing to resume: {out_path} does not exist", code="NO_DATA")
            return load_checkpoint(out_path, architecture)
        if out_path.exists():
            prepare_output(out_path, force)
        return None

    def _finish_training(self, result: TrainResult, out_path: Path, label: str) -> CommandResult:
        write_checkpoint(out_path, result.checkpoint)
        curve_path = write_curve(out_path.with_suffix(".csv"), result.curve)
        print(f"  Final loss: {result.final_loss:.6f}")
        for key, value in result.metrics.items():
            print(f"  {key}: {value:.4f}")
        print(f"  Checkpoint: {out_path}")
        print(f"  Curve: {curve_path}")
        exit_code = 0 if np.isfinite(result.final_loss) else 3
        if exit_code:
            print(f"  {label} loss is not finite")
        statistics = {"final_loss": result.final_loss, "epochs": len(result.curve)}
        statistics.update(result.metrics)
        return CommandResult(exit_code=exit_code, outputs={"checkpoint": str(out_path), "curve": curve_path}, statistics=statistics)

    def train_dynamics(
        self,
        data: str,
        out: Optional[str] = None,
        seed: Optional[int] = None,
        resume: bool = False,
        force: bool = False,
    ) -> CommandResult:
        """Train a dynamics model on one tool's dataset."""
        def body():
            run_seed = self._seed(seed)
            print("\n[1/2] Loading dataset...")
            manifest, episodes = load_episodes(data)
            tool = manifest["tool"]
            print(f"  {len(episodes)} episodes of {tool}")
            out_path = Path(out) if out else dynamics_path(self.config.paths.models_dir, tool)
            previous = self._prepare_model_output(out_path, resume, force, DYN_ARCHITECTURE)

            print("\n[2/2] Training dynamics...")
            result = train_dynamics(
                episodes, self.config.dynamics, self.config.graph, self.config.sim,
                seed=run_seed, cfg_hash=self.config_hash, resume=previous,
                on_epoch=self._checkpoint_writer(out_path),
            )
            return self._finish_training(result, out_path, "dynamics")

        return self._run("Training dynamics model", body)

    def train_policy(
        self,
        data: Optional[str] = None,
        dynamics: Optional[str] = None,
        triples: Optional[str] = None,
        out: Optional[str] = None,
        seed: Optional[int] = None,
        resume: bool = False,
        force: bool = False,
    ) -> CommandResult:
        """Train a tool policy on synthetic triples.

        Triples come from ``triples`` when given; otherwise they are generated
        by rolling the ``dynamics`` model from states of the ``data`` episodes
        and saved next to the checkpoint.
        """
        def body():
            run_seed = self._seed(seed)
            cfg = self.config.policy
            if triples:
                print("\n[1/2] Loading triples...")
                header, samples = load_triples(triples)
                tool = header["tool"]
            else:
                if not data or not dynamics:
                    raise UsageError("train-policy needs --triples or both --data and --dynamics", code="USAGE")
                print("\n[1/2] Generating synthetic triples...")
                model = load_dynamics(dynamics)
                _, episodes = load_episodes(data)
                tool = model.tool
                spec = self.registry.load(tool)
                states = initial_states(episodes, cfg.n_states, run_seed)
                samples = gen_synthetic_dataset(model, spec, self.registry.tool_points(tool), states, cfg, run_seed, self.threads)
            print(f"  {len(samples)} triples of {tool}")

            spec = self.registry.load(tool)
            names = [p.name for p in spec.params]
            bins = bins_for_tool(spec, cfg)
            if triples and (header["param_names"] != names or triples_bins(header) != bins):
                raise DataError(f"{triples}: parameter names or bins differ from the {tool} policy layout", code="BIN_MISMATCH")
            out_path = Path(out) if out else policy_path(self.config.paths.models_dir, tool)
            previous = self._prepare_model_output(out_path, resume, force, POLICY_ARCHITECTURE)
            if not triples:
                saved = save_triples(out_path.with_suffix(".triples"), samples, names, bins, self._info(run_seed, tool=tool), force=True)
                print(f"  Triples: {saved}")

            print("\n[2/2] Training policy...")
            result = train_policy(
                samples, spec, cfg, seed=run_seed, cfg_hash=self.config_hash,
                resume=previous, on_epoch=self._checkpoint_writer(out_path),
            )
            return self._finish_training(result, out_path, "policy")

        return self._run("Training policy", body)

    def _precoded_pairs(self, tool: str, n_episodes: int, seed: int) -> List[PairSample]:
        """Pairs of a tool without a dataset, recorded from scripted runs."""
        episodes = [self.simulator.run_episode(tool, 2, seed + k) for k in range(n_episodes)]
        return build_pairs(episodes, self.config.toolsel.n_points, seed)

    def train_toolsel(
        self,
        data: Sequence[str],
        out: Optional[str] = None,
        seed: Optional[int] = None,
        resume: bool = False,
        force: bool = False,
    ) -> CommandResult:
        """Train the tool classifier on pairs from several tool datasets."""
        def body():
            run_seed = self._seed(seed)
            cfg = self.config.toolsel
            print(f"\n[1/3] Loading {len(data)} datasets...")
            pairs: List[PairSample] = []
            seen = set()
            for path in data:
                manifest, episodes = load_episodes(path)
                pairs.extend(build_pairs(episodes, cfg.n_points, run_seed))
                seen.add(manifest["tool"])
                print(f"  {manifest['tool']}: {len(episodes)} episodes")

            if cfg.include_precoded:
                for tool in self.registry.list_tools():
                    spec = self.registry.load(tool)
                    if tool not in seen and not spec.has_dynamics:
                        extra = self._precoded_pairs(tool, max(4, len(pairs) // (3 * max(1, len(seen)))), run_seed)
                        pairs.extend(extra)
                        print(f"  {tool}: {len(extra)} scripted pairs")
            labels = self.registry.list_tools()
            out_path = Path(out) if out else toolsel_path(self.config.paths.models_dir)
            previous = self._prepare_model_output(out_path, resume, force, TOOLSEL_ARCHITECTURE)

            print(f"\n[2/3] Writing {len(pairs)} pairs...")
            saved = save_pairs(out_path.with_suffix(".pairs"), pairs, labels, self._info(run_seed), force=True)
            print(f"  Pairs: {saved}")

            print("\n[3/3] Training tool classifier...")
            result = train_toolsel(
                pairs, labels, cfg, seed=run_seed, cfg_hash=self.config_hash,
                resume=previous, on_epoch=self._checkpoint_writer(out_path),
            )
            return self._finish_training(result, out_path, "classifier")

        return self._run("Training tool classifier", body)

    # -------------------------------------------------------------- planning

    def load_planner(self, models_dir: Optional[str] = None, planner: Optional[str] = None, seed: int = 0) -> Planner:
        """Planner over every tool with a dynamics checkpoint, plus precoded tools.

        Raises:
            UsageError: PLANNER_MISMATCH if no usable tool is found or a
                needed policy is missing
        """
        models_dir = models_dir or self.config.paths.models_dir
        plan_cfg = self.config.plan.model_copy(update={"planner": planner}) if planner else self.config.plan
        tools: Dict[str, ToolModels] = {}
        for tool in self.registry.list_tools():
            spec = self.registry.load(tool)
            local = self.registry.tool_points(tool)
            if not spec.has_dynamics:
                tools[tool] = ToolModels(spec, local)
                continue
            dyn = dynamics_path(models_dir, tool)
            if not dyn.exists():
                continue
            pol = policy_path(models_dir, tool)
            policy = load_policy(str(pol)) if pol.exists() else None
            tools[tool] = ToolModels(spec, local, load_dynamics(str(dyn)), policy)
        if not any(tm.dynamics is not None for tm in tools.values()):
            raise UsageError(f"no dynamics checkpoints in {models_dir}", code="PLANNER_MISMATCH")

        sel = toolsel_path(models_dir)
        classifier = load_toolsel(str(sel)) if sel.exists() else None
        w = LossWeights(self.config.dynamics.w1, self.config.dynamics.w2)
        return Planner(tools, classifier, plan_cfg, self.config.sim, w, self.threads, seed)

    def plan(
        self,
        task: Optional[str] = None,
        target: Optional[str] = None,
        subgoals: Optional[Sequence[str]] = None,
        planner: Optional[str] = None,
        models: Optional[str] = None,
        out: Optional[str] = None,
        seed: Optional[int] = None,
        perturb_after: Optional[int] = None,
        perturb_kind: str = "squash",
        force: bool = False,
    ) -> CommandResult:
        """Run the closed loop against a fresh simulated dough.

        The subgoal plan comes from a task directory, or from subgoal PLYs
        followed by the target PLY (tools chosen freely per stage).
        """
        def body():
            run_seed = self._seed(seed)
            n_points = self.config.policy.n_points
            hooks = None
            if perturb_after is not None:
                if perturb_after < 0:
                    raise UsageError("--perturb-after must be >= 0", code="USAGE")
                hooks = {perturb_after: perturb(perturb_kind, seed=run_seed)}
            print("\n[1/4] Loading subgoals...")
            if task:
                loaded = load_task(task)
                subgoal_plan = loaded.plan
                state = loaded.initial_state(self.simulator)
            else:
                if not target:
                    raise UsageError("plan needs --task or --target", code="USAGE")
                paths = list(subgoals or []) + [target]
                subgoal_plan = SubgoalPlan([SubgoalStage(None, read_ply(p)) for p in paths])
                state = make_dough(self.config.sim.reset_shape, self.config.sim.n_particles, run_seed, self.config.sim)
            print(f"  {len(subgoal_plan.stages)} stages")

            out_dir = Path(out or Path(self.config.paths.runs_dir) / "plan")
            if out_dir.exists():
                prepare_output(out_dir, force)

            print("\n[2/4] Loading models...")
            active = self.load_planner(models, planner, run_seed)
            print(f"  Planner: {active.cfg.planner}; tools: {', '.join(active.order)}")
            print(f"  Classifier: {'yes' if active.classifier is not None else 'no (all tools are candidates)'}")

            print("\n[3/4] Running closed loop...")
            world = SimWorld(self.simulator, state)
            initial = world.observe(n_points, seed=run_seed)
            plan_start = time.time()
            trace = active.closed_loop(world, subgoal_plan, n_points, hooks)
            wall_time = time.time() - plan_start
            print(f"  {len(trace.records)} actions, status {trace.status.value}")
            print(f"  Loss {trace.initial_loss:.4f} -> {trace.final_loss:.4f}")

            print("\n[4/4] Writing outputs...")
            exit_code = 0 if trace.status == TraceStatus.COMPLETE else BUDGET_EXHAUSTED
            final_target = subgoal_plan.final_target
            trace_path = write_trace(out_dir / "trace.jsonl", trace, self._info(run_seed, planner=active.cfg.planner))
            outputs = {
                "trace": trace_path,
                "initial": write_ply(out_dir / "initial.ply", initial),
                "final": write_ply(out_dir / "final.ply", trace.final_cloud),
                "target": write_ply(out_dir / "target.ply", final_target),
            }
            statistics = {
                "actions": len(trace.records),
                "initial_loss": trace.initial_loss,
                "final_loss": trace.final_loss,
                "planning_wall_time": wall_time,
                "status": trace.status.value,
            }
            w = active.weights
            report = self.report_generator.build_report(
                {"initial": metric_report(initial, final_target, w), "final": metric_report(trace.final_cloud, final_target, w)},
                self.config_hash, run_seed, statistics, trace_records(trace), exit_code,
            )
            outputs["report"] = self.report_generator.write_json(report, str(out_dir / "report.json"))
            outputs["html"] = self.report_generator.generate_report(report, str(out_dir / "report.html"), "Planning run")
            for key in ("trace", "report", "html"):
                print(f"  {key}: {outputs[key]}")
            return CommandResult(exit_code=exit_code, outputs=outputs, statistics=statistics)

        return self._run("Closed-loop planning", body)

    # ------------------------------------------------------------ evaluation

    def _with_normals(self, cloud: PointCloud) -> PointCloud:
        if cloud.normals is not None:
            return cloud
        return cloud.with_normals(estimate_normals(cloud, min(self.config.sim.normal_k, len(cloud))))

    def eval(
        self,
        trace: Optional[str] = None,
        pair: Optional[Sequence[str]] = None,
        out: Optional[str] = None,
        seed: Optional[int] = None,
    ) -> CommandResult:
        """Metric report for two PLY clouds, or for a planning run's trace."""
        def body():
            run_seed = self._seed(seed)
            w = LossWeights(self.config.dynamics.w1, self.config.dynamics.w2)
            records, statistics = [], {}
            print("\n[1/2] Computing metrics...")
            if pair:
                a, b = (self._with_normals(read_ply(p)) for p in pair)
                metrics = {"pair": metric_report(a, b, w)}
                default_out = Path(pair[0]).with_suffix(".metrics.json")
            elif trace:
                records, summary = read_trace(trace)
                run_dir = Path(trace).parent
                metrics = {}
                for label in ("initial", "final"):
                    cloud = run_dir / f"{label}.ply"
                    if cloud.exists() and (run_dir / "target.ply").exists():
                        metrics[label] = metric_report(
                            self._with_normals(read_ply(cloud)), self._with_normals(read_ply(run_dir / "target.ply")), w,
                        )
                statistics = {k: v for k, v in summary.items() if k != "summary"}
                default_out = run_dir / "eval.json"
            else:
                raise UsageError("eval needs --trace or --pair", code="USAGE")

            for label, table in metrics.items():
                for metric, values in table.items():
                    print(f"  {label} {metric}: sum {values['sum']:.6g}  mean {values['mean']:.6g}")

            print("\n[2/2] Writing report...")
            report = self.report_generator.build_report(metrics, self.config_hash, run_seed, statistics, records)
            path = self.report_generator.write_json(report, str(out or default_out))
            print(f"  Report: {path}")
            return CommandResult(exit_code=0, outputs={"report": path}, statistics={"metrics": metrics})

        return self._run("Evaluating", body)

    # ------------------------------------------------------- bench and tasks

    def bench(self, suites: Sequence[str] = SUITES, out: Optional[str] = None, seed: Optional[int] = None) -> CommandResult:
        """Median-of-10 timings as CSV (stdout, and out when given)."""
        def body():
            print(f"\n[1/1] Timing {', '.join(suites)}...")
            rows = run_bench(suites, self._seed(seed), registry=self.registry)
            text = to_csv(rows)
            print(text, end="")
            outputs = {}
            if out:
                path = Path(out)
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(text, encoding="utf-8")
                outputs["csv"] = str(path)
            return CommandResult(exit_code=0, outputs=outputs, statistics={r["suite"]: r["median_s"] for r in rows})

        return self._run("Benchmarks", body)

    def gen_task(
        self,
        name: str,
        seed: Optional[int] = None,
        out: Optional[str] = None,
        epsilon: Optional[float] = None,
        force: bool = False,
    ) -> CommandResult:
        """Record a scripted task's subgoals into a task directory."""
        def body():
            run_seed = self._seed(seed)
            out_dir = Path(out or Path(self.config.paths.runs_dir) / "tasks" / f"{name}_{run_seed}")
            if out_dir.exists() and not force:
                raise UsageError(f"output exists: {out_dir} (use --force to overwrite)", code="OUTPUT_EXISTS")
            print(f"\n[1/2] Running scripted {name} pipeline...")
            task = build_task(name, self.simulator, run_seed, self.config.policy.n_points, epsilon)
            for k, stage in enumerate(task.plan.stages):
                print(f"  Stage {k}: {stage.tool}")
            print("\n[2/2] Writing task...")
            path = save_task(out_dir, task, self._info(run_seed), force=force)
            print(f"  Written: {path}")
            return CommandResult(exit_code=0, outputs={"task": str(out_dir)}, statistics={"stages": len(task.plan.stages)})

        return self._run(f"Generating task: {name}", body)
