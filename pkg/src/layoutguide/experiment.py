"""Experiment orchestration, deterministic reports and PGM heatmaps."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import DEFAULT_BACKPROP_ITERS, DEFAULT_ETA, Scenario, guided_sample
from .dynamics import verify_theorem1
from .energy import GuidanceWeights
from .grid import LayoutError, LayoutSpec, rasterize_mask
from .langevin import LangevinConfig
from .verify import nash_residual_summary

PLAN_BASELINES = ("none", "backprop", "langevin-fixed", "langevin-adaptive")


class ConfigError(ValueError):
    """Invalid plan, scenario or override; the CLI maps it to exit code 2."""


@dataclass
class ExperimentPlan:
    scenario: Scenario
    baselines: list[str]
    seeds: list[int]
    out_dir: Path | None = None
    weights: GuidanceWeights = field(default_factory=GuidanceWeights)
    langevin: LangevinConfig = field(default_factory=LangevinConfig)
    eta: float = DEFAULT_ETA
    backprop_iters: int = DEFAULT_BACKPROP_ITERS
    trace: str = "norms"
    jobs: int = 1
    scenario_path: str | None = None

    def validate(self):
        if not self.baselines:
            raise ConfigError("plan needs at least one baseline")
        bad = [b for b in self.baselines if b not in PLAN_BASELINES]
        if bad:
            raise ConfigError(f"unknown baselines {bad}; choose from {PLAN_BASELINES}")
        if len(set(self.baselines)) != len(self.baselines):
            raise ConfigError("baselines must be distinct")
        if not self.seeds:
            raise ConfigError("plan needs at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.trace not in ("none", "norms", "full"):
            raise ConfigError(f"unknown trace level {self.trace!r}")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if self.weights.total_steps != self.scenario.num_steps:
            raise ConfigError(
                f"guidance total_steps={self.weights.total_steps} differs from scenario num_steps={self.scenario.num_steps}"
            )

    def resolved_config(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "scenario_path": self.scenario_path,
            "baselines": list(self.baselines),
            "seeds": list(self.seeds),
            "guidance": asdict(self.weights),
            "langevin": asdict(self.langevin),
            "eta": self.eta,
            "backprop_iters": self.backprop_iters,
            "trace": self.trace,
        }


def _cell_config(plan: ExperimentPlan, baseline: str) -> tuple[str, LangevinConfig]:
    if baseline == "langevin-fixed":
        return "langevin", replace(plan.langevin, nu_mode="fixed")
    if baseline == "langevin-adaptive":
        return "langevin", replace(plan.langevin, nu_mode="adaptive")
    return baseline, plan.langevin


def run_cell(plan: ExperimentPlan, baseline: str, seed: int) -> dict:
    """Run one ``(baseline, seed)`` cell; failures are captured, not raised."""
    kind, lconf = _cell_config(plan, baseline)
    try:
        result = guided_sample(
            plan.scenario.model(), plan.scenario.layout, plan.scenario.head(), plan.weights, lconf,
            kind, seed, plan.eta, plan.backprop_iters, plan.trace,
        )
    except Exception as exc:  # noqa: BLE001 - recorded per cell, other cells still run
        return {"baseline": baseline, "seed": seed, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    row = {"baseline": baseline, "seed": seed, "status": "ok", "metrics": result.metrics.to_dict()}
    if plan.trace != "none":
        row["trace"] = result.trace.to_dict()
    return row


def _cell(args):
    return run_cell(*args)


def _summary(values: list[float]) -> dict:
    if not values:
        return {"n": 0}
    v = np.asarray(values, dtype=np.float64)
    return {"n": int(v.size), "mean": float(v.mean()), "median": float(np.median(v)), "std": float(v.std())}


METRIC_KEYS = ("mean_coverage", "mean_spread", "loglik")


def aggregate(rows: list[dict], baselines: list[str], seeds: list[int]) -> tuple[dict, dict]:
    """Per-baseline summaries and pairwise per-seed win rates."""
    by = {(r["baseline"], r["seed"]): r for r in rows}
    agg = {}
    for b in baselines:
        ok = [by[(b, s)]["metrics"] for s in seeds if by[(b, s)]["status"] == "ok"]
        agg[b] = {k: _summary([m[k] for m in ok]) for k in METRIC_KEYS}
        agg[b]["argmax_in_box_rate"] = _summary([float(np.mean(m["argmax_in_box"])) for m in ok])
        agg[b]["failed"] = sum(by[(b, s)]["status"] != "ok" for s in seeds)
    wins = {}
    for a in baselines:
        for b in baselines:
            if a == b:
                continue
            pairs = [
                (by[(a, s)]["metrics"], by[(b, s)]["metrics"])
                for s in seeds
                if by[(a, s)]["status"] == "ok" and by[(b, s)]["status"] == "ok"
            ]
            if pairs:
                wins[f"{a}>{b}"] = {k: sum(x[k] > y[k] for x, y in pairs) / len(pairs) for k in METRIC_KEYS}
    return agg, wins


@dataclass
class Report:
    rows: list[dict]
    aggregates: dict
    win_rates: dict
    theorem1: dict
    nash: dict
    config: dict
    version: str = __version__

    @property
    def failed(self) -> int:
        return sum(r["status"] != "ok" for r in self.rows)

    def to_dict(self) -> dict:
        rows = [{k: v for k, v in r.items() if k != "trace"} for r in self.rows]
        return {
            "version": self.version,
            "config": self.config,
            "rows": rows,
            "aggregates": self.aggregates,
            "win_rates": self.win_rates,
            "theorem1": self.theorem1,
            "nash": self.nash,
        }


def run_experiment(plan: ExperimentPlan, write: bool = True) -> Report:
    """Run every ``(baseline, seed)`` cell, then assemble the report in plan order.

    Initial noise depends only on the seed, so all baselines start from the same
    ``z_T``. With ``write`` and an output directory, the report, CSV and per-run
    traces are written there.
    """
    plan.validate()
    cells = [(plan, b, s) for b in plan.baselines for s in plan.seeds]
    if plan.jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=plan.jobs) as pool:
            rows = list(pool.map(_cell, cells))
    else:
        rows = [_cell(c) for c in cells]
    agg, wins = aggregate(rows, plan.baselines, plan.seeds)
    report = Report(
        rows=rows,
        aggregates=agg,
        win_rates=wins,
        theorem1=verify_theorem1(1000, 0).to_dict(),
        nash=nash_residual_summary(200, 0),
        config=plan.resolved_config(),
    )
    if write and plan.out_dir is not None:
        out = Path(plan.out_dir)
        emit_report(report, out / "report.json")
        if plan.trace != "none":
            tdir = out / "traces"
            tdir.mkdir(parents=True, exist_ok=True)
            for r in rows:
                if "trace" in r:
                    write_json(r["trace"], tdir / f"{r['baseline']}_seed{r['seed']}.json")
    return report


def _fmt(obj):
    if isinstance(obj, float) or isinstance(obj, np.floating):
        x = float(obj)
        if not math.isfinite(x):
            return repr(x)
        return float(f"{x:.10g}")
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _fmt(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_fmt(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _fmt(obj.tolist())
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(obj) -> str:
    """Deterministic JSON: sorted keys, floats at 10 significant digits."""
    return json.dumps(_fmt(obj), sort_keys=True, indent=2) + "\n"


def write_json(obj, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def metrics_csv(report: Report) -> str:
    tokens = report.config["scenario"]["layout"]["tokens"]
    ids = [t["id"] for t in tokens]
    header = ["baseline", "seed", "status", "coverage", "spread", "loglik", "argmax_in_box"]
    for i in ids:
        header += [f"coverage_t{i}", f"spread_t{i}", f"argmax_in_box_t{i}"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in report.rows:
        if r["status"] != "ok":
            w.writerow([r["baseline"], r["seed"], r["status"]] + [""] * (len(header) - 3))
            continue
        m = r["metrics"]
        row = [r["baseline"], r["seed"], "ok", f"{m['mean_coverage']:.10g}", f"{m['mean_spread']:.10g}",
               f"{m['loglik']:.10g}", f"{np.mean(m['argmax_in_box']):.10g}"]
        for c, s, a in zip(m["coverage"], m["spread"], m["argmax_in_box"]):
            row += [f"{c:.10g}", f"{s:.10g}", int(a)]
        w.writerow(row)
    return buf.getvalue()


def emit_report(report: Report, path: str | Path) -> tuple[Path, Path]:
    """Write ``report.json`` and a sibling ``metrics.csv``."""
    path = Path(path)
    write_json(report.to_dict(), path)
    csv_path = path.with_name("metrics.csv")
    csv_path.write_text(metrics_csv(report))
    return path, csv_path


def box_outline(mask: np.ndarray) -> np.ndarray:
    """Cells of ``mask`` touching a non-mask cell or the grid border."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def render_heatmap(attention, layout: LayoutSpec | None, path: str | Path, scale: int = 1) -> Path:
    """Write a binary 8-bit PGM of ``attention`` with box outlines at 255.

    Values are scaled linearly so the maximum maps to 255; ``scale`` repeats
    each cell into a ``scale x scale`` block.
    """
    a = np.asarray(attention, dtype=np.float64)
    if a.ndim != 2 or np.any(a < 0) or not np.all(np.isfinite(a)):
        raise ValueError("attention must be a finite nonnegative 2-D grid")
    peak = a.max()
    img = np.zeros(a.shape, dtype=np.uint8) if peak == 0 else np.round(a / peak * 255).astype(np.uint8)
    if layout is not None:
        for entry in layout:
            img[box_outline(rasterize_mask(entry.box, *a.shape))] = 255
    if scale > 1:
        img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes(order="C"))
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def parse_json_file(path: str | Path) -> dict:
    """Load JSON, turning decode errors into ``ConfigError`` with a file position."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def load_scenario_file(path: str | Path) -> tuple[Scenario, dict, dict]:
    """Scenario plus optional ``"guidance"`` and ``"langevin"`` override sections."""
    doc = parse_json_file(path)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top-level JSON value must be an object")
    guidance = doc.pop("guidance", {}) or {}
    langevin = doc.pop("langevin", {}) or {}
    try:
        scenario = Scenario.from_dict(doc)
    except (LayoutError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return scenario, guidance, langevin
