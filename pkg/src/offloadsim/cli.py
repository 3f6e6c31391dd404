"""Command-line experiment runner.

Exit codes: 0 success, 1 verification failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from offloadsim.costs import CostKnobs
from offloadsim.errors import ConfigError, DomainError, InfeasibleError, OffloadSimError
from offloadsim.hwmodel import HardwareProfile, choose_cast_strategy, load_profile
from offloadsim.memplan import (
    ModelConfig,
    PlacementMode,
    WeightPolicy,
    Workload,
    max_trainable_params,
    parse_model,
)
from offloadsim.partition import (
    MIB,
    PartitionPlan,
    build_buckets,
    evaluate_candidates,
    model_param_sizes,
)
from offloadsim.simsched import (
    MultiChipConfig,
    Parallelism,
    Schedule,
    ScheduleKind,
    ScheduleTrace,
    Toggle,
    ablation_run,
    idle_fraction,
    scan_sequence,
    simulate_multichip,
    throughput_estimate,
)
from offloadsim.simsched.ablation import TOGGLE_ORDER, run_config

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
CSV_SCHEMA_VERSION = 1


@dataclass
class ExperimentSpec:
    command: str
    model: str = "5b"
    models: list[str] = field(default_factory=list)
    bsz: int = 8
    seq: int = 1024
    seqs: list[int] = field(default_factory=list)
    steps: int = 200
    profile: str = "gh200"
    schedule: str = "both"
    weight_policy: str = "stationary"
    bucket_mb: float = 64
    gpu_buckets: str = "auto"
    chips: int = 1
    parallelism: str = "zero3"
    interconnect_gbps: float = 200.0
    iterations: int = 3
    out: Optional[str] = None
    seed: int = 0

    def as_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "out"}


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2 as well; keep our wording
        raise UsageError(message)


# ---------------------------------------------------------------------------
# argument helpers


def _parse_list(text, conv=str) -> list:
    """Comma-separated string or a TOML array."""
    if isinstance(text, (list, tuple)):
        return [conv(x) for x in text]
    return [conv(x) for x in str(text).replace(" ", "").split(",") if x]


def _load_config(path: str, command: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    section = data.get(command, {})
    flat = {k: v for k, v in data.items() if not isinstance(v, dict)}
    flat.update(section)
    return {k.replace("-", "_"): v for k, v in flat.items()}


def _policy(text: str) -> Optional[WeightPolicy]:
    key = text.lower()
    if key == "auto":
        return None
    for pol in WeightPolicy:
        if key == pol.value.lower():
            return pol
    raise ConfigError(f"weight-policy: expected stationary, flow or auto, got {text!r}")


def _parallelism(text: str) -> Parallelism:
    key = text.lower()
    for p in Parallelism:
        if key in (p.value.lower(), p.name.lower(), p.name.lower().split("_")[0]):
            return p
    raise ConfigError(f"parallelism: expected zero3 or ulysses, got {text!r}")


def _schedules(text: str) -> list[Schedule]:
    if text.lower() == "both":
        return [Schedule.BASELINE_STE, Schedule.SUPER_STV]
    try:
        return [Schedule.parse(s) for s in _parse_list(text)]
    except ConfigError as exc:
        raise ConfigError(f"schedule: {exc}") from None


def _profile(spec: ExperimentSpec) -> HardwareProfile:
    try:
        return load_profile(spec.profile)
    except ConfigError as exc:
        raise ConfigError(f"profile: {exc}") from None


def _model(text: str) -> ModelConfig:
    try:
        return parse_model(text)
    except (ConfigError, DomainError) as exc:
        raise ConfigError(f"model: {exc}") from None


def _bucket_bytes(spec: ExperimentSpec) -> int:
    bk = int(round(spec.bucket_mb * MIB))
    if bk < 4:
        raise ConfigError(f"bucket-mb: {spec.bucket_mb} is below the 4-byte alignment unit")
    return bk


# ---------------------------------------------------------------------------
# output helpers


def _table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    cells = [[str(h) for h in header]] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(x: Any) -> str:
    if isinstance(x, float):
        return f"{x:.4g}"
    if x is None:
        return "-"
    return str(x)


def _csv(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schema_version", *header])
    for r in rows:
        w.writerow([CSV_SCHEMA_VERSION, *("" if c is None else (repr(c) if isinstance(c, float)
                                                                 else c) for c in r)])
    return buf.getvalue()


class Output:
    def __init__(self, out: Optional[str]) -> None:
        self.dir = Path(out) if out else None
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str) -> None:
        if self.dir is not None:
            (self.dir / name).write_text(text)

    def json(self, name: str, obj: Any) -> None:
        self.write(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def _plan_for(schedule: Schedule, spec: ExperimentSpec, model: ModelConfig, w: Workload,
              profile: HardwareProfile, knobs: CostKnobs) -> PartitionPlan:
    bk = _bucket_bytes(spec)
    plan = build_buckets(model_param_sizes(model), bk)
    if spec.gpu_buckets == "auto":
        if schedule is Schedule.BASELINE_STE or spec.chips > 1:
            return plan
        (_, best), = evaluate_candidates(model, w, profile, [bk], knobs)
        return best
    try:
        n = int(spec.gpu_buckets)
    except ValueError:
        raise ConfigError(f"gpu-buckets: expected 'auto' or an integer, got {spec.gpu_buckets!r}")
    if not 0 <= n <= plan.count:
        raise ConfigError(f"gpu-buckets: {n} outside [0, {plan.count}]")
    return plan.with_gpu_resident(n)


def _summary_row(trace: ScheduleTrace) -> list:
    tp = throughput_estimate(trace)
    return [trace.meta["schedule"], trace.meta["policy"], trace.meta["gpu_resident"],
            tp.iteration_time, tp.flops_per_s / 1e12, tp.mfu, idle_fraction(trace, "GpuCompute"),
            idle_fraction(trace, "CpuCompute")]


SUMMARY_HEADER = ["schedule", "policy", "gpu_buckets", "iteration_s", "tflops", "mfu",
                  "gpu_idle", "cpu_idle"]


def cmd_simulate(spec: ExperimentSpec, out: Output) -> int:
    profile = _profile(spec)
    model = _model(spec.model)
    w = Workload(spec.bsz, spec.seq)
    knobs = CostKnobs(choose_cast_strategy(2 * _bucket_bytes(spec), profile), 1.0)
    cfg = MultiChipConfig(spec.chips, _parallelism(spec.parallelism),
                          spec.interconnect_gbps * 1e9 / 8, profile)
    rows = []
    for sched in _schedules(spec.schedule):
        plan = _plan_for(sched, spec, model, w, profile, knobs)
        kind = ScheduleKind(sched, plan, _policy(spec.weight_policy), knobs)
        trace = simulate_multichip(cfg, kind, model, w, profile, spec.iterations)
        tag = sched.value
        out.write(f"trace_{tag}.jsonl", trace.to_jsonl())
        out.write(f"trace_{tag}.csv", trace.to_csv())
        out.write(f"plan_{tag}.json", plan.to_json() + "\n")
        rows.append(_summary_row(trace))
    out.json("spec.json", spec.as_dict())
    out.write("summary.csv", _csv(SUMMARY_HEADER, rows))
    out.json("summary.json", [dict(zip(SUMMARY_HEADER, r)) for r in rows])
    print(f"{model.name} ({model.param_count / 1e9:.2f}B) bsz={spec.bsz} seq={spec.seq} "
          f"on {profile.name}, {spec.chips} chip(s)")
    print(_table(SUMMARY_HEADER, rows))
    if len(rows) == 2:
        print(f"speedup {rows[0][3] / rows[1][3]:.2f}x")
    return EXIT_OK


def cmd_compare(spec: ExperimentSpec, out: Output) -> int:
    """Baseline system (every optimization off) against the full system."""
    profile = _profile(spec)
    models = spec.models or [spec.model]
    w = Workload(spec.bsz, spec.seq)
    header = ["model", "params_b", "baseline_s", "baseline_tflops", "full_s", "full_tflops",
              "full_mfu", "speedup"]
    rows = []
    for name in models:
        model = _model(name)
        base = throughput_estimate(run_config(frozenset(), model, w, profile))
        full = throughput_estimate(run_config(frozenset(TOGGLE_ORDER), model, w, profile))
        rows.append([model.name, model.param_count / 1e9, base.iteration_time,
                     base.flops_per_s / 1e12, full.iteration_time, full.flops_per_s / 1e12,
                     full.mfu, base.iteration_time / full.iteration_time])
    out.json("spec.json", spec.as_dict())
    out.write("compare.csv", _csv(header, rows))
    print(_table(header, rows))
    return EXIT_OK


def cmd_ablate(spec: ExperimentSpec, out: Output, toggles: Optional[str]) -> int:
    profile = _profile(spec)
    model = _model(spec.model)
    chosen = [Toggle.parse(t) for t in _parse_list(toggles)] if toggles else None
    steps = ablation_run(model, Workload(spec.bsz, spec.seq), profile, chosen)
    header = ["enabled", "iteration_s", "tflops", "mfu", "gain"]
    base = steps[0].flops_per_s
    rows = [[s.label(), s.iteration_time, s.flops_per_s / 1e12, s.mfu, s.flops_per_s / base]
            for s in steps]
    out.json("spec.json", spec.as_dict())
    out.write("ablation.csv", _csv(header, rows))
    print(_table(header, rows))
    return EXIT_OK


def cmd_scan_seq(spec: ExperimentSpec, out: Output) -> int:
    profile = _profile(spec)
    model = _model(spec.model)
    seqs = spec.seqs or [1 << k for k in range(12, 21)]
    if not seqs:
        raise ConfigError("seqs: at least one sequence length is required")
    res = scan_sequence(model, profile, seqs, chips=spec.chips,
                        parallelism=_parallelism(spec.parallelism), bsz=spec.bsz,
                        interconnect_bw=spec.interconnect_gbps * 1e9 / 8,
                        bucket_bytes=_bucket_bytes(spec))
    st = res.frontier(WeightPolicy.STATIONARY)
    fl = res.frontier(WeightPolicy.FLOW)
    header = ["seq", "stationary_feasible", "flow_feasible", "policy", "iteration_s", "mfu",
              "gpu_idle", "frontier"]
    rows = []
    for r in res.rows:
        mark = ",".join(n for n, f in (("stationary", st), ("flow", fl)) if r.seq == f)
        rows.append([r.seq, r.stationary_feasible, r.flow_feasible, r.policy or "OOM",
                     r.iteration_time, r.mfu, r.gpu_idle, mark])
    out.json("spec.json", spec.as_dict())
    out.write("scan_seq.csv", _csv(header, rows))
    print(f"{model.name}, {spec.chips} chip(s), {_parallelism(spec.parallelism).value}")
    print(_table(header, rows))
    ratio = res.frontier_ratio
    print(f"frontier: stationary {st}, flow {fl}, ratio {ratio:.3g}x")
    return EXIT_OK


def cmd_max_model(spec: ExperimentSpec, out: Output) -> int:
    profile = _profile(spec)
    header = ["mode", "max_params_b"]
    rows = [[m.value, max_trainable_params(profile, m) / 1e9] for m in PlacementMode]
    out.json("spec.json", spec.as_dict())
    out.write("max_model.csv", _csv(header, rows))
    print(f"{profile.name}")
    print(_table(header, rows))
    return EXIT_OK


def cmd_verify(spec: ExperimentSpec, out: Output, seeds: int, patterns: Optional[str],
               schedulers: Optional[str], mutate: str) -> int:
    from offloadsim.numcore.protocol import FAULT_PATTERNS, Mutation, Scheduler
    from offloadsim.numcore.verify import run_suite

    try:
        mutation = Mutation(mutate)
    except ValueError:
        raise ConfigError(f"mutate: expected one of {[m.value for m in Mutation]}") from None
    pats = _parse_list(patterns) if patterns else list(FAULT_PATTERNS)
    for p in pats:
        if p not in FAULT_PATTERNS:
            raise ConfigError(f"patterns: unknown fault pattern {p!r}")
    try:
        scheds = [Scheduler(s) for s in _parse_list(schedulers)] if schedulers else list(Scheduler)
    except ValueError as exc:
        raise ConfigError(f"schedulers: {exc}") from None
    if spec.steps < 0:
        raise ConfigError("steps: must be nonnegative")
    seed_list = list(range(spec.seed, spec.seed + seeds))
    report = run_suite(seed_list, pats, scheds, spec.steps, mutation=mutation)
    header = ["seed", "pattern", "scheduler", "result", "rollbacks", "skips", "clips",
              "first_mismatch"]
    rows = [[o.seed, o.pattern, o.scheduler, "pass" if o.ok else "FAIL", o.rollbacks, o.skips,
             o.clips, o.first_mismatch] for o in report.outcomes]
    out.json("spec.json", spec.as_dict())
    out.write("verify.csv", _csv(header, rows))
    print(_table(header, rows))
    for o in report.failures:
        print(f"mismatch: seed {o.seed} pattern {o.pattern} scheduler {o.scheduler} "
              f"iteration {o.first_mismatch}: {o.detail}", file=sys.stderr)
    ok = report.passed
    print(f"{len(report.outcomes) - len(report.failures)}/{len(report.outcomes)} runs "
          f"bitwise identical to the synchronous oracle")
    return EXIT_OK if ok else EXIT_VERIFY_FAILED


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file whose keys mirror the long options")
    p.add_argument("--profile", help="profile name or path (default gh200)")
    p.add_argument("--out", help="directory for trace, plan and CSV files")
    p.add_argument("--seed", type=int)


def _workload(p: argparse.ArgumentParser, bsz: bool = True) -> None:
    p.add_argument("--model", help="preset name, or custom:LAYERS,HIDDEN[,VOCAB]")
    if bsz:
        p.add_argument("--bsz", type=int)
    p.add_argument("--seq", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="offloadsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate one or both schedules")
    _common(p)
    _workload(p)
    p.add_argument("--schedule", help="ste, stv or both")
    p.add_argument("--weight-policy", help="stationary, flow or auto")
    p.add_argument("--bucket-mb", type=float)
    p.add_argument("--gpu-buckets", help="auto or a bucket count")
    p.add_argument("--chips", type=int)
    p.add_argument("--parallelism", help="zero3 or ulysses")
    p.add_argument("--interconnect-gbps", type=float)
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("compare", help="baseline against full system across models")
    _common(p)
    _workload(p)
    p.add_argument("--models", help="comma-separated presets")

    p = sub.add_parser("ablate", help="cumulative optimization ladder")
    _common(p)
    _workload(p)
    p.add_argument("--toggles", help="subset of " + ",".join(t.value for t in Toggle))

    p = sub.add_parser("scan-seq", help="sequence-length feasibility and MFU sweep")
    _common(p)
    _workload(p)
    p.add_argument("--seqs", help="comma-separated sequence lengths")
    p.add_argument("--chips", type=int)
    p.add_argument("--parallelism")
    p.add_argument("--interconnect-gbps", type=float)
    p.add_argument("--bucket-mb", type=float)

    p = sub.add_parser("max-model", help="largest trainable model per placement mode")
    _common(p)

    p = sub.add_parser("verify", help="speculative vs synchronous equivalence suite")
    _common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--seeds", type=int, default=None, help="number of seeds (default 10)")
    p.add_argument("--patterns", help="subset of clean,nan,clip")
    p.add_argument("--schedulers", help="subset of serialized,two-task")
    p.add_argument("--mutate", default=None, help="inject a known bug (negative control)")
    return parser


_SCAN_DEFAULTS = {"bsz": 1, "seq": 0, "chips": 8, "parallelism": "ulysses", "model": "13b"}
_EXTRA_KEYS = {"toggles", "seeds", "patterns", "schedulers", "mutate", "config"}


def _spec_from(ns: argparse.Namespace) -> tuple[ExperimentSpec, dict]:
    values = {k: v for k, v in vars(ns).items() if v is not None}
    cfg = _load_config(values["config"], ns.command) if "config" in values else {}
    known = set(ExperimentSpec.__dataclass_fields__) | _EXTRA_KEYS
    for key in cfg:
        if key not in known or key == "command":
            raise ConfigError(f"config: unknown field {key!r}")
    merged: dict = {}
    if ns.command == "scan-seq":
        merged.update(_SCAN_DEFAULTS)
    merged.update(cfg)
    merged.update(values)
    extras = {k: merged.pop(k) for k in list(merged) if k in _EXTRA_KEYS}
    extras.pop("config", None)
    merged["command"] = ns.command
    for key in ("models", "seqs"):
        if key in merged:
            merged[key] = _parse_list(merged[key], int if key == "seqs" else str)
    try:
        spec = ExperimentSpec(**merged)
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from None
    if spec.bsz <= 0:
        raise ConfigError("bsz: must be positive")
    if spec.seq < 0 or (spec.seq == 0 and ns.command != "scan-seq"):
        raise ConfigError("seq: must be positive")
    if spec.chips < 1:
        raise ConfigError("chips: must be at least 1")
    return spec, extras


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        spec, extras = _spec_from(ns)
        out = Output(spec.out)
        cmd = ns.command
        if cmd == "simulate":
            return cmd_simulate(spec, out)
        if cmd == "compare":
            return cmd_compare(spec, out)
        if cmd == "ablate":
            return cmd_ablate(spec, out, extras.get("toggles"))
        if cmd == "scan-seq":
            return cmd_scan_seq(spec, out)
        if cmd == "max-model":
            return cmd_max_model(spec, out)
        return cmd_verify(spec, out, int(extras.get("seeds", 10)), extras.get("patterns"),
                          extras.get("schedulers"), extras.get("mutate") or "none")
    except InfeasibleError as exc:
        print(f"error: infeasible placement: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OffloadSimError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
