"""Discrete-event simulation of offloaded training schedules."""

from offloadsim.simsched.schedules import (
    DEFAULT_ITERATIONS,
    GraphSpec,
    MultiChipConfig,
    Parallelism,
    Schedule,
    ScheduleKind,
    build_graph,
    run_graph,
    simulate,
    simulate_multichip,
    uniform_times,
)
from offloadsim.simsched.trace import (
    Event,
    Label,
    Resource,
    ScheduleTrace,
    Throughput,
    check_trace,
    idle_fraction,
    throughput_estimate,
    validate_trace,
)

__all__ = [
    "DEFAULT_ITERATIONS", "Event", "GraphSpec", "Label", "MultiChipConfig", "Parallelism",
    "Resource", "Schedule", "ScheduleKind", "ScheduleTrace", "Throughput", "build_graph",
    "check_trace", "idle_fraction", "run_graph", "simulate", "simulate_multichip",
    "throughput_estimate", "uniform_times", "validate_trace",
]

from offloadsim.simsched.ablation import (  # noqa: E402
    TOGGLE_ORDER,
    AblationStep,
    Toggle,
    ablation_run,
)

__all__ += ["AblationStep", "TOGGLE_ORDER", "Toggle", "ablation_run"]

from offloadsim.simsched.scan import ScanResult, ScanRow, scan_sequence  # noqa: E402

__all__ += ["ScanResult", "ScanRow", "scan_sequence"]
