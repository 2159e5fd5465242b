"""Self-stabilizing Byzantine pulse synchronization.

A pure per-node protocol state machine, a deterministic adversarial
discrete-event simulator around it, and analysis passes that execute the
synchrony definitions (synchronized sets, clusters, convergence, cycle
bounds, tightness) over recorded traces.
"""

from .params import (CycleTooShortError, DerivedConstants, FaultRatioError,
                     ParamsError, ProtocolParams, RangeError,
                     RefractoryFunction, absorbance_distance, build_ref,
                     check_ref_properties, derive_constants, min_cycle_bound,
                     tau, threshold_at, validate_params)
from .protocol import FireMessage, Node, NodeOutput
from .engine import Clock, EventOverflow, Scenario, ScenarioInvalid, run
from .trace import Trace, TraceRecord

__all__ = [
    "CycleTooShortError", "DerivedConstants", "FaultRatioError",
    "ParamsError", "ProtocolParams", "RangeError", "RefractoryFunction",
    "absorbance_distance", "build_ref", "check_ref_properties",
    "derive_constants", "min_cycle_bound", "tau", "threshold_at",
    "validate_params", "FireMessage", "Node", "NodeOutput", "Clock",
    "EventOverflow", "Scenario", "ScenarioInvalid", "run", "Trace",
    "TraceRecord",
]

__version__ = "0.1.0"
