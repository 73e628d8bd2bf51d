"""Sort-middle work forwarding between ranks, with a multi-rank harness,
two driver applications and a throughput benchmark."""
from .comm import CommConfig, Communicator, create_communicator
from .forward import (EmitView, ForwardingContext, QueueOverflowError, WorkItemSchema,
                      compute_segments, create_context, sort_and_gather)
from .harness import LaunchError, RunReport, launch, run_rounds

__all__ = [
    "CommConfig", "Communicator", "create_communicator", "EmitView", "ForwardingContext",
    "QueueOverflowError", "WorkItemSchema", "compute_segments", "create_context",
    "sort_and_gather", "LaunchError", "RunReport", "launch", "run_rounds",
]
__version__ = "0.1.0"
