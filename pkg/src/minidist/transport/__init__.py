"""Point-to-point messaging with three interchangeable backends.

``run_ranks(n, backend, program)`` executes one program per rank over
"sim" (deterministic discrete-event fat-tree), "threads" (in-process
parallel), or "tcp" (sockets). Programs talk through an endpoint:
send/recv for messages, expose/pull for owner-published buffers, plus
async variants returning futures and ``wait_any``.
"""

from minidist.transport.base import (
    DEFAULT_INFLIGHT,
    DEFAULT_MAX_SEGMENT,
    MAX_TAG,
    Future,
    Message,
    SubCommunicator,
)
from minidist.transport.runner import BACKENDS, RunResult, run_ranks
from minidist.transport.sim import SimEndpoint, SimNetwork
from minidist.transport.tcp import TcpEndpoint, parse_rendezvous
from minidist.transport.threads import ThreadEndpoint

__all__ = [
    "BACKENDS",
    "DEFAULT_INFLIGHT",
    "DEFAULT_MAX_SEGMENT",
    "MAX_TAG",
    "Future",
    "Message",
    "RunResult",
    "SimEndpoint",
    "SimNetwork",
    "SubCommunicator",
    "TcpEndpoint",
    "ThreadEndpoint",
    "parse_rendezvous",
    "run_ranks",
]
