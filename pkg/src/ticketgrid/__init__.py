"""ticketgrid: volunteer-compute ticket distribution over WebSocket, plus a
CPU CNN engine and a hybrid conv/fully-connected split training scheme."""

__version__ = "0.1.0"

from .protocol import PROTOCOL_VERSION, TaskDescriptor, Ticket, ErrorReport  # noqa: F401
from .scheduler import SchedulerConfig, TicketScheduler, SchedulerService  # noqa: F401
