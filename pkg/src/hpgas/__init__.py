"""Hierarchical PGAS runtime.

Intra-node one-sided transfers are plain loads and stores on shared-memory
segments; inter-node transfers go through an emulated passive-target RMA
engine over TCP.  Both are reached through one :class:`GlobalPointer`.
"""

from .errors import (AlignmentError, AlreadyInitializedError, CollectiveMismatchError,
                     DoubleFreeError, ForeignPointerError, HpgasError, NotAMemberError,
                     NotInitializedError, OutOfRangeError, PoolExhaustedError,
                     RendezvousTimeout, TransportError, UnknownSegmentError)
from .global_memory import NOT_LOCAL, GlobalPointer
from .rma import LOCAL, REMOTE
from .runtime import (Runtime, allgather, atomic_op64, barrier, current, dereference_local,
                      dereference_remote, finalize, get_blocking, init, local_alloc,
                      local_free, local_view, put_blocking, team_create, team_destroy,
                      team_memalloc, team_memfree, world)
from .segment import OP_ADD as ADD, OP_XOR as XOR
from .topology import RunConfig, Team, locality_split, same_node, unit_abs_to_rel, unit_rel_to_abs

__all__ = [
    "ADD", "XOR", "LOCAL", "REMOTE", "NOT_LOCAL",
    "GlobalPointer", "Runtime", "RunConfig", "Team",
    "init", "finalize", "current", "world", "team_create", "team_destroy",
    "team_memalloc", "team_memfree", "local_alloc", "local_free",
    "dereference_local", "dereference_remote", "local_view",
    "put_blocking", "get_blocking", "atomic_op64", "barrier", "allgather",
    "locality_split", "same_node", "unit_abs_to_rel", "unit_rel_to_abs",
    "HpgasError", "NotInitializedError", "AlreadyInitializedError",
    "CollectiveMismatchError", "NotAMemberError", "UnknownSegmentError",
    "OutOfRangeError", "AlignmentError", "PoolExhaustedError", "ForeignPointerError",
    "DoubleFreeError", "TransportError", "RendezvousTimeout",
]
