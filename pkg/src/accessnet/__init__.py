"""Simulated edge-first cellular access network.

Modules follow the component boundaries of the system: ``model`` (shared
types), ``sync`` (desired-state streams), ``orchestrator``, ``agw``, ``ran``,
``dataplane``, ``charging``, ``federation``, ``simnet`` and ``cli``.
"""

__version__ = "0.1.0"
