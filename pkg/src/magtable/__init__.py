"""Design and control toolkit for planar arrays of electromagnets.

Modules:
    magmodel: point-dipole fields, gradients, forces and torques.
    allocator: control matrices, current allocation, max fields, conditioning.
    layoutopt: penalty-function gradient descent over coil placement.
    geomkit: workspace accessibility by ray casting.
    calibkit: control matrices fitted from measurement sweeps.
    cli: the ``magtable`` command.
"""

from __future__ import annotations

__version__ = "0.1.0"
