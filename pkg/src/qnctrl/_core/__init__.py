"""Simulation core selection.

The hot loop (uniformized-chain stepping) has two interchangeable
implementations: a Cython extension and a pure-Python fallback.  Both consume
the same uniform stream in the same order, so they produce bitwise-identical
episodes; ``QNCTRL_FORCE_FALLBACK=1`` pins the fallback (used by the parity
tests and the benchmark).
"""

import os

from . import fallback

if os.environ.get("QNCTRL_FORCE_FALLBACK"):
    _impl = fallback
    COMPILED = False
else:
    try:
        from . import _simcore as _impl

        COMPILED = True
    except ImportError:
        _impl = fallback
        COMPILED = False

simulate_episode = _impl.simulate_episode
simulate_aggregate = _impl.simulate_aggregate
backend_name = "compiled" if COMPILED else "fallback"
