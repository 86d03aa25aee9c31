"""Desk-scale laboratory for parameter-cycling transformers.

Four stack variants share one implementation: a vanilla stack, whole-stack
cycling, head-tail decoupled cycling (first and last layers run once, the
middle block repeats), and the zero-token variant that adds a trainable
attention-only slot per (cycled layer, cycle) plus a per-layer FFN gate.
The zero-slot attention mass doubles as a per-cycle halting signal for
adaptive-depth decoding.
"""

__version__ = "0.1.0"
