"""Dual-view smart contract vulnerability detection.

The source view turns a solc AST into an importance-weighted graph encoded
by an edge-weighted graph attention network; the bytecode view disassembles
EVM code, extracts control-flow paths and encodes them with a two-layer GRU
and attention pooling. A softmax classifier fuses both views.
"""

__version__ = "0.1.0"
