"""Future link prediction on snapshot dynamic graphs.

The package turns timestamped edge streams into snapshot sequences, runs a
message-passing network whose per-layer node embeddings are carried across
time as recurrent hierarchical states, trains it incrementally one snapshot
at a time with meta-learned warm starts, and evaluates future-edge ranking
under rolling (live-update) and fixed-split protocols.
"""

__version__ = "0.1.0"
