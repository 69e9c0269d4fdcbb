"""Active self-localization from semantic scene graphs.

Modules, in pipeline order:

* ``scenegraph``: labeled image regions to node/edge scene graphs;
* ``embedder``: place-class grid, GCN classifier, reciprocal-rank states;
* ``tracker``: particle filter driven by rank-state observations;
* ``planner``: nearest-neighbor Q-learning with checkpoint restore;
* ``world``: synthetic rooms, renderer, motion and domain-gap splits;
* ``harness``: episodes, training, evaluation and result tables.
"""

__version__ = "0.1.0"
