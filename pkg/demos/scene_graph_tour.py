"""
From a rendered view to a rank state
====================================

Render one camera view in a generated room, turn the semantic regions into a
scene graph, and push it through an (untrained) GCN to get the reciprocal
rank vector that the planner uses as its state.
"""

import numpy as np

from semloc.embedder import GcnModel, gcn_forward, scores_to_rank_state, top_classes
from semloc.scenegraph import META_CLASSES, build_graph, unpack_feature
from semloc.world import generate_world, render

world = generate_world(seed=0)
print(f"room {world.bounds}, {len(world.objects)} objects, {world.grid.n_classes} place classes")

# a view from the middle of the room looking along +y
pose = (4.0, 3.0, 90.0)
regions = render(world, pose)
for r in regions:
    x0, y0, x1, y1 = r.bbox
    print(f"  {META_CLASSES[r.label]:<12} box ({x0:6.1f}, {y0:6.1f}) - ({x1:6.1f}, {y1:6.1f})")

# small regions are dropped, the rest become one node each
graph = build_graph(regions)
print(f"\nscene graph: {len(graph.nodes)} nodes, {len(graph.edges)} edges")
for i, f in enumerate(graph.nodes):
    meta, size, loc = unpack_feature(f)
    print(f"  node {i}: feature {f:3d} = ({META_CLASSES[meta]}, size bin {size}, grid cell {loc})")
print("  edges:", list(graph.edges))

# GCN scores -> reciprocal ranks; only the order of the scores matters
model = GcnModel.init(world.grid.n_classes, seed=0)
scores = gcn_forward(graph, model)
state = scores_to_rank_state(scores)
print("\ntop-3 classes:", top_classes(state, 3), "with values", np.sort(state)[::-1][:3])
assert np.array_equal(scores_to_rank_state(2 * scores + 7), state)
