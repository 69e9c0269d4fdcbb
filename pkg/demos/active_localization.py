"""
Single view, passive multi-view and learned active localization
===============================================================

One gap setting end to end at reduced scale: train the place classifier on
rendered views, sample train/test poses separated by a domain gap, train the
nearest-neighbor Q planner on the train side, and compare the three methods
on the test side. Validation-based checkpoint selection (DA) closes the loop.

Runs in well under a minute; the full experiment is ``semloc run``.
"""

import logging

import numpy as np

from semloc import harness
from semloc.world import SplitSpec, generate_world, sample_splits

logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = harness.Config(n_scenes=4000, gcn_epochs=40, n_train_episodes=3000, checkpoint_period=500)
world = generate_world(seed=0)

model, acc = harness.build_gcn(world, cfg, seed=0)
print(f"GCN train accuracy {acc:.3f} over {world.grid.n_classes} classes")
perception = harness.Perception(world, model)

splits = sample_splits(world, SplitSpec(0.6, 50), np.random.default_rng(0))
print(f"{len(splits.train)} train / {len(splits.test)} test poses, gap T_xy=0.6 m, T_theta=50 deg")

sv = harness.evaluate(perception, splits.test, cfg, harness.SINGLE_VIEW)
mv = harness.evaluate(perception, splits.test, cfg, harness.PASSIVE)
db = harness.train_planner(perception, splits.train, cfg)
ours = harness.evaluate(perception, splits.test, cfg, harness.ACTIVE, db)
best, scores = harness.uda_select(perception, db, splits.validation, cfg)
da = harness.evaluate(perception, splits.test, cfg, harness.ACTIVE, db.restore(best))

print(f"\nTop-1 (%)  SV {sv:.0f}   MV {mv:.0f}   Ours {ours:.0f}   DA {da:.0f} (checkpoint {best})")
print("validation accuracy per checkpoint:", scores)
print("records per action:", db.counts())

# what did the planner learn to do?
rng = np.random.default_rng(1)
actions = []
for p in splits.test[:50]:
    actions += harness.run_episode(perception, p, cfg, harness.ACTIVE, rng, db).actions
print("greedy action mix (left, right, forward):", np.bincount(actions, minlength=3) / len(actions))
print("timing (ms per uncached call):", perception.timing_summary())
