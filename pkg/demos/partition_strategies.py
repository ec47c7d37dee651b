"""Label maps of the six partition strategies on the OpenPose-18 skeleton.

Prints each strategy's labels for the neck (joint 1) and the nose (joint 0),
then shows that the partition matrices of every strategy add up to A + I.
"""
import numpy as np

from stgcn.data import SkeletonTemplate
from stgcn.graph import JOINT_NAMES, Strategy, build_openpose18_graph, label_map, partitioned_adjacency
from stgcn.train import REST_POSE

g = build_openpose18_graph()
cg = REST_POSE.mean(axis=0)
template = SkeletonTemplate(cg, np.hypot(*(REST_POSE - cg).T), REST_POSE)

for strategy in Strategy:
    m = label_map(strategy, g, template)
    for root in (1, 0):
        pretty = ", ".join(f"{JOINT_NAMES[j]}:{k}" for j, k in sorted(m.labels[root].items(), key=lambda kv: kv[1]))
        print(f"{strategy.value:>13}  K={m.kernel_size}  root {JOINT_NAMES[root]:<6} {pretty}")

total = {s.value: partitioned_adjacency(g, label_map(s, g, template)).matrices.sum(axis=0) for s in Strategy}
ref = g.adjacency + np.eye(18, dtype=int)
print("every stack sums to A + I:", all(np.array_equal(t, ref) for t in total.values()))
