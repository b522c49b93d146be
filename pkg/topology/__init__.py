"""
Fabric model: topology graph, tier classification, segments and reachability.

Kept import-free so ``config`` can pull enums from here without a cycle.
"""
