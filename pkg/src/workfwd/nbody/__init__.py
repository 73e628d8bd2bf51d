from .exchange import PARTICLE, REFINEMENT_REQ, VIRTUAL_PARTICLE, essential_tree_exchange
from .morton import MortonPartition, morton_key
from .sim import NBodyConfig, compute_forces, leapfrog_step, migrate, run_nbody
from .tree import BHTree, build_tree, direct_accelerations, mac_accept, tree_accelerations

__all__ = [
    "PARTICLE", "REFINEMENT_REQ", "VIRTUAL_PARTICLE", "BHTree", "MortonPartition", "NBodyConfig",
    "build_tree", "compute_forces", "direct_accelerations", "essential_tree_exchange",
    "leapfrog_step", "mac_accept", "migrate", "morton_key", "run_nbody", "tree_accelerations",
]
