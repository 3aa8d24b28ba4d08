"""FedAvg plus asynchronous, gossip, hierarchical and secure aggregation."""

from fedsim.aggregation.asynchronous import StalenessPolicy, async_aggregate, mixing_weight
from fedsim.aggregation.fedavg import ModelUpdate, fedavg, weighted_mean
from fedsim.aggregation.gossip import build_topology, gossip_round, leader_round, segment_bounds, validate_topology
from fedsim.aggregation.hierarchical import EdgeModel, HierarchicalAggregator, HierarchicalSchedule, hierarchical_round
from fedsim.aggregation.secure import (
    FIXED_POINT_SCALE,
    MaskedUpdate,
    decode_fixed,
    dp_noise,
    encode_fixed,
    mask,
    pairwise_seeds,
    secure_sum,
)

__all__ = [
    "StalenessPolicy",
    "async_aggregate",
    "mixing_weight",
    "ModelUpdate",
    "fedavg",
    "weighted_mean",
    "build_topology",
    "gossip_round",
    "leader_round",
    "segment_bounds",
    "validate_topology",
    "EdgeModel",
    "HierarchicalAggregator",
    "HierarchicalSchedule",
    "hierarchical_round",
    "FIXED_POINT_SCALE",
    "MaskedUpdate",
    "decode_fixed",
    "dp_noise",
    "encode_fixed",
    "mask",
    "pairwise_seeds",
    "secure_sum",
]
