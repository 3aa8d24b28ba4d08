"""Message compression, co-versioning, replacement triggering and deployment."""

from fedsim.model_mgmt.compression import CompressedUpdate, compress, decompress, quantization_bound
from fedsim.model_mgmt.coversion import (
    GENESIS_DIGEST,
    ChainRecord,
    atomic_write_bytes,
    CoVersionRecord,
    CoVersionRegistry,
    HashChainLog,
    query_lineage,
    record_co_version,
    verify_chain,
)
from fedsim.model_mgmt.deployment import DeploymentPlan, nearest_cluster, select_deployment
from fedsim.model_mgmt.trigger import TriggerState, check_replacement_trigger

__all__ = [
    "CompressedUpdate",
    "compress",
    "decompress",
    "quantization_bound",
    "GENESIS_DIGEST",
    "ChainRecord",
    "atomic_write_bytes",
    "CoVersionRecord",
    "CoVersionRegistry",
    "HashChainLog",
    "query_lineage",
    "record_co_version",
    "verify_chain",
    "DeploymentPlan",
    "nearest_cluster",
    "select_deployment",
    "TriggerState",
    "check_replacement_trigger",
]
