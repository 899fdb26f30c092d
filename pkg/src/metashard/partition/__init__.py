"""Index construction: sampling, clustering, partitioning, shard assignment, routing."""
from metashard.partition.clustering import (
    best_center,
    fit_kmeans,
    fit_spherical_kmeans,
    kmeans,
    sample_dataset,
    spherical_kmeans,
    weight_centers,
)
from metashard.partition.index import (
    IndexParams,
    MetaIndex,
    Shard,
    ShardedIndex,
    assign_items,
    build_index,
    build_index_mips,
    build_naive,
    hot_center_weights,
    partition_bottom_layer,
    read_manifest,
    top_r_mips,
)
from metashard.partition.partitioner import (
    adjacency_matrix,
    edge_cut,
    is_local_optimum,
    partition_graph,
    weight_cap,
)

__all__ = [
    "IndexParams", "MetaIndex", "Shard", "ShardedIndex", "adjacency_matrix",
    "assign_items", "best_center", "build_index", "build_index_mips", "build_naive",
    "edge_cut", "fit_kmeans", "fit_spherical_kmeans", "hot_center_weights",
    "is_local_optimum", "kmeans", "partition_bottom_layer", "partition_graph",
    "read_manifest", "sample_dataset", "spherical_kmeans", "top_r_mips",
    "weight_cap", "weight_centers",
]
