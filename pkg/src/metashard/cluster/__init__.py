"""Cluster runtime: broker, lease registry, executors, coordinators, master."""
from metashard.cluster.broker import Broker, BrokerClient, BrokerServer, Subscription
from metashard.cluster.client import ClusterClient
from metashard.cluster.config import ClusterConfig, load_config, parse_config
from metashard.cluster.coordinator import Coordinator
from metashard.cluster.executor import Executor
from metashard.cluster.master import Master, replica_host
from metashard.cluster.registry import LeaseKeeper, Registry, RegistryClient, RegistryServer

__all__ = [
    "Broker", "BrokerClient", "BrokerServer", "ClusterClient", "ClusterConfig", "Coordinator",
    "Executor", "LeaseKeeper", "Master", "Registry", "RegistryClient", "RegistryServer",
    "Subscription", "load_config", "parse_config", "replica_host",
]
