"""Weakly supervised point-cloud segmentation over superpoint graphs."""

from .errors import SpsegError
from .pcio import PointCloud, SupervisionMask, load_cloud, save_cloud
from .partition import PartitionParams, build_graph, partition_cloud
from .trainkit import ModelParams, TrainConfig, evaluate, predict, train

__version__ = '0.1.0'

__all__ = [
    'SpsegError', 'PointCloud', 'SupervisionMask', 'load_cloud', 'save_cloud',
    'PartitionParams', 'build_graph', 'partition_cloud',
    'ModelParams', 'TrainConfig', 'evaluate', 'predict', 'train',
]
