import numpy as np
import pytest

from isonorm.cloud import PointCloud, build_knn_graph, normalize, synth_shape
from isonorm.octree import build_octree
from isonorm import assembly


@pytest.fixture(scope="session")
def toy_problem():
    """Small reduced system (N=20, D=3) shared by operator-level tests."""
    cloud = synth_shape("sphere", 20, seed=7)
    nc = normalize(cloud)
    graph = build_knn_graph(nc, 4)
    tree = build_octree(nc, 3)
    ops, info = assembly.build_system(nc, tree, graph,
                                      alpha=100.0, beta=1.0, gamma=1.0)
    return {"cloud": cloud, "normalized": nc, "graph": graph,
            "tree": tree, "ops": ops, "info": info}


@pytest.fixture(scope="session")
def sphere_cloud_2k():
    cloud = synth_shape("sphere", 2000, seed=1)
    return normalize(cloud)


@pytest.fixture(scope="session")
def sphere_tree_d5(sphere_cloud_2k):
    return build_octree(sphere_cloud_2k, 5)
