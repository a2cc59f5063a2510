import numpy as np
import pytest

from diffiso.fields import SphereField, TorusField, sample_field_to_grid


@pytest.fixture(scope="session")
def sphere_grid_32():
    return sample_field_to_grid(SphereField(radius=0.35), (32, 32, 32),
                                (0.0, 0.0, 0.0), 1.0 / 31)


@pytest.fixture(scope="session")
def torus_grid_48():
    return sample_field_to_grid(TorusField(major=0.3, minor=0.12), (48, 48, 48),
                                (0.0, 0.0, 0.0), 1.0 / 47)


@pytest.fixture(scope="session")
def sphere_mesh_32(sphere_grid_32):
    from diffiso.marching_cubes import extract
    mesh, jac = extract(sphere_grid_32, 0.0)
    return mesh, jac


def cube_surface_mesh():
    """Unit cube surface as 12 outward-oriented triangles."""
    from diffiso.mesh import IndexedMesh
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)],
                 dtype=float)
    tris = [
        [0, 1, 3], [0, 3, 2],   # x = 0
        [4, 6, 7], [4, 7, 5],   # x = 1
        [0, 4, 5], [0, 5, 1],   # y = 0
        [2, 3, 7], [2, 7, 6],   # y = 1
        [0, 2, 6], [0, 6, 4],   # z = 0
        [1, 5, 7], [1, 7, 3],   # z = 1
    ]
    return IndexedMesh(vertices=v, triangles=tris)
