"""Mesh I/O, virtual-camera SDF sampling, iso-surfaces and voxel grids."""
from .mesh import (DegenerateInputError, MeshParseError, Similarity, TriMesh, UnsupportedTopologyError,
                   box_mesh, ellipsoid_mesh, icosphere, load_mesh, normalize_to_unit_sphere, save_mesh)
from .sampling import (DepthMap, EmptySurfaceError, SampledShape, SamplingConfig, VirtualCamera,
                       fibonacci_rig, load_sampled, prepare_shape, render_depths, sample_free_space,
                       sample_surface, save_sampled, uniform_ball, unsigned_distance)
from .sdf import AnalyticSDF, ParameterError, analytic_sdf
from .volume import (FieldValueError, VoxelGrid, load_voxels, marching_cubes, mesh_from_voxels,
                     save_voxels, voxelize)
