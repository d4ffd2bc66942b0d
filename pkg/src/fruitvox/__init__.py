"""fruitvox: count fruit in 3D with a semantic voxel radiance field.

Pipeline: synthesize a posed RGB + fruit-mask dataset from an analytic
orchard scene, train the voxel field on it, sample the field into a
fruit-only point cloud, and count fruits by cascaded clustering. See the
README for the CLI and file formats.
"""

from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401

__version__ = "0.1.0"
