"""Dense RGB-D fusion: rigid tracking into a hashed TSDF volume and
embedded-deformation non-rigid registration."""
import os

# must happen before numba is imported anywhere in the package
if "FUSEFORGE_THREADS" in os.environ:
    os.environ.setdefault("NUMBA_NUM_THREADS", os.environ["FUSEFORGE_THREADS"])
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
