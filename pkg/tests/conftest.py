import os

# single-threaded BLAS: the episode workload is all tiny matrices, and the
# determinism contract assumes a fixed reduction strategy
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
