import os

# single-threaded BLAS keeps runs bit-reproducible and is faster at these sizes;
# must be set before numpy's first import
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
