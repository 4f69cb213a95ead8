import os
import sys

# pin BLAS threading before numpy gets imported: keeps runs bit-reproducible
# and honest about the single-core runtime budgets
if "numpy" not in sys.modules:
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(var, "1")
