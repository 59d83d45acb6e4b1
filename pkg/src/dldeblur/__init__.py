"""Supervised dictionary learning for non-blind deblurring and digital zoom."""

from .dict_learn import (Model, PatchPairSet, TrainConfig, TrainResult, init_unsupervised,
                         ridge_fit, train_supervised)
from .errors import (ConvergenceError, CorruptModelError, DeblurError, DegenerateActiveSetError,
                     EmptyBatchError, InvalidInputError, NumericError)
from .imageproc import EXPERIMENTS, KernelSpec, degrade, make_kernel, read_image, write_image
from .restore import RestorationReport, deblur, isnr, psnr, zoom
from .sparse_coding import SparseCode, lasso_solve, project_unit_columns
from .storage import load_model, save_model

__version__ = "0.1.0"
