"""Minimal convolutional recurrent cells with parallel-scan training.

Five cell types over spatial grids: sequential references (ConvLSTM,
ConvGRU) and minimal cells (MinConvGRU, MinConvLSTM, MinConvExpLSTM)
whose linear state recurrence is evaluated sequentially, by Blelloch
pair scan, or in log domain. Includes a small reverse-mode tape, periodic
2-D convolution, dataset generators (vorticity dynamics, advection), a
trainer, and runtime benchmarks.
"""

from .tensor import (
    ConfigError,
    ContractError,
    DomainError,
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    constant,
    finite_diff_grad,
    map_unary,
    reduce,
    zip_binary,
)
from .conv import ConvKernel, conv1x1, conv2d_backward, conv2d_forward, conv2d_reference
from .scan import ScanCoeffs, scan_backward, scan_blelloch, scan_logdomain, scan_sequential
from .cells import CellSpec, cell_forward_sequence
from .network import Model, ModelSpec, build_model, count_params, geo_preset, ns_preset
from .data import NsConfig, StdfDataset, read_stdf, simulate_advection, simulate_navier_stokes, write_stdf
from .trainer import TrainConfig, adamw_step, cosine_lr, evaluate, fit, rmse
from .runtime import get_workers, set_workers

__version__ = "0.1.0"
