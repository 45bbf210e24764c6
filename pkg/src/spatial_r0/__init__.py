"""Basic reproduction number of spatial reaction-diffusion epidemic models."""

from .expr import differentiate, evaluate, parse_expression, to_string
from .grid import Grid, integrate, laplacian
from .model import CompartmentModel, check_assumptions, jacobians_at
from .dfe import DfeState, dfe_large_limit, dfe_small_limit, solve_dfe
from .r0 import assemble, compute_R0, sign_check
from .models import BUILTINS, builtin, make_sis, make_staged, make_vector_host, make_zika

__version__ = "0.1.0"
