"""Mixed finite elements for Stokes-Darcy optimal control."""

from .mesh import (Mesh, GeometryError, Rectangle, build_two_domain_mesh,
                   refine_uniform, refine, interface_edges)
from .quadrature import make_quadrature, QuadratureRule
from .spaces import Spaces, build_spaces, build_space, FeFunction, eval_basis, dof_map
from .assembly import ProblemData, InterfaceResiduals, DataError
from .reconstruction import (ReconstructionOperator, build_reconstruction,
                             rt_interpolate, consistency_functional)
from .system import BlockSystem, Solution, SolverError, build_system, solve, evaluate_cost

__version__ = "0.1.0"
