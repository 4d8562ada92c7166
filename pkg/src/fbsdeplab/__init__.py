"""Monte Carlo laboratory for partially observed forward-backward systems with jumps."""

from .errors import (CoefficientError, DomainOverflow, FbsdepLabError, IllConditionedBasis,
                     InsufficientPaths, InvalidArgument, InvalidTilt, NoContraction, NumericDivergence,
                     SingularInitialization, SpecError, UnclosedSystem)
from .fbsdep import (FbsdepSolution, simulate_forward, solve_bsdep, solve_coupled_picard,
                     solve_decoupling_field)
from .filtering import (FilterPath, FilterSystem, LinearFilterSystem, integrate_innovation_filter,
                        particle_oracle)
from .girsanov import simulate_gamma_tilde
from .linear import LinearCoefficients, affine_field
from .lq import LqCoefficients, simulate_filter_fbsdfe, solve_riccati_system, verify_optimality
from .problem import FbsdepProblem
from .randmeasures import (DriverBundle, MarkSpace, make_time_grid, sample_driver_bundle,
                           sample_drivers)
from .specs import load_spec

__version__ = "0.1.0"
