"""Cantor-Anderson localization laboratory.

Cantor measures with super-exponentially shrinking intervals, antichain
bounds in products of chains, finite-difference Anderson Hamiltonians with
free sites, and the scale-by-scale Wegner experiment.
"""

__version__ = "0.1.0"

from .cantor import CantorParams, CantorSet, max_resolvable_depth
from .errors import LabError
from .hamiltonian import (
    BoxSpec,
    Configuration,
    FiniteVolumeOperator,
    FreeProbePolicy,
    SingleSite,
    assemble,
    eigenvalue_derivatives,
    green_decay,
    is_good_box,
    resolvent_norm,
    track_eigenvalue,
)
from .poset import (
    Antichain,
    LatticePoset,
    antichain_probability_bound,
    brute_force_max_antichain,
    is_comparable,
    lym_sum,
    max_rank_check,
    random_antichain,
    rank_numbers,
)
from .wegner import (
    BConfSet,
    BranchEvaluator,
    ConfigClass,
    ScaleSchedule,
    WegnerExperimentConfig,
    check_density,
    class_order,
    classify,
    localization_fit,
    refine_bconfset,
    resolution_of,
    separation_check,
    wegner_monte_carlo,
)
