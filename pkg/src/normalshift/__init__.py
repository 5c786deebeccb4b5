"""Force fields admitting the normal shift of hypersurfaces: construction,
verification of the defining equations, global continuation, monodromy,
gauge transformations, and the shift itself."""

from .errors import NormalShiftError
from .expr import FieldExpr, Jet, eval_jet, eval_value, parse
from .geometry import (
    CoveringManifold,
    Covector,
    Hypersurface,
    MetricSpec,
    TangentVector,
    christoffel,
    deck_apply,
    lower_index,
    metric_at,
    raise_index,
    surface_frame,
)
from .fields import (
    ABFields,
    DerivedAB,
    ForceField,
    HWPair,
    a_from_hW,
    b_from_W,
    closedness_residual,
    collinearity_defect,
    force_ab,
    force_from_one_form,
    force_hw,
    normalizing_residual,
)
from .dynamics import State, Trajectory, integrate
from .pfaff import (
    AdmissibleF,
    MonodromyMap,
    PathSpec,
    Vw_along_path,
    continue_V,
    extract_h,
    f_norm_estimate,
    gauge_transform,
    invert_V,
    monodromy,
    path_independence_defect,
    straight_path_factory,
)
from .shift import (
    NuField,
    ShiftFamily,
    loop_closure_defect,
    normal_shift,
    orthogonality_defect,
    solve_nu,
)

__version__ = "0.1.0"

__all__ = [
    "NormalShiftError",
    "FieldExpr", "Jet", "parse", "eval_jet", "eval_value",
    "MetricSpec", "CoveringManifold", "Hypersurface",
    "TangentVector", "Covector",
    "metric_at", "christoffel", "surface_frame", "deck_apply",
    "raise_index", "lower_index",
    "HWPair", "ABFields", "DerivedAB", "ForceField",
    "b_from_W", "a_from_hW", "force_hw", "force_ab", "force_from_one_form",
    "closedness_residual", "normalizing_residual", "collinearity_defect",
    "State", "Trajectory", "integrate",
    "PathSpec", "AdmissibleF", "MonodromyMap",
    "continue_V", "Vw_along_path", "path_independence_defect", "invert_V",
    "straight_path_factory", "f_norm_estimate", "monodromy",
    "gauge_transform", "extract_h",
    "NuField", "ShiftFamily", "solve_nu", "normal_shift",
    "orthogonality_defect", "loop_closure_defect",
    "__version__",
]
