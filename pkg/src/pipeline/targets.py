"""Constraint targets written as expressions over the example policy's row moments."""
from functools import lru_cache
from typing import Callable, Dict, Union

import numpy as np
import sympy
from sympy.parsing.sympy_parser import convert_xor, parse_expr, standard_transformations

from core.errors import ConfigError
from core.types import ConditionalDensity

SYMBOLS = ("mean_of_g", "var_of_g", "std_of_g")


@lru_cache(maxsize=None)
def compile_target(expression: str) -> Callable[..., np.ndarray]:
    """Vectorized function of (mean_of_g, var_of_g, std_of_g) for an expression like "4*var_of_g + mean_of_g^2"."""
    names = {name: sympy.Symbol(name, real=True) for name in SYMBOLS}
    try:
        expr = parse_expr(expression, local_dict=names, transformations=standard_transformations + (convert_xor,))
    except Exception as e:
        raise ConfigError(f"cannot parse target expression '{expression}': {e}") from e
    if not isinstance(expr, sympy.Expr):
        raise ConfigError(f"target expression '{expression}' is not arithmetic")
    unknown = {str(s) for s in expr.free_symbols} - set(SYMBOLS)
    if unknown:
        raise ConfigError(f"target expression '{expression}' uses unknown names {sorted(unknown)}; "
                          f"allowed: {', '.join(SYMBOLS)}")
    return sympy.lambdify([names[n] for n in SYMBOLS], expr, modules="numpy")


def row_moments(policy: ConditionalDensity) -> Dict[str, np.ndarray]:
    """Mean, variance and standard deviation of each row of a (state -> control) conditional."""
    centers = policy.target.centers
    mean = policy.table @ centers
    var = np.maximum(policy.table @ centers ** 2 - mean ** 2, 0.0)
    return {"mean_of_g": mean, "var_of_g": var, "std_of_g": np.sqrt(var)}


def resolve_target(value: Union[float, int, str], moments: Dict[str, np.ndarray]) -> np.ndarray:
    """Per-row numeric targets; plain numbers are broadcast."""
    rows = moments["mean_of_g"].shape
    if isinstance(value, (int, float)):
        return np.full(rows, float(value))
    fn = compile_target(str(value).strip())
    out = np.broadcast_to(np.asarray(fn(*(moments[n] for n in SYMBOLS)), dtype=float), rows)
    if not np.all(np.isfinite(out)):
        raise ConfigError(f"target expression '{value}' is not finite on every row")
    return np.array(out)
