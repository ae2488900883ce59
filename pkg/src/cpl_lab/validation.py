"""Input validation helpers shared by the solvers, losses and estimators."""
import numpy as np

from .exceptions import ContractError, ParameterError

ROW_TOL = 1e-9
LOG_ROW_TOL = 1e-8


def check_table(table, shape=None, name="table"):
    """Return ``table`` as a finite 2-D float array, optionally checking its shape."""
    arr = np.asarray(table, dtype=float)
    if arr.ndim != 2:
        raise ParameterError(f"{name} must be 2-D, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ParameterError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite entries")
    return arr


def check_policy(policy, shape=None, tol=ROW_TOL):
    """Validate a row-stochastic [S][A] table."""
    pol = check_table(policy, shape, "policy")
    if np.any(pol < 0):
        raise ParameterError("policy has negative entries")
    bad = np.flatnonzero(np.abs(pol.sum(axis=1) - 1.0) > tol)
    if bad.size:
        raise ParameterError(f"policy rows {bad.tolist()} do not sum to 1")
    return pol


def check_log_policy(log_policy, shape=None, tol=LOG_ROW_TOL):
    """Validate a table of normalized log-probabilities."""
    arr = np.asarray(log_policy, dtype=float)
    if arr.ndim != 2:
        raise ContractError(f"log_policy must be 2-D, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ContractError(f"log_policy has shape {arr.shape}, expected {tuple(shape)}")
    if np.any(np.isnan(arr)) or np.any(arr == np.inf):
        raise ContractError("log_policy contains NaN or +inf")
    bad = np.flatnonzero(np.abs(np.exp(arr).sum(axis=1) - 1.0) > tol)
    if bad.size:
        raise ContractError(f"log_policy rows {bad.tolist()} are not normalized")
    return arr


def check_segment(segment, num_states, num_actions):
    for s, a in segment.pairs:
        if not (0 <= s < num_states and 0 <= a < num_actions):
            raise ParameterError(f"segment entry {(s, a)} out of range")


def check_fraction(value, name, low_open=True):
    value = float(value)
    ok = (0.0 < value <= 1.0) if low_open else (0.0 <= value <= 1.0)
    if not ok:
        raise ParameterError(f"{name} must lie in {'(0, 1]' if low_open else '[0, 1]'}, got {value}")
    return value


def check_states(states, num_states):
    idx = np.asarray(states, dtype=int).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= num_states):
        raise ParameterError(f"state indices must lie in [0, {num_states})")
    return idx
