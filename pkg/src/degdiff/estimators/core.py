"""Monte Carlo summaries, chunked fan-out over streams, and inequality reports."""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..rng import BrownianDriver

NONFINITE_ABORT_FRACTION = 1e-3
PATH_NODE_BUDGET = 1 << 23

VERDICTS = ("holds", "holds-at-equality", "violated-within-noise", "violated")
PASSING = ("holds", "holds-at-equality")


class NonFiniteSampleError(ArithmeticError):
    pass


@dataclass(frozen=True)
class McResult:
    mean: float
    stderr: float
    n: int
    n_nonfinite: int = 0

    def to_dict(self):
        return {"mean": self.mean, "stderr": self.stderr, "n": self.n}


@dataclass(frozen=True)
class VectorMcResult:
    mean: np.ndarray
    stderr: np.ndarray
    n: int

    def to_dict(self):
        return {"mean": self.mean.tolist(), "stderr": self.stderr.tolist(), "n": self.n}


def summarize(samples, n_nonfinite=0):
    """Mean and standard error (sample std with ddof 1 over sqrt n)."""
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n < 2:
        raise ValueError("need at least two samples")
    mean = float(np.mean(x))
    sd = float(np.std(x, ddof=1))
    return McResult(mean, sd / math.sqrt(n), n, n_nonfinite)


def vector_summary(samples):
    """Componentwise mean and standard error for samples of shape (n, k)."""
    x = np.asarray(samples, dtype=float)
    n = x.shape[0]
    return VectorMcResult(x.mean(axis=0), x.std(axis=0, ddof=1) / math.sqrt(n), n)


def drop_nonfinite(samples):
    """Remove non-finite samples; abort when more than 0.1% are affected."""
    x = np.asarray(samples, dtype=float)
    bad = ~np.isfinite(x)
    if x.ndim > 1:
        bad = bad.reshape(x.shape[0], -1).any(axis=1)
    k = int(bad.sum())
    if k > NONFINITE_ABORT_FRACTION * len(x):
        raise NonFiniteSampleError(f"{k} of {len(x)} samples are not finite")
    return x[~bad], k


def chunk_size(n_paths, nodes, width=1):
    """Paths per chunk, a function of problem size only (never of workers)."""
    per_path = max(1, nodes * width)
    return int(min(n_paths, max(16, PATH_NODE_BUDGET // per_path)))


def stream_chunks(n_paths, size, offset=0):
    return [np.arange(offset + a, offset + min(a + size, n_paths)) for a in range(0, n_paths, size)]


def map_streams(fn, n_paths, size, workers=1, offset=0):
    """Apply ``fn(streams)`` to consecutive chunks; results in stream order."""
    chunks = stream_chunks(n_paths, size, offset)
    if workers is None or workers <= 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def gather(parts):
    """Concatenate per-chunk dicts of arrays along the path axis."""
    return {k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]}


def mc(sampler, n_paths, seed, workers=1, chunk=None):
    """Monte Carlo mean of ``sampler(driver, streams)`` over streams 0..n_paths-1.

    The sampler returns one value per stream.  Non-finite values are dropped
    and counted; more than 0.1% aborts.
    """
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    driver = BrownianDriver(seed)
    size = chunk or chunk_size(n_paths, 1)
    parts = map_streams(lambda s: np.asarray(sampler(driver, s), dtype=float), n_paths, size, workers)
    x, bad = drop_nonfinite(np.concatenate(parts))
    return summarize(x, bad)


# --- inequality reports ----------------------------------------------------

def variance_terms(F):
    """Per-path values whose mean is the unbiased sample variance.

    They are also the influence values used for the standard error.
    """
    F = np.asarray(F, dtype=float)
    n = len(F)
    return (F - F.mean()) ** 2 * n / (n - 1)


def entropy_terms(F, clip=1e-8):
    """Ent(F^2) and per-path influence values.

    F is clipped to |F| >= clip before forming g = F^2.  The influence
    value g log g - (log mean(g) + 1) g has the same mean as the plug-in
    entropy up to the constant mean(g), and its spread gives the delta
    method standard error.
    """
    F = np.asarray(F, dtype=float)
    F = np.where(np.abs(F) < clip, np.where(F < 0, -clip, clip), F)
    g = F * F
    mg = g.mean()
    glog = g * np.log(g)
    ent = glog - g * math.log(mg)
    influence = glog - (math.log(mg) + 1.0) * g
    return ent, influence


def verdict(lhs, rhs, slack, combined):
    """Classification of an estimated inequality lhs <= rhs.

    slack < -3c: violated.  |slack| <= 3c: holds-at-equality when both
    sides are positive or both vanish, otherwise holds (slack >= 0) or
    violated-within-noise.  slack > 3c: holds.
    """
    scale = max(abs(lhs), abs(rhs), 1.0)
    tiny = 1e-12 * scale
    band = max(3.0 * combined, tiny)
    if slack < -band:
        return "violated"
    if abs(slack) <= band:
        both_pos = lhs > tiny and rhs > tiny
        both_zero = abs(lhs) <= tiny and abs(rhs) <= tiny
        if both_pos or both_zero:
            return "holds-at-equality"
        return "holds" if slack >= 0 else "violated-within-noise"
    return "holds"


@dataclass
class InequalityReport:
    name: str
    lhs: McResult
    rhs: McResult
    slack: float
    combined_stderr: float
    verdict: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    details: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.verdict in PASSING

    def to_dict(self):
        out = {
            "name": self.name,
            "lhs": self.lhs.to_dict(),
            "rhs": self.rhs.to_dict(),
            "slack": self.slack,
            "combined_stderr": self.combined_stderr,
            "verdict": self.verdict,
            "params": self.params,
            "seed": self.seed,
        }
        if self.details:
            out["details"] = self.details
        return out


def paired_report(name, lhs_value, lhs_infl, rhs_samples, params=None, seed=0, details=None):
    """Report for lhs <= rhs where both come from the same paths.

    ``lhs_infl`` holds per-path influence values of the LHS estimator and
    ``rhs_samples`` the per-path RHS values; the combined standard error is
    that of their pathwise difference.
    """
    lhs_infl = np.asarray(lhs_infl, dtype=float)
    rhs_samples = np.asarray(rhs_samples, dtype=float)
    n = len(rhs_samples)
    lhs = McResult(float(lhs_value), float(np.std(lhs_infl, ddof=1) / math.sqrt(n)), n)
    rhs = summarize(rhs_samples)
    combined = float(np.std(rhs_samples - lhs_infl, ddof=1) / math.sqrt(n))
    slack = rhs.mean - lhs.mean
    return InequalityReport(name, lhs, rhs, slack, combined,
                            verdict(lhs.mean, rhs.mean, slack, combined),
                            params or {}, seed, details or {})


def variance_report(name, F, rhs_samples, **kw):
    v = variance_terms(F)
    return paired_report(name, v.mean(), v, rhs_samples, **kw)


def entropy_report(name, F, rhs_samples, clip=1e-8, **kw):
    ent, infl = entropy_terms(F, clip)
    return paired_report(name, ent.mean(), infl, rhs_samples, **kw)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (McResult, VectorMcResult, InequalityReport)):
        return _clean(obj.to_dict())
    return obj


def to_json(report, runtime_ms=None):
    """Serialise a report dict (or object with ``to_dict``) with a stable key order."""
    data = report.to_dict() if hasattr(report, "to_dict") else dict(report)
    data = _clean(data)
    if runtime_ms is not None:
        data["runtime_ms"] = int(runtime_ms)
    return json.dumps(data, indent=2)
