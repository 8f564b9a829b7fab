"""Standard normal CDF and quantile (backed by scipy.special)."""

from __future__ import annotations

import numpy as np
from scipy import special


def norm_cdf(x):
    out = special.ndtr(x)
    return float(out) if np.ndim(out) == 0 else out


def norm_ppf(p):
    out = special.ndtri(p)
    return float(out) if np.ndim(out) == 0 else out
