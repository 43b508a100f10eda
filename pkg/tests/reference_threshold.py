"""Literal line-by-line interpreter of the dynamic-threshold pseudocode.

Kept deliberately naive and 1-indexed so it can be read against the
algorithm statement line by line; the production detector must reproduce
its outputs exactly.
"""

import numpy as np


def reference_dynamic_threshold(lam, Y, tau_min, tau_max, eta, delta, a1, a2):
    """Single-location run; returns (thresholds, predictions), 0-indexed."""
    T = len(lam)
    lam = np.concatenate([[np.nan], np.asarray(lam, dtype=float)])  # 1-indexed
    Y = np.concatenate([[0], np.asarray(Y)])
    tau = np.full(T + 2, np.nan)
    Yhat = np.zeros(T + 1, dtype=np.int64)

    def Pi(x):  # line 1: projection onto [tau_min, tau_max]
        return min(max(x, tau_min), tau_max)

    # line 2
    tau[1] = tau_min
    Yhat[1] = 1 if lam[1] > tau[1] else -1
    # lines 3-5 (with the same floor as line 11)
    if Yhat[1] != Y[1]:
        tau[2] = max(Pi(tau[1] + eta * Yhat[1]), lam[1] / a1)
    else:
        tau[2] = tau[1]
    # lines 6-16
    for t in range(2, T + 1):
        Delta = abs((lam[t] - lam[t - 1]) / lam[t - 1])  # line 7
        if Delta >= delta and lam[t] > tau[t]:           # line 8
            Yhat[t] = 1                                  # line 9
            if Yhat[t] != Y[t]:                          # line 10
                tau[t] = max(Pi(tau[t - 1] + eta * Yhat[t]), lam[t - 1] / a1)  # line 11
        else:
            Yhat[t] = -1
        if lam[t] <= lam[t - 1] / a2:                    # line 14
            tau[t] = lam[t]                              # line 15
        tau[t + 1] = tau[t]                              # carry forward
    return tau[1 : T + 1], Yhat[1 : T + 1]
