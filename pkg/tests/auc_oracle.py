"""Independent cumulative-error AUC by adaptive quadrature.

The recall curve runs linearly through (0, 0) and (e_k, k/n) for every
error below the threshold, then stays flat up to the threshold.
"""

from scipy.integrate import quad


def recall_curve(errors, threshold):
    e = sorted(float(v) for v in errors)
    n = len(e)
    xs, ys = [0.0], [0.0]
    for k, v in enumerate(e, 1):
        if v < threshold:
            xs.append(v)
            ys.append(k / n)

    def f(x):
        if x >= xs[-1]:
            return ys[-1]
        for k in range(len(xs) - 1):
            x0, x1 = xs[k], xs[k + 1]
            if x0 <= x < x1:
                return ys[k] + (ys[k + 1] - ys[k]) * (x - x0) / (x1 - x0)
        return ys[-1]

    return f, xs


def auc_oracle(errors, threshold):
    f, knots = recall_curve(errors, threshold)
    pts = sorted({k for k in knots if 0 < k < threshold})
    val, _ = quad(f, 0.0, threshold, points=pts or None, limit=1000, epsabs=1e-13, epsrel=1e-13)
    return val / threshold
