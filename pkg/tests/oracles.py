"""Reference computations shared by the unit and acceptance tests."""

from fractions import Fraction


def ij_brute_force(per_model, J, n, r):
    """Variance terms evaluated one by one in exact rational arithmetic.

    Returns (uncorrected, correction, corrected_raw, V) as Fractions.
    """
    f = [Fraction(v) for v in per_model]
    B = len(f)
    fbar = sum(f) / B
    col = [Fraction(sum(int(J[j][i]) for j in range(B)), B) for i in range(n)]
    Z = [[(int(J[j][i]) - col[i]) * (f[j] - fbar) for i in range(n)] for j in range(B)]
    V = [sum(Z[j][i] for j in range(B)) / B for i in range(n)]
    factor = Fraction(n * (n - 1), (n - r) ** 2)
    unc = factor * sum(v * v for v in V)
    corr = factor / (B * (B - 1)) * sum((Z[j][i] - V[i]) ** 2 for i in range(n) for j in range(B))
    return unc, corr, unc - corr, V


def central_difference(fn, x, h=1e-5):
    return (fn(x + h) - fn(x - h)) / (2 * h)
