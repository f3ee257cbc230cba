"""Arbitrary-precision reference values for theoretical_lambda.

lambda_n = (log(2/delta)^2 / n)^((m+1)/(m+d/2+eps)) + C1 (log(n/delta)/n)^((m-d)/(2d))

Prints Rust tuple literals (n, delta, m, d, eps, c1, value).
"""
from mpmath import mp, mpf, log

mp.dps = 60

TUPLES = [
    (1000, "0.05", 21, 2, "0.1", "1"),
    (25, "0.05", 21, 2, "0.1", "1"),
    (100, "0.1", 5, 2, "0.5", "0"),
    (2, "0.5", 3, 1, "0.01", "2.5"),
    (10, "0.01", 10, 4, "0.2", "0.3"),
    (500, "0.2", 22, 4, "0.05", "1e-3"),
    (1000000, "0.05", 21, 2, "0.1", "1"),
    (77, "0.9", 7, 3, "0.9", "10"),
    (200, "0.05", 18, 8, "0.1", "0.5"),
    (12345, "0.001", 40, 8, "0.3", "4"),
    (3, "0.99", 2, 1, "0.5", "0"),
    (64, "0.25", 9, 2, "0.75", "1.5"),
    (4096, "0.05", 13, 6, "0.25", "0.01"),
    (50, "0.3", 30, 5, "0.6", "7"),
    (999, "0.07", 11, 10, "0.15", "0.2"),
    (31, "0.6", 4, 3, "0.05", "100"),
    (100000, "0.02", 25, 12, "0.4", "0.05"),
    (8, "0.4", 6, 2, "0.35", "0"),
    (2500, "0.15", 17, 16, "0.01", "3"),
    (400, "0.05", 21, 1, "0.1", "1"),
]


def value(n, delta, m, d, eps, c1):
    n, delta, eps, c1 = mpf(n), mpf(delta), mpf(eps), mpf(c1)
    a = (log(2 / delta) ** 2 / n) ** ((m + 1) / (m + mpf(d) / 2 + eps))
    b = c1 * (log(n / delta) / n) ** (mpf(m - d) / (2 * d))
    return a + b


if __name__ == "__main__":
    for t in TUPLES:
        v = value(*t)
        print(f"    ({t[0]}, {t[1]}, {t[2]}, {t[3]}, {t[4]}, {t[5]}, {mp.nstr(v, 25)}),")
