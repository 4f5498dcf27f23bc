"""Number-theoretic helpers: primality testing, prime search, roots of unity.

Everything in here stays below 2^64, so the Miller-Rabin test can use the
known deterministic base set for that range instead of a probabilistic bound.
"""

from __future__ import annotations

from functools import lru_cache

# Deterministic witness set for n < 3_317_044_064_679_887_385_961_981 (> 2^64).
_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)

_SMALL_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47)


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    for q in _SMALL_PRIMES:
        if n == q:
            return True
        if n % q == 0:
            return False
    # write n-1 = d * 2^s with d odd
    d = n - 1
    s = 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def next_prime(lower: int, *, congruent: tuple[int, int] | None = None) -> int:
    """Smallest prime >= lower, optionally with  prime % m == r  for (r, m).

    The congruence form is how NTT-friendly moduli get picked: a negacyclic
    transform of length n over Z_p needs p == 1 (mod 2n).
    """
    if congruent is None:
        n = max(lower, 2)
        while not is_prime(n):
            n += 1
        return n
    r, m = congruent
    if not (0 <= r < m):
        raise ValueError(f"congruence residue {r} out of range for modulus {m}")
    n = lower + (r - lower) % m
    if n < lower:
        n += m
    while not is_prime(n):
        n += m
    return n


@lru_cache(maxsize=None)
def root_of_unity(order: int, p: int) -> int:
    """A fixed element of multiplicative order exactly `order` in Z_p.

    `order` must be a power of two dividing p - 1 (the only case this package
    needs).  Power-of-two order makes the exactness check cheap: c has order
    exactly 2^k iff c^(2^(k-1)) == -1, so no factoring of p - 1 is required.
    Scanning candidates from 2 upward keeps the result deterministic.
    """
    if order & (order - 1) or order < 2:
        raise ValueError(f"order {order} is not a power of two >= 2")
    if (p - 1) % order:
        raise ValueError(f"{order} does not divide p-1 for p={p}")
    for x in range(2, p):
        c = pow(x, (p - 1) // order, p)
        if pow(c, order // 2, p) == p - 1:
            return c
    raise ValueError(f"no root of unity of order {order} mod {p}")  # pragma: no cover
