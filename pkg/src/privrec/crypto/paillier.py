"""Layered additively homomorphic encryption.

Plaintexts at layer s live mod n^s and ciphertexts mod n^{s+1}, so an
l-bit input maps to roughly l + |n| bits of ciphertext and a layer's
ciphertexts fit the next layer's plaintext space.  Encryption is
(1+n)^m * h_s^r with h_s a precomputed 2n^s-th power and r a short
exponent (the fast variant, default) or r^{n^s} with full-width r.

Performance notes, all per 1024-bit modulus at layer 1: the (1+n)^m
factor is a closed-form binomial (s multiplications, no exponentiation);
h_s^r uses fixed-base windows (~80 multiplications); decryption is one
exponentiation by lambda regardless of the layer.
"""

from __future__ import annotations

import math
import random
import secrets
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import gmpy2
from gmpy2 import mpz

FULL_STRENGTH_MODULUS_BITS = (1024, 2048)

# fixed short-exponent width for the fast encryption variant
SHORT_EXP_BITS = 320

_WINDOW = 4  # fixed-base window width, bits


Rng = Union[random.Random, secrets.SystemRandom]


def _default_rng() -> Rng:
    return secrets.SystemRandom()


def _random_prime(rng: Rng, bits: int) -> mpz:
    while True:
        cand = mpz(rng.getrandbits(bits) | (3 << (bits - 2)) | 1)
        p = gmpy2.next_prime(cand)
        if p.bit_length() == bits:
            return p


class _FixedBase:
    """Windowed table for many exponentiations of one base."""

    def __init__(self, base: mpz, modulus: mpz, exp_bits: int):
        self.modulus = modulus
        n_windows = (exp_bits + _WINDOW - 1) // _WINDOW
        self.tables: list[list[mpz]] = []
        cur = base % modulus
        for _ in range(n_windows):
            row = [cur]
            for _ in range(2**_WINDOW - 2):
                row.append(row[-1] * cur % modulus)
            self.tables.append(row)
            cur = row[-1] * cur % modulus
    def pow(self, e: int) -> mpz:
        acc = mpz(1)
        mask = 2**_WINDOW - 1
        w = 0
        e = int(e)
        while e:
            digit = e & mask
            if digit:
                acc = acc * self.tables[w][digit - 1] % self.modulus
            e >>= _WINDOW
            w += 1
        return acc


class PublicKey:
    def __init__(self, n: int, bits: int, max_layers: int, h: int):
        self.n = mpz(n)
        self.bits = bits
        self.max_layers = max_layers
        self.h = mpz(h)
        # n_pows[j] = n^j for j in 0..max_layers+1
        self.n_pows = [mpz(1)]
        for _ in range(max_layers + 1):
            self.n_pows.append(self.n_pows[-1] * self.n)
        self._h_tables: dict[int, _FixedBase] = {}
        self._inv_fact: dict[int, list[mpz]] = {}

    @property
    def full_strength(self) -> bool:
        return self.bits in FULL_STRENGTH_MODULUS_BITS

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PublicKey):
            return NotImplemented
        return (
            self.n == other.n
            and self.bits == other.bits
            and self.max_layers == other.max_layers
            and self.h == other.h
        )

    def __hash__(self) -> int:
        return hash((int(self.n), self.bits, self.max_layers, int(self.h)))

    def _check_layer(self, layer: int) -> None:
        if not 1 <= layer <= self.max_layers:
            raise ValueError(f"layer {layer} outside 1..{self.max_layers}")

    def plaintext_modulus(self, layer: int) -> mpz:
        self._check_layer(layer)
        return self.n_pows[layer]

    def ciphertext_modulus(self, layer: int) -> mpz:
        self._check_layer(layer)
        return self.n_pows[layer + 1]

    def ciphertext_bytes(self, layer: int) -> int:
        """Fixed serialized width of a layer's ciphertext value."""
        self._check_layer(layer)
        return (int(self.n_pows[layer + 1]).bit_length() + 7) // 8

    def h_table(self, layer: int) -> _FixedBase:
        tab = self._h_tables.get(layer)
        if tab is None:
            mod = self.ciphertext_modulus(layer)
            h_s = gmpy2.powmod(self.h, self.n_pows[layer], mod)
            tab = _FixedBase(h_s, mod, SHORT_EXP_BITS)
            self._h_tables[layer] = tab
        return tab

    def inv_factorials(self, layer: int) -> list[mpz]:
        """[0!, 1!, ..., layer!] inverses mod n^layer."""
        out = self._inv_fact.get(layer)
        if out is None:
            mod = self.n_pows[layer]
            out = [mpz(1)]
            fact = mpz(1)
            for k in range(1, layer + 1):
                fact *= k
                out.append(gmpy2.invert(fact, mod))
            self._inv_fact[layer] = out
        return out

    def one_plus_n_pow(self, m: int, layer: int) -> mpz:
        """(1+n)^m mod n^{layer+1} by binomial expansion: sum of
        C(m, k) n^k for k = 0..layer."""
        mod = self.n_pows[layer + 1]
        inv_fact = self.inv_factorials(layer + 1)
        acc = mpz(1)
        falling = mpz(1)
        m = mpz(m)
        for k in range(1, layer + 1):
            falling = falling * (m - (k - 1)) % mod
            acc = (acc + falling * inv_fact[k] % mod * self.n_pows[k]) % mod
        return acc


class SecretKey:
    def __init__(self, pk: PublicKey, p: int, q: int):
        self.pk = pk
        self.p = mpz(p)
        self.q = mpz(q)
        self.lam = gmpy2.lcm(self.p - 1, self.q - 1)
        self._lam_inv: dict[int, mpz] = {}

    def lam_inverse(self, layer: int) -> mpz:
        inv = self._lam_inv.get(layer)
        if inv is None:
            inv = gmpy2.invert(self.lam, self.pk.n_pows[layer])
            self._lam_inv[layer] = inv
        return inv


@dataclass(frozen=True)
class KeyPair:
    pk: PublicKey
    sk: SecretKey
    short_exponents: bool = True


@dataclass(frozen=True, slots=True)
class Ciphertext:
    value: int
    layer: int


def keygen(
    bits: int = 1024,
    layers: int = 1,
    *,
    seed: Optional[int] = None,
    short_exponents: bool = True,
) -> KeyPair:
    """Generate a key pair supporting layers 1..layers.

    bits outside the standard {1024, 2048} sizes are accepted (the pair
    reports full_strength=False); seed gives a deterministic test-mode key.
    short_exponents is recorded on the pair for encrypt's default mode.
    """
    if bits < 128:
        raise ValueError("modulus too small")
    if layers < 1:
        raise ValueError("layers must be >= 1")
    rng: Rng = random.Random(seed) if seed is not None else _default_rng()
    half = bits // 2
    while True:
        p = _random_prime(rng, half)
        q = _random_prime(rng, bits - half)
        if p == q:
            continue
        n = p * q
        if n.bit_length() != bits:
            continue
        lam = gmpy2.lcm(p - 1, q - 1)
        if gmpy2.gcd(n, lam) != 1:
            continue
        break
    x = mpz(rng.randrange(1, int(n)))
    h = (-(x * x)) % n
    pk = PublicKey(int(n), bits, layers, int(h))
    sk = SecretKey(pk, int(p), int(q))
    return KeyPair(pk, sk, short_exponents)


def encrypt(
    pk: PublicKey,
    m: int,
    layer: int = 1,
    *,
    rng: Optional[Rng] = None,
    short: bool = True,
) -> Ciphertext:
    """Probabilistic encryption of m mod n^layer.

    short=True draws a 320-bit exponent for the precomputed base h_s;
    short=False uses the classical full-width random r^{n^layer} factor.
    """
    pk._check_layer(layer)
    rng = rng or _default_rng()
    mod = pk.ciphertext_modulus(layer)
    g_m = pk.one_plus_n_pow(int(m) % int(pk.n_pows[layer]), layer)
    if short:
        r = rng.getrandbits(SHORT_EXP_BITS) | 1
        blind = pk.h_table(layer).pow(r)
    else:
        r = mpz(rng.randrange(1, int(pk.n)))
        blind = gmpy2.powmod(r, pk.n_pows[layer], mod)
    return Ciphertext(int(g_m * blind % mod), layer)


def decrypt(sk: SecretKey, ct: Ciphertext) -> int:
    """Recover the plaintext mod n^layer.

    One exponentiation by lambda strips the randomizer; the discrete log
    of the (1+n)-power is then unwound layer by layer with binomial
    corrections; a final multiply by lambda^{-1} removes the exponent.
    """
    pk = sk.pk
    layer = ct.layer
    pk._check_layer(layer)
    mod = pk.ciphertext_modulus(layer)
    a = gmpy2.powmod(ct.value, sk.lam, mod)
    m_lam = _dlog_one_plus_n(pk, a, layer)
    return int(m_lam * sk.lam_inverse(layer) % pk.n_pows[layer])


def _dlog_one_plus_n(pk: PublicKey, a: mpz, s: int) -> mpz:
    """m mod n^s from a = (1+n)^m mod n^{s+1}."""
    n = pk.n
    inv_fact = pk.inv_factorials(s)
    est = mpz(0)
    for j in range(1, s + 1):
        nj = pk.n_pows[j]
        u = a % pk.n_pows[j + 1]
        t1 = (u - 1) // n  # exact: u = 1 mod n
        t2 = est
        falling = est
        for k in range(2, j + 1):
            falling = falling - 1
            t2 = t2 * falling % nj
            t1 = (t1 - t2 * pk.n_pows[k - 1] % nj * inv_fact[k]) % nj
        est = t1 % nj
    return est


def add(pk: PublicKey, c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    if c1.layer != c2.layer:
        raise ValueError("cannot add ciphertexts at different layers")
    mod = pk.ciphertext_modulus(c1.layer)
    return Ciphertext(int(mpz(c1.value) * c2.value % mod), c1.layer)


def scalar_mul(pk: PublicKey, c: Ciphertext, a: int) -> Ciphertext:
    mod = pk.ciphertext_modulus(c.layer)
    a = int(a) % int(pk.n_pows[c.layer])
    return Ciphertext(int(gmpy2.powmod(c.value, a, mod)), c.layer)


def rerandomize(pk: PublicKey, c: Ciphertext, *, rng: Optional[Rng] = None) -> Ciphertext:
    """Fresh randomizer; the plaintext is unchanged, the integer is new."""
    rng = rng or _default_rng()
    mod = pk.ciphertext_modulus(c.layer)
    r = rng.getrandbits(SHORT_EXP_BITS) | 1
    return Ciphertext(int(mpz(c.value) * pk.h_table(c.layer).pow(r) % mod), c.layer)


_STRAUS_MAX_TEAMS = 32


def multiexp_mod(bases: Sequence[int], exponents: Sequence[int], modulus: int) -> mpz:
    """prod bases[i]^exponents[i] mod modulus; exponents non-negative.

    One or two bases go straight to powmod.  Larger sets use Straus
    interleaving: bases form teams that share a subset-product table, and
    all teams share one squaring chain, so the marginal cost of an extra
    base is roughly one multiply per exponent bit instead of a full
    exponentiation.
    """
    if len(bases) != len(exponents):
        raise ValueError("bases and exponents differ in length")
    mod = mpz(modulus)
    if any(e < 0 for e in exponents):
        raise ValueError("negative exponent")
    pairs = [(mpz(b) % mod, mpz(e)) for b, e in zip(bases, exponents) if e]
    if not pairs:
        return mpz(1)
    if len(pairs) <= 2:
        acc = mpz(1)
        for b, e in pairs:
            acc = acc * gmpy2.powmod(b, e, mod) % mod
        return acc
    max_bits = max(e.bit_length() for _, e in pairs)
    # team size balances table build (2^k muls) against exponent length
    k = max(2, min(8, max_bits.bit_length() - 2))
    # cap live tables; extra chunks only repeat the cheap squaring chain
    chunk = _STRAUS_MAX_TEAMS * k
    result = mpz(1)
    for start in range(0, len(pairs), chunk):
        result = result * _straus(pairs[start : start + chunk], k, max_bits, mod) % mod
    return result


def _straus(pairs: list[tuple[mpz, mpz]], k: int, max_bits: int, mod: mpz) -> mpz:
    teams = [pairs[i : i + k] for i in range(0, len(pairs), k)]
    tables = []
    for team in teams:
        tab: list[mpz] = [mpz(1)] * (1 << len(team))
        for idx, (b, _) in enumerate(team):
            tab[1 << idx] = b
        for mask in range(3, 1 << len(team)):
            rest = mask & (mask - 1)
            if rest:
                tab[mask] = tab[rest] * tab[mask & -mask] % mod
        tables.append(tab)
    # per-bit selector masks, built by walking each exponent's set bits
    masks = [bytearray(max_bits) for _ in teams]
    for row, team in zip(masks, teams):
        for idx, (_, e) in enumerate(team):
            bit = 1 << idx
            j = gmpy2.bit_scan1(e, 0)
            while j is not None:
                row[j] |= bit
                j = gmpy2.bit_scan1(e, j + 1)
    acc = mpz(1)
    for bit in range(max_bits - 1, -1, -1):
        acc = acc * acc % mod
        for row, tab in zip(masks, tables):
            m = row[bit]
            if m:
                acc = acc * tab[m] % mod
    return acc


# ---------------------------------------------------------------------------
# serialization


def ciphertext_to_bytes(pk: PublicKey, ct: Ciphertext) -> bytes:
    width = pk.ciphertext_bytes(ct.layer)
    return ct.layer.to_bytes(2, "big") + int(ct.value).to_bytes(width, "big")


def ciphertext_from_bytes(pk: PublicKey, data: bytes) -> Ciphertext:
    layer = int.from_bytes(data[:2], "big")
    pk._check_layer(layer)
    width = pk.ciphertext_bytes(layer)
    if len(data) != 2 + width:
        raise ValueError("ciphertext bytes have wrong length for layer")
    return Ciphertext(int.from_bytes(data[2:], "big"), layer)


def public_key_to_dict(pk: PublicKey) -> dict:
    return {"n": str(int(pk.n)), "bits": pk.bits, "max_layers": pk.max_layers, "h": str(int(pk.h))}


def public_key_from_dict(d: dict) -> PublicKey:
    return PublicKey(int(d["n"]), int(d["bits"]), int(d["max_layers"]), int(d["h"]))
