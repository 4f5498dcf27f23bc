"""Packed-AHE unit tests: algebra, rotations, noise accounting, wire format."""

import numpy as np
import pytest

from cipherformer import pahe
from cipherformer.errors import (
    DecryptionError,
    NoiseBudgetError,
    ParameterError,
    ProtocolError,
)
from cipherformer.ntt import get_ntt
from cipherformer.primes import next_prime


@pytest.fixture(scope="module")
def setup():
    par = pahe.toy_params(n=256)
    km = pahe.keygen(par, seed=11, rotations=(1, 2, 5, par.row_size - 5))
    ev = pahe.Evaluator(km.public(), seed=12)
    rng = np.random.default_rng(13)
    return par, km, ev, rng


def rand_vec(par, rng):
    return rng.integers(0, par.p, par.n, dtype=np.uint64)


class TestParams:
    def test_plain_modulus_must_match_ring(self):
        # 65521 is prime but not 1 mod 512, so it has no slot structure
        with pytest.raises(ParameterError):
            pahe.PaheParams(n=256, p=65521, q_primes=(576460752303439873,))

    def test_q_primes_must_be_ntt_friendly(self):
        p = next_prime(1 << 20, congruent=(1, 512))
        with pytest.raises(ParameterError):
            pahe.PaheParams(n=256, p=p, q_primes=(p + 2, p + 4))

    def test_toy_sizing_leaves_budget(self):
        par = pahe.toy_params(n=256)
        assert par.max_budget_bits > par.keyswitch_noise_bits + 30

    def test_session_sizing_leaves_budget(self):
        p = next_prime(1 << 60, congruent=(1, 8192))
        par = pahe.session_params(p, 1024)
        assert par.max_budget_bits > par.keyswitch_noise_bits + 8
        assert par.max_budget_bits > par.fresh_noise_bits + p.bit_length() + 10
        assert len(set(par.q_primes)) == par.k

    def test_slot_exponents_prime_independent(self):
        # The slot map is built once from a probe prime; every RNS prime's
        # transform must place evaluation points at the same exponents.
        par = pahe.toy_params(n=256)
        probe_exps = par.slots().exps
        for q in par.q_primes + (par.p,):
            assert np.array_equal(get_ntt(q, par.n).eval_exponents, probe_exps)


class TestRoundTrip:
    def test_encrypt_decrypt(self, setup):
        par, km, ev, rng = setup
        for _ in range(5):
            v = rand_vec(par, rng)
            assert np.array_equal(km.decrypt(ev.encrypt(v)), v)

    def test_short_vector_pads(self, setup):
        par, km, ev, rng = setup
        v = np.array([5, 6, 7], dtype=np.uint64)
        out = km.decrypt(ev.encrypt(v))
        assert np.array_equal(out[:3], v) and not out[3:].any()

    def test_batched_matches_single(self, setup):
        par, km, ev, rng = setup
        vs = [rand_vec(par, rng) for _ in range(4)]
        outs = km.decrypt_many(ev.encrypt_many(vs))
        for v, o in zip(vs, outs):
            assert np.array_equal(o, v)

    def test_unreduced_slots_rejected(self, setup):
        par, km, ev, rng = setup
        with pytest.raises(ParameterError):
            ev.encrypt(np.array([par.p], dtype=np.uint64))

    def test_keygen_deterministic(self, setup):
        par, km, ev, rng = setup
        a = pahe.keygen(par, seed=99, rotations=(1,))
        b = pahe.keygen(par, seed=99, rotations=(1,))
        assert np.array_equal(a.pk0, b.pk0) and np.array_equal(a.pk1, b.pk1)


class TestHomomorphisms:
    def test_add_ct(self, setup):
        par, km, ev, rng = setup
        a, b = rand_vec(par, rng), rand_vec(par, rng)
        got = km.decrypt(ev.add_ct(ev.encrypt(a), ev.encrypt(b)))
        assert np.array_equal(got, (a + b) % np.uint64(par.p))

    def test_add_plain_full_range(self, setup):
        par, km, ev, rng = setup
        a, b = rand_vec(par, rng), rand_vec(par, rng)
        got = km.decrypt(ev.add_plain(ev.encrypt(a), b))
        assert np.array_equal(got, (a + b) % np.uint64(par.p))

    def test_scalar_scmult(self, setup):
        par, km, ev, rng = setup
        a = rand_vec(par, rng)
        w = int(rng.integers(1, 1 << 18))
        got = km.decrypt(ev.simd_scmult(ev.encrypt(a), w))
        assert np.array_equal(got.astype(object), (a.astype(object) * w) % par.p)

    def test_vector_scmult(self, setup):
        par, km, ev, rng = setup
        a = rand_vec(par, rng)
        w = rng.integers(0, 1 << 18, par.n, dtype=np.uint64)
        got = km.decrypt(ev.simd_scmult(ev.encrypt(a), pahe.encode_plain(par, w)))
        want = (a.astype(object) * w.astype(object)) % par.p
        assert np.array_equal(got.astype(object), want)

    def test_scmult_by_zero_and_one(self, setup):
        par, km, ev, rng = setup
        a = rand_vec(par, rng)
        assert not km.decrypt(ev.simd_scmult(ev.encrypt(a), 0)).any()
        assert np.array_equal(km.decrypt(ev.simd_scmult(ev.encrypt(a), 1)), a)


class TestRotations:
    def test_col_rotate_is_left_cyclic_per_row(self, setup):
        par, km, ev, rng = setup
        half = par.row_size
        v = rand_vec(par, rng)
        for r in (1, 5):
            got = km.decrypt(ev.col_rotate(ev.encrypt(v), r))
            want = np.concatenate([np.roll(v[:half], -r), np.roll(v[half:], -r)])
            assert np.array_equal(got, want)

    def test_swap_rows(self, setup):
        par, km, ev, rng = setup
        half = par.row_size
        v = rand_vec(par, rng)
        got = km.decrypt(ev.swap_rows(ev.encrypt(v)))
        assert np.array_equal(got, np.concatenate([v[half:], v[:half]]))

    def test_flat_rotate_matches_roll(self, setup):
        par, km, ev, rng = setup
        half = par.row_size
        v = rand_vec(par, rng)
        for k in (1, 5, half, half + 2, par.n - 5):
            got = km.decrypt(ev.rotate(ev.encrypt(v), k))
            assert np.array_equal(got, np.roll(v, -k)), f"k={k}"

    def test_rotate_zero_is_identity(self, setup):
        par, km, ev, rng = setup
        v = rand_vec(par, rng)
        assert np.array_equal(km.decrypt(ev.rotate(ev.encrypt(v), 0)), v)

    def test_missing_rotation_key(self, setup):
        par, km, ev, rng = setup
        with pytest.raises(ParameterError, match="rotation key"):
            ev.col_rotate(ev.encrypt(rand_vec(par, rng)), 7)

    def test_composition(self, setup):
        par, km, ev, rng = setup
        v = rand_vec(par, rng)
        got = km.decrypt(ev.col_rotate(ev.col_rotate(ev.encrypt(v), 2), 5))
        half = par.row_size
        want = np.concatenate([np.roll(v[:half], -7), np.roll(v[half:], -7)])
        assert np.array_equal(got, want)


class TestNoise:
    def test_ops_strictly_increase_noise(self, setup):
        par, km, ev, rng = setup
        ct = ev.encrypt(rand_vec(par, rng))
        w = pahe.encode_plain(par, rng.integers(0, 1 << 10, par.n, dtype=np.uint64))
        seq = [lambda c: ev.add_plain(c, rand_vec(par, rng)),
               lambda c: ev.simd_scmult(c, 3),
               lambda c: ev.col_rotate(c, 1),
               lambda c: ev.add_ct(c, ev.encrypt(rand_vec(par, rng)))]
        last = ct.noise_bits
        for f in seq:
            ct = f(ct)
            assert ct.noise_bits > last
            last = ct.noise_bits
        km.decrypt(ct)  # still decryptable

    def test_budget_exhaustion_raises(self, setup):
        par, km, ev, rng = setup
        ct = ev.encrypt(rand_vec(par, rng))
        with pytest.raises(NoiseBudgetError):
            for _ in range(100):
                ct = ev.simd_scmult(ct, (par.p - 1) // 2)

    def test_shadow_catches_tampering(self, setup):
        par, km, _, rng = setup
        ev = pahe.Evaluator(km.public(), seed=5, track_plain=True)
        v = rand_vec(par, rng)
        ct = ev.simd_scmult(ev.col_rotate(ev.encrypt(v), 1), 7)
        km.decrypt(ct, verify=True)
        ct._ref[3] = (ct._ref[3] + 1) % par.p
        with pytest.raises(DecryptionError):
            km.decrypt(ct, verify=True)


class TestWireFormat:
    def test_ciphertext_roundtrip(self, setup):
        par, km, ev, rng = setup
        v = rand_vec(par, rng)
        ct2 = pahe.ct_from_bytes(pahe.ct_to_bytes(ev.encrypt(v)), par)
        assert np.array_equal(km.decrypt(ct2), v)

    def test_bad_magic(self, setup):
        par, km, ev, rng = setup
        blob = bytearray(pahe.ct_to_bytes(ev.encrypt(rand_vec(par, rng))))
        blob[0] ^= 0xFF
        with pytest.raises(ProtocolError):
            pahe.ct_from_bytes(bytes(blob))

    def test_params_mismatch(self, setup):
        par, km, ev, rng = setup
        other = pahe.toy_params(n=512)
        blob = pahe.ct_to_bytes(ev.encrypt(rand_vec(par, rng)))
        with pytest.raises(ParameterError):
            pahe.ct_from_bytes(blob, other)

    def test_public_keys_roundtrip_and_work(self, setup):
        par, km, ev, rng = setup
        km2 = pahe.public_keys_from_bytes(pahe.public_keys_to_bytes(km.public()))
        assert not km2.has_secret
        ev2 = pahe.Evaluator(km2, seed=6)
        v = rand_vec(par, rng)
        half = par.row_size
        got = km.decrypt(ev2.col_rotate(ev2.encrypt(v), 5))
        assert np.array_equal(
            got, np.concatenate([np.roll(v[:half], -5), np.roll(v[half:], -5)]))
