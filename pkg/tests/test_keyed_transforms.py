import hashlib
from pathlib import Path

import numpy as np
import pytest

from featlock.errors import DimensionError
from featlock.keyed_transforms import (
    PermutationVector,
    SecretKey,
    apply_permutation,
    decrypt_image,
    derive_permutation,
    dump_golden_vectors,
    encrypt_image,
    invert_permutation,
    load_golden_vectors,
)

GOLDEN_DIR = Path(__file__).parent / "golden"
GOLDEN_KEY = SecretKey(bytes(range(16)))  # 0x00..0x0F, fixed for conformance


def reference_shuffle(key_bytes: bytes, c: int, site: int = 0) -> list[int]:
    """Independent oracle for the documented keyed Fisher-Yates shuffle.

    Written as plain loops over hashlib output, separate from the library's
    stream implementation, so golden vectors are double-derived.
    """
    prefix = b"featlock.perm.v1" + key_bytes + site.to_bytes(8, "big")
    pool = b""
    counter = 0
    pos = 0

    def next_word():
        nonlocal pool, counter, pos
        while len(pool) - pos < 8:
            pool += hashlib.sha256(prefix + counter.to_bytes(8, "big")).digest()
            counter += 1
        word = int.from_bytes(pool[pos : pos + 8], "big")
        pos += 8
        return word

    def uniform(n):
        limit = (2**64 // n) * n
        while True:
            w = next_word()
            if w < limit:
                return w % n

    alpha = list(range(1, c + 1))
    for i in range(c - 1, 0, -1):
        j = uniform(i + 1)
        alpha[i], alpha[j] = alpha[j], alpha[i]
    return alpha


class TestDerivePermutation:
    def test_c1_is_identity(self):
        assert derive_permutation(SecretKey(b"any"), 1).alpha == (1,)

    def test_deterministic(self):
        key = SecretKey(b"key A")
        assert derive_permutation(key, 4).alpha == derive_permutation(key, 4).alpha

    def test_rejects_c0(self):
        with pytest.raises(DimensionError):
            derive_permutation(SecretKey(b"k"), 0)

    def test_bijection_over_counts_and_keys(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            key = SecretKey(rng.bytes(16))
            for c in (1, 2, 3, 7, 16, 64):
                p = derive_permutation(key, c)
                assert sorted(p.alpha) == list(range(1, c + 1))

    def test_matches_reference_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            key_bytes = rng.bytes(16)
            c = int(rng.integers(1, 40))
            site = int(rng.integers(0, 5))
            p = derive_permutation(SecretKey(key_bytes), c, site=site)
            assert list(p.alpha) == reference_shuffle(key_bytes, c, site=site)

    def test_golden_vectors_frozen(self):
        golden = load_golden_vectors(GOLDEN_DIR / "permutations.txt")
        assert set(golden) == {1, 2, 3, 4, 5, 8, 16, 32, 64}
        for c, expected in golden.items():
            assert derive_permutation(GOLDEN_KEY, c).alpha == expected.alpha
            assert tuple(reference_shuffle(GOLDEN_KEY.data, c)) == expected.alpha

    def test_golden_roundtrip_io(self, tmp_path):
        path = tmp_path / "perm.txt"
        dump_golden_vectors(path, GOLDEN_KEY, [1, 5, 8])
        loaded = load_golden_vectors(path)
        assert loaded[8].alpha == derive_permutation(GOLDEN_KEY, 8).alpha

    def test_key_sensitivity(self):
        # two independent keys must disagree for c >= 8 in >= 99% of trials
        rng = np.random.default_rng(3)
        trials, differing = 1000, 0
        for _ in range(trials):
            a = derive_permutation(SecretKey(rng.bytes(16)), 8)
            b = derive_permutation(SecretKey(rng.bytes(16)), 8)
            differing += a.alpha != b.alpha
        assert differing >= 0.99 * trials

    def test_site_salt_changes_permutation(self):
        key = SecretKey(b"multi-site key!!")
        perms = {derive_permutation(key, 32, site=s).alpha for s in range(4)}
        assert len(perms) == 4


class TestApplyPermutation:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(6, 4, 5))
        out = apply_permutation(x, PermutationVector.identity(6))
        np.testing.assert_array_equal(out, x)

    def test_two_channel_swap(self):
        x = np.array([[[1.0]], [[2.0]]])
        out = apply_permutation(x, PermutationVector((2, 1)))
        np.testing.assert_array_equal(out, np.array([[[2.0]], [[1.0]]]))

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(5, 2, 2))
        alpha = tuple(int(v) for v in rng.permutation(5) + 1)
        p = PermutationVector(alpha)
        out = apply_permutation(x, p)
        expected = np.empty_like(x)
        for i in range(5):
            for j in range(2):
                for k in range(2):
                    expected[i, j, k] = x[alpha[i] - 1, j, k]
        np.testing.assert_array_equal(out, expected)

    def test_spatial_invariance(self):
        # each output channel is an intact spatial slice of some input channel
        rng = np.random.default_rng(1)
        x = rng.normal(size=(8, 6, 6))
        p = derive_permutation(SecretKey(rng.bytes(16)), 8)
        out = apply_permutation(x, p)
        for i in range(8):
            np.testing.assert_array_equal(out[i], x[p.alpha[i] - 1])

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            apply_permutation(np.zeros((3, 2, 2)), PermutationVector((2, 1)))

    def test_rejects_wrong_rank(self):
        with pytest.raises(DimensionError):
            apply_permutation(np.zeros((4, 4)), PermutationVector((2, 1)))


class TestInvertPermutation:
    def test_identity(self):
        p = PermutationVector.identity(5)
        assert invert_permutation(p).alpha == p.alpha

    def test_transposition_self_inverse(self):
        p = PermutationVector((2, 1))
        assert invert_permutation(p).alpha == (2, 1)

    def test_composition_is_identity(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            p = derive_permutation(SecretKey(rng.bytes(16)), 16)
            x = rng.normal(size=(16, 3, 3))
            back = apply_permutation(apply_permutation(x, p), invert_permutation(p))
            np.testing.assert_array_equal(back, x)


def oracle_block_shuffle(img: np.ndarray, alpha: tuple[int, ...], m: int) -> np.ndarray:
    """Brute-force per-block loop using the documented flatten order."""
    ch, height, width = img.shape
    out = np.empty_like(img)
    for by in range(height // m):
        for bx in range(width // m):
            flat = np.empty(ch * m * m, dtype=img.dtype)
            for cc in range(ch):
                for r in range(m):
                    for col in range(m):
                        flat[(cc * m + r) * m + col] = img[cc, by * m + r, bx * m + col]
            shuffled = np.array([flat[a - 1] for a in alpha], dtype=img.dtype)
            for cc in range(ch):
                for r in range(m):
                    for col in range(m):
                        out[cc, by * m + r, bx * m + col] = shuffled[(cc * m + r) * m + col]
    return out


class TestImageShuffling:
    def test_trivial_2x2_single_channel(self):
        img = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        out_blocks = img.reshape(1, 1, 2, 1, 2).transpose(1, 3, 0, 2, 4).reshape(1, 1, 4)
        perm = PermutationVector((3, 1, 4, 2))
        shuffled = out_blocks[..., perm.indices].reshape(1, 1, 1, 2, 2)
        expected = shuffled.transpose(2, 0, 3, 1, 4).reshape(1, 2, 2)
        np.testing.assert_array_equal(expected, np.array([[[3.0, 1.0], [4.0, 2.0]]]))
        # and the oracle agrees with the hand result
        np.testing.assert_array_equal(
            oracle_block_shuffle(img, (3, 1, 4, 2), 2), np.array([[[3.0, 1.0], [4.0, 2.0]]])
        )

    def test_matches_block_loop_oracle(self):
        rng = np.random.default_rng(5)
        key = SecretKey(rng.bytes(16))
        img = rng.random((3, 24, 24), dtype=np.float64)
        m = 4
        alpha = derive_permutation(key, m * m * 3).alpha
        np.testing.assert_array_equal(encrypt_image(img, key, m), oracle_block_shuffle(img, alpha, m))

    def test_matches_oracle_full_size(self):
        rng = np.random.default_rng(6)
        key = SecretKey(rng.bytes(16))
        img = rng.random((3, 300, 300))
        alpha = derive_permutation(key, 4 * 4 * 3).alpha
        np.testing.assert_array_equal(encrypt_image(img, key, 4), oracle_block_shuffle(img, alpha, 4))

    @pytest.mark.parametrize("m", [1, 4, 12, 20, 60])
    def test_roundtrip_exact(self, m):
        rng = np.random.default_rng(m)
        key = SecretKey(rng.bytes(16))
        img = rng.random((3, 300, 300), dtype=np.float64)
        np.testing.assert_array_equal(decrypt_image(encrypt_image(img, key, m), key, m), img)

    def test_wrong_key_roundtrip_differs(self):
        rng = np.random.default_rng(8)
        mismatches = 0
        for _ in range(100):
            k1, k2 = SecretKey(rng.bytes(16)), SecretKey(rng.bytes(16))
            img = rng.random((3, 12, 12))
            back = decrypt_image(encrypt_image(img, k1, 4), k2, 4)
            mismatches += not np.array_equal(back, img)
        assert mismatches >= 99

    def test_non_divisible_dims_rejected(self):
        with pytest.raises(DimensionError):
            encrypt_image(np.zeros((3, 10, 10)), SecretKey(b"k"), 4)
        with pytest.raises(DimensionError):
            decrypt_image(np.zeros((3, 10, 12)), SecretKey(b"k"), 4)

    def test_encrypt_deterministic(self):
        key = SecretKey(b"fixed key bytes!")
        img = np.random.default_rng(2).random((3, 8, 8))
        np.testing.assert_array_equal(encrypt_image(img, key, 4), encrypt_image(img, key, 4))


class TestSecretKey:
    def test_fingerprint_stable_and_hex(self):
        key = SecretKey(b"\x01\x02")
        assert key.fingerprint() == hashlib.sha256(b"\x01\x02").hexdigest()

    def test_file_roundtrip(self, tmp_path):
        key = SecretKey.generate(16)
        key.to_file(tmp_path / "k.bin")
        assert SecretKey.from_file(tmp_path / "k.bin") == key

    def test_repr_hides_bytes(self):
        key = SecretKey(b"super secret bytes")
        assert "super" not in repr(key)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            SecretKey(b"")
