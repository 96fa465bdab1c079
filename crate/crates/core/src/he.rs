//! Paillier additively homomorphic encryption over fixed-point reals.
//!
//! Signed plaintexts use the usual modular convention: residues `>= n/2`
//! decode as negative numbers (`v - n`). A plaintext-times-ciphertext product
//! of two fixed-point values carries `2 * frac_bits` of scale, so the decoder
//! takes the scale explicitly.

use std::fmt;
use std::str::FromStr;

use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::{FromPrimitive, One, Signed, ToPrimitive, Zero};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Smallest modulus accepted for real (non-test) key generation.
pub const MIN_CRYPTO_BITS: u64 = 512;
/// Smallest modulus accepted in test mode.
pub const MIN_TEST_BITS: u64 = 64;
pub const DEFAULT_FRAC_BITS: u32 = 32;

const MILLER_RABIN_ROUNDS: usize = 40;
const MAX_PRIME_ATTEMPTS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyMode {
    Crypto,
    Test,
}

/// Whether the protocol exchanges real ciphertexts or quantized plaintexts
/// carried through the same message flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeMode {
    Real,
    Mock,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyId(String);

impl KeyId {
    fn of_modulus(n: &BigUint) -> Self {
        let digest = Sha256::digest(n.to_bytes_be());
        KeyId(hex::encode(&digest[..8]))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    g: BigUint,
    n_sq: BigUint,
    half_n: BigUint,
    key_id: KeyId,
}

/// Decryption half of a key pair. Held only by the key owner.
#[derive(Clone)]
pub struct PrivateKey {
    lambda: BigUint,
    mu: BigUint,
    public: PublicKey,
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PrivateKey")
            .field("key_id", &self.public.key_id)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
    pub modulus_bits: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ciphertext {
    value: BigUint,
    key_id: KeyId,
}

impl PublicKey {
    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn key_id(&self) -> &KeyId {
        &self.key_id
    }

    fn from_n(n: BigUint) -> Self {
        let g = &n + 1u32;
        let n_sq = &n * &n;
        let half_n = &n >> 1;
        let key_id = KeyId::of_modulus(&n);
        Self {
            n,
            g,
            n_sq,
            half_n,
            key_id,
        }
    }

    fn check(&self, c: &Ciphertext) -> Result<()> {
        if c.key_id != self.key_id {
            return Err(Error::KeyMismatch {
                expected: self.key_id.to_string(),
                got: c.key_id.to_string(),
            });
        }
        Ok(())
    }

    /// `E(m) = g^m * r^n mod n^2` with fresh randomness `r`.
    pub fn encrypt<R: RngCore + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext> {
        if m >= &self.n {
            return Err(Error::PlaintextRange);
        }
        let r = loop {
            let r = rng.gen_biguint_range(&BigUint::one(), &self.n);
            if r.gcd(&self.n).is_one() {
                break r;
            }
        };
        // g = n + 1, so g^m = 1 + m*n mod n^2
        let gm = (BigUint::one() + m * &self.n) % &self.n_sq;
        let rn = r.modpow(&self.n, &self.n_sq);
        Ok(Ciphertext {
            value: (gm * rn) % &self.n_sq,
            key_id: self.key_id.clone(),
        })
    }

    /// Encrypts a signed integer under the modular convention.
    pub fn encrypt_signed<R: RngCore + ?Sized>(&self, m: &BigInt, rng: &mut R) -> Result<Ciphertext> {
        self.encrypt(&self.to_residue(m)?, rng)
    }

    /// Homomorphic addition: `D(add(E(a), E(b))) = a + b mod n`.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.check(a)?;
        self.check(b)?;
        Ok(Ciphertext {
            value: (&a.value * &b.value) % &self.n_sq,
            key_id: self.key_id.clone(),
        })
    }

    /// Homomorphic plaintext multiplication: `D(scalar_mul(k, E(a))) = k*a mod n`.
    pub fn scalar_mul(&self, k: &BigUint, c: &Ciphertext) -> Result<Ciphertext> {
        self.check(c)?;
        Ok(Ciphertext {
            value: c.value.modpow(k, &self.n_sq),
            key_id: self.key_id.clone(),
        })
    }

    /// Ciphertext of `-a` given a ciphertext of `a`.
    pub fn negate(&self, c: &Ciphertext) -> Result<Ciphertext> {
        self.check(c)?;
        let inv = c
            .value
            .modinv(&self.n_sq)
            .ok_or_else(|| Error::InvalidArgument("ciphertext not invertible mod n^2".into()))?;
        Ok(Ciphertext {
            value: inv,
            key_id: self.key_id.clone(),
        })
    }

    /// Signed scalar multiplication using a precomputed negation of `c`,
    /// which keeps exponents small for negative scalars.
    pub fn scalar_mul_signed(&self, k: &BigInt, c: &Ciphertext, c_neg: &Ciphertext) -> Result<Ciphertext> {
        match k.sign() {
            Sign::Minus => self.scalar_mul(k.magnitude(), c_neg),
            _ => self.scalar_mul(k.magnitude(), c),
        }
    }

    /// Encryption of zero with no randomness; the identity for `add`.
    pub fn zero_ciphertext(&self) -> Ciphertext {
        Ciphertext {
            value: BigUint::one(),
            key_id: self.key_id.clone(),
        }
    }

    /// Maps a signed integer into `[0, n)`.
    pub fn to_residue(&self, m: &BigInt) -> Result<BigUint> {
        let limit = BigInt::from(self.half_n.clone());
        if m.abs() >= limit {
            return Err(Error::PlaintextRange);
        }
        let n = BigInt::from(self.n.clone());
        Ok(m.mod_floor(&n).magnitude().clone())
    }

    /// Inverse of [`PublicKey::to_residue`]: residues `>= n/2` are negative.
    pub fn from_residue(&self, v: &BigUint) -> BigInt {
        if v >= &self.half_n {
            BigInt::from(v.clone()) - BigInt::from(self.n.clone())
        } else {
            BigInt::from(v.clone())
        }
    }
}

impl PrivateKey {
    pub fn key_id(&self) -> &KeyId {
        &self.public.key_id
    }

    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint> {
        self.public.check(c)?;
        let n = &self.public.n;
        let u = c.value.modpow(&self.lambda, &self.public.n_sq);
        let l = (u - 1u32) / n;
        Ok((l * &self.mu) % n)
    }

    pub fn decrypt_signed(&self, c: &Ciphertext) -> Result<BigInt> {
        Ok(self.public.from_residue(&self.decrypt(c)?))
    }
}

impl KeyPair {
    /// Generates a key pair whose modulus has exactly `modulus_bits` bits.
    /// Deterministic for a seeded `rng`.
    pub fn generate<R: RngCore + ?Sized>(modulus_bits: u64, mode: KeyMode, rng: &mut R) -> Result<Self> {
        let min = match mode {
            KeyMode::Crypto => MIN_CRYPTO_BITS,
            KeyMode::Test => MIN_TEST_BITS,
        };
        if modulus_bits < min || modulus_bits % 2 != 0 {
            return Err(Error::KeyGen(format!(
                "modulus_bits must be even and >= {min} in {mode:?} mode, got {modulus_bits}"
            )));
        }
        let half = modulus_bits / 2;
        for _ in 0..MAX_PRIME_ATTEMPTS {
            let p = random_prime(half, rng)?;
            let q = random_prime(half, rng)?;
            if p == q {
                continue;
            }
            let n = &p * &q;
            if n.bits() != modulus_bits {
                continue;
            }
            let p1 = &p - 1u32;
            let q1 = &q - 1u32;
            if !n.gcd(&(&p1 * &q1)).is_one() {
                continue;
            }
            let lambda = p1.lcm(&q1);
            let Some(mu) = lambda.modinv(&n) else {
                continue;
            };
            let public = PublicKey::from_n(n);
            return Ok(Self {
                private: PrivateKey {
                    lambda,
                    mu,
                    public: public.clone(),
                },
                public,
                modulus_bits,
            });
        }
        Err(Error::KeyGen("exhausted prime generation attempts".into()))
    }
}

const SMALL_PRIMES: [u32; 24] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
];

fn random_prime<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> Result<BigUint> {
    for _ in 0..MAX_PRIME_ATTEMPTS {
        let mut candidate = rng.gen_biguint(bits);
        // top two bits set so the product of two such primes has 2*bits bits
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, rng) {
            return Ok(candidate);
        }
    }
    Err(Error::KeyGen(format!("no {bits}-bit prime found")))
}

pub(crate) fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for &p in &SMALL_PRIMES {
        let p = BigUint::from(p);
        if n == &p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    if n.is_even() {
        return n == &two;
    }
    let n1 = n - 1u32;
    let s = n1.trailing_zeros().unwrap_or(0);
    let d = &n1 >> s;
    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let a = rng.gen_biguint_range(&two, &n1);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

impl Ciphertext {
    pub fn key_id(&self) -> &KeyId {
        &self.key_id
    }

    pub fn value(&self) -> &BigUint {
        &self.value
    }

    /// Size of the big-endian encoding of the ciphertext value.
    pub fn byte_len(&self) -> usize {
        self.value.to_bytes_be().len()
    }
}

/// `"<key_id>:<big-endian hex>"`.
impl fmt::Display for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.key_id, hex::encode(self.value.to_bytes_be()))
    }
}

impl FromStr for Ciphertext {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (id, body) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument("ciphertext missing key_id prefix".into()))?;
        let bytes = hex::decode(body)
            .map_err(|e| Error::InvalidArgument(format!("ciphertext hex: {e}")))?;
        Ok(Ciphertext {
            value: BigUint::from_bytes_be(&bytes),
            key_id: KeyId(id.to_string()),
        })
    }
}

impl Serialize for Ciphertext {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ciphertext {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A signed fixed-point number `raw / 2^frac_bits`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedPoint {
    pub frac_bits: u32,
    pub raw: BigInt,
}

impl FixedPoint {
    /// Round-to-nearest encoding; `|decode(encode(x)) - x| <= 2^-(frac_bits+1)`.
    pub fn encode(x: f64, frac_bits: u32) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::FixedPointOverflow { value: x });
        }
        let scaled = (x * 2f64.powi(frac_bits as i32)).round();
        let raw = BigInt::from_f64(scaled).ok_or(Error::FixedPointOverflow { value: x })?;
        Ok(Self { frac_bits, raw })
    }

    pub fn decode(&self) -> f64 {
        decode_scaled(&self.raw, self.frac_bits)
    }
}

/// `raw / 2^scale_bits` as `f64`.
pub fn decode_scaled(raw: &BigInt, scale_bits: u32) -> f64 {
    let v = raw.to_f64().unwrap_or(f64::NAN);
    v * 2f64.powi(-(scale_bits as i32))
}

/// Quantizes `x` to the nearest multiple of `2^-frac_bits`, staying in `f64`.
/// This is the value a fixed-point encode/decode roundtrip produces.
pub fn quantize(x: f64, frac_bits: u32) -> f64 {
    let s = 2f64.powi(frac_bits as i32);
    (x * s).round() / s
}

/// Fixed-point codec bound to a public key's plaintext space.
#[derive(Clone, Debug)]
pub struct FixedPointCodec {
    pub frac_bits: u32,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        Self {
            frac_bits: DEFAULT_FRAC_BITS,
        }
    }
}

impl FixedPointCodec {
    pub fn new(frac_bits: u32) -> Self {
        Self { frac_bits }
    }

    /// Encodes `x` into `[0, n)`. Requires `|x| < n / 2^(frac_bits + 2)`, i.e.
    /// the raw value stays below `n / 4`. Products are bounds-checked by the
    /// caller that accumulates them.
    pub fn encode(&self, x: f64, pk: &PublicKey) -> Result<BigUint> {
        let fp = FixedPoint::encode(x, self.frac_bits)?;
        let bound = BigInt::from(pk.n() >> 2u32);
        if fp.raw.abs() >= bound {
            return Err(Error::FixedPointOverflow { value: x });
        }
        pk.to_residue(&fp.raw)
    }

    pub fn encode_signed(&self, x: f64) -> Result<BigInt> {
        Ok(FixedPoint::encode(x, self.frac_bits)?.raw)
    }

    /// Decodes a residue carrying `scale_bits` of fixed-point scale.
    pub fn decode(&self, v: &BigUint, pk: &PublicKey, scale_bits: u32) -> f64 {
        decode_scaled(&pk.from_residue(v), scale_bits)
    }
}
