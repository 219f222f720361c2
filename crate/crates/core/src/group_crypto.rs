//! Secure multi-party sum over a ring of blinded ciphertexts.
//!
//! Each plaintext `x_i` in a vector of length `l` is encrypted as
//! `c_i = (1 + x_i·p) · R_i mod p²`, where the blinding factors
//! `R_i = (g2^{r_{i+1}} / g2^{r_{i-1}})^{r_i}` are built from a cyclic ring
//! of secret exponents. The exponents telescope to zero in the product of
//! all `R_i`, so `Π c_i ≡ 1 + p·Σx_i (mod p²)` and the sum falls out of a
//! single exact division by `p`. No individual `x_i` is recoverable without
//! the ring.

use std::fmt;
use std::sync::OnceLock;

use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::seeded_rng;

/// Smallest modulus size accepted at all (test profile).
pub const TEST_MIN_BITS: u32 = 16;
/// Smallest modulus size considered fit for real key material.
pub const PRODUCTION_MIN_BITS: u32 = 1024;
/// Miller–Rabin rounds used for every primality decision.
pub const MILLER_RABIN_ROUNDS: usize = 40;
/// Ring length below which the blinding factor collapses to 1.
pub const MIN_RING_LEN: usize = 3;

const MAX_PRIME_ATTEMPTS: usize = 2_000_000;
const PARAMS_HEADER: &str = "MIPP-PARAMS-1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GroupError {
    #[error("security_bits must be at least {TEST_MIN_BITS}, got {0}")]
    InsufficientBits(u32),
    #[error("prime search exhausted after {0} attempts")]
    PrimeSearchExhausted(usize),
    #[error("invalid group parameters: {0}")]
    InvalidParams(String),
    #[error("ring length {0} is below {MIN_RING_LEN}; the blinding factor would be 1")]
    DegenerateRing(usize),
    #[error("plaintext overflow: {0}")]
    Overflow(String),
    #[error("malformed ciphertext: {0}")]
    MalformedCiphertext(String),
    #[error("parameter record: {0}")]
    Record(String),
}

/// Which parameter size class a modulus belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Test,
    Production,
}

impl Profile {
    pub fn of(bits: u32) -> Self {
        if bits >= PRODUCTION_MIN_BITS {
            Profile::Production
        } else {
            Profile::Test
        }
    }
}

/// Public group parameters shared by every owner, user and the cloud.
#[derive(Clone, PartialEq, Eq)]
pub struct GroupParams {
    p: BigUint,
    q: BigUint,
    g1: BigUint,
    g2: BigUint,
    p_squared: BigUint,
    security_bits: u32,
    g2_table: FixedBaseTable,
}

impl fmt::Debug for GroupParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GroupParams")
            .field("p", &self.p.to_string())
            .field("q", &self.q.to_string())
            .field("security_bits", &self.security_bits)
            .finish_non_exhaustive()
    }
}

const WINDOW_BITS: u64 = 4;

/// Lazily built powers `g2^(d · 16^k)` for fixed-base exponentiation.
#[derive(Clone, Default)]
struct FixedBaseTable(OnceLock<Vec<Vec<BigUint>>>);

// Derived data; two params with equal fields are equal whatever is cached.
impl PartialEq for FixedBaseTable {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl Eq for FixedBaseTable {}

impl GroupParams {
    /// Generates parameters with a `security_bits`-bit modulus `p`.
    ///
    /// `q` is drawn one bit shorter than `p` (the closest the lengths can be,
    /// since `p - 1` is even and a multiple of the odd prime `q`), then
    /// `p = k·q + 1` is searched over even `k` until prime.
    pub fn generate(security_bits: u32, seed: &[u8]) -> Result<Self, GroupError> {
        if security_bits < TEST_MIN_BITS {
            return Err(GroupError::InsufficientBits(security_bits));
        }
        let mut rng = seeded_rng("mipp/group-params", seed);
        let q_bits = u64::from(security_bits - 1);
        let two = BigUint::from(2u32);

        for _ in 0..MAX_PRIME_ATTEMPTS {
            let mut q = rng.gen_biguint(q_bits);
            q.set_bit(q_bits - 1, true);
            q.set_bit(0, true);
            if !is_probable_prime(&q, MILLER_RABIN_ROUNDS, &mut rng) {
                continue;
            }
            let mut k = two.clone();
            loop {
                let p = &k * &q + 1u32;
                if p.bits() > u64::from(security_bits) {
                    break;
                }
                if p.bits() == u64::from(security_bits)
                    && is_probable_prime(&p, MILLER_RABIN_ROUNDS, &mut rng)
                {
                    return Self::with_random_generator(p, q, security_bits, &mut rng);
                }
                k += 2u32;
            }
        }
        Err(GroupError::PrimeSearchExhausted(MAX_PRIME_ATTEMPTS))
    }

    fn with_random_generator<R: Rng>(
        p: BigUint,
        q: BigUint,
        security_bits: u32,
        rng: &mut R,
    ) -> Result<Self, GroupError> {
        let low = BigUint::from(2u32);
        let high = &p - 1u32;
        for _ in 0..MAX_PRIME_ATTEMPTS {
            let h = rng.gen_biguint_range(&low, &high);
            match Self::from_parts_with_bits(p.clone(), q.clone(), &h, security_bits) {
                Ok(params) => return Ok(params),
                Err(GroupError::InvalidParams(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(GroupError::PrimeSearchExhausted(MAX_PRIME_ATTEMPTS))
    }

    /// Builds parameters from explicit `p`, `q` and base `h`.
    ///
    /// Fails if `h` yields `g1 = 1` or the primes do not satisfy the invariants.
    pub fn from_parts(p: BigUint, q: BigUint, h: &BigUint) -> Result<Self, GroupError> {
        let bits = p.bits() as u32;
        Self::from_parts_with_bits(p, q, h, bits)
    }

    fn from_parts_with_bits(
        p: BigUint,
        q: BigUint,
        h: &BigUint,
        security_bits: u32,
    ) -> Result<Self, GroupError> {
        if q.is_zero() || p <= BigUint::from(3u32) {
            return Err(GroupError::InvalidParams("p and q must be primes".into()));
        }
        let exponent = (&p - 1u32) / &q;
        let g1 = h.modpow(&exponent, &p);
        let p_squared = &p * &p;
        let g2 = g1.modpow(&p, &p_squared);
        let params = GroupParams {
            p,
            q,
            g1,
            g2,
            p_squared,
            security_bits,
            g2_table: FixedBaseTable::default(),
        };
        params.validate()?;
        Ok(params)
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<(), GroupError> {
        let invalid = |m: &str| Err(GroupError::InvalidParams(m.to_string()));
        let p_minus_1 = &self.p - 1u32;
        if !(&p_minus_1 % &self.q).is_zero() {
            return invalid("q does not divide p - 1");
        }
        if self.p.bits() != u64::from(self.security_bits) {
            return invalid("p does not have security_bits bits");
        }
        // p - 1 = k·q with k >= 2 forces q at least one bit shorter than p.
        if self.p.bits() - self.q.bits() > 1 {
            return invalid("q must be exactly one bit shorter than p");
        }
        if self.g1.is_one() || self.g1.is_zero() || self.g1 >= self.p {
            return invalid("g1 must lie in [2, p)");
        }
        if !self.g1.modpow(&self.q, &self.p).is_one() {
            return invalid("g1 does not have order q");
        }
        if self.g2 != self.g1.modpow(&self.p, &self.p_squared) {
            return invalid("g2 != g1^p mod p^2");
        }
        if !self.g2.gcd(&self.p_squared).is_one() {
            return invalid("g2 is not a unit mod p^2");
        }
        Ok(())
    }

    /// Full primality check on top of [`validate`](Self::validate).
    pub fn validate_primes(&self) -> Result<(), GroupError> {
        self.validate()?;
        let mut rng = seeded_rng("mipp/validate", &self.p.to_bytes_be());
        if !is_probable_prime(&self.p, MILLER_RABIN_ROUNDS, &mut rng)
            || !is_probable_prime(&self.q, MILLER_RABIN_ROUNDS, &mut rng)
        {
            return Err(GroupError::InvalidParams("p or q is composite".into()));
        }
        Ok(())
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn q(&self) -> &BigUint {
        &self.q
    }

    pub fn g1(&self) -> &BigUint {
        &self.g1
    }

    pub fn g2(&self) -> &BigUint {
        &self.g2
    }

    /// `g2^e mod p²` for `0 <= e < q`.
    pub fn g2_pow(&self, e: &BigUint) -> BigUint {
        let n = &self.p_squared;
        let table = self.g2_table.0.get_or_init(|| {
            let windows = self.q.bits().div_ceil(WINDOW_BITS) as usize;
            let mut rows = Vec::with_capacity(windows);
            let mut base = self.g2.clone();
            for _ in 0..windows {
                let mut row = Vec::with_capacity(1 << WINDOW_BITS);
                let mut acc = BigUint::one();
                for _ in 0..(1 << WINDOW_BITS) {
                    row.push(acc.clone());
                    acc = (acc * &base) % n;
                }
                base = acc;
                rows.push(row);
            }
            rows
        });
        debug_assert!(e < &self.q);
        let mut out = BigUint::one();
        for (k, row) in table.iter().enumerate() {
            let digit = (0..WINDOW_BITS).fold(0usize, |d, b| {
                d | (usize::from(e.bit(k as u64 * WINDOW_BITS + b)) << b)
            });
            if digit != 0 {
                out = (out * &row[digit]) % n;
            }
        }
        out
    }

    pub fn p_squared(&self) -> &BigUint {
        &self.p_squared
    }

    pub fn security_bits(&self) -> u32 {
        self.security_bits
    }

    pub fn profile(&self) -> Profile {
        Profile::of(self.security_bits)
    }

    /// Short fingerprint of the canonical record, used to tag ciphertexts.
    pub fn params_id(&self) -> String {
        let digest = Sha256::digest(self.to_record().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Canonical text record: header line then `key=value` decimal fields.
    pub fn to_record(&self) -> String {
        format!(
            "{PARAMS_HEADER}\np={}\nq={}\ng1={}\ng2={}\nsecurity_bits={}\n",
            self.p, self.q, self.g1, self.g2, self.security_bits
        )
    }

    pub fn from_record(text: &str) -> Result<Self, GroupError> {
        let rec = |m: String| GroupError::Record(m);
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        match lines.next() {
            Some(PARAMS_HEADER) => {}
            other => return Err(rec(format!("expected header {PARAMS_HEADER}, got {other:?}"))),
        }
        let mut fields: [Option<&str>; 5] = [None; 5];
        const NAMES: [&str; 5] = ["p", "q", "g1", "g2", "security_bits"];
        for line in lines {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| rec(format!("malformed line {line:?}")))?;
            let slot = NAMES
                .iter()
                .position(|n| *n == key)
                .ok_or_else(|| rec(format!("unknown field {key:?}")))?;
            if fields[slot].replace(value).is_some() {
                return Err(rec(format!("duplicate field {key:?}")));
            }
        }
        let big = |i: usize| -> Result<BigUint, GroupError> {
            let v = fields[i].ok_or_else(|| rec(format!("missing field {:?}", NAMES[i])))?;
            v.parse::<BigUint>()
                .map_err(|_| rec(format!("field {:?} is not a decimal integer", NAMES[i])))
        };
        let (p, q, g1, g2) = (big(0)?, big(1)?, big(2)?, big(3)?);
        let security_bits = fields[4]
            .ok_or_else(|| rec("missing field \"security_bits\"".into()))?
            .parse::<u32>()
            .map_err(|_| rec("security_bits is not an integer".into()))?;
        let p_squared = &p * &p;
        let params = GroupParams {
            p,
            q,
            g1,
            g2,
            p_squared,
            security_bits,
            g2_table: FixedBaseTable::default(),
        };
        params.validate()?;
        Ok(params)
    }
}

/// Cyclic sequence of secret exponents `r_1..r_l`, each in `[1, q-1]`.
///
/// Index `l+1` wraps to `1` and index `0` wraps to `l`.
#[derive(Clone, PartialEq, Eq)]
pub struct RingRandomness {
    r: Vec<BigUint>,
}

impl fmt::Debug for RingRandomness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RingRandomness(len={})", self.r.len())
    }
}

impl RingRandomness {
    pub fn new(r: Vec<BigUint>, params: &GroupParams) -> Result<Self, GroupError> {
        if r.len() < MIN_RING_LEN {
            return Err(GroupError::DegenerateRing(r.len()));
        }
        if r.iter().any(|v| v.is_zero() || v >= params.q()) {
            return Err(GroupError::InvalidParams("ring exponent outside [1, q-1]".into()));
        }
        Ok(RingRandomness { r })
    }

    pub fn sample<R: Rng>(len: usize, params: &GroupParams, rng: &mut R) -> Result<Self, GroupError> {
        if len < MIN_RING_LEN {
            return Err(GroupError::DegenerateRing(len));
        }
        let one = BigUint::one();
        let r = (0..len).map(|_| rng.gen_biguint_range(&one, params.q())).collect();
        Ok(RingRandomness { r })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn exponents(&self) -> &[BigUint] {
        &self.r
    }

    pub fn next(&self, i: usize) -> &BigUint {
        &self.r[(i + 1) % self.r.len()]
    }

    pub fn prev(&self, i: usize) -> &BigUint {
        &self.r[(i + self.r.len() - 1) % self.r.len()]
    }
}

/// Per-element ciphertexts, each reduced into `[0, p²)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SumCiphertext {
    c: Vec<BigUint>,
}

impl SumCiphertext {
    pub fn from_elements(c: Vec<BigUint>) -> Self {
        SumCiphertext { c }
    }

    pub fn elements(&self) -> &[BigUint] {
        &self.c
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }
}

/// Encrypts `values` under fresh ring randomness derived from `rng_seed`.
///
/// The ring is dropped before returning; only the ciphertext survives.
pub fn encrypt_vector(
    params: &GroupParams,
    values: &[u64],
    rng_seed: &[u8],
) -> Result<SumCiphertext, GroupError> {
    check_plaintexts(params, values)?;
    let mut rng = seeded_rng("mipp/ring", rng_seed);
    let ring = RingRandomness::sample(values.len(), params, &mut rng)?;
    encrypt_with_ring_fast(params, values, &ring)
}

/// Encrypts `values` with an explicit ring. The ring must match in length.
pub fn encrypt_with_ring(
    params: &GroupParams,
    values: &[u64],
    ring: &RingRandomness,
) -> Result<SumCiphertext, GroupError> {
    check_plaintexts(params, values)?;
    if ring.len() != values.len() {
        return Err(GroupError::InvalidParams(format!(
            "ring length {} does not match vector length {}",
            ring.len(),
            values.len()
        )));
    }
    let n = params.p_squared();
    // The public values each participant would broadcast to its neighbours.
    let published: Vec<BigUint> = ring
        .exponents()
        .iter()
        .map(|r| params.g2().modpow(r, n))
        .collect();
    let len = values.len();
    let c = values
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let next = &published[(i + 1) % len];
            let prev = &published[(i + len - 1) % len];
            let blind = (next * mod_inverse(prev, n)?) % n;
            let r_i = blind.modpow(&ring.exponents()[i], n);
            Ok((plaintext_factor(params, x) * r_i) % n)
        })
        .collect::<Result<Vec<_>, GroupError>>()?;
    Ok(SumCiphertext { c })
}

/// Same ciphertext as [`encrypt_with_ring`], computed with one fixed-base
/// exponentiation per element.
///
/// `g2` has order `q` modulo `p²`, so `(g2^{r_{i+1}} / g2^{r_{i-1}})^{r_i}`
/// equals `g2^{r_i (r_{i+1} - r_{i-1}) mod q}`.
pub fn encrypt_with_ring_fast(
    params: &GroupParams,
    values: &[u64],
    ring: &RingRandomness,
) -> Result<SumCiphertext, GroupError> {
    check_plaintexts(params, values)?;
    if ring.len() != values.len() {
        return Err(GroupError::InvalidParams(format!(
            "ring length {} does not match vector length {}",
            ring.len(),
            values.len()
        )));
    }
    let n = params.p_squared();
    let q = params.q();
    let r = ring.exponents();
    let len = values.len();
    let c = values
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let next = &r[(i + 1) % len];
            let prev = &r[(i + len - 1) % len];
            let diff = (next + q - prev) % q;
            let e = (&r[i] * diff) % q;
            (plaintext_factor(params, x) * params.g2_pow(&e)) % n
        })
        .collect();
    Ok(SumCiphertext { c })
}

fn plaintext_factor(params: &GroupParams, x: u64) -> BigUint {
    (BigUint::one() + BigUint::from(x) * params.p()) % params.p_squared()
}

/// Multiplies all ciphertexts and divides out `p` to recover the plaintext sum.
pub fn aggregate_and_recover(params: &GroupParams, ct: &SumCiphertext) -> Result<BigUint, GroupError> {
    if ct.is_empty() {
        return Err(GroupError::MalformedCiphertext("empty ciphertext".into()));
    }
    let n = params.p_squared();
    let mut acc = BigUint::one();
    for c in ct.elements() {
        if c >= n {
            return Err(GroupError::MalformedCiphertext("element not reduced mod p^2".into()));
        }
        acc = (acc * c) % n;
    }
    if acc.is_zero() {
        return Err(GroupError::MalformedCiphertext("product is zero".into()));
    }
    let (sum, rem) = (acc - 1u32).div_rem(params.p());
    if !rem.is_zero() {
        return Err(GroupError::MalformedCiphertext(
            "(C - 1) is not divisible by p; wrong parameters or corrupted data".into(),
        ));
    }
    Ok(sum)
}

fn check_plaintexts(params: &GroupParams, values: &[u64]) -> Result<(), GroupError> {
    if values.len() < MIN_RING_LEN {
        return Err(GroupError::DegenerateRing(values.len()));
    }
    let mut total = BigUint::zero();
    for &v in values {
        let v = BigUint::from(v);
        if &v >= params.p() {
            return Err(GroupError::Overflow(format!("value {v} >= p")));
        }
        total += v;
    }
    if &total >= params.p() {
        return Err(GroupError::Overflow(format!("sum {total} >= p")));
    }
    Ok(())
}

/// Inverse of `a` modulo `m` by the extended Euclidean algorithm.
pub fn mod_inverse(a: &BigUint, m: &BigUint) -> Result<BigUint, GroupError> {
    let a = BigInt::from_biguint(Sign::Plus, a % m);
    let m_int = BigInt::from_biguint(Sign::Plus, m.clone());
    let egcd = a.extended_gcd(&m_int);
    if !egcd.gcd.is_one() {
        return Err(GroupError::MalformedCiphertext("element is not a unit".into()));
    }
    let inv = egcd.x.mod_floor(&m_int);
    Ok(inv.to_biguint().expect("mod_floor of a positive modulus is non-negative"))
}

const SMALL_PRIMES: [u32; 25] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
];

/// Miller–Rabin with `rounds` random bases, after trial division.
pub fn is_probable_prime<R: Rng>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for &sp in &SMALL_PRIMES {
        let sp = BigUint::from(sp);
        if n == &sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().expect("n - 1 is non-zero");
    let d = &n_minus_1 >> s;
    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_1);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = (&x * &x) % n;
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}
