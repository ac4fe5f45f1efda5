//! Reference computations for tests: textbook P-256 arithmetic over
//! arbitrary-precision integers, ECDSA verification, ECDH, HMAC-SHA-256 built
//! from the bare hash, AES-CBC chained by hand over the block cipher, and a
//! minimal DER reader.
//!
//! Nothing here is constant time or fast. It exists so that the production
//! crypto path can be checked against a second, structurally unrelated
//! implementation.

use aes::cipher::{BlockDecrypt, BlockEncrypt, KeyInit};
use num_bigint::BigUint;
use num_traits::Zero;
use sha2::{Digest, Sha256};

fn hexnum(s: &str) -> BigUint {
    BigUint::parse_bytes(s.as_bytes(), 16).expect("valid hex constant")
}

pub struct Curve {
    pub p: BigUint,
    pub a: BigUint,
    pub b: BigUint,
    pub n: BigUint,
    pub g: Point,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Point {
    Infinity,
    Affine(BigUint, BigUint),
}

impl Curve {
    pub fn p256() -> Curve {
        let p = hexnum("ffffffff00000001000000000000000000000000ffffffffffffffffffffffff");
        let a = &p - BigUint::from(3u8);
        Curve {
            a,
            b: hexnum("5ac635d8aa3a93e7b3ebbd55769886bc651d06b0cc53b0f63bce3c3e27d2604b"),
            n: hexnum("ffffffff00000000ffffffffffffffffbce6faada7179e84f3b9cac2fc632551"),
            g: Point::Affine(
                hexnum("6b17d1f2e12c4247f8bce6e563a440f277037d812deb33a0f4a13945d898c296"),
                hexnum("4fe342e2fe1a7f9b8ee7eb4a7c0f9e162bce33576b315ececbb6406837bf51f5"),
            ),
            p,
        }
    }

    fn inv(&self, v: &BigUint, m: &BigUint) -> BigUint {
        // Fermat: m is prime for both the field and the group order.
        v.modpow(&(m - BigUint::from(2u8)), m)
    }

    fn sub(&self, a: &BigUint, b: &BigUint) -> BigUint {
        ((a + &self.p) - (b % &self.p)) % &self.p
    }

    /// y^2 == x^3 + a*x + b (mod p)
    pub fn on_curve(&self, x: &BigUint, y: &BigUint) -> bool {
        if x >= &self.p || y >= &self.p {
            return false;
        }
        let lhs = (y * y) % &self.p;
        let rhs = (x * x * x + &self.a * x + &self.b) % &self.p;
        lhs == rhs
    }

    pub fn add(&self, l: &Point, r: &Point) -> Point {
        match (l, r) {
            (Point::Infinity, q) | (q, Point::Infinity) => q.clone(),
            (Point::Affine(x1, y1), Point::Affine(x2, y2)) => {
                let lambda = if x1 == x2 {
                    if (y1 + y2) % &self.p == BigUint::zero() {
                        return Point::Infinity;
                    }
                    let num = (BigUint::from(3u8) * x1 * x1 + &self.a) % &self.p;
                    let den = self.inv(&((BigUint::from(2u8) * y1) % &self.p), &self.p);
                    (num * den) % &self.p
                } else {
                    let num = self.sub(y2, y1);
                    let den = self.inv(&self.sub(x2, x1), &self.p);
                    (num * den) % &self.p
                };
                let x3 = self.sub(&self.sub(&(&lambda * &lambda), x1), x2);
                let y3 = self.sub(&(&lambda * self.sub(x1, &x3)), y1);
                Point::Affine(x3, y3)
            }
        }
    }

    pub fn mul(&self, k: &BigUint, point: &Point) -> Point {
        let mut acc = Point::Infinity;
        let mut addend = point.clone();
        let bits = k.bits();
        for i in 0..bits {
            if k.bit(i) {
                acc = self.add(&acc, &addend);
            }
            addend = self.add(&addend, &addend);
        }
        acc
    }

    /// ECDSA verification over an already-computed digest (prehashed mode).
    pub fn verify_prehashed(&self, pub_x: &[u8], pub_y: &[u8], digest: &[u8], r: &[u8], s: &[u8]) -> bool {
        let qx = BigUint::from_bytes_be(pub_x);
        let qy = BigUint::from_bytes_be(pub_y);
        if !self.on_curve(&qx, &qy) {
            return false;
        }
        let r = BigUint::from_bytes_be(r);
        let s = BigUint::from_bytes_be(s);
        if r.is_zero() || s.is_zero() || r >= self.n || s >= self.n {
            return false;
        }
        // Leftmost 256 bits of the digest.
        let mut e = BigUint::from_bytes_be(digest);
        if digest.len() > 32 {
            e >>= 8 * (digest.len() - 32);
        }
        let w = self.inv(&s, &self.n);
        let u1 = (&e * &w) % &self.n;
        let u2 = (&r * &w) % &self.n;
        let q = Point::Affine(qx, qy);
        match self.add(&self.mul(&u1, &self.g), &self.mul(&u2, &q)) {
            Point::Infinity => false,
            Point::Affine(x, _) => x % &self.n == r,
        }
    }

    /// ECDSA-SHA256 verification of a DER-encoded signature over `message`.
    pub fn verify_der(&self, pub_x: &[u8], pub_y: &[u8], message: &[u8], der_sig: &[u8]) -> bool {
        match parse_der_signature(der_sig) {
            Some((r, s)) => self.verify_prehashed(pub_x, pub_y, &Sha256::digest(message), &r, &s),
            None => false,
        }
    }

    /// x-coordinate of scalar * (x, y), 32 bytes big-endian.
    pub fn ecdh_x(&self, scalar: &[u8], pub_x: &[u8], pub_y: &[u8]) -> Option<[u8; 32]> {
        let q = Point::Affine(BigUint::from_bytes_be(pub_x), BigUint::from_bytes_be(pub_y));
        match self.mul(&BigUint::from_bytes_be(scalar), &q) {
            Point::Infinity => None,
            Point::Affine(x, _) => Some(to32(&x)),
        }
    }

    /// Public point for a private scalar.
    pub fn public_key(&self, scalar: &[u8]) -> ([u8; 32], [u8; 32]) {
        match self.mul(&BigUint::from_bytes_be(scalar), &self.g) {
            Point::Affine(x, y) => (to32(&x), to32(&y)),
            Point::Infinity => panic!("scalar is a multiple of the group order"),
        }
    }

    pub fn order_bytes(&self) -> [u8; 32] {
        to32(&self.n)
    }
}

pub fn to32(v: &BigUint) -> [u8; 32] {
    let bytes = v.to_bytes_be();
    let mut out = [0u8; 32];
    out[32 - bytes.len()..].copy_from_slice(&bytes);
    out
}


fn der_read_len(data: &[u8], pos: &mut usize) -> Option<usize> {
    let first = *data.get(*pos)?;
    *pos += 1;
    if first < 0x80 {
        return Some(first as usize);
    }
    let n = (first & 0x7F) as usize;
    if n == 0 || n > 2 {
        return None;
    }
    let mut len = 0usize;
    for _ in 0..n {
        len = (len << 8) | *data.get(*pos)? as usize;
        *pos += 1;
    }
    Some(len)
}

/// A DER element: (tag, content).
pub fn der_read(data: &[u8], pos: &mut usize) -> Option<(u8, Vec<u8>)> {
    let tag = *data.get(*pos)?;
    *pos += 1;
    let len = der_read_len(data, pos)?;
    let content = data.get(*pos..*pos + len)?.to_vec();
    *pos += len;
    Some((tag, content))
}

/// Parse `SEQUENCE { INTEGER r, INTEGER s }` into 32-byte big-endian values.
pub fn parse_der_signature(sig: &[u8]) -> Option<([u8; 32], [u8; 32])> {
    let mut pos = 0;
    let (tag, body) = der_read(sig, &mut pos)?;
    if tag != 0x30 || pos != sig.len() {
        return None;
    }
    let mut inner = 0;
    let (t1, r) = der_read(&body, &mut inner)?;
    let (t2, s) = der_read(&body, &mut inner)?;
    if t1 != 0x02 || t2 != 0x02 || inner != body.len() {
        return None;
    }
    Some((to32(&BigUint::from_bytes_be(&r)), to32(&BigUint::from_bytes_be(&s))))
}

/// HMAC-SHA-256 per its textbook definition.
pub fn hmac_sha256(key: &[u8], message: &[u8]) -> [u8; 32] {
    let mut block = [0u8; 64];
    if key.len() > 64 {
        block[..32].copy_from_slice(&Sha256::digest(key));
    } else {
        block[..key.len()].copy_from_slice(key);
    }
    let ipad: Vec<u8> = block.iter().map(|b| b ^ 0x36).collect();
    let opad: Vec<u8> = block.iter().map(|b| b ^ 0x5C).collect();
    let inner = Sha256::new().chain_update(&ipad).chain_update(message).finalize();
    Sha256::new().chain_update(&opad).chain_update(inner).finalize().into()
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

/// AES-256-CBC without padding, chained by hand.
pub fn aes256_cbc_encrypt(key: &[u8; 32], iv: &[u8; 16], plaintext: &[u8]) -> Vec<u8> {
    assert_eq!(plaintext.len() % 16, 0);
    let cipher = aes::Aes256::new(key.into());
    let mut prev = *iv;
    let mut out = Vec::with_capacity(plaintext.len());
    for chunk in plaintext.chunks(16) {
        let mut block = [0u8; 16];
        for i in 0..16 {
            block[i] = chunk[i] ^ prev[i];
        }
        let mut b = block.into();
        cipher.encrypt_block(&mut b);
        prev = b.into();
        out.extend_from_slice(&prev);
    }
    out
}

pub fn aes256_cbc_decrypt(key: &[u8; 32], iv: &[u8; 16], ciphertext: &[u8]) -> Vec<u8> {
    assert_eq!(ciphertext.len() % 16, 0);
    let cipher = aes::Aes256::new(key.into());
    let mut prev = *iv;
    let mut out = Vec::with_capacity(ciphertext.len());
    for chunk in ciphertext.chunks(16) {
        let mut b = aes::Block::clone_from_slice(chunk);
        cipher.decrypt_block(&mut b);
        for i in 0..16 {
            out.push(b[i] ^ prev[i]);
        }
        prev.copy_from_slice(chunk);
    }
    out
}
