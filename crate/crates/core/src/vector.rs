//! Flat gradient vectors and ±1 sign vectors.

use std::ops::{Deref, DerefMut};

use crate::error::{check_len, Error, Result};

/// A flat real-valued gradient over all model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(Vec<f64>);

impl GradVector {
    pub fn new(entries: Vec<f64>) -> Self {
        Self(entries)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Coordinate-wise sign with `sign(0) = +1`.
    pub fn sign(&self) -> SignVector {
        SignVector(self.0.iter().map(|&v| sign_of(v)).collect())
    }
}

impl Deref for GradVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for GradVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for GradVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Sign with the +1 tie-break used throughout aggregation.
#[inline]
pub fn sign_of(v: f64) -> i8 {
    if v >= 0.0 {
        1
    } else {
        -1
    }
}

/// A vector with every entry exactly −1 or +1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SignVector(Vec<i8>);

impl SignVector {
    pub fn new(entries: Vec<i8>) -> Result<Self> {
        if let Some(bad) = entries.iter().find(|&&e| e != 1 && e != -1) {
            return Err(Error::Domain(format!("sign entry {bad} is not ±1")));
        }
        Ok(Self(entries))
    }

    pub fn filled(dim: usize, value: i8) -> Self {
        assert!(value == 1 || value == -1);
        Self(vec![value; dim])
    }

    pub(crate) fn from_raw(entries: Vec<i8>) -> Self {
        debug_assert!(entries.iter().all(|&e| e == 1 || e == -1));
        Self(entries)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn negated(&self) -> Self {
        Self(self.0.iter().map(|&e| -e).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&e| f64::from(e)).collect()
    }

    /// Number of bytes needed to ship this vector at one bit per coordinate.
    pub fn wire_bytes(&self) -> usize {
        packed_len(self.0.len())
    }

    /// Pack to bits, LSB first within each byte; bit set means +1.
    pub fn to_packed(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.wire_bytes()];
        for (i, &e) in self.0.iter().enumerate() {
            if e > 0 {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_packed(bytes: &[u8], dim: usize) -> Result<Self> {
        check_len(packed_len(dim), bytes.len())?;
        Ok(Self(
            (0..dim)
                .map(|i| if bytes[i / 8] >> (i % 8) & 1 == 1 { 1 } else { -1 })
                .collect(),
        ))
    }
}

pub fn packed_len(dim: usize) -> usize {
    dim.div_ceil(8)
}
