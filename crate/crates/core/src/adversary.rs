//! Byzantine parties that join the vote in addition to the honest ones.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::vector::{sign_of, GradVector, SignVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversaryKind {
    /// Fair coin per coordinate.
    Random,
    /// Negated sign of the honest parties' mean gradient.
    Negative,
}

impl std::fmt::Display for AdversaryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdversaryKind::Random => "random",
            AdversaryKind::Negative => "negative",
        })
    }
}

impl std::str::FromStr for AdversaryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "negative" => Ok(Self::Negative),
            other => Err(Error::Config(format!("unknown adversary kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdversaryConfig {
    pub kind: AdversaryKind,
    pub count: usize,
}

impl AdversaryConfig {
    pub fn none() -> Self {
        Self {
            kind: AdversaryKind::Negative,
            count: 0,
        }
    }
}

pub fn random_adversary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<SignVector> {
    if dim == 0 {
        return Err(Error::Empty("random adversary dimension"));
    }
    Ok(SignVector::from_raw(
        (0..dim)
            .map(|_| if rng.random::<bool>() { 1 } else { -1 })
            .collect(),
    ))
}

/// `−sign(mean of honest gradients)`; a zero mean coordinate becomes −1.
pub fn negative_adversary(normal_grads: &[GradVector]) -> Result<SignVector> {
    let first = normal_grads
        .first()
        .ok_or(Error::Empty("negative adversary needs honest gradients"))?;
    let mut sum = vec![0.0; first.len()];
    for g in normal_grads {
        check_len(sum.len(), g.len())?;
        for (s, v) in sum.iter_mut().zip(g.iter()) {
            *s += v;
        }
    }
    let m = normal_grads.len() as f64;
    Ok(SignVector::from_raw(
        sum.iter().map(|&s| -sign_of(s / m)).collect(),
    ))
}
