//! Round-based federated training with sign compression.
//!
//! Each round every honest party draws a mini-batch, forms its clipped mean
//! gradient and uploads it compressed according to the [`Algorithm`];
//! Byzantine parties upload forged votes. The server aggregates all uploads,
//! broadcasts the aggregate and every party applies `w ← w − η·g̃`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{negative_adversary, random_adversary, AdversaryConfig, AdversaryKind};
use crate::data::{Dataset, PartyData};
use crate::error::{check_len, Error, Result};
use crate::model::{local_gradient, MlpModel};
use crate::privacy::{dpsign, PrivacyParams};
use crate::rng::{substream, Domain};
use crate::vector::{packed_len, sign_of, GradVector, SignVector};

/// Bytes per coordinate of an uncompressed gradient.
pub const FLOAT_BYTES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "dp-signsgd")]
    DpSignSgd,
    #[serde(rename = "ef-dp-signsgd")]
    EfDpSignSgd,
    #[serde(rename = "signsgd")]
    SignSgd,
    #[serde(rename = "fedavg")]
    FedAvg,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::DpSignSgd,
        Algorithm::EfDpSignSgd,
        Algorithm::SignSgd,
        Algorithm::FedAvg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::DpSignSgd => "dp-signsgd",
            Algorithm::EfDpSignSgd => "ef-dp-signsgd",
            Algorithm::SignSgd => "signsgd",
            Algorithm::FedAvg => "fedavg",
        }
    }

    pub fn is_private(self) -> bool {
        matches!(self, Algorithm::DpSignSgd | Algorithm::EfDpSignSgd)
    }

    pub fn is_sign_based(self) -> bool {
        !matches!(self, Algorithm::FedAvg)
    }

    /// Bytes one party sends per round, and receives back.
    pub fn wire_bytes(self, dim: usize) -> usize {
        if self.is_sign_based() {
            packed_len(dim)
        } else {
            FLOAT_BYTES * dim
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?}")))
    }
}

/// Factor applied to `g̃` inside the residual update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualScale {
    /// `ẽ' = λẽ + (1−λ)(s − g̃/M)`, with `M` the number of votes.
    InverseVoters,
    /// `ẽ' = λẽ + (1−λ)(s − g̃)`.
    Unit,
}

/// L2 sensitivity assumed when calibrating a party's noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensitivityMode {
    /// Δ = C, the per-example clip bound.
    ClipBound,
    /// Δ = 2C/n for a batch mean over `n` examples: the largest change from
    /// replacing a single example.
    ReplaceOne,
}

impl SensitivityMode {
    pub fn sensitivity(self, clip_bound: f64, batch_len: usize) -> f64 {
        match self {
            SensitivityMode::ClipBound => clip_bound,
            SensitivityMode::ReplaceOne => 2.0 * clip_bound / batch_len as f64,
        }
    }
}

fn vote_sums(signs: &[SignVector]) -> Result<Vec<i64>> {
    let first = signs.first().ok_or(Error::Empty("no votes to aggregate"))?;
    let mut sums = vec![0i64; first.len()];
    for s in signs {
        check_len(sums.len(), s.len())?;
        for (acc, &v) in sums.iter_mut().zip(s.as_slice()) {
            *acc += i64::from(v);
        }
    }
    Ok(sums)
}

/// Coordinate-wise sign of the mean vote, ties going to +1.
pub fn majority_vote_aggregate(signs: &[SignVector]) -> Result<SignVector> {
    let sums = vote_sums(signs)?;
    Ok(SignVector::from_raw(
        sums.iter().map(|&s| if s >= 0 { 1 } else { -1 }).collect(),
    ))
}

/// Error-feedback aggregation. With `s` the mean vote:
/// `g̃ = sign(s + ẽ)` and `ẽ' = λẽ + (1−λ)(s − k·g̃)`, where `k` is set by
/// `scale`.
pub fn ef_aggregate(
    signs: &[SignVector],
    residual: &[f64],
    lambda: f64,
    scale: ResidualScale,
) -> Result<(SignVector, Vec<f64>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let sums = vote_sums(signs)?;
    check_len(sums.len(), residual.len())?;
    let voters = signs.len() as f64;
    let k = match scale {
        ResidualScale::InverseVoters => 1.0 / voters,
        ResidualScale::Unit => 1.0,
    };
    let mut aggregate = Vec::with_capacity(sums.len());
    let mut next = Vec::with_capacity(sums.len());
    for (&sum, &e) in sums.iter().zip(residual) {
        let mean = sum as f64 / voters;
        let g = sign_of(mean + e);
        aggregate.push(g);
        next.push(lambda * e + (1.0 - lambda) * (mean - k * f64::from(g)));
    }
    Ok((SignVector::from_raw(aggregate), next))
}

/// Arithmetic mean of the uploaded gradients.
pub fn fedavg_aggregate(grads: &[GradVector]) -> Result<GradVector> {
    let first = grads.first().ok_or(Error::Empty("no gradients to average"))?;
    let mut sum = vec![0.0; first.len()];
    for g in grads {
        check_len(sum.len(), g.len())?;
        for (s, v) in sum.iter_mut().zip(g.iter()) {
            *s += v;
        }
    }
    let m = grads.len() as f64;
    sum.iter_mut().for_each(|s| *s /= m);
    Ok(GradVector::new(sum))
}

/// Global model plus server-side error-feedback state.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub model: MlpModel,
    /// Residual error ẽ; all zeros until an EF round updates it.
    pub residual: Vec<f64>,
    pub lambda: f64,
    pub eta: f64,
    /// Rounds completed so far.
    pub round: usize,
}

impl ServerState {
    pub fn new(model: MlpModel, lambda: f64, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {eta}")));
        }
        let d = model.num_params();
        Ok(Self {
            model,
            residual: vec![0.0; d],
            lambda,
            eta,
            round: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 1-based index of the completed round.
    pub round: usize,
    pub test_accuracy: f64,
    /// Mean per-example loss over the mini-batches sampled this round,
    /// before the update.
    pub train_loss: f64,
    /// Bytes sent by one party this round.
    pub uplink_bytes: usize,
    /// Bytes received by one party this round.
    pub downlink_bytes: usize,
}

/// Everything the server saw in one round, for offline checks.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    /// Honest parties' clipped mean gradients, before compression.
    pub gradients: Vec<GradVector>,
    /// Uploaded sign votes, honest parties first, then adversaries. Empty for
    /// FedAvg.
    pub votes: Vec<SignVector>,
    pub residual_before: Vec<f64>,
    pub residual_after: Vec<f64>,
    /// Direction broadcast to the parties.
    pub direction: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
    pub sensitivity: SensitivityMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationSettings {
    pub algorithm: Algorithm,
    pub batch_size: usize,
    pub clip_bound: f64,
    pub lambda: f64,
    pub eta: f64,
    pub residual_scale: ResidualScale,
    pub privacy: PrivacyBudget,
    pub adversary: AdversaryConfig,
    pub seed: u64,
}

/// A simulated deployment: honest parties, adversaries, a server and a
/// held-out test set.
#[derive(Debug, Clone)]
pub struct Federation {
    settings: FederationSettings,
    parties: Vec<PartyData>,
    privacy: Vec<Option<PrivacyParams>>,
    test: Dataset,
    state: ServerState,
}

impl Federation {
    pub fn new(
        settings: FederationSettings,
        model: MlpModel,
        parties: Vec<Dataset>,
        test: Dataset,
    ) -> Result<Self> {
        if parties.is_empty() {
            return Err(Error::Config("need at least one honest party".into()));
        }
        if settings.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if settings.clip_bound.is_nan() || settings.clip_bound <= 0.0 {
            return Err(Error::Config(format!(
                "clip bound must be positive, got {}",
                settings.clip_bound
            )));
        }
        for p in &parties {
            check_len(model.input_dim(), p.input_dim())?;
        }
        check_len(model.input_dim(), test.input_dim())?;
        let parties: Vec<PartyData> = parties.into_iter().map(PartyData::new).collect();
        let privacy = parties
            .iter()
            .map(|p| {
                if !settings.algorithm.is_private() {
                    return Ok(None);
                }
                let budget = settings.privacy;
                let n = p.effective_batch(settings.batch_size);
                let sensitivity = budget.sensitivity.sensitivity(settings.clip_bound, n);
                PrivacyParams::calibrate(budget.epsilon, budget.delta, sensitivity).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        let state = ServerState::new(model, settings.lambda, settings.eta)?;
        Ok(Self {
            settings,
            parties,
            privacy,
            test,
            state,
        })
    }

    pub fn settings(&self) -> &FederationSettings {
        &self.settings
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    pub fn num_parties(&self) -> usize {
        self.parties.len()
    }

    pub fn party_sizes(&self) -> Vec<usize> {
        self.parties.iter().map(PartyData::len).collect()
    }

    /// Calibrated privacy parameters per honest party (`None` without DP).
    pub fn privacy(&self) -> &[Option<PrivacyParams>] {
        &self.privacy
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        self.run_round_traced().map(|(metrics, _)| metrics)
    }

    pub fn run_round_traced(&mut self) -> Result<(RoundMetrics, RoundTrace)> {
        let settings = self.settings.clone();
        let algorithm = settings.algorithm;
        let round = self.state.round as u64;
        let model = &self.state.model;
        let dim = model.num_params();

        let uploads = self
            .parties
            .par_iter_mut()
            .zip(&self.privacy)
            .enumerate()
            .map(|(m, (party, privacy))| {
                if party.is_empty() {
                    return Err(Error::Config(format!("party {m} holds no examples")));
                }
                let mut rng = substream(settings.seed, Domain::Party, m as u64, round);
                let local = local_gradient(
                    model,
                    party,
                    settings.batch_size,
                    settings.clip_bound,
                    &mut rng,
                )?;
                let vote = match (algorithm, privacy) {
                    (Algorithm::DpSignSgd | Algorithm::EfDpSignSgd, Some(params)) => {
                        Some(dpsign(&local.grad, params, &mut rng))
                    }
                    (Algorithm::SignSgd, _) => Some(local.grad.sign()),
                    (Algorithm::FedAvg, _) => None,
                    (_, None) => unreachable!("private algorithms are calibrated at setup"),
                };
                Ok((local, vote))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        let mut gradients = Vec::with_capacity(uploads.len());
        let mut votes = Vec::with_capacity(uploads.len() + settings.adversary.count);
        for (local, vote) in uploads {
            loss_sum += local.mean_loss * local.batch_len as f64;
            loss_count += local.batch_len;
            gradients.push(local.grad);
            votes.extend(vote);
        }

        let forged = self.forge_votes(&gradients, dim, round)?;
        let residual_before = self.state.residual.clone();
        let direction: Vec<f64> = match algorithm {
            Algorithm::DpSignSgd | Algorithm::SignSgd => {
                votes.extend(forged);
                let agg = majority_vote_aggregate(&votes)?;
                self.state.model.apply_sign_update(&agg, self.state.eta)?;
                agg.to_f64()
            }
            Algorithm::EfDpSignSgd => {
                votes.extend(forged);
                let (agg, next) = ef_aggregate(
                    &votes,
                    &self.state.residual,
                    self.state.lambda,
                    settings.residual_scale,
                )?;
                self.state.residual = next;
                self.state.model.apply_sign_update(&agg, self.state.eta)?;
                agg.to_f64()
            }
            Algorithm::FedAvg => {
                let mut uploads = gradients.clone();
                uploads.extend(forged.iter().map(|s| GradVector::new(s.to_f64())));
                let mean = fedavg_aggregate(&uploads)?;
                self.state.model.apply_update(&mean, self.state.eta)?;
                mean.into_inner()
            }
        };
        self.state.round += 1;

        let (_, test_accuracy) = self.state.model.evaluate(&self.test)?;
        let bytes = algorithm.wire_bytes(dim);
        let metrics = RoundMetrics {
            round: self.state.round,
            test_accuracy,
            train_loss: loss_sum / loss_count as f64,
            uplink_bytes: bytes,
            downlink_bytes: bytes,
        };
        let trace = RoundTrace {
            gradients,
            votes,
            residual_before,
            residual_after: self.state.residual.clone(),
            direction,
        };
        Ok((metrics, trace))
    }

    fn forge_votes(&self, honest: &[GradVector], dim: usize, round: u64) -> Result<Vec<SignVector>> {
        let adversary = self.settings.adversary;
        if adversary.count == 0 {
            return Ok(Vec::new());
        }
        match adversary.kind {
            AdversaryKind::Negative => {
                let vote = negative_adversary(honest)?;
                Ok(vec![vote; adversary.count])
            }
            AdversaryKind::Random => (0..adversary.count)
                .map(|j| {
                    let mut rng = substream(self.settings.seed, Domain::Adversary, j as u64, round);
                    random_adversary(dim, &mut rng)
                })
                .collect(),
        }
    }
}
