//! Feedback-to-reward mapping and the per-user epsilon-greedy linear bandit
//! that picks among the residual triage actions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Signal;
use crate::time::Timestamp;

pub const FEATURE_DIM: usize = 6;
pub const N_ACTIONS: usize = 3;

/// Reward magnitudes per outcome. Only their ordering is load-bearing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardTable {
    pub opened_immediately: f64,
    pub opened_later: f64,
    pub acted: f64,
    pub dismissed: f64,
    pub ignored: f64,
    pub deleted_unopened: f64,
    pub marked_irrelevant: f64,
    pub suppress_quiet: f64,
    pub suppress_complaint: f64,
}

impl Default for RewardTable {
    fn default() -> Self {
        Self {
            opened_immediately: 1.0,
            opened_later: 0.5,
            acted: 1.0,
            dismissed: -0.25,
            ignored: -0.5,
            deleted_unopened: -1.0,
            marked_irrelevant: -1.0,
            suppress_quiet: 0.25,
            suppress_complaint: -1.0,
        }
    }
}

impl RewardTable {
    pub fn validate(&self) -> Result<(), LearningError> {
        let all = [
            self.opened_immediately,
            self.opened_later,
            self.acted,
            self.dismissed,
            self.ignored,
            self.deleted_unopened,
            self.marked_irrelevant,
            self.suppress_quiet,
            self.suppress_complaint,
        ];
        match all.into_iter().find(|r| !(-1.0..=1.0).contains(r)) {
            Some(r) => Err(LearningError::RewardOutOfRange(r)),
            None => Ok(()),
        }
    }
}

/// How a decision ended up being judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "signal", rename_all = "snake_case")]
pub enum Outcome {
    /// Feedback on the notification that carried the alert.
    Feedback(Signal),
    /// A suppressed alert nobody complained about within the TTL.
    SuppressQuiet,
    /// The user reported a suppressed alert as missed.
    SuppressComplaint,
}

pub fn reward_of(table: &RewardTable, outcome: Outcome) -> f64 {
    match outcome {
        Outcome::Feedback(signal) => match signal {
            Signal::OpenedImmediately => table.opened_immediately,
            Signal::OpenedLater => table.opened_later,
            Signal::Acted => table.acted,
            Signal::Dismissed => table.dismissed,
            Signal::Ignored => table.ignored,
            Signal::DeletedUnopened => table.deleted_unopened,
            Signal::MarkedIrrelevant => table.marked_irrelevant,
        },
        Outcome::SuppressQuiet => table.suppress_quiet,
        Outcome::SuppressComplaint => table.suppress_complaint,
    }
}

/// Bandit arms, in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BanditAction {
    Issue = 0,
    Aggregate = 1,
    Suppress = 2,
}

impl BanditAction {
    pub const ALL: [BanditAction; N_ACTIONS] = [BanditAction::Issue, BanditAction::Aggregate, BanditAction::Suppress];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BanditAction::Issue => "issue",
            BanditAction::Aggregate => "aggregate",
            BanditAction::Suppress => "suppress",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearningError {
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("reward {0} is not finite")]
    NonFiniteReward(f64),
    #[error("reward {0} is outside [-1, 1]")]
    RewardOutOfRange(f64),
}

fn check_dim(x: &[f64]) -> Result<(), LearningError> {
    if x.len() != FEATURE_DIM {
        return Err(LearningError::DimensionMismatch {
            expected: FEATURE_DIM,
            got: x.len(),
        });
    }
    Ok(())
}

fn dot(w: &[f64; FEATURE_DIM], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub decision_id: String,
    pub action: BanditAction,
    pub features: Vec<f64>,
    pub reward: f64,
    pub settled_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub action: BanditAction,
    pub q_values: [f64; N_ACTIONS],
    pub explored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub user_id: String,
    pub weights: [[f64; FEATURE_DIM]; N_ACTIONS],
    pub epsilon: f64,
    pub epsilon_decay: f64,
    pub epsilon_floor: f64,
    pub update_count: u64,
    pub learning_rate: f64,
    pub rng_seed: u64,
    rng: ChaCha8Rng,
}

/// FNV-1a of the user id folded into the configured seed, so every user gets
/// an independent but reproducible exploration stream.
pub fn user_seed(base: u64, user_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in user_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    base ^ h
}

impl PolicyState {
    pub fn new(
        user_id: impl Into<String>,
        rng_seed: u64,
        epsilon: f64,
        epsilon_decay: f64,
        epsilon_floor: f64,
        learning_rate: f64,
    ) -> Self {
        Self {
            user_id: user_id.into(),
            weights: [[0.0; FEATURE_DIM]; N_ACTIONS],
            epsilon: epsilon.clamp(epsilon_floor, 1.0),
            epsilon_decay,
            epsilon_floor,
            update_count: 0,
            learning_rate,
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        }
    }

    pub fn from_config(user_id: &str, cfg: &crate::config::LearningConfig) -> Self {
        Self::new(
            user_id,
            user_seed(cfg.seed, user_id),
            cfg.initial_epsilon,
            cfg.epsilon_decay,
            cfg.epsilon_floor,
            cfg.learning_rate,
        )
    }

    pub fn q_values(&self, x: &[f64]) -> Result<[f64; N_ACTIONS], LearningError> {
        check_dim(x)?;
        Ok([dot(&self.weights[0], x), dot(&self.weights[1], x), dot(&self.weights[2], x)])
    }

    /// Greedy arm; the first arm in `BanditAction::ALL` wins ties.
    pub fn greedy(&self, x: &[f64]) -> Result<BanditAction, LearningError> {
        let q = self.q_values(x)?;
        Ok(argmax(&q))
    }

    /// Epsilon-greedy choice. One uniform draw decides whether to explore and
    /// a second picks the arm, so the stream advances identically for equal
    /// histories.
    pub fn select_action(&mut self, x: &[f64]) -> Result<Selection, LearningError> {
        let q_values = self.q_values(x)?;
        let explore = self.rng.random::<f64>() < self.epsilon;
        let action = if explore {
            BanditAction::ALL[self.rng.random_range(0..N_ACTIONS)]
        } else {
            argmax(&q_values)
        };
        Ok(Selection {
            action,
            q_values,
            explored: explore,
        })
    }

    /// LMS step on the taken arm only, then epsilon decay.
    pub fn update_policy(&mut self, record: &RewardRecord) -> Result<(), LearningError> {
        check_dim(&record.features)?;
        if !record.reward.is_finite() {
            return Err(LearningError::NonFiniteReward(record.reward));
        }
        if !(-1.0..=1.0).contains(&record.reward) {
            return Err(LearningError::RewardOutOfRange(record.reward));
        }
        let w = &mut self.weights[record.action.index()];
        let residual = record.reward - dot(w, &record.features);
        for (wi, xi) in w.iter_mut().zip(&record.features) {
            *wi += self.learning_rate * residual * xi;
        }
        self.epsilon = (self.epsilon * self.epsilon_decay).max(self.epsilon_floor);
        self.update_count += 1;
        Ok(())
    }
}

fn argmax(q: &[f64; N_ACTIONS]) -> BanditAction {
    let mut best = 0;
    for i in 1..N_ACTIONS {
        if q[i] > q[best] {
            best = i;
        }
    }
    BanditAction::ALL[best]
}
