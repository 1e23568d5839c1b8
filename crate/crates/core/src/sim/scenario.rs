use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::controller::PackingPolicy;
use crate::coordinator::RejectPolicy;

use super::SimError;

/// Pipeline regime being simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Generate the whole batch, then train on it, then sync weights.
    Sequential,
    /// Training consumes micro-batches while generation is still running.
    Streamed,
    /// Streamed, plus one-step-off generation and background weight transfer.
    StreamedAsync,
    /// As `StreamedAsync`, with at most `stagger_k` instances swapping at once.
    StreamedAsyncStaggered,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::Sequential,
        Mode::Streamed,
        Mode::StreamedAsync,
        Mode::StreamedAsyncStaggered,
    ];

    pub fn is_async(self) -> bool {
        matches!(self, Mode::StreamedAsync | Mode::StreamedAsyncStaggered)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Sequential => "sequential",
            Mode::Streamed => "streamed",
            Mode::StreamedAsync => "streamed_async",
            Mode::StreamedAsyncStaggered => "streamed_async_staggered",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

/// Response length distribution, in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDist {
    Fixed { tokens: u64 },
    /// Log-normal in token space, rounded and clipped to `[1, max_tokens]`.
    Lognormal { mu: f64, sigma: f64, max_tokens: u64 },
}

impl LengthDist {
    fn validate(&self) -> Result<(), String> {
        match *self {
            LengthDist::Fixed { tokens } if tokens == 0 => Err("fixed length must be >= 1".into()),
            LengthDist::Lognormal { mu, sigma, max_tokens } => {
                if !mu.is_finite() || !sigma.is_finite() || sigma < 0.0 {
                    Err(format!("bad lognormal parameters mu={mu} sigma={sigma}"))
                } else if max_tokens == 0 {
                    Err("max_tokens must be >= 1".into())
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Draws `count` response lengths. The same `(dist, count, seed)` always
/// gives the same list.
pub fn sample_lengths(dist: &LengthDist, count: usize, seed: u64) -> Vec<u64> {
    match *dist {
        LengthDist::Fixed { tokens } => vec![tokens; count],
        LengthDist::Lognormal { mu, sigma, max_tokens } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = LogNormal::new(mu, sigma).expect("validated parameters");
            (0..count)
                .map(|_| (d.sample(&mut rng).round() as u64).clamp(1, max_tokens))
                .collect()
        }
    }
}

/// Per-epoch length draw, derived from the scenario seed.
pub(crate) fn epoch_lengths(dist: &LengthDist, count: usize, seed: u64, epoch: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    sample_lengths(dist, count, rng.random())
}

/// An inference stage between generation and training (reference or
/// reward model). Reads prompt and response, writes `name`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub instances: u32,
    pub per_sample_ns: u64,
    #[serde(default = "default_micro_batch")]
    pub micro_batch: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Packing {
    #[default]
    Fifo,
    TokenBalanced,
}

fn default_micro_batch() -> u32 {
    4
}

fn default_units() -> u32 {
    2
}

fn default_stagger() -> usize {
    1
}

/// Everything a simulation run depends on. Times are integer nanoseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub mode: Mode,
    pub global_batch: u64,
    pub rollout_instances: u32,
    pub train_instances: u32,
    pub lengths: LengthDist,
    pub per_token_ns: u64,
    pub per_sample_train_ns: u64,
    pub weight_transfer_ns: u64,
    pub h2d_ns: u64,
    /// Staleness bound `s`. Only the async modes generate ahead of the
    /// trainer; the synchronous ones behave as `s = 0`.
    pub staleness: u64,
    pub iterations: u64,
    pub seed: u64,
    #[serde(default = "default_micro_batch")]
    pub rollout_micro_batch: u32,
    #[serde(default = "default_micro_batch")]
    pub train_micro_batch: u32,
    #[serde(default = "default_units")]
    pub storage_units: u32,
    #[serde(default = "default_stagger")]
    pub stagger_k: usize,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub packing: Packing,
    #[serde(default)]
    pub reject_policy: RejectPolicy,
}

impl SimScenario {
    /// The default desk-scale scenario: G=64, 4 rollout and 2 train
    /// instances, long-tailed lengths, generation and training roughly
    /// balanced.
    pub fn desk(mode: Mode) -> Self {
        SimScenario {
            mode,
            global_batch: 64,
            rollout_instances: 4,
            train_instances: 2,
            lengths: LengthDist::Lognormal {
                mu: 5.0,
                sigma: 1.0,
                max_tokens: 2048,
            },
            per_token_ns: 20_000,
            per_sample_train_ns: 2_500_000,
            weight_transfer_ns: 10_000_000,
            h2d_ns: 1_000_000,
            staleness: 1,
            iterations: 20,
            seed: 7,
            rollout_micro_batch: 4,
            train_micro_batch: 4,
            storage_units: 2,
            stagger_k: 1,
            stages: Vec::new(),
            packing: Packing::Fifo,
            reject_policy: RejectPolicy::Drop,
        }
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        SimScenario { mode, ..self.clone() }
    }

    /// Effective staleness: how many epochs generation may run ahead.
    pub fn lookahead(&self) -> u64 {
        if self.mode.is_async() {
            self.staleness
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::ScenarioInvalid(m));
        if self.global_batch == 0 {
            return bad("global_batch must be >= 1".into());
        }
        if self.rollout_instances == 0 || self.train_instances == 0 {
            return bad("need at least one rollout and one train instance".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if self.rollout_micro_batch == 0 || self.train_micro_batch == 0 {
            return bad("micro-batch sizes must be >= 1".into());
        }
        if self.storage_units == 0 || self.storage_units as u64 > self.global_batch {
            return bad(format!(
                "storage_units must be in 1..={}",
                self.global_batch
            ));
        }
        if let Err(m) = self.lengths.validate() {
            return bad(m);
        }
        if self.mode == Mode::StreamedAsyncStaggered
            && (self.rollout_instances < 2 || self.stagger_k == 0 || self.stagger_k >= self.rollout_instances as usize)
        {
            return bad(format!(
                "staggered mode needs 1 <= stagger_k < rollout_instances (k={}, R={})",
                self.stagger_k, self.rollout_instances
            ));
        }
        let mut names = vec!["prompt", "response"];
        for st in &self.stages {
            if st.instances == 0 || st.micro_batch == 0 {
                return bad(format!("stage {}: instances and micro_batch must be >= 1", st.name));
            }
            if st.name.is_empty() || names.contains(&st.name.as_str()) {
                return bad(format!("stage name {:?} is empty or clashes", st.name));
            }
            names.push(&st.name);
        }
        if names.len() > 64 {
            return bad("too many stages".into());
        }
        Ok(())
    }

    pub(crate) fn packing_policy(&self, lengths: &[u64]) -> PackingPolicy {
        match self.packing {
            Packing::Fifo => PackingPolicy::Fifo,
            Packing::TokenBalanced => PackingPolicy::token_balanced(
                lengths.iter().enumerate().map(|(i, t)| (i as u64, *t)),
            ),
        }
    }
}
