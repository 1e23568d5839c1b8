//! Micro-batch selection policies.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::types::GlobalIndex;

/// How a controller picks rows out of the ready set.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PackingPolicy {
    /// Smallest global indices first.
    #[default]
    Fifo,
    /// Balance cumulative token counts across consumer groups.
    TokenBalanced { token_counts: BTreeMap<GlobalIndex, u64> },
}

impl PackingPolicy {
    pub fn token_balanced(counts: impl IntoIterator<Item = (u64, u64)>) -> Self {
        PackingPolicy::TokenBalanced {
            token_counts: counts
                .into_iter()
                .map(|(r, t)| (GlobalIndex(r), t))
                .collect(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            PackingPolicy::Fifo => "fifo",
            PackingPolicy::TokenBalanced { .. } => "token_balanced",
        }
    }

    pub fn tokens_of(&self, row: GlobalIndex) -> u64 {
        match self {
            PackingPolicy::Fifo => 0,
            PackingPolicy::TokenBalanced { token_counts } => {
                token_counts.get(&row).copied().unwrap_or(0)
            }
        }
    }
}

/// Running token totals seen by the packer for the requesting consumer.
///
/// `Default` describes a fresh consumer in a fresh task.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PackContext {
    /// Tokens already issued to the requesting consumer.
    pub consumer_total: u64,
    /// Mean cumulative tokens across the task's known consumers.
    pub mean_total: f64,
}

/// Selects `size` rows from `ready` and returns them in ascending order.
///
/// * `Fifo` takes the `size` smallest indices.
/// * `TokenBalanced` aims the batch's token sum at the fair share of the
///   ready pool, shifted by how far this consumer is below (or above) the
///   running mean. The first pick is the largest-token row when the consumer
///   is at or below the mean and the smallest otherwise; each further pick is
///   the row closest to the per-slot remainder of the target. Ties go to the
///   smaller index.
///
/// Panics if `ready` holds fewer than `size` rows.
pub fn pack_batch(
    ready: &BTreeSet<GlobalIndex>,
    size: usize,
    policy: &PackingPolicy,
    ctx: PackContext,
) -> Vec<GlobalIndex> {
    assert!(
        ready.len() >= size,
        "pack_batch needs {size} ready rows, got {}",
        ready.len()
    );
    match policy {
        PackingPolicy::Fifo => ready.iter().take(size).copied().collect(),
        PackingPolicy::TokenBalanced { .. } => token_balanced(ready, size, policy, ctx),
    }
}

fn token_balanced(
    ready: &BTreeSet<GlobalIndex>,
    size: usize,
    policy: &PackingPolicy,
    ctx: PackContext,
) -> Vec<GlobalIndex> {
    if size == 0 {
        return Vec::new();
    }
    let mut pool: Vec<(GlobalIndex, u64)> =
        ready.iter().map(|&r| (r, policy.tokens_of(r))).collect();
    let pool_total: u64 = pool.iter().map(|(_, t)| t).sum();
    let fair = pool_total as f64 * size as f64 / pool.len() as f64;
    let deficit = ctx.mean_total - ctx.consumer_total as f64;
    let target = (fair + deficit).max(0.0);

    let below_mean = ctx.consumer_total as f64 <= ctx.mean_total;
    let first = pool
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            let by_tokens = if below_mean { b.1.cmp(&a.1) } else { a.1.cmp(&b.1) };
            by_tokens.then(a.0.cmp(&b.0))
        })
        .map(|(i, _)| i)
        .expect("pool is nonempty");
    let (row, tokens) = pool.remove(first);
    let mut picked = vec![row];
    let mut partial = tokens as f64;

    while picked.len() < size {
        let slots_left = (size - picked.len()) as f64;
        let ideal = (target - partial) / slots_left;
        let best = pool
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let da = (a.1 as f64 - ideal).abs();
                let db = (b.1 as f64 - ideal).abs();
                da.total_cmp(&db).then(a.0.cmp(&b.0))
            })
            .map(|(i, _)| i)
            .expect("pool holds enough rows");
        let (row, tokens) = pool.remove(best);
        picked.push(row);
        partial += tokens as f64;
    }
    picked.sort();
    picked
}
