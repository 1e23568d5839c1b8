//! Token-balanced packing across data-parallel groups versus fifo. Rows have
//! long-tailed response lengths; each group asks for micro-batches in turn
//! and the example prints how many tokens each group ended up with.
//!
//! cargo run --example token_balance

use std::collections::BTreeMap;
use std::sync::Arc;

use flowqueue::controller::{Controller, Grant, PackingPolicy};
use flowqueue::sim::{sample_lengths, LengthDist};
use flowqueue::transport::Notification;
use flowqueue::types::{col, ConsumerGroupId, Epoch, GlobalIndex, TaskSpec};

const G: u64 = 64;
const GROUPS: u32 = 4;
const MB: u32 = 4;

fn run(policy: &PackingPolicy, lengths: &[u64]) -> BTreeMap<u32, u64> {
    let spec = TaskSpec::new("actor_update", vec![col("response")], vec![]).unwrap();
    let ctl = Arc::new(Controller::new(spec, Epoch(0), G).unwrap());
    ctl.on_notify(&Notification {
        epoch: Epoch(0),
        unit_id: 0,
        coords: (0..G).map(|r| (GlobalIndex(r), col("response"))).collect(),
    })
    .unwrap();
    let mut tokens = BTreeMap::new();
    'outer: loop {
        for g in 0..GROUPS {
            match ctl.request_batch(&ConsumerGroupId::new("actor_update", g), MB, policy).unwrap() {
                Grant::Batch(meta) => {
                    *tokens.entry(g).or_default() += meta.rows.iter().map(|r| lengths[r.0 as usize]).sum::<u64>();
                }
                _ => break 'outer,
            }
        }
    }
    tokens
}

fn spread(t: &BTreeMap<u32, u64>) -> u64 {
    t.values().max().unwrap() - t.values().min().unwrap()
}

fn main() {
    let lengths = sample_lengths(
        &LengthDist::Lognormal { mu: 5.0, sigma: 1.0, max_tokens: 2048 },
        G as usize,
        11,
    );
    let balanced = PackingPolicy::token_balanced(lengths.iter().enumerate().map(|(i, &t)| (i as u64, t)));
    for (name, policy) in [("fifo", PackingPolicy::Fifo), ("token_balanced", balanced)] {
        let t = run(&policy, &lengths);
        println!("{name:>15}: tokens per group {:?}, max-min spread {}", t.values().collect::<Vec<_>>(), spread(&t));
    }
}
