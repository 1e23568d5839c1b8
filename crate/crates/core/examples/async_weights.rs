//! Weight updates without stopping rollout. The trainer submits versions
//! to an asynchronous coordinator; instances keep generating with the old
//! weights and swap at their next iteration boundary. A second run limits
//! swaps to one instance at a time.
//!
//! cargo run --example async_weights

use bytes::Bytes;

use flowqueue::coordinator::{staggered_update, Coordinator, RolloutInstanceState, TransferMode};
use flowqueue::types::WeightVersion;

fn main() {
    let coord = Coordinator::new(TransferMode::Asynchronous, &[0, 1, 2]);
    for id in 0..3 {
        coord.begin_iteration(id).unwrap();
    }
    let h = coord.submit_weights(WeightVersion(1), Bytes::from_static(b"w1"), None).unwrap();
    println!("submitted v{} (synchronous: {})", h.version.0, h.synchronous);
    coord.deliver();
    println!("after delivery, instances still run {:?}", coord.active_versions());
    for id in 0..3 {
        let r = coord.boundary(id).unwrap();
        println!("instance {id} at its boundary: swapped={} now v{}", r.swapped, r.new_version.0);
    }

    let mut fleet: Vec<RolloutInstanceState> = (0..4).map(RolloutInstanceState::new).collect();
    let windows = staggered_update(&mut fleet, WeightVersion(2), Bytes::from_static(b"w2"), 1).unwrap();
    println!("staggered rollout of v2, one instance at a time: {windows:?}");
}
