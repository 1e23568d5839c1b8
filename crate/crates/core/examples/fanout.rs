//! A tensor-parallel group of four members: the leader pulls one
//! micro-batch and broadcasts it, so storage sees one fetch per group
//! instead of one per member. Variable-length responses travel in a
//! packed envelope with offsets rather than padded to the longest row.
//!
//! cargo run --example fanout

use std::sync::Arc;

use flowqueue::client::{
    encode_varlen, leader_fetch_fanout, ChannelReplica, LocalReplica, Replica, StorageDirectory,
};
use flowqueue::controller::{Controller, Grant, PackingPolicy};
use flowqueue::storage::{PartitionMap, StorageUnit};
use flowqueue::transport::StorageApi;
use flowqueue::types::{col, Cell, CellValue, ConsumerGroupId, Epoch, TaskSpec};

fn main() {
    let g = 8;
    let partition = PartitionMap::new(g, 2).unwrap();
    let units = StorageUnit::cluster(&partition, Epoch(0));
    let spec = TaskSpec::new("actor_update", vec![col("response")], vec![]).unwrap();
    let ctl = Arc::new(Controller::new(spec, Epoch(0), g).unwrap());
    for u in &units {
        u.register_controller(ctl.clone()).unwrap();
    }
    let dir = StorageDirectory::new(partition, units.iter().map(|u| u.clone() as Arc<dyn StorageApi>).collect()).unwrap();
    let cells = (0..g)
        .map(|r| Cell::new(r, col("response"), CellValue::new(vec![b'x'; 10 + 90 * (r as usize % 3)])))
        .collect();
    dir.put_cells(Epoch(0), cells).unwrap();

    let Grant::Batch(meta) = ctl
        .request_batch(&ConsumerGroupId::new("actor_update", 0), 4, &PackingPolicy::Fifo)
        .unwrap()
    else {
        panic!("rows should be ready");
    };
    let (batch, gets) = dir.fetch(&meta, &meta.columns).unwrap();
    println!("leader fetched rows {:?} with {gets} storage gets", meta.rows.iter().map(|r| r.0).collect::<Vec<_>>());

    let leader = LocalReplica::new("tp0");
    let local = LocalReplica::new("tp1");
    let (remote_a, ha) = ChannelReplica::spawn("tp2");
    let (remote_b, hb) = ChannelReplica::spawn("tp3");
    let members: [&dyn Replica; 4] = [&leader, &local, &remote_a, &remote_b];
    let out = leader_fetch_fanout(&members, &batch).unwrap();
    println!("broadcast {} bytes to each of {} members", out.bytes_per_member, members.len() - 1);
    println!("all members identical: {}", out.batches.iter().all(|b| b == &batch));
    drop(remote_a);
    drop(remote_b);
    println!("threaded members received {} and {} batches", ha.join().unwrap().len(), hb.join().unwrap().len());

    let env = encode_varlen(&batch.cells);
    println!(
        "varlen envelope: {} payload bytes, {} if padded to the longest row",
        env.payload_bytes(),
        env.padded_payload_bytes()
    );
}
