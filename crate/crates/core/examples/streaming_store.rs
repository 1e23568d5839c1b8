//! In-process streaming store: a producer loads prompts, a rollout consumer
//! writes responses as soon as prompts land, and two training groups pull
//! micro-batches as soon as responses land. Every row is trained on once.
//!
//! cargo run --example streaming_store

use std::sync::Arc;
use std::thread;

use flowqueue::client::{IteratorConfig, StorageDirectory, StreamingBatchIterator};
use flowqueue::controller::Controller;
use flowqueue::storage::{PartitionMap, StorageUnit};
use flowqueue::transport::{ControlApi, StorageApi};
use flowqueue::types::{col, Cell, CellValue, Epoch, GlobalIndex, TaskSpec};

const G: u64 = 16;

fn main() {
    let partition = PartitionMap::new(G, 2).unwrap();
    let units = StorageUnit::cluster(&partition, Epoch(0));
    let rollout = TaskSpec::new("actor_rollout", vec![col("prompt")], vec![col("response")]).unwrap();
    let train = TaskSpec::new("actor_update", vec![col("prompt"), col("response")], vec![col("loss")]).unwrap();
    let rollout_ctl = Arc::new(Controller::new(rollout.clone(), Epoch(0), G).unwrap());
    let train_ctl = Arc::new(Controller::new(train.clone(), Epoch(0), G).unwrap());
    for u in &units {
        u.register_controller(rollout_ctl.clone()).unwrap();
        u.register_controller(train_ctl.clone()).unwrap();
    }
    let dir = StorageDirectory::new(
        partition,
        units.iter().map(|u| u.clone() as Arc<dyn StorageApi>).collect(),
    )
    .unwrap();

    let producer = {
        let dir = dir.clone();
        thread::spawn(move || {
            for i in 0..G {
                let cell = Cell::new(i, col("prompt"), CellValue::new(format!("prompt {i}").into_bytes()));
                dir.put_cells(Epoch(0), vec![cell]).unwrap();
                thread::sleep(std::time::Duration::from_millis(2));
            }
        })
    };

    let generator = {
        let it = StreamingBatchIterator::new(
            IteratorConfig::new(rollout, 0, 2),
            rollout_ctl.clone() as Arc<dyn ControlApi>,
            dir.clone(),
        );
        thread::spawn(move || {
            let mut it = it;
            while let Some(batch) = it.next_batch().unwrap() {
                let values = batch
                    .rows()
                    .iter()
                    .map(|r| CellValue::new(format!("answer {}", r.0).into_bytes()))
                    .collect();
                it.write_back(Epoch(0), batch.rows(), &col("response"), values).unwrap();
            }
        })
    };

    let trainers: Vec<_> = (0..2)
        .map(|g| {
            let mut it = StreamingBatchIterator::new(
                IteratorConfig::new(train.clone(), g, 2),
                train_ctl.clone() as Arc<dyn ControlApi>,
                dir.clone(),
            );
            thread::spawn(move || {
                let mut seen: Vec<GlobalIndex> = Vec::new();
                while let Some(batch) = it.next_batch().unwrap() {
                    let losses = batch.rows().iter().map(|_| CellValue::new(vec![0u8; 4])).collect();
                    it.write_back(Epoch(0), batch.rows(), &col("loss"), losses).unwrap();
                    seen.extend_from_slice(batch.rows());
                }
                (g, seen, it.stats())
            })
        })
        .collect();

    producer.join().unwrap();
    generator.join().unwrap();
    let mut all = Vec::new();
    for t in trainers {
        let (g, seen, stats) = t.join().unwrap();
        println!(
            "group {g}: {} rows {:?} ({} polls, {} not ready)",
            seen.len(),
            seen.iter().map(|r| r.0).collect::<Vec<_>>(),
            stats.polls,
            stats.not_ready
        );
        all.extend(seen);
    }
    all.sort();
    all.dedup();
    println!("distinct rows trained: {} of {G}", all.len());
    println!("train controller exhausted: {}", train_ctl.is_exhausted());
}
