//! The whole stack over TCP on localhost: two storage units, a controller
//! per task and the weight coordinator, each behind its own server. The
//! user-level verbs then load prompts, pull experience and announce new
//! weights through the wire protocol.
//!
//! cargo run --example tcp_stack

use std::sync::Arc;
use std::time::Duration;

use flowqueue::api::Service;
use flowqueue::config::{CoordinatorConfig, RunConfig, TaskEntry, Topology};
use flowqueue::controller::{Controller, PackingPolicy};
use flowqueue::coordinator::TransferMode;
use flowqueue::net::{self, RemoteStorage, ServerHandle};
use flowqueue::storage::StorageUnit;
use flowqueue::types::{col, CellValue, Epoch, WeightVersion};
use flowqueue::wire::DEFAULT_MAX_FRAME;

const G: u64 = 8;

fn start(handler: net::Handler) -> ServerHandle {
    net::serve(net::bind("127.0.0.1:0").unwrap(), DEFAULT_MAX_FRAME, handler).unwrap()
}

fn main() {
    // Bind first so the config can name real ports.
    let storage_listeners: Vec<_> = (0..2).map(|_| net::bind("127.0.0.1:0").unwrap()).collect();
    let storage: Vec<String> = storage_listeners.iter().map(|l| l.local_addr().unwrap().to_string()).collect();
    let task_listeners: Vec<_> = (0..2).map(|_| net::bind("127.0.0.1:0").unwrap()).collect();
    let ep = |i: usize| task_listeners[i].local_addr().unwrap().to_string();
    let cfg = RunConfig {
        log_level: "warn".into(),
        topology: Topology {
            global_batch: G,
            storage: storage.clone(),
            tasks: vec![
                TaskEntry { name: "actor_rollout".into(), inputs: vec![col("prompt")], outputs: vec![col("response")], endpoint: ep(0) },
                TaskEntry { name: "actor_update".into(), inputs: vec![col("prompt"), col("response")], outputs: vec![], endpoint: ep(1) },
            ],
        },
        coordinator: None,
        scenario: None,
    };
    cfg.validate().unwrap();

    let partition = cfg.partition();
    let mut servers: Vec<ServerHandle> = storage_listeners
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let unit = Arc::new(StorageUnit::new(i as u32, Epoch(0), partition.rows_of(i as u32)));
            net::serve(l, DEFAULT_MAX_FRAME, net::storage_handler(unit)).unwrap()
        })
        .collect();
    for (t, l) in cfg.topology.tasks.iter().zip(task_listeners) {
        let ctl = Controller::with_endpoint(t.spec().unwrap(), Epoch(0), G, t.endpoint.clone()).unwrap();
        servers.push(net::serve(l, DEFAULT_MAX_FRAME, net::controller_handler(Arc::new(ctl))).unwrap());
        for (i, s) in storage.iter().enumerate() {
            RemoteStorage::new(i as u32, s.clone()).register(&t.endpoint).unwrap();
        }
    }
    let coord_cfg = CoordinatorConfig {
        endpoint: String::new(),
        mode: TransferMode::Asynchronous,
        instances: 2,
        stagger_k: 0,
        sync_timeout_ms: 5_000,
    };
    let coord_server = start(net::coordinator_handler(Arc::new(coord_cfg.build().unwrap()), Duration::from_secs(5)));
    let cfg = RunConfig {
        coordinator: Some(CoordinatorConfig { endpoint: coord_server.addr().to_string(), ..coord_cfg }),
        ..cfg
    };
    servers.push(coord_server);

    let svc = Service::connect(&cfg).unwrap();
    let prompts = (0..G).map(|i| format!("question {i}").into_bytes()).collect();
    let ack = svc.put_prompts_data(Epoch(0), prompts).unwrap();
    println!("put {} prompt cells in {} storage requests", ack.cells, ack.puts);

    let mut rollout = svc.experience("actor_rollout", 0, 4, PackingPolicy::Fifo).unwrap();
    while let Some(b) = rollout.next_batch().unwrap() {
        let values = b.rows().iter().map(|r| CellValue::new(format!("answer {}", r.0).into_bytes())).collect();
        rollout.write_back(Epoch(0), b.rows(), &col("response"), values).unwrap();
        println!("rollout generated rows {:?}", b.rows().iter().map(|r| r.0).collect::<Vec<_>>());
    }
    while let Some(b) = svc.get_experience_data("actor_update", 4).unwrap() {
        println!("trainer got {} rows, {} payload bytes", b.rows().len(), b.payload_bytes());
    }
    let h = svc.weight_sync_notify(WeightVersion(1)).unwrap();
    println!("coordinator accepted weights v{}", h.version.0);

    for s in servers {
        s.shutdown();
    }
}
