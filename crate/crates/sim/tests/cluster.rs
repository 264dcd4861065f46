use std::time::Duration;

use truffle_core::{EventKind, StorageKind, TraceKind};
use truffle_sim::config::{ClusterConfig, FunctionSpec, Topology, WorkflowSpec};
use truffle_sim::profile::MIB;
use truffle_sim::record::FailurePhase;
use truffle_sim::runtime::{generate_payload, sha256_hex};
use truffle_sim::{chain, deploy, video, ConfigError, DeployError, Mode, RunOptions};

fn fast(mut c: ClusterConfig, scale: f64) -> ClusterConfig {
    c.scale_factor = scale;
    c
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn chain_pins_functions_to_distinct_nodes() {
    let c = deploy(chain(StorageKind::Direct)).await.unwrap();
    assert_eq!(c.sidecars().len(), 2);
    assert_ne!(c.node_of("producer"), c.node_of("consumer"));
    // Only the warm producer is live after deploy.
    assert!(c.sidecar(0).watcher().is_running("producer"));
    assert!(!c.sidecar(1).watcher().is_running("consumer"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn video_deploys_on_three_nodes() {
    let c = deploy(video(StorageKind::Direct)).await.unwrap();
    assert_eq!(c.sidecars().len(), 3);
    assert_eq!(c.node_of("decoder-1"), c.node_of("decoder-2"));
    assert_ne!(c.node_of("decoder-1"), c.node_of("recognition"));
    assert_ne!(c.node_of("streaming"), c.node_of("recognition"));
}

#[tokio::test]
async fn unsatisfiable_placement_is_a_config_error() {
    let mut config = video(StorageKind::Direct);
    config.nodes = 2;
    assert!(matches!(
        deploy(config).await,
        Err(DeployError::Config(ConfigError::Placement { .. }))
    ));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn scheduler_tick_follows_alpha_and_cold_start() {
    let scale = 0.05;
    let c = deploy(fast(chain(StorageKind::Direct), scale)).await.unwrap();
    let start = c.clock().now_ms();
    let events = c.platform().scheduler_tick("consumer").await;
    assert_eq!(events.len(), 2);
    assert_eq!(events[0].kind, EventKind::Scheduled);
    assert_eq!(events[0].host_address, c.sidecar(1).addr());
    assert_eq!(events[1].kind, EventKind::Running);
    let scheduled = (events[0].at_ms - start) / scale;
    let running = (events[1].at_ms - start) / scale;
    assert!((scheduled - 20.0).abs() < 60.0, "scheduled at {scheduled}");
    assert!((running - 2395.0).abs() < 100.0, "running at {running}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn added_delay_extends_cold_start() {
    let scale = 0.01;
    let mut c = deploy(fast(chain(StorageKind::Direct), scale)).await.unwrap();
    c.set_added_delay(10_000.0);
    let start = c.clock().now_ms();
    let events = c.platform().scheduler_tick("consumer").await;
    let running = (events[1].at_ms - start) / scale;
    assert!((running - (2375.0 + 10_020.0)).abs() < 300.0, "running at {running}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn zero_alpha_schedules_immediately() {
    let mut config = chain(StorageKind::Direct);
    config.alpha_ms = 0.0;
    let c = deploy(config).await.unwrap();
    let start = c.clock().now_ms();
    let tick = tokio::spawn({
        let events = c.platform().orchestrator().clone();
        async move {
            loop {
                if let Some(e) = events.events().iter().find(|e| e.function_name == "consumer") {
                    return e.clone();
                }
                tokio::time::sleep(Duration::from_millis(1)).await;
            }
        }
    });
    let ticking = c.platform().scheduler_tick("consumer");
    let (scheduled, _) = tokio::join!(tick, async {
        tokio::time::timeout(Duration::from_millis(50), ticking).await.ok()
    });
    let scheduled = scheduled.unwrap();
    assert_eq!(scheduled.kind, EventKind::Scheduled);
    assert!(scheduled.at_ms - start < 5.0);
}

/// Analytic prediction of the chain's consumer stage at `bytes`.
fn predicted(config: &ClusterConfig, bytes: u64, overlapped: bool) -> f64 {
    let consumer = config.workflow.function("consumer").unwrap();
    let kind = config.workflow.storage_kind;
    let delta = config.backends.for_kind(kind).transfer_ms(bytes);
    let beta = consumer.cold_start_ms + consumer.added_delay_ms;
    let put = if kind == StorageKind::Direct {
        0.0
    } else {
        config.backends.for_kind(kind).base_ms
    };
    let io = if overlapped { beta.max(delta) } else { beta + delta };
    put + config.alpha_ms + io + consumer.compute_ms
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn small_runs_agree_with_the_model() {
    for kind in StorageKind::ALL {
        let config = fast(chain(kind), 0.25);
        let c = deploy(config.clone()).await.unwrap();
        for mode in Mode::ALL {
            let opts = RunOptions::new(4.0, mode);
            let r = c.invoke_workflow(&opts).await;
            assert!(!r.failed(), "{kind} {mode}: {:?}", r.failure);
            let want = predicted(&config, opts.size_bytes(), mode == Mode::Truffle);
            let err = (r.end_to_end_ms - want).abs();
            assert!(
                err <= 0.1 * want + 50.0,
                "{kind} {mode}: measured {:.1}, model {want:.1}",
                r.end_to_end_ms
            );
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn truffle_overlaps_transfer_with_cold_start() {
    let c = deploy(fast(chain(StorageKind::Direct), 0.2)).await.unwrap();
    let base = c.invoke_workflow(&RunOptions::new(16.0, Mode::Baseline)).await;
    let truffle = c.invoke_workflow(&RunOptions::new(16.0, Mode::Truffle)).await;
    assert!(!base.failed() && !truffle.failed());
    // δ(16 MiB) = 171 ms: the baseline pays it after the start, truffle
    // hides it inside the cold start.
    assert!(base.io_critical_path_ms > 150.0, "{}", base.io_critical_path_ms);
    assert!(truffle.io_critical_path_ms < 60.0, "{}", truffle.io_critical_path_ms);
    assert!(truffle.end_to_end_ms < base.end_to_end_ms - 100.0);

    let consumer = truffle.function("consumer").unwrap();
    assert!(consumer.cold);
    assert_eq!(consumer.input_bytes, 16 << 20);
    let transfer_start = truffle
        .events
        .iter()
        .find(|e| e.kind == TraceKind::TransferStart)
        .expect("cold start pass ran")
        .at_ms;
    assert!(transfer_start <= consumer.cold_start_end_ms);
    assert_eq!(truffle.transfers.len(), 1);
    assert!(truffle.transfers[0].delivered());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn phases_are_monotone_and_span_end_to_end() {
    let c = deploy(fast(video(StorageKind::Kvs), 0.1)).await.unwrap();
    for mode in Mode::ALL {
        let r = c.invoke_workflow(&RunOptions::new(1.0, mode)).await;
        assert!(!r.failed(), "{mode}: {:?}", r.failure);
        assert_eq!(r.functions.len(), 5, "entry, two decoders, two recognition calls");
        for f in &r.functions {
            let seq = [
                f.invoked_ms,
                f.scheduled_ms,
                f.cold_start_end_ms,
                f.data_ready_ms,
                f.compute_start_ms,
                f.compute_end_ms,
                f.response_ms,
            ];
            assert!(seq.windows(2).all(|w| w[0] <= w[1]), "{f:?}");
        }
        let first = r.functions.iter().map(|f| f.invoked_ms).fold(f64::INFINITY, f64::min);
        let last = r.functions.iter().map(|f| f.response_ms).fold(0.0, f64::max);
        // Client-side hops add a little on each end.
        assert!(r.end_to_end_ms >= last - first);
        assert!(r.end_to_end_ms - (last - first) < 30.0, "{} vs {}", r.end_to_end_ms, last - first);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn fan_out_runs_independent_passes() {
    let c = deploy(fast(video(StorageKind::Direct), 0.1)).await.unwrap();
    let r = c.invoke_workflow(&RunOptions::new(1.0, Mode::Truffle)).await;
    assert!(!r.failed(), "{:?}", r.failure);
    let to_decoders: Vec<_> = r
        .transfers
        .iter()
        .filter(|t| t.target_function.starts_with("decoder"))
        .collect();
    assert_eq!(to_decoders.len(), 2);
    assert_ne!(to_decoders[0].key, to_decoders[1].key);
    assert!(to_decoders.iter().all(|t| t.delivered()));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn zero_size_input_gives_no_advantage() {
    let c = deploy(fast(chain(StorageKind::Direct), 0.2)).await.unwrap();
    let base = c.invoke_workflow(&RunOptions::new(0.0, Mode::Baseline)).await;
    let truffle = c.invoke_workflow(&RunOptions::new(0.0, Mode::Truffle)).await;
    // The link's fixed cost is the only transfer left.
    assert!((base.end_to_end_ms - truffle.end_to_end_ms).abs() < 60.0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn compute_follows_input() {
    let c = deploy(fast(chain(StorageKind::Direct), 0.5)).await.unwrap();
    let r = c.invoke_workflow(&RunOptions::new(1.0, Mode::Truffle)).await;
    let f = r.function("consumer").unwrap();
    let compute = f.compute_end_ms - f.data_ready_ms;
    assert!((15.0..30.0).contains(&compute), "{compute}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn payload_reaches_the_function_intact() {
    for kind in StorageKind::ALL {
        let c = deploy(fast(chain(kind), 0.05)).await.unwrap();
        for size_mb in [0.0, 1.0 / 1024.0, 1.0] {
            for mode in Mode::ALL {
                let mut opts = RunOptions::new(size_mb, mode);
                opts.digest = true;
                let r = c.invoke_workflow(&opts).await;
                assert!(!r.failed(), "{kind} {mode} {size_mb}: {:?}", r.failure);
                let want = sha256_hex(&generate_payload((size_mb * MIB) as u64));
                let response = r.response.as_ref().unwrap();
                let consumer = response.downstream[0].response.as_ref().unwrap();
                assert_eq!(consumer.input_sha256.as_deref(), Some(want.as_str()));
            }
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn input_timeout_fails_the_record() {
    let mut config = fast(chain(StorageKind::Kvs), 0.2);
    config.workflow.functions[1].cold_start_ms = 0.0;
    config.timeouts.input_ms = 1;
    let c = deploy(config).await.unwrap();
    let r = c.invoke_workflow(&RunOptions::new(8.0, Mode::Truffle)).await;
    let failure = r.failure.expect("consumer could not read its input in time");
    assert_eq!(failure.phase, FailurePhase::Input);
    assert_eq!(failure.function.as_deref(), Some("consumer"));
    assert_ne!(r.status, 200);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn scheduling_timeout_fails_the_record() {
    let mut config = fast(chain(StorageKind::Direct), 1.0);
    config.timeouts.scheduling_ms = 50;
    let c = deploy(config).await.unwrap();
    let r = c.invoke_workflow(&RunOptions::new(0.0, Mode::Baseline)).await;
    assert_eq!(r.failure.map(|f| f.phase), Some(FailurePhase::Scheduling));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn protected_bucket_needs_credentials() {
    let workflow = WorkflowSpec {
        name: "secure".into(),
        topology: Topology::Chain,
        storage_kind: StorageKind::ObjectStore,
        functions: vec![
            FunctionSpec::new("a").warm().calls(&["b"]),
            FunctionSpec {
                input: Some(truffle_sim::config::InputBinding {
                    kind: StorageKind::ObjectStore,
                    bucket: Some("private".into()),
                    credentials_ref: Some("team".into()),
                }),
                ..FunctionSpec::new("b").cold_start(50.0)
            },
        ],
    };
    let mut config = ClusterConfig::new(workflow, 2);
    config.scale_factor = 0.1;
    config.credentials.insert("team".into(), "hunter2".into());
    let c = deploy(config).await.unwrap();
    for mode in Mode::ALL {
        let r = c.invoke_workflow(&RunOptions::new(1.0, mode)).await;
        assert!(!r.failed(), "{mode}: {:?}", r.failure);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn end_to_end_grows_with_size_and_delay() {
    let mut c = deploy(fast(chain(StorageKind::Kvs), 0.1)).await.unwrap();
    for mode in Mode::ALL {
        let mut last = 0.0;
        for size in [0.0, 16.0, 48.0] {
            let r = c.invoke_workflow(&RunOptions::new(size, mode)).await;
            assert!(r.end_to_end_ms + 30.0 >= last, "{mode} size {size}");
            last = r.end_to_end_ms;
        }
    }
    for mode in Mode::ALL {
        let mut last = 0.0;
        for delay in [0.0, 1000.0, 2000.0] {
            c.set_added_delay(delay);
            let r = c.invoke_workflow(&RunOptions::new(4.0, mode)).await;
            assert!(r.end_to_end_ms + 30.0 >= last, "{mode} delay {delay}");
            last = r.end_to_end_ms;
        }
    }
}
