//! Randomized interleavings of buffer readers and writers, watcher waiters
//! and events, and storage kind dispatch.

use std::sync::OnceLock;
use std::time::Duration;

use bytes::Bytes;
use proptest::prelude::*;
use tokio::runtime::Runtime;
use truffle_core::storage::StorageClient;
use truffle_core::{
    wire, AdapterRegistry, Buffer, BufferError, Credentials, EventKind, SchedulingEvent, StorageDescriptor,
    StorageKind, Watcher,
};

fn rt() -> &'static Runtime {
    static RT: OnceLock<Runtime> = OnceLock::new();
    RT.get_or_init(|| {
        tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .build()
            .unwrap()
    })
}

async fn yield_n(n: u32) {
    for _ in 0..n {
        tokio::task::yield_now().await;
    }
}

#[derive(Debug, Clone)]
enum Ending {
    Put(Vec<u8>),
    Fail(String),
}

fn ending() -> impl Strategy<Value = Ending> {
    prop_oneof![
        4 => prop::collection::vec(any::<u8>(), 0..8192).prop_map(Ending::Put),
        1 => "[a-z]{1,12}".prop_map(Ending::Fail),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    /// Any number of readers racing one writer: exactly one reader gets the
    /// whole payload, the rest learn it is gone, nobody times out.
    #[test]
    fn buffer_read_once_and_blocking(
        end in ending(),
        take_yields in prop::collection::vec(0u32..8, 1..6),
        put_yield in 0u32..8,
        announce in any::<bool>(),
    ) {
        let outcomes = rt().block_on(async {
            let buffer = Buffer::new(1 << 20);
            let key = wire::new_reference_key();
            if announce {
                buffer.announce(&key).unwrap();
            }
            let readers: Vec<_> = take_yields
                .iter()
                .map(|&y| {
                    let (buffer, key) = (buffer.clone(), key.clone());
                    tokio::spawn(async move {
                        yield_n(y).await;
                        buffer.take(&key, Duration::from_secs(5)).await
                    })
                })
                .collect();
            let writer = {
                let (buffer, key, end) = (buffer.clone(), key.clone(), end.clone());
                tokio::spawn(async move {
                    yield_n(put_yield).await;
                    match end {
                        Ending::Put(p) => buffer.put(&key, Bytes::from(p)),
                        Ending::Fail(r) => buffer.mark_failed(&key, r),
                    }
                })
            };
            writer.await.unwrap().unwrap();
            let mut out = Vec::new();
            for r in readers {
                out.push(r.await.unwrap());
            }
            assert_eq!(buffer.resident_bytes(), 0);
            out
        });

        let first: Vec<_> = outcomes
            .iter()
            .filter(|o| !matches!(o, Err(BufferError::NotFound(_))))
            .collect();
        prop_assert_eq!(first.len(), 1, "{:?}", outcomes);
        match (&end, first[0]) {
            (Ending::Put(p), Ok(got)) => prop_assert!(got[..] == p[..], "torn or foreign payload"),
            (Ending::Fail(r), Err(BufferError::FetchFailed { reason, .. })) => prop_assert_eq!(reason, r),
            (_, other) => prop_assert!(false, "unexpected outcome {:?}", other),
        }
    }

    /// Waiters registered before, between or after lifecycle events all
    /// learn a host; none is left waiting.
    #[test]
    fn watcher_never_loses_a_wakeup(
        waiter_yields in prop::collection::vec(0u32..8, 1..6),
        event_yields in prop::collection::vec(0u32..8, 5),
        restart in any::<bool>(),
    ) {
        let results = rt().block_on(async {
            let watcher = Watcher::new();
            let waiters: Vec<_> = waiter_yields
                .iter()
                .map(|&y| {
                    let w = watcher.clone();
                    tokio::spawn(async move {
                        yield_n(y).await;
                        w.wait_for_host("f", Duration::from_secs(5)).await
                    })
                })
                .collect();
            let mut events = vec![("h1", EventKind::Scheduled), ("", EventKind::Running)];
            if restart {
                events.extend([
                    ("", EventKind::Terminated),
                    ("h2", EventKind::Scheduled),
                    ("", EventKind::Running),
                ]);
            }
            for ((host, kind), y) in events.into_iter().zip(event_yields) {
                yield_n(y).await;
                watcher.ingest_event(SchedulingEvent::new("f", host, kind, 0.0)).unwrap();
            }
            let mut out = Vec::new();
            for w in waiters {
                out.push(w.await.unwrap());
            }
            (out, watcher.live_host("f"))
        });
        let (hosts, live) = results;
        for h in hosts {
            let h = h.map_err(|e| TestCaseError::fail(format!("lost wakeup: {e}")))?;
            prop_assert!(h == "h1" || h == "h2");
        }
        prop_assert_eq!(live.as_deref(), Some(if restart { "h2" } else { "h1" }));
    }

    /// Every wire kind string either resolves to the adapter of that kind
    /// or is rejected as unsupported.
    #[test]
    fn dispatch_is_total(raw in prop_oneof![
        Just("direct".to_owned()),
        Just("kvs".to_owned()),
        Just("object_store".to_owned()),
        Just("s3".to_owned()),
        Just("Direct".to_owned()),
        ".{0,16}",
    ]) {
        let registry = registry();
        match (registry.resolve_kind(&raw), raw.parse::<StorageKind>()) {
            (Ok(a), Ok(kind)) => prop_assert_eq!(a.kind(), kind),
            (Err(_), Err(_)) => {}
            (a, k) => prop_assert!(false, "{:?}: {:?} vs {:?}", raw, a.map(|a| a.kind()), k.ok()),
        }
    }
}

fn registry() -> AdapterRegistry {
    let _guard = rt().enter();
    AdapterRegistry::with_defaults(StorageClient::new(reqwest::Client::new(), Credentials::new()))
}

#[test]
fn every_kind_has_an_adapter() {
    let registry = registry();
    for kind in StorageKind::ALL {
        let d = StorageDescriptor {
            kind,
            ..StorageDescriptor::direct()
        };
        assert_eq!(registry.resolve_adapter(&d).unwrap().kind(), kind);
        assert!(AdapterRegistry::new().resolve_adapter(&d).is_err());
    }
}
