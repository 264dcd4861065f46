//! In-memory KVS and object store speaking the routes the sidecar's storage
//! client expects, with injected latency.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use bytes::Bytes;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use truffle_core::storage::codes;
use truffle_core::{pool, StorageKind};

use crate::profile::{scaled, BackendLatencyProfile, Operation};

#[derive(Debug, Default)]
struct Bucket {
    secret: Option<String>,
    objects: HashMap<String, Bytes>,
}

#[derive(Debug, Default)]
struct Data {
    kvs: HashMap<String, Bytes>,
    buckets: HashMap<String, Bucket>,
    requests: u64,
}

#[derive(Debug)]
struct BackendState {
    kvs: BackendLatencyProfile,
    object_store: BackendLatencyProfile,
    scale: f64,
    data: Mutex<Data>,
}

impl BackendState {
    fn profile(&self, kind: StorageKind) -> BackendLatencyProfile {
        match kind {
            StorageKind::ObjectStore => self.object_store,
            _ => self.kvs,
        }
    }

    /// Sleeps for the scaled cost of the request.
    async fn serve(&self, kind: StorageKind, op: Operation, bytes: u64) {
        self.data.lock().unwrap().requests += 1;
        let delay = scaled(self.profile(kind).latency_ms(op, bytes), self.scale);
        if !delay.is_zero() {
            tokio::time::sleep(delay).await;
        }
    }
}

/// Running storage service. Cheap to clone; the server stops when the last
/// clone is dropped or on [`StorageBackend::shutdown`].
#[derive(Debug, Clone)]
pub struct StorageBackend {
    state: Arc<BackendState>,
    addr: SocketAddr,
    server: Arc<Server>,
}

#[derive(Debug)]
struct Server {
    shutdown: Mutex<Option<oneshot::Sender<()>>>,
    task: JoinHandle<()>,
}

impl Drop for Server {
    fn drop(&mut self) {
        self.task.abort();
    }
}

impl StorageBackend {
    pub async fn start(
        kvs: BackendLatencyProfile,
        object_store: BackendLatencyProfile,
        scale: f64,
    ) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let state = Arc::new(BackendState {
            kvs,
            object_store,
            scale,
            data: Mutex::default(),
        });
        let app = Router::new()
            .route("/kvs/{key}", get(kvs_get).put(kvs_put))
            .route("/os/{bucket}/{object}", get(object_get).put(object_put))
            .layer(axum::extract::DefaultBodyLimit::disable())
            .with_state(state.clone());
        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
        Ok(Self {
            state,
            addr,
            server: Arc::new(Server {
                shutdown: Mutex::new(Some(tx)),
                task,
            }),
        })
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    /// Requires `secret` as a bearer token for reads from `bucket`.
    pub fn protect_bucket(&self, bucket: &str, secret: &str) {
        let mut data = self.state.data.lock().unwrap();
        data.buckets.entry(bucket.to_owned()).or_default().secret = Some(secret.to_owned());
    }

    pub fn create_bucket(&self, bucket: &str) {
        self.state.data.lock().unwrap().buckets.entry(bucket.to_owned()).or_default();
    }

    /// Stores without paying latency; for seeding inputs.
    pub fn seed_kvs(&self, key: &str, value: Bytes) {
        self.state.data.lock().unwrap().kvs.insert(key.to_owned(), value);
    }

    pub fn seed_object(&self, bucket: &str, object_id: &str, value: Bytes) {
        let mut data = self.state.data.lock().unwrap();
        data.buckets
            .entry(bucket.to_owned())
            .or_default()
            .objects
            .insert(object_id.to_owned(), value);
    }

    pub fn request_count(&self) -> u64 {
        self.state.data.lock().unwrap().requests
    }

    /// Drops every value whose key or object id starts with `prefix`.
    pub fn purge(&self, prefix: &str) -> usize {
        let mut data = self.state.data.lock().unwrap();
        let before = data.kvs.len();
        data.kvs.retain(|k, _| !k.starts_with(prefix));
        let mut removed = before - data.kvs.len();
        for b in data.buckets.values_mut() {
            let before = b.objects.len();
            b.objects.retain(|k, _| !k.starts_with(prefix));
            removed += before - b.objects.len();
        }
        removed
    }

    /// Drops all stored values, keeping buckets and their secrets.
    pub fn clear(&self) {
        let mut data = self.state.data.lock().unwrap();
        data.kvs.clear();
        for b in data.buckets.values_mut() {
            b.objects.clear();
        }
    }

    pub fn shutdown(&self) {
        if let Some(tx) = self.server.shutdown.lock().unwrap().take() {
            let _ = tx.send(());
        }
    }
}

fn not_found(code: &str) -> Response {
    (StatusCode::NOT_FOUND, code.to_owned()).into_response()
}

async fn kvs_get(State(state): State<Arc<BackendState>>, Path(key): Path<String>) -> Response {
    let value = state.data.lock().unwrap().kvs.get(&key).cloned();
    let size = value.as_ref().map_or(0, |v| v.len() as u64);
    state.serve(StorageKind::Kvs, Operation::Get, size).await;
    match value {
        Some(v) => (StatusCode::OK, v).into_response(),
        None => not_found(codes::NO_SUCH_KEY),
    }
}

async fn kvs_put(
    State(state): State<Arc<BackendState>>,
    Path(key): Path<String>,
    headers: HeaderMap,
    body: Body,
) -> Response {
    let Ok(body) = pool::collect_body(body, pool::content_length(&headers)).await else {
        return StatusCode::BAD_REQUEST.into_response();
    };
    let size = body.len() as u64;
    state.data.lock().unwrap().kvs.insert(key, body);
    state.serve(StorageKind::Kvs, Operation::Put, size).await;
    StatusCode::OK.into_response()
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(axum::http::header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
}

async fn object_get(
    State(state): State<Arc<BackendState>>,
    Path((bucket, object)): Path<(String, String)>,
    headers: HeaderMap,
) -> Response {
    let lookup = {
        let data = state.data.lock().unwrap();
        match data.buckets.get(&bucket) {
            None => Err(not_found(codes::NO_SUCH_BUCKET)),
            Some(b) if b.secret.is_some() && b.secret.as_deref() != bearer(&headers) => {
                Err((StatusCode::FORBIDDEN, codes::ACCESS_DENIED.to_owned()).into_response())
            }
            Some(b) => b
                .objects
                .get(&object)
                .cloned()
                .ok_or_else(|| not_found(codes::NO_SUCH_OBJECT)),
        }
    };
    let size = lookup.as_ref().map_or(0, |v| v.len() as u64);
    state.serve(StorageKind::ObjectStore, Operation::Get, size).await;
    match lookup {
        Ok(v) => (StatusCode::OK, v).into_response(),
        Err(resp) => resp,
    }
}

async fn object_put(
    State(state): State<Arc<BackendState>>,
    Path((bucket, object)): Path<(String, String)>,
    headers: HeaderMap,
    body: Body,
) -> Response {
    let Ok(body) = pool::collect_body(body, pool::content_length(&headers)).await else {
        return StatusCode::BAD_REQUEST.into_response();
    };
    let size = body.len() as u64;
    let denied = {
        let mut data = state.data.lock().unwrap();
        let b = data.buckets.entry(bucket).or_default();
        if b.secret.is_some() && b.secret.as_deref() != bearer(&headers) {
            true
        } else {
            b.objects.insert(object, body);
            false
        }
    };
    state.serve(StorageKind::ObjectStore, Operation::Put, size).await;
    if denied {
        (StatusCode::FORBIDDEN, codes::ACCESS_DENIED.to_owned()).into_response()
    } else {
        StatusCode::OK.into_response()
    }
}

/// Writes `value` through the wire protocol, paying the backend's write
/// latency.
pub async fn store(
    http: &reqwest::Client,
    kind: StorageKind,
    endpoint: &str,
    locator: &truffle_core::Locator,
    secret: Option<&str>,
    value: Bytes,
) -> Result<(), String> {
    use truffle_core::storage::{kvs_url, object_url};
    use truffle_core::Locator;
    let url = match (kind, locator) {
        (StorageKind::Kvs, Locator::Key { key }) => kvs_url(endpoint, key),
        (StorageKind::ObjectStore, Locator::Object { bucket, object_id }) => {
            object_url(endpoint, bucket, object_id)
        }
        _ => return Err(format!("cannot store {kind} at {locator:?}")),
    }
    .map_err(|e| e.to_string())?;
    let mut req = http.put(url).body(value);
    if let Some(secret) = secret {
        req = req.bearer_auth(secret);
    }
    let resp = req.send().await.map_err(|e| e.to_string())?;
    if resp.status().is_success() {
        Ok(())
    } else {
        Err(format!("{}: {}", resp.status(), resp.text().await.unwrap_or_default()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;
    use truffle_core::storage::StorageClient;
    use truffle_core::{Credentials, FetchError, Locator};

    fn client(creds: Credentials) -> StorageClient {
        StorageClient::new(reqwest::Client::builder().no_proxy().build().unwrap(), creds)
    }

    #[tokio::test]
    async fn kvs_round_trip_and_missing() {
        let b = StorageBackend::start(
            BackendLatencyProfile::new(0.0, 0.0),
            BackendLatencyProfile::new(0.0, 0.0),
            1.0,
        )
        .await
        .unwrap();
        let http = reqwest::Client::builder().no_proxy().build().unwrap();
        let loc = Locator::Key { key: "k".into() };
        store(&http, StorageKind::Kvs, &b.endpoint(), &loc, None, Bytes::from_static(b"v"))
            .await
            .unwrap();
        let c = client(Credentials::new());
        assert_eq!(c.fetch_kvs(&b.endpoint(), "k").await.unwrap(), &b"v"[..]);
        assert_eq!(
            c.fetch_kvs(&b.endpoint(), "nope").await,
            Err(FetchError::NoSuchKey("nope".into()))
        );
    }

    #[tokio::test]
    async fn object_errors_are_distinct() {
        let b = StorageBackend::start(
            BackendLatencyProfile::new(0.0, 0.0),
            BackendLatencyProfile::new(0.0, 0.0),
            1.0,
        )
        .await
        .unwrap();
        b.seed_object("b", "o1", Bytes::from_static(b"payload"));
        b.seed_object("secret", "o", Bytes::from_static(b"x"));
        b.protect_bucket("secret", "s3cr3t");
        let ep = b.endpoint();
        let c = client(Credentials::new().with("good", "s3cr3t").with("bad", "nope"));

        assert_eq!(c.fetch_object(&ep, "b", "o1", None).await.unwrap(), &b"payload"[..]);
        assert!(matches!(
            c.fetch_object(&ep, "b", "o2", None).await,
            Err(FetchError::NoSuchObject { .. })
        ));
        assert!(matches!(
            c.fetch_object(&ep, "none", "o", None).await,
            Err(FetchError::NoSuchBucket(_))
        ));
        assert!(matches!(
            c.fetch_object(&ep, "secret", "o", Some("bad")).await,
            Err(FetchError::AuthFailure(_))
        ));
        assert!(matches!(
            c.fetch_object(&ep, "secret", "o", None).await,
            Err(FetchError::AuthFailure(_))
        ));
        assert_eq!(c.fetch_object(&ep, "secret", "o", Some("good")).await.unwrap(), &b"x"[..]);
    }

    #[tokio::test]
    async fn get_pays_size_dependent_latency() {
        let b = StorageBackend::start(
            BackendLatencyProfile::new(10.0, 40.0),
            BackendLatencyProfile::new(0.0, 0.0),
            1.0,
        )
        .await
        .unwrap();
        b.seed_kvs("big", Bytes::from(vec![7u8; 1 << 20]));
        b.seed_kvs("empty", Bytes::new());
        let c = client(Credentials::new());

        let t = Instant::now();
        assert_eq!(c.fetch_kvs(&b.endpoint(), "big").await.unwrap().len(), 1 << 20);
        let big = t.elapsed().as_secs_f64() * 1000.0;
        assert!((50.0..150.0).contains(&big), "{big}");

        let t = Instant::now();
        c.fetch_kvs(&b.endpoint(), "empty").await.unwrap();
        let empty = t.elapsed().as_secs_f64() * 1000.0;
        assert!((10.0..60.0).contains(&empty), "{empty}");
        assert_eq!(b.request_count(), 2);
    }
}
