//! Storage descriptors and the adapters that fetch input data from them.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use async_trait::async_trait;
use bytes::Bytes;
use reqwest::{StatusCode, Url};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageKind {
    Direct,
    ObjectStore,
    Kvs,
}

impl StorageKind {
    pub const ALL: [StorageKind; 3] = [StorageKind::Direct, StorageKind::ObjectStore, StorageKind::Kvs];

    pub fn as_str(self) -> &'static str {
        match self {
            StorageKind::Direct => "direct",
            StorageKind::ObjectStore => "object_store",
            StorageKind::Kvs => "kvs",
        }
    }
}

impl fmt::Display for StorageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StorageKind {
    type Err = StorageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(StorageKind::Direct),
            "object_store" => Ok(StorageKind::ObjectStore),
            "kvs" => Ok(StorageKind::Kvs),
            other => Err(StorageError::Unsupported(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StorageError {
    #[error("unsupported storage kind {0:?}")]
    Unsupported(String),
    #[error("an adapter for {0} is already registered")]
    DuplicateAdapter(StorageKind),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FetchError {
    #[error("no such bucket {0}")]
    NoSuchBucket(String),
    #[error("no such object {bucket}/{object_id}")]
    NoSuchObject { bucket: String, object_id: String },
    #[error("no such key {0}")]
    NoSuchKey(String),
    #[error("access denied: {0}")]
    AuthFailure(String),
    #[error("credentials {0:?} are not configured on this node")]
    UnknownCredentials(String),
    #[error("direct input requires an inline payload")]
    MissingInlinePayload,
    #[error("invalid storage descriptor: {0}")]
    InvalidDescriptor(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned {status}: {message}")]
    Backend { status: u16, message: String },
}

/// Where the input lives within its storage service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Locator {
    None,
    Object { bucket: String, object_id: String },
    Key { key: String },
}

impl Locator {
    /// Decodes the kind-specific wire form: `bucket/object` for object
    /// stores, the bare key for KVS. Validation is left to
    /// [`StorageDescriptor::validate`].
    pub fn parse(kind: StorageKind, raw: Option<&str>) -> Locator {
        match (kind, raw) {
            (StorageKind::Direct, _) | (_, None) => Locator::None,
            (StorageKind::ObjectStore, Some(raw)) => {
                let (bucket, object_id) = raw.split_once('/').unwrap_or((raw, ""));
                Locator::Object {
                    bucket: bucket.to_owned(),
                    object_id: object_id.to_owned(),
                }
            }
            (StorageKind::Kvs, Some(raw)) => Locator::Key { key: raw.to_owned() },
        }
    }

    pub fn encode(&self) -> Option<String> {
        match self {
            Locator::None => None,
            Locator::Object { bucket, object_id } => Some(format!("{bucket}/{object_id}")),
            Locator::Key { key } => Some(key.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageDescriptor {
    pub kind: StorageKind,
    pub locator: Locator,
    pub endpoint: Option<String>,
    pub credentials_ref: Option<String>,
}

impl StorageDescriptor {
    pub fn direct() -> Self {
        Self {
            kind: StorageKind::Direct,
            locator: Locator::None,
            endpoint: None,
            credentials_ref: None,
        }
    }

    pub fn object_store(
        endpoint: impl Into<String>,
        bucket: impl Into<String>,
        object_id: impl Into<String>,
        credentials_ref: Option<String>,
    ) -> Self {
        Self {
            kind: StorageKind::ObjectStore,
            locator: Locator::Object {
                bucket: bucket.into(),
                object_id: object_id.into(),
            },
            endpoint: Some(endpoint.into()),
            credentials_ref,
        }
    }

    pub fn kvs(endpoint: impl Into<String>, key: impl Into<String>) -> Self {
        Self {
            kind: StorageKind::Kvs,
            locator: Locator::Key { key: key.into() },
            endpoint: Some(endpoint.into()),
            credentials_ref: None,
        }
    }

    pub fn validate(&self) -> Result<(), FetchError> {
        let invalid = |msg: &str| Err(FetchError::InvalidDescriptor(msg.to_owned()));
        match (&self.kind, &self.locator) {
            (StorageKind::Direct, Locator::None) if self.endpoint.is_none() => Ok(()),
            (StorageKind::Direct, _) => invalid("direct input takes no locator or endpoint"),
            (_, _) if self.endpoint.as_deref().is_none_or(str::is_empty) => {
                invalid("storage endpoint missing")
            }
            (StorageKind::ObjectStore, Locator::Object { bucket, object_id }) => {
                if bucket.is_empty() || object_id.is_empty() {
                    invalid("object store locator needs bucket and object id")
                } else {
                    Ok(())
                }
            }
            (StorageKind::Kvs, Locator::Key { key }) if !key.is_empty() => Ok(()),
            (StorageKind::Kvs, Locator::Key { .. }) => invalid("kvs key is empty"),
            (kind, _) => Err(FetchError::InvalidDescriptor(format!(
                "locator does not match kind {kind}"
            ))),
        }
    }
}

/// Named secrets held in sidecar-local configuration. Requests only carry
/// the name.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Credentials(HashMap<String, String>);

impl Credentials {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, secret: impl Into<String>) -> Self {
        self.0.insert(name.into(), secret.into());
        self
    }

    pub fn secret(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }
}

pub fn kvs_url(endpoint: &str, key: &str) -> Result<Url, FetchError> {
    route_url(endpoint, &["kvs", key])
}

pub fn object_url(endpoint: &str, bucket: &str, object_id: &str) -> Result<Url, FetchError> {
    route_url(endpoint, &["os", bucket, object_id])
}

fn route_url(endpoint: &str, segments: &[&str]) -> Result<Url, FetchError> {
    let base = if endpoint.contains("://") {
        endpoint.to_owned()
    } else {
        format!("http://{endpoint}")
    };
    let mut url = Url::parse(&base).map_err(|e| FetchError::Transport(e.to_string()))?;
    url.path_segments_mut()
        .map_err(|_| FetchError::Transport(format!("endpoint {endpoint} cannot be a base")))?
        .clear()
        .extend(segments);
    Ok(url)
}

/// Error codes storage backends put in the body of 404/403 responses.
pub mod codes {
    pub const NO_SUCH_BUCKET: &str = "NoSuchBucket";
    pub const NO_SUCH_OBJECT: &str = "NoSuchObject";
    pub const NO_SUCH_KEY: &str = "NoSuchKey";
    pub const ACCESS_DENIED: &str = "AccessDenied";
}

/// HTTP client for the KVS and object store routes.
#[derive(Debug, Clone)]
pub struct StorageClient {
    http: reqwest::Client,
    credentials: Credentials,
}

impl StorageClient {
    pub fn new(http: reqwest::Client, credentials: Credentials) -> Self {
        Self { http, credentials }
    }

    pub async fn fetch_object(
        &self,
        endpoint: &str,
        bucket: &str,
        object_id: &str,
        credentials_ref: Option<&str>,
    ) -> Result<Bytes, FetchError> {
        let mut req = self.http.get(object_url(endpoint, bucket, object_id)?);
        if let Some(name) = credentials_ref {
            let secret = self
                .credentials
                .secret(name)
                .ok_or_else(|| FetchError::UnknownCredentials(name.to_owned()))?;
            req = req.bearer_auth(secret);
        }
        let resp = req.send().await.map_err(transport)?;
        match resp.status() {
            StatusCode::OK => crate::pool::collect_response(resp).await.map_err(transport),
            status => {
                let code = resp.text().await.unwrap_or_default();
                Err(match (status, code.as_str()) {
                    (StatusCode::NOT_FOUND, codes::NO_SUCH_BUCKET) => {
                        FetchError::NoSuchBucket(bucket.to_owned())
                    }
                    (StatusCode::NOT_FOUND, _) => FetchError::NoSuchObject {
                        bucket: bucket.to_owned(),
                        object_id: object_id.to_owned(),
                    },
                    (StatusCode::FORBIDDEN | StatusCode::UNAUTHORIZED, _) => {
                        FetchError::AuthFailure(format!("{bucket}/{object_id}"))
                    }
                    _ => FetchError::Backend {
                        status: status.as_u16(),
                        message: code,
                    },
                })
            }
        }
    }

    pub async fn fetch_kvs(&self, endpoint: &str, key: &str) -> Result<Bytes, FetchError> {
        let resp = self
            .http
            .get(kvs_url(endpoint, key)?)
            .send()
            .await
            .map_err(transport)?;
        match resp.status() {
            StatusCode::OK => crate::pool::collect_response(resp).await.map_err(transport),
            StatusCode::NOT_FOUND => Err(FetchError::NoSuchKey(key.to_owned())),
            status => Err(FetchError::Backend {
                status: status.as_u16(),
                message: resp.text().await.unwrap_or_default(),
            }),
        }
    }
}

fn transport(e: reqwest::Error) -> FetchError {
    FetchError::Transport(e.to_string())
}

#[async_trait]
pub trait StorageAdapter: Send + Sync {
    fn kind(&self) -> StorageKind;

    /// Fetches the whole payload described by `descriptor`. `inline` is the
    /// request body, used only by direct passing.
    async fn fetch(
        &self,
        descriptor: &StorageDescriptor,
        inline: Option<Bytes>,
    ) -> Result<Bytes, FetchError>;
}

/// Input carried in the request body itself.
#[derive(Debug, Default)]
pub struct DirectAdapter;

#[async_trait]
impl StorageAdapter for DirectAdapter {
    fn kind(&self) -> StorageKind {
        StorageKind::Direct
    }

    async fn fetch(&self, _: &StorageDescriptor, inline: Option<Bytes>) -> Result<Bytes, FetchError> {
        inline.ok_or(FetchError::MissingInlinePayload)
    }
}

#[derive(Debug)]
pub struct ObjectStoreAdapter {
    client: StorageClient,
}

impl ObjectStoreAdapter {
    pub fn new(client: StorageClient) -> Self {
        Self { client }
    }
}

#[async_trait]
impl StorageAdapter for ObjectStoreAdapter {
    fn kind(&self) -> StorageKind {
        StorageKind::ObjectStore
    }

    async fn fetch(&self, d: &StorageDescriptor, _: Option<Bytes>) -> Result<Bytes, FetchError> {
        d.validate()?;
        let (Some(endpoint), Locator::Object { bucket, object_id }) = (&d.endpoint, &d.locator)
        else {
            unreachable!("validated descriptor")
        };
        self.client
            .fetch_object(endpoint, bucket, object_id, d.credentials_ref.as_deref())
            .await
    }
}

#[derive(Debug)]
pub struct KvsAdapter {
    client: StorageClient,
}

impl KvsAdapter {
    pub fn new(client: StorageClient) -> Self {
        Self { client }
    }
}

#[async_trait]
impl StorageAdapter for KvsAdapter {
    fn kind(&self) -> StorageKind {
        StorageKind::Kvs
    }

    async fn fetch(&self, d: &StorageDescriptor, _: Option<Bytes>) -> Result<Bytes, FetchError> {
        d.validate()?;
        let (Some(endpoint), Locator::Key { key }) = (&d.endpoint, &d.locator) else {
            unreachable!("validated descriptor")
        };
        self.client.fetch_kvs(endpoint, key).await
    }
}

/// At most one adapter per storage kind.
#[derive(Clone, Default)]
pub struct AdapterRegistry {
    adapters: HashMap<StorageKind, Arc<dyn StorageAdapter>>,
}

impl fmt::Debug for AdapterRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut kinds: Vec<_> = self.adapters.keys().collect();
        kinds.sort();
        f.debug_struct("AdapterRegistry").field("kinds", &kinds).finish()
    }
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with direct, object store and KVS adapters over `client`.
    pub fn with_defaults(client: StorageClient) -> Self {
        let mut registry = Self::new();
        registry.register(Arc::new(DirectAdapter)).expect("empty registry");
        registry
            .register(Arc::new(ObjectStoreAdapter::new(client.clone())))
            .expect("empty registry");
        registry
            .register(Arc::new(KvsAdapter::new(client)))
            .expect("empty registry");
        registry
    }

    pub fn register(&mut self, adapter: Arc<dyn StorageAdapter>) -> Result<(), StorageError> {
        let kind = adapter.kind();
        if self.adapters.contains_key(&kind) {
            return Err(StorageError::DuplicateAdapter(kind));
        }
        self.adapters.insert(kind, adapter);
        Ok(())
    }

    pub fn resolve_adapter(
        &self,
        descriptor: &StorageDescriptor,
    ) -> Result<Arc<dyn StorageAdapter>, StorageError> {
        self.adapters
            .get(&descriptor.kind)
            .cloned()
            .ok_or_else(|| StorageError::Unsupported(descriptor.kind.as_str().to_owned()))
    }

    /// Resolves a kind given in wire form.
    pub fn resolve_kind(&self, raw_kind: &str) -> Result<Arc<dyn StorageAdapter>, StorageError> {
        let kind: StorageKind = raw_kind.parse()?;
        self.adapters
            .get(&kind)
            .cloned()
            .ok_or_else(|| StorageError::Unsupported(raw_kind.to_owned()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> AdapterRegistry {
        AdapterRegistry::with_defaults(StorageClient::new(reqwest::Client::new(), Credentials::new()))
    }

    #[test]
    fn resolves_each_kind() {
        let r = registry();
        assert_eq!(
            r.resolve_adapter(&StorageDescriptor::kvs("h:1", "k")).unwrap().kind(),
            StorageKind::Kvs
        );
        assert_eq!(
            r.resolve_adapter(&StorageDescriptor::object_store("h:1", "b", "o", None))
                .unwrap()
                .kind(),
            StorageKind::ObjectStore
        );
        assert!(matches!(
            r.resolve_kind("nfs"),
            Err(StorageError::Unsupported(k)) if k == "nfs"
        ));
    }

    #[test]
    fn empty_registry_is_unsupported() {
        let r = AdapterRegistry::new();
        assert!(matches!(
            r.resolve_adapter(&StorageDescriptor::direct()),
            Err(StorageError::Unsupported(_))
        ));
    }

    #[test]
    fn duplicate_adapter_rejected() {
        let mut r = registry();
        assert_eq!(
            r.register(Arc::new(DirectAdapter)).unwrap_err(),
            StorageError::DuplicateAdapter(StorageKind::Direct)
        );
    }

    #[test]
    fn descriptor_validation() {
        assert!(StorageDescriptor::direct().validate().is_ok());
        assert!(StorageDescriptor::kvs("h:1", "k").validate().is_ok());
        assert!(StorageDescriptor::kvs("h:1", "").validate().is_err());
        assert!(StorageDescriptor::object_store("h:1", "b", "", None).validate().is_err());
        assert!(StorageDescriptor::object_store("", "b", "o", None).validate().is_err());
        let mut d = StorageDescriptor::direct();
        d.endpoint = Some("h:1".into());
        assert!(d.validate().is_err());
    }

    #[test]
    fn locator_wire_form() {
        let loc = Locator::parse(StorageKind::ObjectStore, Some("frames/2024/a.bin"));
        assert_eq!(
            loc,
            Locator::Object {
                bucket: "frames".into(),
                object_id: "2024/a.bin".into()
            }
        );
        assert_eq!(loc.encode().as_deref(), Some("frames/2024/a.bin"));
        assert_eq!(
            Locator::parse(StorageKind::ObjectStore, Some("onlybucket")),
            Locator::Object {
                bucket: "onlybucket".into(),
                object_id: String::new()
            }
        );
        assert_eq!(Locator::parse(StorageKind::Direct, Some("x")), Locator::None);
    }

    #[test]
    fn urls_escape_segments() {
        let url = object_url("127.0.0.1:9000", "b", "dir/obj").unwrap();
        assert_eq!(url.as_str(), "http://127.0.0.1:9000/os/b/dir%2Fobj");
        let url = kvs_url("127.0.0.1:9000", "a b").unwrap();
        assert_eq!(url.as_str(), "http://127.0.0.1:9000/kvs/a%20b");
    }

    #[tokio::test]
    async fn direct_adapter_needs_inline() {
        let d = DirectAdapter;
        assert_eq!(
            d.fetch(&StorageDescriptor::direct(), None).await,
            Err(FetchError::MissingInlinePayload)
        );
        assert_eq!(
            d.fetch(&StorageDescriptor::direct(), Some(Bytes::new())).await,
            Ok(Bytes::new())
        );
    }
}
