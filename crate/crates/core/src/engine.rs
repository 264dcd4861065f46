//! Data engine: picks the adapter for an input's storage kind, fetches the
//! payload and deposits it in the buffer.

use std::sync::Arc;

use bytes::Bytes;

use crate::buffer::Buffer;
use crate::storage::{AdapterRegistry, FetchError, StorageAdapter, StorageDescriptor, StorageError};

#[derive(Debug, Clone)]
pub struct DataEngine {
    registry: Arc<AdapterRegistry>,
}

impl DataEngine {
    pub fn new(registry: AdapterRegistry) -> Self {
        Self {
            registry: Arc::new(registry),
        }
    }

    pub fn registry(&self) -> &AdapterRegistry {
        &self.registry
    }

    pub fn resolve_adapter(
        &self,
        descriptor: &StorageDescriptor,
    ) -> Result<Arc<dyn StorageAdapter>, StorageError> {
        self.registry.resolve_adapter(descriptor)
    }

    /// Fetches the payload without touching any buffer.
    pub async fn fetch(
        &self,
        descriptor: &StorageDescriptor,
        inline: Option<Bytes>,
    ) -> Result<Bytes, FetchError> {
        descriptor.validate()?;
        let adapter = self.registry.resolve_adapter(descriptor)?;
        adapter.fetch(descriptor, inline).await
    }

    /// Fetches the input and stores it under `key`. On any failure the key
    /// is poisoned so a reader blocked on it fails instead of timing out.
    pub async fn prefetch(
        &self,
        descriptor: &StorageDescriptor,
        inline: Option<Bytes>,
        key: &str,
        buffer: &Buffer,
    ) -> Result<u64, FetchError> {
        match self.fetch(descriptor, inline).await {
            Ok(payload) => {
                let size = payload.len() as u64;
                match buffer.put(key, payload) {
                    Ok(()) => Ok(size),
                    Err(e) => {
                        let _ = buffer.mark_failed(key, e.to_string());
                        Err(FetchError::Backend {
                            status: 507,
                            message: e.to_string(),
                        })
                    }
                }
            }
            Err(e) => {
                tracing::debug!(key, error = %e, "prefetch failed");
                let _ = buffer.mark_failed(key, e.to_string());
                Err(e)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::{BufferError, EntryState};
    use crate::storage::{Credentials, StorageClient};
    use std::time::Duration;

    fn engine() -> DataEngine {
        DataEngine::new(AdapterRegistry::with_defaults(StorageClient::new(
            reqwest::Client::new(),
            Credentials::new(),
        )))
    }

    #[tokio::test]
    async fn direct_empty_payload() {
        let buffer = Buffer::default();
        buffer.announce("k").unwrap();
        let n = engine()
            .prefetch(&StorageDescriptor::direct(), Some(Bytes::new()), "k", &buffer)
            .await
            .unwrap();
        assert_eq!(n, 0);
        assert_eq!(buffer.status("k"), Some(EntryState::Ready));
        assert!(buffer.take("k", Duration::ZERO).await.unwrap().is_empty());
    }

    #[tokio::test]
    async fn missing_object_id_poisons_key() {
        let buffer = Buffer::default();
        buffer.announce("k").unwrap();
        let d = StorageDescriptor::object_store("127.0.0.1:1", "bucket", "", None);
        let err = engine().prefetch(&d, None, "k", &buffer).await.unwrap_err();
        assert!(matches!(err, FetchError::InvalidDescriptor(_)));
        assert!(matches!(
            buffer.take("k", Duration::from_secs(1)).await,
            Err(BufferError::FetchFailed { .. })
        ));
    }

    #[tokio::test]
    async fn over_capacity_poisons_key() {
        let buffer = Buffer::new(4);
        buffer.announce("k").unwrap();
        let err = engine()
            .prefetch(&StorageDescriptor::direct(), Some(Bytes::from_static(b"too big")), "k", &buffer)
            .await
            .unwrap_err();
        assert!(matches!(err, FetchError::Backend { status: 507, .. }));
        assert_eq!(buffer.status("k"), Some(EntryState::Failed));
    }
}
