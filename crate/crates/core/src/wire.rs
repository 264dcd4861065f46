//! Header names and request envelope shared by the sidecar, the platform and
//! function runtimes.

use axum::http::{HeaderMap, HeaderName, HeaderValue};
use bytes::Bytes;
use rand::RngCore;
use thiserror::Error;

use crate::buffer::DEFAULT_BUFFER_NAME;
use crate::storage::{FetchError, Locator, StorageDescriptor, StorageError, StorageKind};

pub const TARGET: &str = "X-Truffle-Target";
pub const STORAGE_KIND: &str = "X-Truffle-Storage-Kind";
pub const LOCATOR: &str = "X-Truffle-Locator";
pub const ENDPOINT: &str = "X-Truffle-Endpoint";
pub const CREDENTIALS_REF: &str = "X-Truffle-Credentials-Ref";
pub const BUFFER: &str = "X-Truffle-Buffer";
/// Reference key substituted for the payload on cold invocations.
pub const KEY: &str = "X-Truffle-Key";
pub const TRACE: &str = "X-Truffle-Trace";
/// Error code on buffer reads and transfer acks.
pub const ERROR: &str = "X-Truffle-Error";

/// Headers describing where the input lives; stripped from cold forwards.
pub const STORAGE_HEADERS: [&str; 5] = [STORAGE_KIND, LOCATOR, ENDPOINT, CREDENTIALS_REF, BUFFER];

pub fn header(name: &str) -> HeaderName {
    HeaderName::from_bytes(name.as_bytes()).expect("valid header name")
}

fn get<'a>(headers: &'a HeaderMap, name: &'static str) -> Result<Option<&'a str>, EnvelopeError> {
    match headers.get(header(name)) {
        None => Ok(None),
        Some(v) => v
            .to_str()
            .map(Some)
            .map_err(|_| EnvelopeError::BadHeader(name)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvelopeError {
    #[error("missing header {0}")]
    Missing(&'static str),
    #[error("header {0} is not valid text")]
    BadHeader(&'static str),
    #[error(transparent)]
    Unsupported(#[from] StorageError),
    #[error("unknown buffer {0:?}; only \"default\" exists")]
    UnknownBuffer(String),
    #[error("request body is only allowed for direct input")]
    BodyNotAllowed,
    #[error(transparent)]
    Invalid(#[from] FetchError),
}

/// A parsed `/invoke` request.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestEnvelope {
    pub target_function: String,
    pub storage: StorageDescriptor,
    pub inline_payload: Option<Bytes>,
    /// Assigned by the ingress when the target is cold.
    pub reference_key: Option<String>,
    pub trace_id: String,
}

impl RequestEnvelope {
    pub fn parse(headers: &HeaderMap, body: Bytes) -> Result<Self, EnvelopeError> {
        let target_function = get(headers, TARGET)?
            .filter(|t| !t.is_empty())
            .ok_or(EnvelopeError::Missing(TARGET))?
            .to_owned();
        let kind: StorageKind = get(headers, STORAGE_KIND)?
            .ok_or(EnvelopeError::Missing(STORAGE_KIND))?
            .parse()?;
        if let Some(name) = get(headers, BUFFER)? {
            if name != DEFAULT_BUFFER_NAME {
                return Err(EnvelopeError::UnknownBuffer(name.to_owned()));
            }
        }
        let storage = StorageDescriptor {
            kind,
            locator: Locator::parse(kind, get(headers, LOCATOR)?),
            endpoint: get(headers, ENDPOINT)?.map(str::to_owned),
            credentials_ref: get(headers, CREDENTIALS_REF)?.map(str::to_owned),
        };
        storage.validate()?;
        let inline_payload = match kind {
            StorageKind::Direct => Some(body),
            _ if !body.is_empty() => return Err(EnvelopeError::BodyNotAllowed),
            _ => None,
        };
        let trace_id = get(headers, TRACE)?
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .unwrap_or_else(new_reference_key);
        Ok(Self {
            target_function,
            storage,
            inline_payload,
            reference_key: get(headers, KEY)?.map(str::to_owned),
            trace_id,
        })
    }
}

/// Headers for an `/invoke` request carrying `descriptor`.
pub fn invoke_headers(target: &str, descriptor: &StorageDescriptor, trace_id: &str) -> HeaderMap {
    let mut h = HeaderMap::new();
    let mut set = |name: &str, value: &str| {
        if let Ok(v) = HeaderValue::from_str(value) {
            h.insert(header(name), v);
        }
    };
    set(TARGET, target);
    set(STORAGE_KIND, descriptor.kind.as_str());
    if let Some(loc) = descriptor.locator.encode() {
        set(LOCATOR, &loc);
    }
    if let Some(ep) = &descriptor.endpoint {
        set(ENDPOINT, ep);
    }
    if let Some(c) = &descriptor.credentials_ref {
        set(CREDENTIALS_REF, c);
    }
    set(TRACE, trace_id);
    h
}

/// 128-bit random identifier in lowercase hex.
pub fn new_reference_key() -> String {
    let mut raw = [0u8; 16];
    rand::rng().fill_bytes(&mut raw);
    hex::encode(raw)
}
