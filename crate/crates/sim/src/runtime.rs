//! Function runtime: read input, compute, emit output to downstream
//! functions.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::http::{HeaderMap, HeaderValue, StatusCode};
use bytes::Bytes;
use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use truffle_core::ingress::read_input;
use truffle_core::{wire, Locator, StorageDescriptor, StorageKind};

use crate::backend;
use crate::platform::{header_str, headers, sleep_model, Deployed, PlatformState};
use crate::record::{Failure, FailurePhase, InvocationTrace, Mode};

/// Deterministic pseudo-random payloads, generated once per size.
#[derive(Debug, Clone, Default)]
pub struct PayloadCache(Arc<Mutex<HashMap<u64, Bytes>>>);

impl PayloadCache {
    pub fn get(&self, bytes: u64) -> Bytes {
        let mut cache = self.0.lock().unwrap();
        cache
            .entry(bytes)
            .or_insert_with(|| generate_payload(bytes))
            .clone()
    }
}

pub fn generate_payload(bytes: u64) -> Bytes {
    let mut rng = rand::rngs::StdRng::seed_from_u64(0x5eed ^ bytes);
    let mut buf = vec![0u8; bytes as usize];
    rng.fill_bytes(&mut buf);
    Bytes::from(buf)
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// What a function invocation asked for, read off the request.
#[derive(Debug, Clone)]
pub(crate) struct Invocation {
    pub trace_id: String,
    pub mode: Mode,
    pub origin: Option<usize>,
    pub parent: Option<u64>,
    pub output_bytes: u64,
    pub want_sha256: bool,
    pub key: Option<String>,
    pub descriptor: Option<StorageDescriptor>,
    pub body: Bytes,
}

impl Invocation {
    pub fn from_headers(h: &HeaderMap, body: Bytes) -> Self {
        let descriptor = header_str(h, wire::STORAGE_KIND)
            .and_then(|k| k.parse::<StorageKind>().ok())
            .map(|kind| StorageDescriptor {
                kind,
                locator: Locator::parse(kind, header_str(h, wire::LOCATOR)),
                endpoint: header_str(h, wire::ENDPOINT).map(str::to_owned),
                credentials_ref: header_str(h, wire::CREDENTIALS_REF).map(str::to_owned),
            });
        Self {
            trace_id: header_str(h, wire::TRACE).unwrap_or_default().to_owned(),
            mode: header_str(h, headers::MODE)
                .and_then(|m| m.parse().ok())
                .unwrap_or(Mode::Baseline),
            origin: header_str(h, headers::ORIGIN).and_then(|o| o.parse().ok()),
            parent: header_str(h, headers::PARENT).and_then(|p| p.parse().ok()),
            output_bytes: header_str(h, headers::SIZE)
                .and_then(|s| s.parse().ok())
                .unwrap_or(0),
            want_sha256: header_str(h, headers::DIGEST) == Some("sha256"),
            key: header_str(h, wire::KEY).map(str::to_owned),
            descriptor,
            body,
        }
    }
}

/// Response body of every function. Contains nothing invocation-specific
/// so identical requests get byte-identical responses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionResponse {
    pub function: String,
    pub input_bytes: u64,
    pub input_crc32: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_sha256: Option<String>,
    pub output_bytes: u64,
    pub downstream: Vec<DownstreamCall>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownstreamCall {
    pub target: String,
    pub status: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<Box<FunctionResponse>>,
}

impl FunctionResponse {
    /// Depth-first visit of this response and every nested one.
    pub fn walk<'a>(&'a self, out: &mut Vec<&'a FunctionResponse>) {
        out.push(self);
        for d in &self.downstream {
            if let Some(r) = &d.response {
                r.walk(out);
            }
        }
    }
}

async fn fetch_input(state: &PlatformState, d: &Deployed, inv: &Invocation) -> Result<Bytes, String> {
    if let Some(key) = &inv.key {
        return read_input(
            &state.http,
            &state.node_addrs[d.node],
            key,
            &inv.trace_id,
            Some(state.input_timeout),
        )
        .await
        .map_err(|e| e.to_string());
    }
    match &inv.descriptor {
        None => Ok(inv.body.clone()),
        Some(desc) => match (&desc.kind, &desc.endpoint, &desc.locator) {
            (StorageKind::Direct, _, _) => Ok(inv.body.clone()),
            (StorageKind::Kvs, Some(ep), Locator::Key { key }) => {
                state.storage.fetch_kvs(ep, key).await.map_err(|e| e.to_string())
            }
            (StorageKind::ObjectStore, Some(ep), Locator::Object { bucket, object_id }) => state
                .storage
                .fetch_object(ep, bucket, object_id, desc.credentials_ref.as_deref())
                .await
                .map_err(|e| e.to_string()),
            _ => Err(format!("unusable input descriptor {desc:?}")),
        },
    }
}

/// Runs one invocation of `d` on its node. Fills the input, compute and
/// failure fields of `trace`.
pub(crate) async fn run_function(
    state: &Arc<PlatformState>,
    d: &Deployed,
    invocation_id: u64,
    inv: &Invocation,
    trace: &mut InvocationTrace,
) -> (StatusCode, Bytes, Option<Failure>) {
    let input = match fetch_input(state, d, inv).await {
        Ok(input) => input,
        Err(message) => {
            let failure = Failure {
                phase: FailurePhase::Input,
                function: Some(d.spec.name.clone()),
                message,
            };
            return (StatusCode::INTERNAL_SERVER_ERROR, Bytes::new(), Some(failure));
        }
    };
    let ready = state.clock.now_ms();
    trace.data_ready = Some(ready);
    trace.input_bytes = input.len() as u64;

    trace.compute_start = Some(state.clock.now_ms());
    sleep_model(d.spec.compute_ms, state.scale).await;
    let output = if input.len() as u64 == inv.output_bytes {
        input.clone()
    } else {
        state.payloads.get(inv.output_bytes)
    };
    trace.compute_end = Some(state.clock.now_ms());

    let mut calls = tokio::task::JoinSet::new();
    for (i, target) in d.spec.downstream.iter().enumerate() {
        let state = state.clone();
        let target = target.clone();
        let output = output.clone();
        let inv = inv.clone();
        let node = d.node;
        calls.spawn(async move {
            let call = call_downstream(&state, node, invocation_id, &inv, &target, output).await;
            (i, call)
        });
    }
    let mut downstream: Vec<(usize, DownstreamCall)> = Vec::new();
    while let Some(joined) = calls.join_next().await {
        match joined {
            Ok(pair) => downstream.push(pair),
            Err(e) => tracing::error!(error = %e, "downstream task panicked"),
        }
    }
    downstream.sort_by_key(|(i, _)| *i);
    let downstream: Vec<DownstreamCall> = downstream.into_iter().map(|(_, c)| c).collect();

    let failed = downstream.iter().find(|c| c.status != 200).map(|c| Failure {
        phase: FailurePhase::Downstream,
        function: Some(c.target.clone()),
        message: format!("{} answered {}", c.target, c.status),
    });
    let response = FunctionResponse {
        function: d.spec.name.clone(),
        input_bytes: input.len() as u64,
        input_crc32: crc32fast::hash(&input),
        input_sha256: inv.want_sha256.then(|| sha256_hex(&input)),
        output_bytes: if d.spec.downstream.is_empty() { 0 } else { output.len() as u64 },
        downstream,
    };
    let body = Bytes::from(serde_json::to_vec(&response).expect("serializable"));
    match failed {
        None => (StatusCode::OK, body, None),
        Some(f) => (StatusCode::BAD_GATEWAY, body, Some(f)),
    }
}

async fn call_downstream(
    state: &PlatformState,
    node: usize,
    invocation_id: u64,
    inv: &Invocation,
    target: &str,
    output: Bytes,
) -> DownstreamCall {
    let failed = |status: u16| DownstreamCall {
        target: target.to_owned(),
        status,
        response: None,
    };
    let Some(binding) = state.functions.get(target).map(|t| t.binding.clone()) else {
        return failed(404);
    };
    let ep = state.backend_endpoint.clone();
    let object = format!("{}-{invocation_id}-{target}", inv.trace_id);
    let descriptor = match binding.kind {
        StorageKind::Direct => StorageDescriptor::direct(),
        StorageKind::Kvs => StorageDescriptor::kvs(ep, object),
        StorageKind::ObjectStore => StorageDescriptor::object_store(
            ep,
            binding.bucket.as_deref().unwrap_or("workflow"),
            object,
            binding.credentials_ref.clone(),
        ),
    };
    let body = if binding.kind == StorageKind::Direct {
        output
    } else {
        let secret = binding
            .credentials_ref
            .as_deref()
            .and_then(|r| state.credentials.get(r))
            .map(String::as_str);
        let stored = backend::store(
            &state.http,
            binding.kind,
            &state.backend_endpoint,
            &descriptor.locator,
            secret,
            output,
        )
        .await;
        if let Err(e) = stored {
            tracing::warn!(target, error = %e, "could not write output to storage");
            return failed(599);
        }
        Bytes::new()
    };

    let mut h = wire::invoke_headers(target, &descriptor, &inv.trace_id);
    let mut set = |name: &str, value: String| {
        if let Ok(v) = HeaderValue::from_str(&value) {
            h.insert(wire::header(name), v);
        }
    };
    set(headers::MODE, inv.mode.to_string());
    set(headers::ORIGIN, node.to_string());
    set(headers::PARENT, invocation_id.to_string());
    set(headers::SIZE, inv.output_bytes.to_string());
    if inv.want_sha256 {
        set(headers::DIGEST, "sha256".into());
    }
    let via = match inv.mode {
        Mode::Truffle => &state.node_addrs[node],
        Mode::Baseline => &state.addr,
    };
    let sent = state
        .http
        .post(format!("http://{via}/invoke"))
        .headers(h)
        .body(body)
        .timeout(state.request_timeout)
        .send()
        .await;
    match sent {
        Ok(resp) => {
            let status = resp.status().as_u16();
            let response = resp
                .bytes()
                .await
                .ok()
                .and_then(|b| serde_json::from_slice::<FunctionResponse>(&b).ok())
                .map(Box::new);
            DownstreamCall {
                target: target.to_owned(),
                status,
                response,
            }
        }
        Err(e) => {
            tracing::warn!(target, error = %e, "downstream call failed");
            failed(if e.is_timeout() { 504 } else { 502 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payloads_are_deterministic() {
        let cache = PayloadCache::default();
        let a = cache.get(4096);
        assert_eq!(a.len(), 4096);
        assert_eq!(a, generate_payload(4096));
        assert_ne!(generate_payload(4096), generate_payload(4097).slice(..4096));
        assert!(cache.get(0).is_empty());
    }

    #[test]
    fn invocation_from_headers() {
        let d = StorageDescriptor::kvs("127.0.0.1:9", "k1");
        let mut h = wire::invoke_headers("f", &d, "trace-1");
        h.insert(wire::header(headers::MODE), HeaderValue::from_static("truffle"));
        h.insert(wire::header(headers::ORIGIN), HeaderValue::from_static("1"));
        h.insert(wire::header(headers::SIZE), HeaderValue::from_static("1024"));
        let inv = Invocation::from_headers(&h, Bytes::new());
        assert_eq!(inv.mode, Mode::Truffle);
        assert_eq!(inv.origin, Some(1));
        assert_eq!(inv.output_bytes, 1024);
        assert_eq!(inv.descriptor, Some(d));
        assert_eq!(inv.trace_id, "trace-1");
        assert!(inv.key.is_none());
    }
}
