//! Recycled allocations for large bodies.
//!
//! Multi-megabyte payloads are received into buffers taken from a pool and
//! handed out as [`Bytes`] that return their allocation to the pool when the
//! last reference is dropped. Freshly mapped memory has to be faulted in
//! page by page, which costs more than the copy itself at these sizes.

use std::sync::{Arc, Mutex, OnceLock};

use bytes::{BufMut, Bytes, BytesMut};
use http_body_util::BodyExt;

/// Bodies smaller than this use plain allocations.
pub const POOL_MIN_BYTES: usize = 1 << 20;
pub const DEFAULT_RETAINED_BYTES: usize = 512 << 20;

#[derive(Debug)]
struct Inner {
    free: Vec<Vec<u8>>,
    retained: usize,
    max_retained: usize,
}

#[derive(Debug, Clone)]
pub struct BodyPool {
    inner: Arc<Mutex<Inner>>,
}

impl BodyPool {
    pub fn new(max_retained_bytes: usize) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                free: Vec::new(),
                retained: 0,
                max_retained: max_retained_bytes,
            })),
        }
    }

    /// Process-wide pool.
    pub fn global() -> &'static BodyPool {
        static POOL: OnceLock<BodyPool> = OnceLock::new();
        POOL.get_or_init(|| BodyPool::new(DEFAULT_RETAINED_BYTES))
    }

    /// An empty vector with room for at least `len` bytes, reusing the
    /// smallest idle allocation that fits.
    pub fn acquire(&self, len: usize) -> Vec<u8> {
        let mut inner = self.inner.lock().unwrap();
        let best = inner
            .free
            .iter()
            .enumerate()
            .filter(|(_, v)| v.capacity() >= len)
            .min_by_key(|(_, v)| v.capacity())
            .map(|(i, _)| i);
        match best {
            Some(i) => {
                let mut v = inner.free.swap_remove(i);
                inner.retained -= v.capacity();
                v.clear();
                v
            }
            None => {
                drop(inner);
                Vec::with_capacity(len)
            }
        }
    }

    /// Freezes `buf` into [`Bytes`] that give the allocation back on drop.
    pub fn freeze(&self, buf: Vec<u8>) -> Bytes {
        Bytes::from_owner(Recycled {
            buf,
            pool: self.inner.clone(),
        })
    }

    pub fn retained_bytes(&self) -> usize {
        self.inner.lock().unwrap().retained
    }

    pub fn idle_buffers(&self) -> usize {
        self.inner.lock().unwrap().free.len()
    }
}

struct Recycled {
    buf: Vec<u8>,
    pool: Arc<Mutex<Inner>>,
}

impl AsRef<[u8]> for Recycled {
    fn as_ref(&self) -> &[u8] {
        &self.buf
    }
}

impl Drop for Recycled {
    fn drop(&mut self) {
        let buf = std::mem::take(&mut self.buf);
        let mut inner = self.pool.lock().unwrap();
        if inner.retained + buf.capacity() <= inner.max_retained {
            inner.retained += buf.capacity();
            inner.free.push(buf);
        }
    }
}

/// Accumulates body chunks, into a pooled buffer when the final size is
/// known and large.
#[derive(Debug)]
pub struct BodyCollector {
    sink: Sink,
}

#[derive(Debug)]
enum Sink {
    Pooled(Vec<u8>),
    Plain(BytesMut),
}

impl BodyCollector {
    pub fn new(size_hint: Option<u64>) -> Self {
        let sink = match size_hint.map(|n| n as usize) {
            Some(n) if n >= POOL_MIN_BYTES => Sink::Pooled(BodyPool::global().acquire(n)),
            Some(n) => Sink::Plain(BytesMut::with_capacity(n)),
            None => Sink::Plain(BytesMut::new()),
        };
        Self { sink }
    }

    pub fn push(&mut self, chunk: &[u8]) {
        match &mut self.sink {
            Sink::Pooled(v) => v.extend_from_slice(chunk),
            Sink::Plain(b) => b.put_slice(chunk),
        }
    }

    pub fn finish(self) -> Bytes {
        match self.sink {
            Sink::Pooled(v) => BodyPool::global().freeze(v),
            Sink::Plain(b) => b.freeze(),
        }
    }
}

/// Reads a whole server-side request body.
pub async fn collect_body(body: axum::body::Body, size_hint: Option<u64>) -> Result<Bytes, axum::Error> {
    let mut body = body;
    let mut out = BodyCollector::new(size_hint);
    while let Some(frame) = body.frame().await {
        if let Ok(data) = frame?.into_data() {
            out.push(&data);
        }
    }
    Ok(out.finish())
}

/// Reads a whole client-side response body.
pub async fn collect_response(resp: reqwest::Response) -> Result<Bytes, reqwest::Error> {
    let mut resp = resp;
    let mut out = BodyCollector::new(resp.content_length());
    while let Some(chunk) = resp.chunk().await? {
        out.push(&chunk);
    }
    Ok(out.finish())
}

/// Declared `Content-Length` of a request, if any.
pub fn content_length(headers: &axum::http::HeaderMap) -> Option<u64> {
    headers
        .get(axum::http::header::CONTENT_LENGTH)?
        .to_str()
        .ok()?
        .parse()
        .ok()
}
