//! The parameter-machine service: a concurrent key-value store of
//! fixed-width factor vectors with batched get/put, lazy deterministic
//! initialization, and a TCP front end speaking the wire protocol.

use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use dashmap::DashMap;
use log::{debug, warn};
use thiserror::Error;

use crate::model::{init_vector, ModelLayout};
use crate::protocol::{
    self, error_code, CounterSnapshot, ProtocolError, Request, Response,
};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("failed to bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Configuration of one parameter server.
#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: String,
    pub layout: ModelLayout,
    pub init_seed: u64,
    pub init_stddev: f32,
}

/// Monotone service counters. `gets`/`puts` count individual keys, not
/// batches.
#[derive(Debug, Default)]
pub struct ServerCounters {
    pub gets: AtomicU64,
    pub puts: AtomicU64,
    pub lazy_inits: AtomicU64,
    pub bytes_in: AtomicU64,
    pub bytes_out: AtomicU64,
}

impl ServerCounters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            gets: self.gets.load(Ordering::Relaxed),
            puts: self.puts.load(Ordering::Relaxed),
            lazy_inits: self.lazy_inits.load(Ordering::Relaxed),
            bytes_in: self.bytes_in.load(Ordering::Relaxed),
            bytes_out: self.bytes_out.load(Ordering::Relaxed),
        }
    }
}

/// The store behind the service. Vectors are replaced whole on put and
/// cloned out whole on get, so concurrent access never observes a torn
/// vector; the map is sharded, so there is no global lock on the hot path.
///
/// A key that has never been written is initialized on first read from a
/// generator seeded by (init_seed, key): every server sharing a seed hands
/// out the same initial vector for a key, with no coordination.
pub struct VectorStore {
    vectors: DashMap<u64, Vec<f32>>,
    layout: ModelLayout,
    init_seed: u64,
    init_stddev: f32,
    counters: ServerCounters,
}

impl VectorStore {
    pub fn new(layout: ModelLayout, init_seed: u64, init_stddev: f32) -> Self {
        VectorStore {
            vectors: DashMap::new(),
            layout,
            init_seed,
            init_stddev,
            counters: ServerCounters::default(),
        }
    }

    pub fn width(&self) -> usize {
        self.layout.width()
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn counters(&self) -> &ServerCounters {
        &self.counters
    }

    pub fn num_vectors(&self) -> usize {
        self.vectors.len()
    }

    /// Returns the stored vector, lazily initializing it first if the key
    /// has never been seen.
    pub fn get_or_init(&self, key: u64) -> Vec<f32> {
        self.counters.gets.fetch_add(1, Ordering::Relaxed);
        let entry = self.vectors.entry(key).or_insert_with(|| {
            self.counters.lazy_inits.fetch_add(1, Ordering::Relaxed);
            let mut vector = vec![0.0f32; self.layout.width()];
            init_vector(
                &mut vector,
                self.init_seed,
                key,
                self.init_stddev,
                &self.layout,
            );
            vector
        });
        entry.clone()
    }

    /// Replaces the stored vector as a whole (last writer wins).
    pub fn put(&self, key: u64, vector: Vec<f32>) {
        debug_assert_eq!(vector.len(), self.layout.width());
        self.counters.puts.fetch_add(1, Ordering::Relaxed);
        self.vectors.insert(key, vector);
    }

    fn handle(&self, request: Request) -> Response {
        match request {
            Request::GetBatch { keys } => Response::GetReply {
                entries: keys
                    .into_iter()
                    .map(|key| (key, self.get_or_init(key)))
                    .collect(),
            },
            Request::PutBatch { entries } => {
                let acked = entries.len() as u32;
                for (key, vector) in entries {
                    self.put(key, vector);
                }
                Response::PutReply { acked }
            }
            Request::Stats => Response::StatsReply {
                counters: self.counters.snapshot(),
            },
        }
    }
}

/// Live connections, so shutdown can sever them. Handlers deregister
/// themselves on exit; the registry does not grow with connection churn.
#[derive(Default)]
struct ConnectionRegistry {
    next_id: u64,
    streams: HashMap<u64, TcpStream>,
}

impl ConnectionRegistry {
    fn register(registry: &Mutex<Self>, stream: &TcpStream) -> Option<u64> {
        let clone = stream.try_clone().ok()?;
        let mut inner = registry.lock().unwrap();
        let id = inner.next_id;
        inner.next_id += 1;
        inner.streams.insert(id, clone);
        Some(id)
    }

    fn deregister(registry: &Mutex<Self>, id: Option<u64>) {
        if let Some(id) = id {
            registry.lock().unwrap().streams.remove(&id);
        }
    }

    fn sever_all(registry: &Mutex<Self>) {
        for (_, stream) in registry.lock().unwrap().streams.drain() {
            let _ = stream.shutdown(std::net::Shutdown::Both);
        }
    }
}

/// A running parameter server. Dropping the handle shuts it down.
pub struct ServerHandle {
    store: Arc<VectorStore>,
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
    connections: Arc<Mutex<ConnectionRegistry>>,
}

/// Binds the configured address and serves batched get/put until shutdown.
pub fn serve(config: &ServerConfig) -> Result<ServerHandle, ServerError> {
    let store = Arc::new(VectorStore::new(
        config.layout,
        config.init_seed,
        config.init_stddev,
    ));
    serve_with_store(store, &config.bind)
}

/// Serves an existing store; lets tests and in-process runs share one.
pub fn serve_with_store(store: Arc<VectorStore>, bind: &str) -> Result<ServerHandle, ServerError> {
    let listener = TcpListener::bind(bind).map_err(|source| ServerError::Bind {
        addr: bind.to_string(),
        source,
    })?;
    let addr = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let connections: Arc<Mutex<ConnectionRegistry>> = Arc::default();

    let accept_store = Arc::clone(&store);
    let accept_shutdown = Arc::clone(&shutdown);
    let accept_connections = Arc::clone(&connections);
    let accept_thread = std::thread::spawn(move || {
        for stream in listener.incoming() {
            if accept_shutdown.load(Ordering::SeqCst) {
                break;
            }
            match stream {
                Ok(stream) => {
                    let id = ConnectionRegistry::register(&accept_connections, &stream);
                    let store = Arc::clone(&accept_store);
                    let registry = Arc::clone(&accept_connections);
                    std::thread::spawn(move || {
                        serve_connection(stream, store);
                        ConnectionRegistry::deregister(&registry, id);
                    });
                }
                Err(e) => {
                    warn!("accept failed: {e}");
                    break;
                }
            }
        }
    });

    Ok(ServerHandle {
        store,
        addr,
        shutdown,
        accept_thread: Some(accept_thread),
        connections,
    })
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn store(&self) -> &Arc<VectorStore> {
        &self.store
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.store.counters.snapshot()
    }

    /// Connections currently being served.
    pub fn live_connections(&self) -> usize {
        self.connections.lock().unwrap().streams.len()
    }

    /// Stops accepting, severs live connections, and joins the accept loop.
    pub fn shutdown(&mut self) {
        if self.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        // wake the blocking accept with a throwaway connection
        let _ = TcpStream::connect(self.addr);
        ConnectionRegistry::sever_all(&self.connections);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(mut stream: TcpStream, store: Arc<VectorStore>) {
    let max_payload = protocol::max_payload_for_width(store.width());
    loop {
        match protocol::read_frame(&mut stream, max_payload) {
            Ok((opcode, payload)) => {
                store
                    .counters
                    .bytes_in
                    .fetch_add(5 + payload.len() as u64, Ordering::Relaxed);
                let response = match protocol::decode_request(opcode, &payload, store.width()) {
                    Ok(request) => store.handle(request),
                    Err(ProtocolError::Malformed { code, detail }) => {
                        debug!("malformed request: {detail}");
                        Response::Error { code, detail }
                    }
                    Err(other) => Response::Error {
                        code: error_code::MALFORMED,
                        detail: other.to_string(),
                    },
                };
                if write_response(&mut stream, &store, &response).is_err() {
                    break;
                }
            }
            Err(ProtocolError::FrameTooLarge { len, max }) => {
                // length prefix beyond the cap: the stream cannot be
                // resynchronized, answer once and drop the connection
                let _ = write_response(
                    &mut stream,
                    &store,
                    &Response::Error {
                        code: error_code::FRAME_TOO_LARGE,
                        detail: format!("frame of {len} bytes exceeds limit {max}"),
                    },
                );
                break;
            }
            Err(_) => break, // EOF or connection reset
        }
    }
}

fn write_response(
    stream: &mut TcpStream,
    store: &VectorStore,
    response: &Response,
) -> std::io::Result<()> {
    let (opcode, payload) = protocol::encode_response(response);
    let written = protocol::write_frame(stream, opcode, &payload)?;
    store
        .counters
        .bytes_out
        .fetch_add(written, Ordering::Relaxed);
    Ok(())
}

/// Resolves a bind/connect string early so configuration errors surface
/// before any training starts.
pub fn resolve_addr(addr: &str) -> std::io::Result<SocketAddr> {
    addr.to_socket_addrs()?
        .next()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "no address"))
}
