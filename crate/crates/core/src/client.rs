//! Learner-side access to parameter storage: a batched, sharded TCP client
//! for remote servers and an in-process equivalent with identical
//! semantics, both behind the [`ParameterStore`] trait.

use std::collections::{HashMap, HashSet};
use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{
    self, CounterSnapshot, ProtocolError, Request, Response,
};
use crate::server::VectorStore;
use crate::util::shard_of;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("vector for key {key} has {got} slots, server width is {expected}")]
    WidthMismatch {
        key: u64,
        got: usize,
        expected: usize,
    },
    #[error("transport failure talking to shard {shard} after {attempts} attempts: {source}")]
    Transport {
        shard: usize,
        attempts: u32,
        source: std::io::Error,
    },
    #[error("protocol violation: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("server rejected request (code {code}): {detail}")]
    Rejected { code: u16, detail: String },
    #[error("server acked {acked} of {sent} entries")]
    ShortAck { acked: u32, sent: usize },
}

/// Classification of keys for traffic accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyClass {
    /// Row (U) factor vectors, held remotely.
    RowFactor,
    /// Column (V) factor vectors, co-located with the learner. Any network
    /// traffic in this class defeats the partitioning scheme.
    ColumnFactor,
    /// Reserved keys carrying per-model global biases.
    GlobalBiasKey,
}

pub type KeyClassifier = Arc<dyn Fn(u64) -> KeyClass + Send + Sync>;

/// Per-handle accounting of parameter traffic.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientTrafficLog {
    pub keys_fetched: u64,
    pub keys_written: u64,
    pub round_trips: u64,
    pub bytes: u64,
    pub u_keys: u64,
    pub v_keys: u64,
    pub g_keys: u64,
}

impl ClientTrafficLog {
    pub fn merge(&mut self, other: &ClientTrafficLog) {
        self.keys_fetched += other.keys_fetched;
        self.keys_written += other.keys_written;
        self.round_trips += other.round_trips;
        self.bytes += other.bytes;
        self.u_keys += other.u_keys;
        self.v_keys += other.v_keys;
        self.g_keys += other.g_keys;
    }
}

/// Batched access to the parameter store, from the learner's side.
///
/// One handle per trainer thread; handles are not shared. Fetching a key
/// that was never written yields its deterministic lazily-initialized
/// vector.
pub trait ParameterStore: Send {
    fn width(&self) -> usize;

    /// Fetches the vectors for the given keys (deduplicated), chunked into
    /// protocol-sized batches and routed to the owning shards.
    fn fetch_batch(&mut self, keys: &[u64]) -> Result<HashMap<u64, Vec<f32>>, ClientError>;

    /// Writes all entries back; every entry must have the server width.
    /// Width is checked before anything goes on the wire.
    fn write_batch(&mut self, entries: &[(u64, &[f32])]) -> Result<(), ClientError>;

    /// Traffic accounted so far on this handle.
    fn traffic(&self) -> ClientTrafficLog;

    /// Installs a key classifier for per-class traffic tallies.
    fn set_classifier(&mut self, classifier: Option<KeyClassifier>);
}

fn tally_class(
    log: &mut ClientTrafficLog,
    classifier: &Option<KeyClassifier>,
    keys: impl Iterator<Item = u64>,
) {
    if let Some(classify) = classifier {
        for key in keys {
            match classify(key) {
                KeyClass::RowFactor => log.u_keys += 1,
                KeyClass::ColumnFactor => log.v_keys += 1,
                KeyClass::GlobalBiasKey => log.g_keys += 1,
            }
        }
    }
}

fn dedupe_preserving_order(keys: &[u64]) -> Vec<u64> {
    let mut seen = HashSet::with_capacity(keys.len());
    let mut out = Vec::with_capacity(keys.len());
    for &key in keys {
        if seen.insert(key) {
            out.push(key);
        }
    }
    out
}

/// Client-side tunables. Defaults: batch 512, 3 retries with 200 ms base
/// backoff, 5 s request timeout.
#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub servers: Vec<String>,
    pub width: usize,
    pub max_batch: usize,
    pub retries: u32,
    pub base_backoff: Duration,
    pub timeout: Duration,
}

impl ClientConfig {
    pub fn new(servers: Vec<String>, width: usize) -> Self {
        ClientConfig {
            servers,
            width,
            max_batch: 512,
            retries: 3,
            base_backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(5),
        }
    }
}

/// TCP client speaking the wire protocol, sharding keys across servers by
/// hash and splitting oversized batches.
pub struct ParamClient {
    config: ClientConfig,
    connections: Vec<Option<TcpStream>>,
    traffic: ClientTrafficLog,
    classifier: Option<KeyClassifier>,
}

impl ParamClient {
    pub fn connect(config: ClientConfig) -> Result<Self, ClientError> {
        assert!(!config.servers.is_empty(), "need at least one server");
        assert!(config.max_batch >= 1 && config.max_batch <= protocol::MAX_BATCH);
        let mut client = ParamClient {
            connections: (0..config.servers.len()).map(|_| None).collect(),
            config,
            traffic: ClientTrafficLog::default(),
            classifier: None,
        };
        for shard in 0..client.config.servers.len() {
            client.ensure_connection(shard)?;
        }
        Ok(client)
    }

    pub fn num_shards(&self) -> usize {
        self.config.servers.len()
    }

    fn ensure_connection(&mut self, shard: usize) -> Result<&mut TcpStream, ClientError> {
        if self.connections[shard].is_none() {
            let addr = &self.config.servers[shard];
            let stream = TcpStream::connect(addr).map_err(|source| ClientError::Transport {
                shard,
                attempts: 1,
                source,
            })?;
            stream.set_nodelay(true).ok();
            stream.set_read_timeout(Some(self.config.timeout)).ok();
            stream.set_write_timeout(Some(self.config.timeout)).ok();
            self.connections[shard] = Some(stream);
        }
        Ok(self.connections[shard].as_mut().unwrap())
    }

    /// One request-response exchange with bounded retries and exponential
    /// backoff; reconnects before each retry. Only key-bearing exchanges
    /// count as round trips, so `round_trips <= keys_fetched + keys_written`
    /// holds no matter how often counters are polled.
    fn exchange(&mut self, shard: usize, request: &Request) -> Result<Response, ClientError> {
        let (opcode, payload) = protocol::encode_request(request);
        let carries_keys = !matches!(request, Request::Stats);
        let max_payload = protocol::max_payload_for_width(self.config.width);
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let result = (|| -> Result<Response, ProtocolError> {
                let stream = match self.ensure_connection(shard) {
                    Ok(s) => s,
                    Err(ClientError::Transport { source, .. }) => return Err(source.into()),
                    Err(_) => unreachable!("ensure_connection only fails on transport"),
                };
                let sent = protocol::write_frame(stream, opcode, &payload)?;
                let (reply_op, reply_payload) = protocol::read_frame(stream, max_payload)?;
                self.traffic.bytes += sent + 5 + reply_payload.len() as u64;
                protocol::decode_response(reply_op, &reply_payload, self.config.width)
            })();
            match result {
                Ok(Response::Error { code, detail }) => {
                    return Err(ClientError::Rejected { code, detail })
                }
                Ok(response) => {
                    if carries_keys {
                        self.traffic.round_trips += 1;
                    }
                    return Ok(response);
                }
                Err(ProtocolError::Io(source)) => {
                    self.connections[shard] = None;
                    if attempts > self.config.retries {
                        return Err(ClientError::Transport {
                            shard,
                            attempts,
                            source,
                        });
                    }
                    std::thread::sleep(self.config.base_backoff * 2u32.pow(attempts - 1));
                }
                Err(other) => return Err(other.into()),
            }
        }
    }

    /// Server counter snapshot from one shard.
    pub fn server_stats(&mut self, shard: usize) -> Result<CounterSnapshot, ClientError> {
        match self.exchange(shard, &Request::Stats)? {
            Response::StatsReply { counters } => Ok(counters),
            other => Err(ClientError::Protocol(ProtocolError::UnexpectedOpcode(
                response_opcode(&other),
            ))),
        }
    }

    fn group_by_shard(&self, keys: &[u64]) -> Vec<Vec<u64>> {
        let mut per_shard: Vec<Vec<u64>> = vec![Vec::new(); self.num_shards()];
        for &key in keys {
            per_shard[shard_of(key, self.num_shards())].push(key);
        }
        per_shard
    }
}

fn response_opcode(response: &Response) -> u8 {
    match response {
        Response::GetReply { .. } => protocol::OP_GET_REPLY,
        Response::PutReply { .. } => protocol::OP_PUT_REPLY,
        Response::StatsReply { .. } => protocol::OP_STATS_REPLY,
        Response::Error { .. } => protocol::OP_ERROR,
    }
}

impl ParameterStore for ParamClient {
    fn width(&self) -> usize {
        self.config.width
    }

    fn fetch_batch(&mut self, keys: &[u64]) -> Result<HashMap<u64, Vec<f32>>, ClientError> {
        let unique = dedupe_preserving_order(keys);
        if unique.is_empty() {
            return Ok(HashMap::new());
        }
        let mut result = HashMap::with_capacity(unique.len());
        for (shard, shard_keys) in self.group_by_shard(&unique).into_iter().enumerate() {
            for chunk in shard_keys.chunks(self.config.max_batch.max(1)) {
                if chunk.is_empty() {
                    continue;
                }
                let reply = self.exchange(
                    shard,
                    &Request::GetBatch {
                        keys: chunk.to_vec(),
                    },
                )?;
                match reply {
                    Response::GetReply { entries } => {
                        for (key, vector) in entries {
                            result.insert(key, vector);
                        }
                    }
                    other => {
                        return Err(ClientError::Protocol(ProtocolError::UnexpectedOpcode(
                            response_opcode(&other),
                        )))
                    }
                }
            }
        }
        self.traffic.keys_fetched += unique.len() as u64;
        tally_class(&mut self.traffic, &self.classifier, unique.iter().copied());
        Ok(result)
    }

    fn write_batch(&mut self, entries: &[(u64, &[f32])]) -> Result<(), ClientError> {
        // validate all widths before any network write
        for (key, vector) in entries {
            if vector.len() != self.config.width {
                return Err(ClientError::WidthMismatch {
                    key: *key,
                    got: vector.len(),
                    expected: self.config.width,
                });
            }
        }
        if entries.is_empty() {
            return Ok(());
        }
        let mut per_shard: Vec<Vec<(u64, Vec<f32>)>> = vec![Vec::new(); self.num_shards()];
        for (key, vector) in entries {
            per_shard[shard_of(*key, self.num_shards())].push((*key, vector.to_vec()));
        }
        for (shard, shard_entries) in per_shard.into_iter().enumerate() {
            for chunk in shard_entries.chunks(self.config.max_batch.max(1)) {
                if chunk.is_empty() {
                    continue;
                }
                let reply = self.exchange(
                    shard,
                    &Request::PutBatch {
                        entries: chunk.to_vec(),
                    },
                )?;
                match reply {
                    Response::PutReply { acked } if acked as usize == chunk.len() => {}
                    Response::PutReply { acked } => {
                        return Err(ClientError::ShortAck {
                            acked,
                            sent: chunk.len(),
                        })
                    }
                    other => {
                        return Err(ClientError::Protocol(ProtocolError::UnexpectedOpcode(
                            response_opcode(&other),
                        )))
                    }
                }
            }
        }
        self.traffic.keys_written += entries.len() as u64;
        tally_class(
            &mut self.traffic,
            &self.classifier,
            entries.iter().map(|(key, _)| *key),
        );
        Ok(())
    }

    fn traffic(&self) -> ClientTrafficLog {
        self.traffic
    }

    fn set_classifier(&mut self, classifier: Option<KeyClassifier>) {
        self.classifier = classifier;
    }
}

/// In-process parameter store with the same batching, lazy-initialization,
/// and accounting semantics as the networked client, minus the sockets.
/// Backed by the same [`VectorStore`] the TCP server uses.
pub struct InProcessClient {
    store: Arc<VectorStore>,
    max_batch: usize,
    traffic: ClientTrafficLog,
    classifier: Option<KeyClassifier>,
}

impl InProcessClient {
    pub fn new(store: Arc<VectorStore>) -> Self {
        InProcessClient {
            store,
            max_batch: 512,
            traffic: ClientTrafficLog::default(),
            classifier: None,
        }
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        assert!((1..=protocol::MAX_BATCH).contains(&max_batch));
        self.max_batch = max_batch;
        self
    }

    pub fn store(&self) -> &Arc<VectorStore> {
        &self.store
    }
}

impl ParameterStore for InProcessClient {
    fn width(&self) -> usize {
        self.store.width()
    }

    fn fetch_batch(&mut self, keys: &[u64]) -> Result<HashMap<u64, Vec<f32>>, ClientError> {
        let unique = dedupe_preserving_order(keys);
        if unique.is_empty() {
            return Ok(HashMap::new());
        }
        let mut result = HashMap::with_capacity(unique.len());
        for chunk in unique.chunks(self.max_batch) {
            self.traffic.round_trips += 1;
            for &key in chunk {
                result.insert(key, self.store.get_or_init(key));
            }
        }
        self.traffic.keys_fetched += unique.len() as u64;
        tally_class(&mut self.traffic, &self.classifier, unique.iter().copied());
        Ok(result)
    }

    fn write_batch(&mut self, entries: &[(u64, &[f32])]) -> Result<(), ClientError> {
        for (key, vector) in entries {
            if vector.len() != self.store.width() {
                return Err(ClientError::WidthMismatch {
                    key: *key,
                    got: vector.len(),
                    expected: self.store.width(),
                });
            }
        }
        if entries.is_empty() {
            return Ok(());
        }
        for chunk in entries.chunks(self.max_batch) {
            self.traffic.round_trips += 1;
            for (key, vector) in chunk {
                self.store.put(*key, vector.to_vec());
            }
        }
        self.traffic.keys_written += entries.len() as u64;
        tally_class(
            &mut self.traffic,
            &self.classifier,
            entries.iter().map(|(key, _)| *key),
        );
        Ok(())
    }

    fn traffic(&self) -> ClientTrafficLog {
        self.traffic
    }

    fn set_classifier(&mut self, classifier: Option<KeyClassifier>) {
        self.classifier = classifier;
    }
}
