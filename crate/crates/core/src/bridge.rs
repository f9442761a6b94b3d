//! Client side of the external model oracle: newline-delimited JSON over a
//! child process's stdin/stdout, tensors as base64 little-endian `f32`.
//!
//! Each request carries `protocol`, a fresh `id` and an `op`; the responder
//! answers every request with exactly one line echoing the id.

use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Result, VccError};
use crate::oracle::FeatureOracle;
use crate::tensor::TensorF32;

pub const PROTOCOL_VERSION: u32 = 1;
/// Largest line accepted in either direction.
pub const MAX_PAYLOAD_BYTES: usize = 256 << 20;

pub fn encode_f32(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f32(text: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| VccError::Bridge(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(VccError::Bridge(format!("payload of {} bytes is not whole f32s", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// A tensor on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

impl WireTensor {
    pub fn encode(t: &TensorF32) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: encode_f32(t.data()),
        }
    }

    pub fn from_vec(v: &[f32]) -> Self {
        Self {
            shape: vec![v.len()],
            data: encode_f32(v),
        }
    }

    pub fn decode(&self) -> Result<TensorF32> {
        let data = decode_f32(&self.data)?;
        let expected: usize = self.shape.iter().product();
        if data.len() != expected {
            return Err(VccError::Bridge(format!(
                "payload has {} values, shape {:?} needs {expected}",
                data.len(),
                self.shape
            )));
        }
        TensorF32::new(self.shape.clone(), data).map_err(|e| VccError::Bridge(e.to_string()))
    }
}

/// Model facts announced by `hello` and `shapes`.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeInfo {
    pub input_shape: [usize; 3],
    pub tap_layers: Vec<usize>,
    pub shapes: Vec<Vec<usize>>,
    pub model_hash: String,
}

/// One request/response channel.
pub struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    limit: usize,
}

impl Connection {
    pub fn new(reader: impl Read + Send + 'static, writer: impl Write + Send + 'static) -> Self {
        Self {
            reader: Box::new(BufReader::new(reader)),
            writer: Box::new(writer),
            child: None,
            limit: MAX_PAYLOAD_BYTES,
        }
    }

    pub fn spawn(command: &[String]) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| VccError::Bridge("empty oracle command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| VccError::Bridge(format!("cannot start {program}: {e}")))?;
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stdout: ChildStdout = child.stdout.take().expect("piped stdout");
        let mut conn = Self::new(stdout, stdin);
        conn.child = Some(child);
        Ok(conn)
    }

    pub fn with_limit(mut self, bytes: usize) -> Self {
        self.limit = bytes;
        self
    }

    /// Sends one request and reads its response. `id` must be echoed back.
    pub fn call(&mut self, id: u64, op: &str, mut fields: Value) -> Result<Value> {
        let obj = fields
            .as_object_mut()
            .ok_or_else(|| VccError::Bridge("request fields must be an object".into()))?;
        obj.insert("protocol".into(), json!(PROTOCOL_VERSION));
        obj.insert("id".into(), json!(id));
        obj.insert("op".into(), json!(op));
        let mut line = serde_json::to_vec(&fields)?;
        if line.len() > self.limit {
            return Err(VccError::Bridge(format!(
                "{op} request of {} bytes exceeds the {} byte limit",
                line.len(),
                self.limit
            )));
        }
        line.push(b'\n');
        let io = |e: std::io::Error| VccError::Bridge(format!("oracle channel: {e}"));
        self.writer.write_all(&line).map_err(io)?;
        self.writer.flush().map_err(io)?;

        let mut buf = Vec::new();
        let n = (&mut self.reader)
            .take(self.limit as u64 + 1)
            .read_until(b'\n', &mut buf)
            .map_err(io)?;
        if n == 0 {
            return Err(VccError::Bridge(format!("oracle closed the channel during {op}")));
        }
        if buf.last() != Some(&b'\n') {
            return Err(VccError::Bridge(if buf.len() > self.limit {
                format!("{op} response exceeds the {} byte limit", self.limit)
            } else {
                format!("truncated {op} response")
            }));
        }
        let resp: Value =
            serde_json::from_slice(&buf).map_err(|e| VccError::Bridge(format!("malformed {op} response: {e}")))?;
        if resp.get("id").and_then(Value::as_u64) != Some(id) {
            return Err(VccError::Bridge(format!(
                "{op} response id {} does not echo request id {id}",
                resp.get("id").unwrap_or(&Value::Null)
            )));
        }
        match resp.get("status").and_then(Value::as_str) {
            Some("ok") => Ok(resp),
            Some("error") => Err(VccError::Bridge(format!(
                "oracle failed {op}: {}",
                resp.get("error").and_then(Value::as_str).unwrap_or("no message")
            ))),
            other => Err(VccError::Bridge(format!("{op} response has status {other:?}"))),
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            self.writer = Box::new(std::io::sink());
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn field<T: serde::de::DeserializeOwned>(resp: &Value, name: &str) -> Result<T> {
    let v = resp
        .get(name)
        .ok_or_else(|| VccError::Bridge(format!("response lacks `{name}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| VccError::Bridge(format!("bad `{name}`: {e}")))
}

/// A [`FeatureOracle`] served by one or more responder processes. Calls are
/// strictly sequential per connection; parallel callers spread over the pool.
pub struct BridgeOracle {
    pool: Vec<Mutex<Connection>>,
    next_id: AtomicU64,
    cursor: AtomicUsize,
    info: BridgeInfo,
}

impl BridgeOracle {
    /// Starts `processes` copies of `command` and performs the handshake.
    pub fn spawn(command: &[String], processes: usize) -> Result<Self> {
        let pool = (0..processes.max(1))
            .map(|_| Connection::spawn(command))
            .collect::<Result<Vec<_>>>()?;
        Self::from_connections(pool, command.join(" "))
    }

    /// Handshakes over existing connections. `label` seeds the model hash
    /// when the responder does not report one.
    pub fn from_connections(mut pool: Vec<Connection>, label: String) -> Result<Self> {
        let first = pool
            .first_mut()
            .ok_or_else(|| VccError::Bridge("no oracle connections".into()))?;
        let hello = first.call(0, "hello", json!({}))?;
        let version: u32 = field(&hello, "protocol")?;
        if version != PROTOCOL_VERSION {
            return Err(VccError::Bridge(format!(
                "oracle speaks protocol {version}, expected {PROTOCOL_VERSION}"
            )));
        }
        let input_shape: [usize; 3] = field(&hello, "input_shape")?;
        let tap_layers: Vec<usize> = field(&hello, "tap_layers")?;
        let shapes: Vec<Vec<usize>> = field(&first.call(1, "shapes", json!({}))?, "shapes")?;
        if shapes.is_empty() || shapes.last().is_some_and(|s| s.len() != 1) {
            return Err(VccError::Bridge(format!("last layer shape must be a logit vector, got {shapes:?}")));
        }
        if tap_layers.iter().any(|&t| shapes.get(t).is_none_or(|s| s.len() != 3)) {
            return Err(VccError::Bridge(format!("tap layers {tap_layers:?} are not spatial layers")));
        }
        let model_hash = match hello.get("model_hash").and_then(Value::as_str) {
            Some(h) => h.to_string(),
            None => {
                let mut hasher = Sha256::new();
                hasher.update(label.as_bytes());
                hasher.update(serde_json::to_vec(&shapes)?);
                hex::encode(hasher.finalize())
            }
        };
        for (i, conn) in pool.iter_mut().enumerate().skip(1) {
            conn.call(i as u64, "hello", json!({}))?;
        }
        Ok(Self {
            pool: pool.into_iter().map(Mutex::new).collect(),
            next_id: AtomicU64::new(2),
            cursor: AtomicUsize::new(0),
            info: BridgeInfo {
                input_shape,
                tap_layers,
                shapes,
                model_hash,
            },
        })
    }

    pub fn info(&self) -> &BridgeInfo {
        &self.info
    }

    fn call(&self, op: &str, fields: Value) -> Result<Value> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        // Prefer an idle connection, else queue on the next in rotation.
        for conn in &self.pool {
            if let Ok(mut c) = conn.try_lock() {
                return c.call(id, op, fields);
            }
        }
        let i = self.cursor.fetch_add(1, Ordering::Relaxed) % self.pool.len();
        let mut c = self.pool[i]
            .lock()
            .map_err(|_| VccError::Bridge("oracle connection poisoned".into()))?;
        c.call(id, op, fields)
    }

    fn tensor_call(&self, op: &str, fields: Value, expect: &[usize]) -> Result<TensorF32> {
        let out: WireTensor = field(&self.call(op, fields)?, "output")?;
        let t = out.decode()?;
        if t.shape() != expect {
            return Err(VccError::Bridge(format!(
                "{op} returned shape {:?}, expected {expect:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    fn shape(&self, layer: usize) -> Result<&[usize]> {
        self.info.shapes.get(layer).map(Vec::as_slice).ok_or(VccError::Index {
            index: layer,
            len: self.info.shapes.len(),
        })
    }
}

impl FeatureOracle for BridgeOracle {
    fn input_shape(&self) -> [usize; 3] {
        self.info.input_shape
    }

    fn class_count(&self) -> usize {
        self.info.shapes.last().map_or(0, |s| s[0])
    }

    fn layer_count(&self) -> usize {
        self.info.shapes.len()
    }

    fn tap_layers(&self) -> Vec<usize> {
        self.info.tap_layers.clone()
    }

    fn output_shape(&self, layer: usize) -> Result<Vec<usize>> {
        self.shape(layer).map(<[usize]>::to_vec)
    }

    fn forward_to(&self, image: &TensorF32, layer: usize) -> Result<TensorF32> {
        let expect = self.shape(layer)?.to_vec();
        self.tensor_call(
            "forward_to",
            json!({"layer": layer, "input": WireTensor::encode(image)}),
            &expect,
        )
    }

    fn forward_between(&self, activation: &TensorF32, from: usize, to: usize) -> Result<TensorF32> {
        if from >= to {
            return Err(VccError::Ordering { from, to });
        }
        let expect = self.shape(to)?.to_vec();
        self.tensor_call(
            "forward_between",
            json!({"from": from, "to": to, "input": WireTensor::encode(activation)}),
            &expect,
        )
    }

    fn distance_grad(&self, activation: &TensorF32, from: usize, to: usize, centroid: &[f32]) -> Result<TensorF32> {
        if from >= to {
            return Err(VccError::Ordering { from, to });
        }
        self.shape(to)?;
        self.tensor_call(
            "distance_grad",
            json!({
                "from": from,
                "to": to,
                "input": WireTensor::encode(activation),
                "centroid": WireTensor::from_vec(centroid),
            }),
            activation.shape(),
        )
    }

    fn logits(&self, image: &TensorF32) -> Result<Vec<f32>> {
        let n = self.class_count();
        Ok(self
            .tensor_call("logits", json!({"input": WireTensor::encode(image)}), &[n])?
            .into_data())
    }

    fn model_hash(&self) -> String {
        self.info.model_hash.clone()
    }
}
