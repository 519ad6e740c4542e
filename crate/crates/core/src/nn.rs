//! Parameter storage, initialization, the AdamW optimizer, and the
//! checkpoint container.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names
//! (`"boxdec.0.cross.wq"`). A [`Session`] binds them onto a fresh tape for
//! one forward pass; freezing a subtree is just binding it without
//! gradient tracking, so the optimizer never sees it.
//!
//! Checkpoints are a flat key-to-tensor container: an 8-byte magic, a
//! format version, a JSON header (init seed, run config, tensor index)
//! and the row-major little-endian `f64` payloads in index order.

use crate::tape::{Grads, Matrix, Tape, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("header json: {0}")]
    Header(#[from] serde_json::Error),
}

/// Named parameter matrices, iterated in sorted-name order everywhere so
/// that initialization, hashing and serialization are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let name = name.into();
        assert!(
            self.params.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Matrix {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.params.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|m| m.len()).sum()
    }

    /// FNV-1a over names and raw `f64` bits; used to assert that frozen
    /// subtrees stay untouched across a training stage.
    pub fn content_hash(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, m) in &self.params {
            if !name.starts_with(prefix) {
                continue;
            }
            eat(name.as_bytes());
            for &v in m.iter() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}

/// Deterministic initializer. Matrices are created in call order, each
/// from its own draw sequence, so adding a parameter never shifts the
/// values of the ones after it in name order.
pub struct Initializer {
    rng: ChaCha20Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn xavier(&mut self, store: &mut ParamStore, name: &str, rows: usize, cols: usize) {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let m = Matrix::from_shape_fn((rows, cols), |_| self.rng.gen_range(-limit..limit));
        store.insert(name, m);
    }

    pub fn zeros(&mut self, store: &mut ParamStore, name: &str, rows: usize, cols: usize) {
        store.insert(name, Matrix::zeros((rows, cols)));
    }

    pub fn ones(&mut self, store: &mut ParamStore, name: &str, rows: usize, cols: usize) {
        store.insert(name, Matrix::ones((rows, cols)));
    }

    /// `x · W + b` parameter pair.
    pub fn linear(&mut self, store: &mut ParamStore, prefix: &str, input: usize, output: usize) {
        self.xavier(store, &format!("{prefix}.w"), input, output);
        self.zeros(store, &format!("{prefix}.b"), 1, output);
    }

    pub fn layer_norm(&mut self, store: &mut ParamStore, prefix: &str, dim: usize) {
        self.ones(store, &format!("{prefix}.g"), 1, dim);
        self.zeros(store, &format!("{prefix}.b"), 1, dim);
    }
}

/// Which parameters receive gradients in the current pass.
#[derive(Debug, Clone)]
pub enum Trainable {
    All,
    None,
    /// Everything except parameters whose name starts with one of these.
    Excluding(Vec<String>),
}

impl Trainable {
    fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::Excluding(list) => !list.iter().any(|p| name.starts_with(p)),
        }
    }
}

/// One forward pass: a tape plus the parameter bindings made on it, along
/// with per-pass bookkeeping (dropout state, attention capture, empty-mask
/// fallback events).
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    trainable: Trainable,
    bound: BTreeMap<String, Var>,
    dropout: Option<(f64, rand_chacha::ChaCha8Rng)>,
    /// When set, cross-attention layers append `(label, mean attention)`.
    pub capture: Option<Vec<(String, Matrix)>>,
    /// Queries whose mask came up empty and fell back to all-ones.
    pub fallback_events: Vec<crate::attention::FallbackEvent>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, trainable: Trainable) -> Self {
        Self {
            tape: Tape::new(),
            store,
            trainable,
            bound: BTreeMap::new(),
            dropout: None,
            capture: None,
            fallback_events: Vec::new(),
        }
    }

    /// Session for inference: parameters bound without gradient tracking.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::new(store, Trainable::None)
    }

    /// Enables dropout at the given rate, seeded deterministically.
    pub fn enable_dropout(&mut self, rate: f64, seed: u64) {
        if rate > 0.0 {
            self.dropout = Some((rate, rand_chacha::ChaCha8Rng::seed_from_u64(seed)));
        }
    }

    /// Enables attention-map capture for visualization.
    pub fn enable_capture(&mut self) {
        self.capture = Some(Vec::new());
    }

    /// Inverted dropout on a node; identity when dropout is disabled.
    pub fn maybe_dropout(&mut self, x: Var) -> Var {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let rate = *rate;
        let shape = self.tape.shape(x);
        let keep = 1.0 - rate;
        let mask = Matrix::from_shape_fn(shape, |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.tape.constant(mask);
        self.tape.mul(x, m)
    }

    /// Binds a parameter (once per session; later calls reuse the node so
    /// gradients accumulate across uses).
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = self.store.get(name).clone();
        let v = if self.trainable.allows(name) {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Collects gradients for every trainable bound parameter.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Matrix> {
        let mut out = BTreeMap::new();
        for (name, &var) in &self.bound {
            if !self.trainable.allows(name) {
                continue;
            }
            let shape = self.tape.shape(var);
            out.insert(name.clone(), grads.get_or_zeros(var, shape));
        }
        out
    }

    /// `x · W + b` using parameters under `prefix`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let xw = self.tape.matmul(x, w);
        self.tape.add_row(xw, b)
    }

    /// Two-layer MLP with ReLU.
    pub fn mlp2(&mut self, x: Var, prefix: &str) -> Var {
        let h = self.linear(x, &format!("{prefix}.l1"));
        let h = self.tape.relu(h);
        self.linear(h, &format!("{prefix}.l2"))
    }

    /// Three-layer MLP with ReLU (box-regression style head).
    pub fn mlp3(&mut self, x: Var, prefix: &str) -> Var {
        let h = self.linear(x, &format!("{prefix}.l1"));
        let h = self.tape.relu(h);
        let h = self.linear(h, &format!("{prefix}.l2"));
        let h = self.tape.relu(h);
        self.linear(h, &format!("{prefix}.l3"))
    }

    /// Row-wise layer norm with learned gain and bias under `prefix`.
    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Var {
        let g = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        let mean = self.tape.mean_rows(x);
        let neg_mean = self.tape.scale(mean, -1.0);
        let centered = self.tape.add_col(x, neg_mean);
        let sq = self.tape.mul(centered, centered);
        let var = self.tape.mean_rows(sq);
        let std = self.tape.sqrt_eps(var, 1e-6);
        let normed = self.tape.div_col(centered, std);
        let scaled = self.tape.mul_row(normed, g);
        self.tape.add_row(scaled, b)
    }
}

/// AdamW with decoupled weight decay.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Matrix>) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = store.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / b1t;
                    let vhat = *v / b2t;
                    *p -= self.lr * self.weight_decay * *p;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// A serialized model: JSON header plus the flat parameter table.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Arbitrary run metadata; the trainer stores the init seed and the
    /// full run configuration here.
    pub header: serde_json::Value,
    pub params: ParamStore,
}

const MAGIC: &[u8; 8] = b"HOIPCKPT";
const VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut index = Vec::new();
        for (name, m) in self.params.iter() {
            index.push(serde_json::json!({
                "name": name,
                "rows": m.nrows(),
                "cols": m.ncols(),
            }));
        }
        let header = serde_json::json!({
            "meta": self.header,
            "tensors": index,
        });
        let header_bytes = serde_json::to_vec(&header)?;

        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        for (_, m) in self.params.iter() {
            for &v in m.iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut u32buf = [0u8; 4];
        f.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let mut u64buf = [0u8; 8];
        f.read_exact(&mut u64buf)?;
        let header_len = u64::from_le_bytes(u64buf) as usize;
        let mut header_bytes = vec![0u8; header_len];
        f.read_exact(&mut header_bytes)?;
        let header: serde_json::Value = serde_json::from_slice(&header_bytes)?;

        let tensors = header
            .get("tensors")
            .and_then(|v| v.as_array())
            .ok_or_else(|| CheckpointError::Corrupt("missing tensor index".into()))?
            .clone();
        let meta = header.get("meta").cloned().unwrap_or(serde_json::Value::Null);

        let mut params = ParamStore::new();
        for entry in tensors {
            let name = entry
                .get("name")
                .and_then(|v| v.as_str())
                .ok_or_else(|| CheckpointError::Corrupt("tensor without name".into()))?
                .to_string();
            let rows = entry.get("rows").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
            let cols = entry.get("cols").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
            let mut data = vec![0u8; rows * cols * 8];
            f.read_exact(&mut data)?;
            let values: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let m = Matrix::from_shape_vec((rows, cols), values)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            params.insert(name, m);
        }
        Ok(Self {
            header: meta,
            params,
        })
    }
}
