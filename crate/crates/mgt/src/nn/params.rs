//! Named parameter registry and the binary checkpoint format.
//!
//! Checkpoint byte layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   b"MGTCKPT1"
//! cfg_len    u32       length of the UTF-8 config echo
//! cfg        cfg_len   config JSON bytes
//! count      u32       number of entries
//! per entry:
//!   name_len u32
//!   name     name_len  UTF-8 entry name
//!   len      u64       number of f64 values
//!   data     len * 8   f64 values, little-endian
//! ```
//!
//! Entries are written in registry iteration order (insertion order), which
//! is stable across runs for a fixed construction sequence.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{DTensor, NnError};

const CHECKPOINT_MAGIC: &[u8; 8] = b"MGTCKPT1";

struct Entry {
    name: String,
    tensor: DTensor,
    trainable: bool,
}

/// Insertion-ordered registry of parameters and non-trainable buffers
/// (e.g. batchnorm running statistics).
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    fn insert(&mut self, name: &str, tensor: DTensor, trainable: bool) -> DTensor {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name: {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            tensor: tensor.clone(),
            trainable,
        });
        tensor
    }

    /// Register a trainable parameter initialized uniformly in
    /// `+-sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> DTensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, DTensor::param(shape, data), true)
    }

    /// Register a trainable parameter with explicit initial values.
    pub fn param_with(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> DTensor {
        self.insert(name, DTensor::param(shape, data), true)
    }

    pub fn zeros(&mut self, name: &str, len: usize) -> DTensor {
        self.param_with(name, &[len], vec![0.0; len])
    }

    pub fn ones(&mut self, name: &str, len: usize) -> DTensor {
        self.param_with(name, &[len], vec![1.0; len])
    }

    /// Register a non-trainable buffer; saved in checkpoints, skipped by
    /// the optimizer, never recorded on the tape.
    pub fn buffer(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> DTensor {
        self.insert(name, DTensor::constant(shape, data), false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&DTensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    /// All entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &DTensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Trainable parameters in insertion order.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &DTensor)> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Mark every parameter under a name prefix as non-trainable.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = false;
            }
        }
    }

    pub fn zero_grads(&self) {
        for e in &self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Multiply accumulated gradients of trainable parameters by `k`
    /// (minibatch averaging).
    pub fn scale_grads(&self, k: f64) {
        for e in &self.entries {
            if !e.trainable {
                continue;
            }
            if let Some(mut g) = e.tensor.grad() {
                for v in &mut g {
                    *v *= k;
                }
                e.tensor.zero_grad();
                e.tensor.accumulate_grad(&g);
            }
        }
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }
}

/// Serialize the store with a config echo.
pub fn save_checkpoint(store: &ParamStore, config_json: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg = config_json.as_bytes();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.len() as u64).to_le_bytes());
        for v in tensor.value().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Restore values into an already-constructed store; returns the embedded
/// config echo. Entry names, order, and lengths must match exactly.
pub fn load_checkpoint(store: &ParamStore, bytes: &[u8]) -> Result<String, NnError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(NnError::Invalid("bad checkpoint magic".into()));
    }
    let cfg_len = cur.u32()? as usize;
    let cfg = String::from_utf8(cur.take(cfg_len)?.to_vec())
        .map_err(|_| NnError::Invalid("config echo is not UTF-8".into()))?;
    let count = cur.u32()? as usize;
    if count != store.len() {
        return Err(NnError::Invalid(format!(
            "checkpoint has {count} entries, model expects {}",
            store.len()
        )));
    }
    for (name, tensor) in store.iter() {
        let name_len = cur.u32()? as usize;
        let stored_name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| NnError::Invalid("entry name is not UTF-8".into()))?;
        if stored_name != name {
            return Err(NnError::Invalid(format!(
                "checkpoint entry '{stored_name}' does not match expected '{name}'"
            )));
        }
        let len = cur.u64()? as usize;
        if len != tensor.len() {
            return Err(NnError::Invalid(format!(
                "entry '{name}' has {len} values, expected {}",
                tensor.len()
            )));
        }
        let raw = cur.take(len * 8)?;
        let mut data = vec![0.0f64; len];
        for (i, chunk) in raw.chunks_exact(8).enumerate() {
            data[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        tensor.set_data(&data);
    }
    Ok(cfg)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.bytes.len() {
            return Err(NnError::Invalid("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn deterministic_initialization() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut store = ParamStore::new();
            let a = store.glorot("a", &[3, 4], 4, 3, &mut rng);
            let b = store.glorot("b", &[4], 4, 4, &mut rng);
            (a.to_vec(), b.to_vec())
        };
        let (a1, b1) = build();
        let (a2, b2) = build();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn glorot_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let w = store.glorot("w", &[10, 10], 10, 10, &mut rng);
        let bound = (6.0 / 20.0f64).sqrt();
        assert!(w.to_vec().iter().all(|v| v.abs() < bound));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.zeros("x", 2);
        store.zeros("x", 2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        store.glorot("layer.w", &[2, 3], 3, 2, &mut rng);
        store.buffer("bn.mean", &[3], vec![0.5, -0.5, 0.25]);
        let snapshot: Vec<Vec<f64>> = store.iter().map(|(_, t)| t.to_vec()).collect();
        let bytes = save_checkpoint(&store, "{\"d\":3}");

        // Wipe and restore.
        for (_, t) in store.iter() {
            t.set_data(&vec![0.0; t.len()]);
        }
        let cfg = load_checkpoint(&store, &bytes).unwrap();
        assert_eq!(cfg, "{\"d\":3}");
        let restored: Vec<Vec<f64>> = store.iter().map(|(_, t)| t.to_vec()).collect();
        assert_eq!(snapshot, restored);
    }

    #[test]
    fn checkpoint_rejects_mismatched_store() {
        let mut store = ParamStore::new();
        store.zeros("a", 2);
        let bytes = save_checkpoint(&store, "{}");
        let mut other = ParamStore::new();
        other.zeros("b", 2);
        assert!(load_checkpoint(&other, &bytes).is_err());
        let mut other = ParamStore::new();
        other.zeros("a", 3);
        assert!(load_checkpoint(&other, &bytes).is_err());
    }

    #[test]
    fn freeze_prefix_excludes_from_trainable() {
        let mut store = ParamStore::new();
        store.zeros("pe.w", 2);
        store.zeros("head.w", 2);
        store.freeze_prefix("pe.");
        let names: Vec<&str> = store.trainable().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["head.w"]);
    }
}
