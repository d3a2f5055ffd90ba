//! Named parameter storage, deterministic initialization, optimizers, and a
//! flat binary checkpoint format.
//!
//! Initialization is keyed by `(seed, parameter name)` so the values of a
//! parameter never depend on creation order, which keeps whole-run
//! reproducibility independent of refactorings.

use crate::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic): {0}")]
    BadMagic(String),
    #[error("corrupt checkpoint entry in {0}")]
    Corrupt(String),
    #[error("shape mismatch for {name}: checkpoint {found:?}, model {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

/// Initialization scheme for a parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-limit, limit]` with `limit = sqrt(6 / (fan_in + fan_out))`.
    XavierUniform { fan_in: usize, fan_out: usize },
    /// Gaussian with the given standard deviation.
    Normal { std: f64 },
    Constant(f64),
}

/// Flat map of named f64 tensors plus the seed that determines fresh values.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    map: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            map: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.map.get_mut(name)
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        self.map.insert(name.to_string(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<f64>> {
        self.map.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Create the parameter if absent, deterministically from `(seed, name)`.
    pub fn ensure(&mut self, name: &str, shape: &[usize], init: Init) -> &ArrayD<f64> {
        if !self.map.contains_key(name) {
            let mut rng = rng_for(self.seed, name);
            let value = match init {
                Init::Zeros => ArrayD::zeros(IxDyn(shape)),
                Init::Ones => ArrayD::from_elem(IxDyn(shape), 1.0),
                Init::Constant(c) => ArrayD::from_elem(IxDyn(shape), c),
                Init::XavierUniform { fan_in, fan_out } => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-limit..limit))
                }
                Init::Normal { std } => {
                    ArrayD::from_shape_fn(IxDyn(shape), |_| normal_sample(&mut rng) * std)
                }
            };
            self.map.insert(name.to_string(), value);
        }
        self.map.get(name).unwrap()
    }

    /// FNV-style checksum over names, shapes, and raw bits; order-independent
    /// input (the map is sorted) so equal stores give equal checksums.
    pub fn checksum(&self) -> u64 {
        let mut hasher = Sha256::new();
        for (name, value) in &self.map {
            hasher.update(name.as_bytes());
            for &d in value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &x in value.iter() {
                hasher.update(x.to_bits().to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    // ---- checkpoint io -----------------------------------------------------

    const MAGIC: &'static [u8; 8] = b"TAPIRCK1";

    /// Write all parameters plus an opaque JSON config echo.
    pub fn save(&self, path: &Path, config_echo: &str) -> Result<(), CheckpointError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(Self::MAGIC);
        buf.extend_from_slice(&(config_echo.len() as u64).to_le_bytes());
        buf.extend_from_slice(config_echo.as_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.map.len() as u64).to_le_bytes());
        for (name, value) in &self.map {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(value.ndim() as u8);
            for &d in value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in value.iter() {
                buf.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        file.write_all(&buf).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// Load a checkpoint; returns the store and the config echo.
    pub fn load(path: &Path) -> Result<(Self, String), CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| CheckpointError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        let p = path.display().to_string();
        let mut cur = 0usize;
        let take = |cur: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
            if *cur + n > bytes.len() {
                return Err(CheckpointError::Corrupt(p.clone()));
            }
            let s = &bytes[*cur..*cur + n];
            *cur += n;
            Ok(s)
        };
        if take(&mut cur, 8)? != Self::MAGIC {
            return Err(CheckpointError::BadMagic(p));
        }
        let echo_len = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
        let echo = String::from_utf8(take(&mut cur, echo_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt(p.clone()))?;
        let seed = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
        let n_entries = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
        let mut map = BTreeMap::new();
        for _ in 0..n_entries {
            let name_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt(p.clone()))?;
            let ndim = take(&mut cur, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize);
            }
            let count: usize = shape.iter().product();
            let raw = take(&mut cur, count * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|_| CheckpointError::Corrupt(p.clone()))?;
            map.insert(name, arr);
        }
        Ok((Self { seed, map }, echo))
    }
}

/// Binds store parameters to tape leaves by name during one forward pass.
pub struct Session<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'p> Session<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    /// Bind a named parameter as a gradient-tracking leaf (once per pass).
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter not initialized: {name}"))
            .clone();
        let v = self.tape.leaf(value);
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Bind a named parameter without gradient tracking (frozen weights).
    pub fn frozen(&mut self, name: &str) -> Var {
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter not initialized: {name}"))
            .clone();
        self.tape.constant(value)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.tape.constant(value)
    }

    /// Run backward and collect gradients for every bound parameter; missing
    /// gradients (parameters unused by this loss) come back as zeros.
    pub fn grads(&self, loss: Var) -> BTreeMap<String, ArrayD<f64>> {
        let g = self.tape.backward(loss);
        self.bound
            .iter()
            .map(|(name, &var)| {
                let grad = g
                    .get(var)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(self.tape.value(var).raw_dim()));
                (name.clone(), grad)
            })
            .collect()
    }
}

/// Accumulate gradient maps elementwise (in sample order for determinism).
pub fn add_grads(total: &mut BTreeMap<String, ArrayD<f64>>, part: &BTreeMap<String, ArrayD<f64>>) {
    for (name, g) in part {
        match total.get_mut(name) {
            Some(acc) => *acc += g,
            None => {
                total.insert(name.clone(), g.clone());
            }
        }
    }
}

/// SGD with classical momentum and coupled L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, ArrayD<f64>>, lr: f64) {
        for (name, grad) in grads {
            let param = store
                .get_mut(name)
                .unwrap_or_else(|| panic!("sgd: unknown parameter {name}"));
            let mut g = grad.clone();
            if self.weight_decay != 0.0 {
                g = g + &param.mapv(|p| p * self.weight_decay);
            }
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(param.raw_dim()));
            *vel = vel.mapv(|v| v * self.momentum) + &g;
            *param -= &vel.mapv(|v| v * lr);
        }
    }

    /// Expose buffers for checkpointing under a distinct prefix.
    pub fn export_state(&self) -> BTreeMap<String, ArrayD<f64>> {
        self.velocity
            .iter()
            .map(|(k, v)| (format!("optim.momentum.{k}"), v.clone()))
            .collect()
    }

    pub fn import_state(&mut self, state: &BTreeMap<String, ArrayD<f64>>) {
        self.velocity.clear();
        for (k, v) in state {
            if let Some(name) = k.strip_prefix("optim.momentum.") {
                self.velocity.insert(name.to_string(), v.clone());
            }
        }
    }
}

/// Decoupled-weight-decay Adam, used for detector optimization.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, ArrayD<f64>>, lr: f64) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (name, grad) in grads {
            let param = store
                .get_mut(name)
                .unwrap_or_else(|| panic!("adamw: unknown parameter {name}"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(param.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(param.raw_dim()));
            *m = m.mapv(|x| x * self.beta1) + &grad.mapv(|g| g * (1.0 - self.beta1));
            *v = v.mapv(|x| x * self.beta2) + &grad.mapv(|g| g * g * (1.0 - self.beta2));
            let update = ndarray::Zip::from(&*m)
                .and(&*v)
                .map_collect(|&mi, &vi| (mi / bc1) / ((vi / bc2).sqrt() + self.eps));
            if self.weight_decay != 0.0 {
                param.mapv_inplace(|p| p * (1.0 - lr * self.weight_decay));
            }
            *param -= &update.mapv(|u| u * lr);
        }
    }

    pub fn export_state(&self) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        out.insert(
            "optim.adamw.step_count".to_string(),
            ArrayD::from_elem(IxDyn(&[]), self.step_count as f64),
        );
        for (k, v) in &self.m {
            out.insert(format!("optim.adamw.m.{k}"), v.clone());
        }
        for (k, v) in &self.v {
            out.insert(format!("optim.adamw.v.{k}"), v.clone());
        }
        out
    }

    pub fn import_state(&mut self, state: &BTreeMap<String, ArrayD<f64>>) {
        self.m.clear();
        self.v.clear();
        for (k, arr) in state {
            if k == "optim.adamw.step_count" {
                self.step_count = arr[[]] as u64;
            } else if let Some(name) = k.strip_prefix("optim.adamw.m.") {
                self.m.insert(name.to_string(), arr.clone());
            } else if let Some(name) = k.strip_prefix("optim.adamw.v.") {
                self.v.insert(name.to_string(), arr.clone());
            }
        }
    }
}

/// A ChaCha stream keyed by `(seed, label)`; used wherever code needs a
/// reproducible RNG that does not depend on call order elsewhere.
pub fn rng_for(seed: u64, label: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha20Rng::from_seed(key)
}

/// Box-Muller standard normal.
fn normal_sample(rng: &mut ChaCha20Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen_range(0.0..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new(42);
        a.ensure("w1", &[3, 3], Init::Normal { std: 1.0 });
        a.ensure("w2", &[2], Init::Normal { std: 1.0 });
        let mut b = ParamStore::new(42);
        b.ensure("w2", &[2], Init::Normal { std: 1.0 });
        b.ensure("w1", &[3, 3], Init::Normal { std: 1.0 });
        assert_eq!(a.get("w1"), b.get("w1"));
        assert_eq!(a.get("w2"), b.get("w2"));
    }

    #[test]
    fn checkpoint_roundtrip_identical_bytes() {
        let dir = tempdir().unwrap();
        let mut store = ParamStore::new(7);
        store.ensure("a.weight", &[4, 2], Init::XavierUniform { fan_in: 4, fan_out: 2 });
        store.ensure("a.bias", &[2], Init::Zeros);
        let p1 = dir.path().join("ck1.bin");
        let p2 = dir.path().join("ck2.bin");
        store.save(&p1, "{\"cfg\":1}").unwrap();
        let (loaded, echo) = ParamStore::load(&p1).unwrap();
        assert_eq!(echo, "{\"cfg\":1}");
        loaded.save(&p2, &echo).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut store = ParamStore::new(0);
        store.ensure("p", &[1], Init::Constant(1.0));
        let mut opt = Sgd::new(0.0, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), ArrayD::from_elem(IxDyn(&[1]), 2.0));
        opt.step(&mut store, &grads, 0.1);
        assert!((store.get("p").unwrap()[[0]] - 0.8).abs() < 1e-12);
    }
}
