//! Named parameter storage, tape binding, and gradient accumulation.
//!
//! A [`ParamStore`] owns the master `f64` copies of every learnable matrix,
//! keyed by hierarchical names (`"reasoner/block0/attn/wq"`). Initialization
//! draws from a stream derived from the store seed and the parameter name,
//! so the same construction order and names always produce the same weights.
//!
//! For a forward pass, a [`Binding`] lazily places parameters on a [`Tape`]
//! (one leaf per parameter per tape) and later routes tape gradients into a
//! [`GradStore`]. Freezing works by prefix: frozen parameters simply never
//! receive updates, and their bytes can be checksummed before and after a
//! stage to prove it.

use crate::container::TensorData;
use crate::rng::DetRng;
use crate::tensor::{Grads, Mat, Tape, Var};
use sha2::{Digest, Sha256};
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Handle to one parameter in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Gaussian with the given standard deviation.
    Normal { std: f64 },
    /// Uniform on ±sqrt(6 / (fan_in + fan_out)) — the usual choice for
    /// linear layers feeding saturating nonlinearities.
    XavierUniform,
}

struct Entry {
    name: String,
    value: Arc<Mat>,
}

pub struct ParamStore {
    seed: u64,
    entries: Vec<Entry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Register a parameter. Names must be unique; the initial value is a
    /// pure function of (store seed, name, shape, init).
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let mut rng = DetRng::new(self.seed, &format!("init/{name}"));
        let value = match init {
            Init::Zeros => Mat::zeros((rows, cols)),
            Init::Const(v) => Mat::from_elem((rows, cols), v),
            Init::Normal { std } => {
                Mat::from_shape_vec((rows, cols), rng.normal_vec(rows * cols))
                    .expect("shape")
                    * std
            }
            Init::XavierUniform => {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                let data: Vec<f64> = (0..rows * cols)
                    .map(|_| (rng.uniform() * 2.0 - 1.0) * limit)
                    .collect();
                Mat::from_shape_vec((rows, cols), data).expect("shape")
            }
        };
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(Entry {
            name: name.to_string(),
            value: Arc::new(value),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Arc<Mat> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Mat) {
        assert_eq!(
            self.entries[id.0].value.dim(),
            value.dim(),
            "set_value shape for {:?}",
            self.entries[id.0].name
        );
        self.entries[id.0].value = Arc::new(value);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Ids whose names start with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    /// Total number of scalar weights (optionally restricted by prefix).
    pub fn scalar_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// SHA-256 over names, shapes, and exact value bytes of parameters under
    /// `prefix`, in name order. Used to prove frozen weights stayed frozen.
    pub fn checksum(&self, prefix: &str) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, &i) in &self.by_name {
            if !name.starts_with(prefix) {
                continue;
            }
            let v = &self.entries[i].value;
            hasher.update(name.as_bytes());
            hasher.update((v.nrows() as u64).to_le_bytes());
            hasher.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                hasher.update(x.to_bits().to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    /// Exact container records for every parameter, each name prefixed.
    pub fn to_tensors(&self, prefix: &str) -> Vec<(String, TensorData)> {
        self.entries
            .iter()
            .map(|e| {
                (
                    format!("{prefix}{}", e.name),
                    TensorData::from_mat_f64_exact(&e.value),
                )
            })
            .collect()
    }

    /// Restore parameter values from container records written by
    /// [`ParamStore::to_tensors`]. Every parameter must be present with its
    /// exact shape; unknown names under the prefix are rejected.
    pub fn apply_tensors(
        &mut self,
        entries: &[(String, TensorData)],
        prefix: &str,
    ) -> Result<(), String> {
        let mut seen = vec![false; self.entries.len()];
        for (name, t) in entries {
            let Some(bare) = name.strip_prefix(prefix) else {
                continue;
            };
            let Some(&i) = self.by_name.get(bare) else {
                return Err(format!("unknown parameter {bare:?} in checkpoint"));
            };
            let Some(m) = t.to_mat_f64_exact() else {
                return Err(format!("parameter {bare:?} has wrong encoding"));
            };
            if m.dim() != self.entries[i].value.dim() {
                return Err(format!(
                    "parameter {bare:?} shape {:?} does not match expected {:?}",
                    m.dim(),
                    self.entries[i].value.dim()
                ));
            }
            self.entries[i].value = Arc::new(m);
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(format!("parameter {:?} missing from checkpoint", self.entries[i].name));
        }
        Ok(())
    }
}

/// Lazily places store parameters onto one tape and collects their grads.
pub struct Binding<'s> {
    store: &'s ParamStore,
    vars: RefCell<Vec<Option<Var>>>,
}

impl<'s> Binding<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Binding {
            store,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    /// The tape variable for `id`, created on first use.
    pub fn var(&self, tape: &Tape, id: ParamId) -> Var {
        let mut vars = self.vars.borrow_mut();
        if let Some(v) = vars[id.index()] {
            return v;
        }
        let v = tape.input_arc(self.store.value(id).clone());
        vars[id.index()] = Some(v);
        v
    }

    /// Route tape gradients for every bound parameter into `grads`.
    pub fn collect(&self, tape_grads: &Grads, grads: &mut GradStore) {
        for (i, v) in self.vars.borrow().iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = tape_grads.get(*v) {
                    grads.accumulate(ParamId(i), g);
                }
            }
        }
    }
}

/// Accumulated gradients aligned with a [`ParamStore`].
pub struct GradStore {
    g: Vec<Option<Mat>>,
}

impl GradStore {
    pub fn new(store: &ParamStore) -> Self {
        GradStore {
            g: (0..store.len()).map(|_| None).collect(),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Mat) {
        match &mut self.g[id.0] {
            Some(m) => *m += grad,
            slot => *slot = Some(grad.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.g[id.0].as_ref()
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.g.iter_mut().flatten() {
            *g *= k;
        }
    }

    pub fn clear(&mut self) {
        for g in &mut self.g {
            *g = None;
        }
    }

    /// Euclidean norm over all accumulated gradients.
    pub fn global_norm(&self) -> f64 {
        self.g
            .iter()
            .flatten()
            .map(|m| m.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_a_function_of_seed_and_name() {
        let mut a = ParamStore::new(11);
        let mut b = ParamStore::new(11);
        let ia = a.add("layer/w", 4, 3, Init::XavierUniform);
        let ib = b.add("layer/w", 4, 3, Init::XavierUniform);
        assert_eq!(a.value(ia), b.value(ib));

        let mut c = ParamStore::new(12);
        let ic = c.add("layer/w", 4, 3, Init::XavierUniform);
        assert_ne!(a.value(ia), c.value(ic));
    }

    #[test]
    fn binding_reuses_one_leaf_per_param() {
        let mut store = ParamStore::new(1);
        let w = store.add("w", 2, 2, Init::Normal { std: 1.0 });
        let tape = Tape::new();
        let binding = Binding::new(&store);
        let v1 = binding.var(&tape, w);
        let v2 = binding.var(&tape, w);
        assert_eq!(v1, v2);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn collect_accumulates_into_grad_store() {
        let mut store = ParamStore::new(2);
        let w = store.add("w", 2, 2, Init::Const(3.0));
        let tape = Tape::new();
        let binding = Binding::new(&store);
        let wv = binding.var(&tape, w);
        let loss = tape.mean_all(tape.square(wv));
        let tg = tape.backward(loss);
        let mut gs = GradStore::new(&store);
        binding.collect(&tg, &mut gs);
        let g = gs.get(w).unwrap();
        for v in g.iter() {
            assert!((v - 2.0 * 3.0 / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_round_trip_is_exact() {
        let mut store = ParamStore::new(3);
        store.add("a/w", 3, 2, Init::Normal { std: 0.37 });
        store.add("b/w", 1, 5, Init::XavierUniform);
        let before = store.checksum("");
        let dump = store.to_tensors("model/");

        let mut store2 = ParamStore::new(99); // different seed: different init
        store2.add("a/w", 3, 2, Init::Normal { std: 0.37 });
        store2.add("b/w", 1, 5, Init::XavierUniform);
        assert_ne!(store2.checksum(""), before);
        store2.apply_tensors(&dump, "model/").unwrap();
        assert_eq!(store2.checksum(""), before);
    }

    #[test]
    fn apply_tensors_rejects_missing_and_unknown() {
        let mut store = ParamStore::new(4);
        store.add("a", 2, 2, Init::Zeros);
        store.add("b", 2, 2, Init::Zeros);
        let mut dump = store.to_tensors("");
        dump.pop();
        assert!(store.apply_tensors(&dump, "").is_err());

        let mut dump2 = store.to_tensors("");
        dump2.push(("ghost".into(), TensorData::from_f64_exact(1, 1, &[0.0])));
        assert!(store.apply_tensors(&dump2, "").is_err());
    }

    #[test]
    fn checksum_scopes_by_prefix() {
        let mut store = ParamStore::new(5);
        let a = store.add("enc/w", 2, 2, Init::Const(1.0));
        store.add("dec/w", 2, 2, Init::Const(1.0));
        let enc_before = store.checksum("enc/");
        let dec_before = store.checksum("dec/");
        store.value_mut(a)[(0, 0)] = 5.0;
        assert_ne!(store.checksum("enc/"), enc_before);
        assert_eq!(store.checksum("dec/"), dec_before);
    }
}
