//! Parameter storage and multilayer perceptrons.
//!
//! Parameters live outside any graph as plain `f64` buffers in a
//! [`ParamStore`]. Each forward pass binds them into a fresh [`Graph`] as
//! gradient-tracked leaves; after backward, gradients are read back in store
//! order and handed to the optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered, name-addressed collection of parameter tensors. Iteration order
/// is insertion order, which fixes the gradient layout and the checkpoint
/// layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        if shape.iter().product::<usize>() != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "parameter {name:?}: shape {shape:?} does not describe {} elements",
                data.len()
            )));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i])
    }

    /// Appends every entry of `other`, erroring on name collisions.
    pub fn extend(&mut self, other: &ParamStore) -> Result<()> {
        for e in &other.entries {
            self.add(e.name.clone(), e.shape.clone(), e.data.clone())?;
        }
        Ok(())
    }

    /// Copy of the entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for e in &self.entries {
            if e.name.starts_with(prefix) {
                out.add(e.name.clone(), e.shape.clone(), e.data.clone())
                    .expect("subset of a valid store");
            }
        }
        out
    }

    /// Binds every parameter into `graph` as a leaf. `trainable` controls
    /// whether the leaves request gradients (a frozen net binds read-only).
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        let mut ids = Vec::with_capacity(self.entries.len());
        let mut map = HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            let id = graph
                .leaf(&e.shape, e.data.clone(), trainable)
                .expect("store entries are valid tensors");
            map.insert(e.name.clone(), id);
            ids.push(id);
        }
        BoundParams { ids, map }
    }

    /// Gradients for every parameter, in store order, after a backward pass.
    pub fn gradients(&self, graph: &Graph, bound: &BoundParams) -> Result<Vec<Vec<f64>>> {
        self.entries
            .iter()
            .zip(&bound.ids)
            .map(|(e, &id)| {
                graph
                    .grad(id)
                    .map(|g| g.to_vec())
                    .ok_or_else(|| Error::contract(format!("no gradient for parameter {:?}", e.name)))
            })
            .collect()
    }
}

/// Graph handles for one binding of a [`ParamStore`].
pub struct BoundParams {
    ids: Vec<TensorId>,
    map: HashMap<String, TensorId>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> TensorId {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not bound"))
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

/// Layer sizes of an MLP: `sizes[0]` inputs through `sizes.last()` outputs.
/// Layers alternate affine + relu; the final layer is affine.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub prefix: String,
    pub sizes: Vec<usize>,
}

impl MlpSpec {
    pub fn new(prefix: impl Into<String>, sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        MlpSpec {
            prefix: prefix.into(),
            sizes,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    fn names(&self, layer: usize) -> (String, String) {
        (
            format!("{}.{}.w", self.prefix, layer),
            format!("{}.{}.b", self.prefix, layer),
        )
    }

    /// Registers Xavier-uniform weights and zero biases.
    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for layer in 0..self.layer_count() {
            let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let (wn, bn) = self.names(layer);
            store.add(wn, vec![fan_in, fan_out], w)?;
            store.add(bn, vec![fan_out], vec![0.0; fan_out])?;
        }
        Ok(())
    }

    /// Like [`MlpSpec::register`], but the final layer starts at zero weights
    /// with the given bias, so the initial output is `final_bias` for any
    /// input. Used by pose heads to start from a well-defined pose.
    pub fn register_zero_final(
        &self,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        final_bias: &[f64],
    ) -> Result<()> {
        let last = self.layer_count() - 1;
        if final_bias.len() != self.sizes[last + 1] {
            return Err(Error::contract(format!(
                "{}: final bias has {} values, layer emits {}",
                self.prefix,
                final_bias.len(),
                self.sizes[last + 1]
            )));
        }
        for layer in 0..self.layer_count() {
            let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
            let (wn, bn) = self.names(layer);
            if layer == last {
                store.add(wn, vec![fan_in, fan_out], vec![0.0; fan_in * fan_out])?;
                store.add(bn, vec![fan_out], final_bias.to_vec())?;
            } else {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w: Vec<f64> = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                store.add(wn, vec![fan_in, fan_out], w)?;
                store.add(bn, vec![fan_out], vec![0.0; fan_out])?;
            }
        }
        Ok(())
    }

    /// Forward pass. Accepts `[P×in]` (pointwise over rows) or a flat `[in]`
    /// vector, returning the matching rank.
    pub fn forward(&self, g: &mut Graph, params: &BoundParams, x: TensorId) -> Result<TensorId> {
        let (flat, mut h) = match *g.shape(x) {
            [_, _] => (false, x),
            [n] => (true, g.reshape(x, &[1, n])?),
            _ => {
                return Err(Error::BadShape {
                    op: "mlp_forward",
                    expected: "a 1-D or 2-D input",
                    got: g.shape(x).to_vec(),
                })
            }
        };
        for layer in 0..self.layer_count() {
            let (wn, bn) = self.names(layer);
            let z = g.matmul(h, params.get(&wn))?;
            h = g.add_row_broadcast(z, params.get(&bn))?;
            if layer + 1 < self.layer_count() {
                h = g.relu(h);
            }
        }
        if flat {
            let d = g.shape(h)[1];
            h = g.reshape(h, &[d])?;
        }
        Ok(h)
    }
}
