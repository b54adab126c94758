use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Mat};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, named collection of trainable matrices.
///
/// Names are dotted paths (`encoder.motion.attn.q.w`); the first segment is
/// the parameter group used by checkpoints and optimizers.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Array2::from_shape_fn(shape, |_| rng.random_range(-bound..bound));
        self.add(name, value)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// All parameters whose group (first dotted segment) is `group`.
    pub fn group(&self, group: &str) -> Vec<ParamId> {
        self.ids().filter(|&id| group_of(self.name(id)) == group).collect()
    }

    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for n in &self.names {
            let g = group_of(n).to_string();
            if !out.contains(&g) {
                out.push(g);
            }
        }
        out
    }

    /// Total scalar count for the given ids.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.get(id).len()).sum()
    }

    /// Parameters grouped for serialization: `group -> name -> matrix`.
    pub fn to_groups(&self, groups: &[&str]) -> BTreeMap<String, BTreeMap<String, Mat>> {
        let mut out: BTreeMap<String, BTreeMap<String, Mat>> = BTreeMap::new();
        for id in self.ids() {
            let name = self.name(id);
            let g = group_of(name);
            if groups.contains(&g) {
                out.entry(g.to_string())
                    .or_default()
                    .insert(name.to_string(), self.get(id).clone());
            }
        }
        out
    }

    /// Overwrite values from `src` for every name present in both stores.
    /// Returns the names that were missing from `src`.
    pub fn load_named(&mut self, src: &BTreeMap<String, Mat>) -> Result<Vec<String>, String> {
        let mut missing = Vec::new();
        for i in 0..self.values.len() {
            match src.get(&self.names[i]) {
                Some(v) if v.dim() == self.values[i].dim() => self.values[i] = v.clone(),
                Some(v) => {
                    return Err(format!(
                        "shape mismatch for {}: expected {:?}, found {:?}",
                        self.names[i],
                        self.values[i].dim(),
                        v.dim()
                    ))
                }
                None => missing.push(self.names[i].clone()),
            }
        }
        Ok(missing)
    }

    /// `self <- (1 - lambda) * self + lambda * online` on the given ids.
    pub fn polyak_from(&mut self, online: &ParamStore, ids: &[ParamId], lambda: f64) {
        for &id in ids {
            let src = online.get(id);
            let dst = &mut self.values[id.0];
            ndarray::Zip::from(dst)
                .and(src)
                .for_each(|t, &o| *t = (1.0 - lambda) * *t + lambda * o);
        }
    }

    /// Sum of squared gradient entries over `ids` (missing gradients count as zero).
    pub fn grad_norm_sq(grads: &Gradients, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|&id| grads.param(id))
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}
