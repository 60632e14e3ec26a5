//! Named parameter storage shared by the online model, its momentum twin,
//! and the optimizer state.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Flat registry of named matrices. Insertion order is fixed at model build
/// time, so two stores built from the same config align index-by-index.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    vals: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.vals.push(value);
        ParamId(self.vals.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.vals[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.vals[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.vals
            .iter()
            .enumerate()
            .map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    pub fn total_scalars(&self) -> usize {
        self.vals.iter().map(|m| m.len()).sum()
    }

    /// True when both stores have identical layout and bitwise-equal values.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.vals.len() == other.vals.len()
            && self
                .vals
                .iter()
                .zip(&other.vals)
                .all(|(a, b)| a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x == y))
    }
}

/// Gradient buffers with the same layout as a `ParamStore`.
#[derive(Clone, Debug)]
pub struct GradStore {
    vals: Vec<Mat>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> GradStore {
        GradStore { vals: store.vals.iter().map(|m| Mat::zeros(m.raw_dim())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.vals[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.vals[id.0]
    }

    pub fn add_assign(&mut self, other: &GradStore) {
        assert_eq!(self.vals.len(), other.vals.len(), "grad store layout mismatch");
        for (a, b) in self.vals.iter_mut().zip(&other.vals) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for m in &mut self.vals {
            m.mapv_inplace(|v| v * c);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.vals.iter().enumerate().map(|(i, m)| (ParamId(i), m))
    }

    pub fn max_abs(&self) -> f64 {
        self.vals
            .iter()
            .flat_map(|m| m.iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

/// Exponential moving average: `target <- m * target + (1 - m) * source`,
/// elementwise over every parameter.
pub fn ema_update(target: &mut ParamStore, source: &ParamStore, m: f64) -> Result<(), String> {
    if !(0.0..=1.0).contains(&m) {
        return Err(format!("momentum coefficient {m} outside [0,1]"));
    }
    if target.vals.len() != source.vals.len() {
        return Err("parameter count mismatch between momentum twin and online store".to_string());
    }
    for (t, s) in target.vals.iter_mut().zip(&source.vals) {
        if t.shape() != s.shape() {
            return Err("parameter shape drift between momentum twin and online store".to_string());
        }
        ndarray::Zip::from(t).and(s).for_each(|tv, &sv| {
            *tv = m * *tv + (1.0 - m) * sv;
        });
    }
    Ok(())
}
