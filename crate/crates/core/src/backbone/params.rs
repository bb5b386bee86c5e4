use std::collections::BTreeMap;

use super::config::{Init, Layout};
use crate::error::{Error, Result};
use crate::num::{DenseTensor, Real, SeededRng};

/// Named parameter tensors in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub data: Vec<Vec<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn init(layout: &Layout, rng: &mut SeededRng) -> Self {
        let mut data = Vec::with_capacity(layout.specs.len());
        for (i, s) in layout.specs.iter().enumerate() {
            let n: usize = s.shape.iter().product();
            let mut r = rng.substream(i as u64);
            let v = match s.init {
                Init::Zeros => vec![T::ZERO; n],
                Init::Ones => vec![T::ONE; n],
                Init::Embedding { std } => (0..n).map(|_| T::of(std * r.gauss() as f64)).collect(),
                Init::Weight { fan_in, fan_out, scale } => {
                    let std = scale * (2.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| T::of(std * r.gauss() as f64)).collect()
                }
            };
            data.push(v);
        }
        Self {
            names: layout.specs.iter().map(|s| s.name.clone()).collect(),
            shapes: layout.specs.iter().map(|s| s.shape.clone()).collect(),
            data,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            data: self.data.iter().map(|v| vec![T::ZERO; v.len()]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn fill_zero(&mut self) {
        for v in &mut self.data {
            v.fill(T::ZERO);
        }
    }

    /// `self += other`, tensor by tensor in layout order.
    pub fn add(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            for x in v.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|v| v.iter())
            .map(|x| x.to_f64() * x.to_f64())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().flat_map(|v| v.iter()).all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            data: self
                .data
                .iter()
                .map(|v| v.iter().map(|x| U::of(x.to_f64())).collect())
                .collect(),
        }
    }

    pub fn to_tensors(&self) -> BTreeMap<String, DenseTensor> {
        self.names
            .iter()
            .zip(&self.shapes)
            .zip(&self.data)
            .map(|((n, s), v)| {
                let data = v.iter().map(|x| x.to_f64() as f32).collect();
                (n.clone(), DenseTensor::from_parts(s.clone(), data))
            })
            .collect()
    }

    /// Fills every parameter of `layout` from `tensors`, checking shapes.
    pub fn from_tensors(layout: &Layout, tensors: &BTreeMap<String, DenseTensor>) -> Result<Self> {
        let mut data = Vec::with_capacity(layout.specs.len());
        for s in &layout.specs {
            let t = tensors
                .get(&s.name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks parameter {}", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            data.push(t.data().iter().map(|&x| T::of(x as f64)).collect());
        }
        if tensors.len() != layout.specs.len() {
            return Err(Error::Invalid(format!(
                "checkpoint holds {} tensors, model has {}",
                tensors.len(),
                layout.specs.len()
            )));
        }
        Ok(Self {
            names: layout.specs.iter().map(|s| s.name.clone()).collect(),
            shapes: layout.specs.iter().map(|s| s.shape.clone()).collect(),
            data,
        })
    }
}
