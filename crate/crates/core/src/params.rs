//! Flat parameter vector with a named layout.
//!
//! Every learnable tensor in the model lives in one `Vec<f64>`; the layout
//! records `(name, offset, shape)` per tensor in declaration order, which is
//! also the order written to checkpoints.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Zero at training start (safe-start projections), random when a fully
    /// random initialization is requested.
    ZeroStart(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(rows, cols)`; rank-1 entries are a single row.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (1, self.len()),
        }
    }

    /// Parameter block used for reporting: the name up to the first dot.
    pub fn block(&self) -> &str {
        self.name.split('.').next().unwrap_or(&self.name)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    inits: Vec<Init>,
    index: HashMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, offset: self.total, shape: vec![rows, cols] });
        self.inits.push(init);
        self.total += rows * cols;
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    /// Rebuilds a layout from stored entries; offsets must be contiguous.
    pub fn from_entries(entries: Vec<ParamEntry>) -> Result<Self> {
        let mut layout = ParamLayout::new();
        for e in entries {
            if e.offset != layout.total {
                return Err(Error::Format(format!("layout entry `{}` has offset {} but {} expected", e.name, e.offset, layout.total)));
            }
            layout.index.insert(e.name.clone(), layout.entries.len());
            layout.total += e.len();
            layout.entries.push(e);
            layout.inits.push(Init::Zeros);
        }
        Ok(layout)
    }

    /// Same names, offsets and shapes.
    pub fn same_shape(&self, other: &ParamLayout) -> bool {
        self.entries == other.entries
    }

    pub fn initialize(&self, seed: u64, fully_random: bool) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.total];
        for (e, init) in self.entries.iter().zip(&self.inits) {
            let slot = &mut values[e.offset..e.offset + e.len()];
            let sd = match (*init, fully_random) {
                (Init::Normal(sd), _) | (Init::ZeroStart(sd), true) => Some(sd),
                (Init::ZeroStart(_) | Init::Zeros, false) => None,
                (Init::Zeros, true) => Some(0.1),
                (Init::Ones, false) => {
                    slot.fill(1.0);
                    None
                }
                (Init::Ones, true) => {
                    let normal = Normal::new(1.0, 0.1).unwrap();
                    slot.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
                    None
                }
            };
            if let Some(sd) = sd {
                let normal = Normal::new(0.0, sd).unwrap();
                slot.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
            }
        }
        Params { layout: self.clone(), values }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl Params {
    pub fn matrix(&self, name: &str) -> Matrix {
        let e = self.layout.entry(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let (r, c) = e.matrix_shape();
        Matrix::from_vec(r, c, self.values[e.offset..e.offset + e.len()].to_vec())
    }

    pub fn set_matrix(&mut self, name: &str, m: &Matrix) {
        let e = self.layout.entry(name).unwrap_or_else(|| panic!("unknown parameter `{name}`")).clone();
        assert_eq!(e.matrix_shape(), m.shape(), "shape of `{name}`");
        self.values[e.offset..e.offset + e.len()].copy_from_slice(m.data());
    }

    /// Zeroes every entry whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for e in self.layout.entries.clone() {
            if e.name.starts_with(prefix) {
                self.values[e.offset..e.offset + e.len()].fill(0.0);
            }
        }
    }

    /// Places every entry on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .layout
            .entries
            .iter()
            .map(|e| {
                let (r, c) = e.matrix_shape();
                tape.leaf(Matrix::from_vec(r, c, self.values[e.offset..e.offset + e.len()].to_vec()))
            })
            .collect();
        Bound { vars, index: self.layout.index.clone() }
    }
}

/// Tape handles for a [`Params`] vector.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        let i = self.index.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        self.vars[*i]
    }

    /// Flattens the leaf gradients back into layout order.
    pub fn gather(&self, layout: &ParamLayout, grads: &Gradients) -> Vec<f64> {
        let mut out = vec![0.0; layout.total()];
        for (e, &v) in layout.entries().iter().zip(&self.vars) {
            out[e.offset..e.offset + e.len()].copy_from_slice(grads.get(v).data());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_offsets_are_contiguous() {
        let mut l = ParamLayout::new();
        l.push("a.w", 2, 3, Init::Normal(1.0));
        l.push("a.b", 1, 3, Init::Zeros);
        l.push("b.g", 1, 4, Init::Ones);
        assert_eq!(l.total(), 13);
        assert_eq!(l.entry("b.g").unwrap().offset, 9);
        assert_eq!(l.entry("a.b").unwrap().block(), "a");
        let rebuilt = ParamLayout::from_entries(l.entries().to_vec()).unwrap();
        assert!(rebuilt.same_shape(&l));
    }

    #[test]
    fn zero_start_respects_mode() {
        let mut l = ParamLayout::new();
        l.push("head.w", 3, 3, Init::ZeroStart(0.5));
        l.push("ln.g", 1, 3, Init::Ones);
        let p = l.initialize(1, false);
        assert!(p.matrix("head.w").data().iter().all(|&x| x == 0.0));
        assert!(p.matrix("ln.g").data().iter().all(|&x| x == 1.0));
        let r = l.initialize(1, true);
        assert!(r.matrix("head.w").data().iter().any(|&x| x != 0.0));
        assert_eq!(l.initialize(1, true), r);
    }
}
