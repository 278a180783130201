//! Named parameter store shared by all network components.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    map: BTreeMap<String, Matrix<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Matrix<F>) {
        assert!(
            self.map.insert(name.to_string(), value).is_none(),
            "duplicate parameter `{name}`"
        );
    }

    pub fn get(&self, name: &str) -> &Matrix<F> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix<F> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Deterministic iteration order (BTreeMap) — checkpoint layout relies on it.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix<F>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix<F>)> {
        self.map.iter_mut()
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

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|m| m.len()).sum()
    }

    /// Put a parameter on the tape as a named leaf.
    pub fn node(&self, tape: &mut Tape<F>, name: &str) -> NodeId {
        tape.param(name, self.get(name).clone())
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<G>()))
                .collect(),
        }
    }
}

pub fn uniform_matrix<F: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    limit: f64,
) -> Matrix<F> {
    Matrix::from_fn(rows, cols, |_, _| {
        F::from_f64(rng.gen_range(-limit..limit))
    })
}

/// Uniform init with limit sqrt(1/fan_in), the usual conv/affine default.
pub fn fan_in_matrix<F: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
) -> Matrix<F> {
    uniform_matrix(rng, rows, cols, (1.0 / fan_in as f64).sqrt())
}
