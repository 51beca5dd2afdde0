//! Reverse-mode automatic differentiation over small dense float64 tensors.
//!
//! The crate is organised around a [`Tape`]: forward operations on [`Var`]
//! handles record their inputs and a backward rule, and [`backward`] replays
//! the records in reverse to accumulate gradients. Trainable state lives in a
//! [`ParamStore`] so that optimizers and checkpoints can address every array
//! by name. On top of the raw tape sit the usual neural building blocks
//! (linear, layer norm, softmax, multi-head self-attention, feed-forward,
//! graph attention) in [`nn`], plus SGD/Adam in [`optim`] and a binary
//! checkpoint container in [`checkpoint`].
//!
//! Everything is f64 and single-threaded; with fixed seeds, forward passes,
//! gradients and optimizer steps are bit-reproducible.

pub mod array;
pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod tape;

pub use array::Array;
pub use tape::{backward, Gradients, Tape, Var};

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

/// Errors reported by parameter and checkpoint handling. Shape mismatches in
/// tensor arithmetic are programming errors and panic instead.
#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error("parameter {name}: stored shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unknown parameter {0}")]
    MissingParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
}

/// A named trainable array. Cheap to clone; the value is shared, so updates
/// through one handle are visible everywhere the parameter is used.
#[derive(Clone)]
pub struct Param {
    name: Rc<str>,
    value: Rc<RefCell<Rc<Array>>>,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> Rc<Array> {
        self.value.borrow().clone()
    }

    pub fn set(&self, value: Array) {
        let current = self.value.borrow();
        assert_eq!(
            current.shape(),
            value.shape(),
            "parameter {} cannot change shape",
            self.name
        );
        drop(current);
        *self.value.borrow_mut() = Rc::new(value);
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, shape {:?})", self.name, self.value().shape())
    }
}

/// Ordered registry of parameters. Iteration order is the lexicographic name
/// order, which keeps optimizers and checkpoints deterministic.
#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique within the store.
    pub fn create(&mut self, name: &str, init: Array) -> Param {
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter {name}"
        );
        let param = Param {
            name: Rc::from(name),
            value: Rc::new(RefCell::new(Rc::new(init))),
        };
        self.params.insert(name.to_string(), param.clone());
        param
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value().len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }
}
