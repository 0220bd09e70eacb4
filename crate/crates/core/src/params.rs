//! Named parameter trees.
//!
//! Layer structs are generic over the leaf type: `Shape` while planning a
//! model, [`Param`] for stored weights and [`Var`] once bound into a
//! [`Graph`]. Every tree exposes the same traversal (`visit`, `visit_mut`,
//! `map_named`) so archives, optimizers and parameter audits share one
//! naming scheme.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::graph::{Graph, Tensor, Var};

/// Stored parameter tensor.
pub type Param = Arc<Tensor>;

/// `[rows, cols]` of a planned tensor.
pub type Shape = [usize; 2];

/// Joins a tree path. A prefix ending in `/` acts as a namespace.
pub fn join(prefix: &str, child: &str) -> String {
    if prefix.is_empty() || prefix.ends_with('/') {
        format!("{prefix}{child}")
    } else {
        format!("{prefix}.{child}")
    }
}

/// Implements traversal for a struct whose fields are all leaves.
macro_rules! param_leaves {
    ($ty:ident { $($field:ident),+ $(,)? }) => {
        impl<T> $ty<T> {
            pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
                $( f(&$crate::params::join(prefix, stringify!($field)), &self.$field); )+
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $( f(&$crate::params::join(prefix, stringify!($field)), &mut self.$field); )+
            }

            pub fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $ty<U> {
                $ty { $( $field: f(&$crate::params::join(prefix, stringify!($field)), &self.$field), )+ }
            }
        }
    };
}

/// Implements traversal for a struct whose fields are all sub-trees.
macro_rules! param_tree {
    ($ty:ident { $($field:ident),+ $(,)? }) => {
        impl<T> $ty<T> {
            pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
                $( self.$field.visit(&$crate::params::join(prefix, stringify!($field)), f); )+
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $( self.$field.visit_mut(&$crate::params::join(prefix, stringify!($field)), f); )+
            }

            pub fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $ty<U> {
                $ty { $( $field: self.$field.map_named(&$crate::params::join(prefix, stringify!($field)), f), )+ }
            }
        }
    };
}

pub(crate) use param_leaves;
pub(crate) use param_tree;

/// Affine map over channels: `y = x · weight + bias`, weight `[in, out]`,
/// bias `[1, out]`. On a token grid this is a 1×1 convolution; after
/// [`Graph::im2col`] it is a full k×k convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

param_leaves!(Linear { weight, bias });

impl Linear<Shape> {
    pub fn shape(inputs: usize, outputs: usize) -> Self {
        Linear { weight: [inputs, outputs], bias: [1, outputs] }
    }
}

impl Linear<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> crate::Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_row(y, self.bias)
    }
}

/// Layer-norm affine parameters, both `[1, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

param_leaves!(Norm { gamma, beta });

impl Norm<Shape> {
    pub fn shape(channels: usize) -> Self {
        Norm { gamma: [1, channels], beta: [1, channels] }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

impl Norm<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> crate::Result<Var> {
        g.layer_norm(x, self.gamma, self.beta, LAYER_NORM_EPS)
    }
}

/// Number of scalars in a planned tensor.
pub fn numel(shape: &Shape) -> usize {
    shape[0] * shape[1]
}

/// Draws a tensor uniformly from `±1/sqrt(fan_in)`, the usual default for
/// linear and convolution weights.
pub fn fan_in_uniform(rng: &mut impl Rng, shape: Shape, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_shape_fn((shape[0], shape[1]), |_| rng.random_range(-bound..bound))
}

pub fn normal(rng: &mut impl Rng, shape: Shape, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_shape_fn((shape[0], shape[1]), |_| dist.sample(rng))
}

/// Rounds every element through `f32`, so stored weights round-trip
/// bitwise through single-precision archives.
pub fn to_f32_grid(mut t: Tensor) -> Tensor {
    t.mapv_inplace(|v| v as f32 as f64);
    t
}

/// SHA-256 over names, shapes and little-endian values of a parameter
/// sequence, in traversal order.
#[derive(Default)]
pub struct Checksum(Sha256);

impl Checksum {
    pub fn update(&mut self, name: &str, t: &Tensor) {
        self.0.update(name.as_bytes());
        self.0.update((t.nrows() as u64).to_le_bytes());
        self.0.update((t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            self.0.update(v.to_le_bytes());
        }
    }

    pub fn finish(self) -> String {
        self.0.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn join_respects_namespaces() {
        assert_eq!(join("", "a"), "a");
        assert_eq!(join("a", "b"), "a.b");
        assert_eq!(join("prompter/", "uep"), "prompter/uep");
    }

    #[test]
    fn linear_visits_in_declaration_order() {
        let l = Linear::shape(3, 2);
        let mut seen = Vec::new();
        l.visit("fc", &mut |n, s| seen.push((n.to_string(), *s)));
        assert_eq!(seen, vec![("fc.weight".into(), [3, 2]), ("fc.bias".into(), [1, 2])]);
    }
}
