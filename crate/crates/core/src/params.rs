//! Learnable-parameter traversal and seeded initialization.

use crate::error::{check_dim, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Anything holding learnable scalars (convolution weights and biases,
/// batch-norm affine terms).
///
/// Gradients are returned in a container of the same type, so `flatten()` of
/// parameters and of their gradients line up entry for entry.
pub trait Parameters {
    /// Visits each learnable buffer in a fixed order.
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    /// Exact count of learnable scalars.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |buf| n += buf.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |buf| out.extend_from_slice(buf));
        out
    }

    fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        check_dim("load_flat", "parameter count", self.param_count(), values.len())?;
        let mut pos = 0;
        self.visit_mut(&mut |buf| {
            buf.copy_from_slice(&values[pos..pos + buf.len()]);
            pos += buf.len();
        });
        Ok(())
    }
}

impl<T: Parameters> Parameters for Vec<T> {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for p in self {
            p.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for p in self {
            p.visit_mut(f);
        }
    }
}

/// How freshly built layers draw their weights and biases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform in `[-bound, bound)`.
    Uniform(f64),
    /// Uniform in `[-sqrt(3/fan_in), sqrt(3/fan_in))`, which keeps activations
    /// at unit scale through deep stacks.
    FanIn,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::Uniform(0.01)
    }
}

impl InitScheme {
    pub fn bound(self, fan_in: usize) -> f64 {
        match self {
            InitScheme::Uniform(b) => b,
            InitScheme::FanIn => (3.0 / fan_in.max(1) as f64).sqrt(),
        }
    }
}

/// The generator every seeded construction in the library draws from.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
