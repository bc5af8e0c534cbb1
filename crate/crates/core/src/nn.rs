//! Layer handles over a [`ParamStore`]: each layer remembers its slot indices.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Real, Var};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dense {
    w: usize,
    b: usize,
}

impl Dense {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        let w = store.push_he(&format!("{name}.w"), &[out, inp], inp, rng);
        let b = store.push_zeros(&format!("{name}.b"), &[out]);
        Self { w, b }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        g.linear(x, vars[self.w], vars[self.b])
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
    stride: usize,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.push_he(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k, rng);
        let b = store.push_zeros(&format!("{name}.b"), &[cout]);
        Self { w, b, stride }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, vars[self.w], vars[self.b], self.stride)
    }
}

/// Stride-2, 4×4 transposed convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvUp {
    w: usize,
    b: usize,
}

impl ConvUp {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        // each output pixel sees cin·k²/s² inputs
        let w = store.push_he(&format!("{name}.w"), &[cin, cout, 4, 4], cin * 4, rng);
        let b = store.push_zeros(&format!("{name}.b"), &[cout]);
        Self { w, b }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        g.conv_transpose2d(x, vars[self.w], vars[self.b])
    }
}
