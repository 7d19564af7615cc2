//! Parameter storage and the conv / bottleneck-residual building blocks.
//!
//! Construction goes through a [`ParamSink`] so the same code path can
//! either enumerate parameter shapes (planning) or allocate and initialize
//! them, keeping the two in lockstep.

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::LEAKY_SLOPE;
use crate::tensor::{Arr, Tape, Tensor};

/// Index of a named parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Arr>,
}

impl ParamSet {
    pub(crate) fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter())
    }

    pub fn values(&self) -> &[Arr] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Arr] {
        &mut self.values
    }

    pub fn element_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    #[cfg(test)]
    pub(crate) fn push(&mut self, name: String, value: Arr) {
        self.names.push(name);
        self.values.push(value);
    }
}

/// Records shapes (planning) or allocates initialized arrays (building).
pub(crate) enum ParamSink<'a> {
    Dry {
        shapes: &'a mut Vec<(String, Vec<usize>)>,
    },
    Alloc {
        set: &'a mut ParamSet,
        rng: &'a mut ChaCha8Rng,
    },
}

impl ParamSink<'_> {
    /// Fan-in normal init scaled by `scale`; biases and start states zero.
    fn tensor(
        &mut self,
        name: String,
        shape: &[usize],
        fan_in: Option<usize>,
        scale: f64,
    ) -> ParamId {
        match self {
            ParamSink::Dry { shapes } => {
                let id = ParamId(shapes.len());
                shapes.push((name, shape.to_vec()));
                id
            }
            ParamSink::Alloc { set, rng } => {
                let id = ParamId(set.values.len());
                let value = match fan_in {
                    Some(f) => {
                        let std = (1.0 / f as f64).sqrt() * scale;
                        let n: usize = shape.iter().product();
                        let data: Vec<f64> = (0..n)
                            .map(|_| {
                                let e: f64 = rng.sample(StandardNormal);
                                e * std
                            })
                            .collect();
                        Arr::from_shape_vec(IxDyn(shape), data).unwrap()
                    }
                    None => Arr::zeros(IxDyn(shape)),
                };
                set.names.push(name);
                set.values.push(value);
                id
            }
        }
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, scale: f64) -> Conv {
        let w = self.tensor(
            format!("{name}.w"),
            &[cout, cin, k, k],
            Some(cin * k * k),
            scale,
        );
        let b = self.tensor(format!("{name}.b"), &[cout], None, 1.0);
        Conv {
            w,
            b,
            pad: (k - 1) / 2,
        }
    }

    pub(crate) fn conv1x1(&mut self, name: &str, cout: usize, cin: usize, scale: f64) -> Conv {
        self.conv(name, cout, cin, 1, scale)
    }

    pub(crate) fn conv3x3(&mut self, name: &str, cout: usize, cin: usize, scale: f64) -> Conv {
        self.conv(name, cout, cin, 3, scale)
    }

    pub(crate) fn bias_state(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name.to_string(), shape, None, 1.0)
    }
}

/// One forward pass: the tape plus every parameter registered on it, leaf
/// or constant depending on whether gradients are wanted.
pub struct PassCtx {
    pub tape: Tape,
    pub param_tensors: Vec<Tensor>,
}

impl PassCtx {
    pub fn new(params: &ParamSet, trainable: bool) -> Self {
        let tape = Tape::new();
        let param_tensors = params
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        PassCtx {
            tape,
            param_tensors,
        }
    }

    pub fn p(&self, id: ParamId) -> &Tensor {
        &self.param_tensors[id.0]
    }
}

#[derive(Clone, Copy)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

impl Conv {
    pub fn apply(&self, ctx: &PassCtx, x: &Tensor) -> Tensor {
        x.conv2d(ctx.p(self.w), ctx.p(self.b), self.pad)
    }
}

/// Bottleneck stack: 1x1 reduce, two 3x3, 1x1 expand, each preceded by a
/// leaky rectifier. `residual` adds the input back (requires matching
/// widths); the final conv takes the `1/sqrt(L)` init multiplier.
pub(crate) struct ResBlock {
    c1: Conv,
    c2: Conv,
    c3: Conv,
    c4: Conv,
    residual: bool,
}

impl ResBlock {
    pub fn build(
        sink: &mut ParamSink<'_>,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        residual: bool,
        last_scale: f64,
    ) -> Self {
        assert!(!residual || cin == cout);
        ResBlock {
            c1: sink.conv1x1(&format!("{name}.c1"), mid, cin, 1.0),
            c2: sink.conv3x3(&format!("{name}.c2"), mid, mid, 1.0),
            c3: sink.conv3x3(&format!("{name}.c3"), mid, mid, 1.0),
            c4: sink.conv1x1(&format!("{name}.c4"), cout, mid, last_scale),
            residual,
        }
    }

    pub fn apply(&self, ctx: &PassCtx, x: &Tensor) -> Tensor {
        let mut h = self.c1.apply(ctx, &x.leaky_relu(LEAKY_SLOPE));
        h = self.c2.apply(ctx, &h.leaky_relu(LEAKY_SLOPE));
        h = self.c3.apply(ctx, &h.leaky_relu(LEAKY_SLOPE));
        h = self.c4.apply(ctx, &h.leaky_relu(LEAKY_SLOPE));
        if self.residual {
            x.add(&h)
        } else {
            h
        }
    }
}

/// Hidden width of a bottleneck given the block width.
pub(crate) fn bottleneck_width(width: usize, ratio: f64) -> usize {
    ((width as f64 * ratio).round() as usize).max(1)
}
