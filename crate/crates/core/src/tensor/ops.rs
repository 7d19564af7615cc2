//! Elementwise, reduction and shape operations with broadcast semantics
//! matching NumPy (shapes aligned from the trailing axis).

use ndarray::{Axis, IxDyn, Slice, Zip};

use super::{Arr, GradFn, Tensor};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() {
            1
        } else {
            a[i - (n - a.len())]
        };
        let db = if i < n - b.len() {
            1
        } else {
            b[i - (n - b.len())]
        };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum a broadcast gradient back down to the original shape.
pub(crate) fn unbroadcast(mut g: Arr, target: &[usize]) -> Arr {
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &td) in target.iter().enumerate() {
        if td == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn bcast_zip(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    if a.shape() == b.shape() {
        return Zip::from(a).and(b).map_collect(|&x, &y| f(x, y));
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

pub(crate) fn reshape_arr(x: &Arr, shape: &[usize]) -> Arr {
    let owned = if x.is_standard_layout() {
        x.clone()
    } else {
        x.as_standard_layout().into_owned()
    };
    owned
        .into_shape(IxDyn(shape))
        .expect("reshape: element count mismatch")
}

impl Tensor {
    fn unary(&self, value: Arr, df: impl Fn(&Arr) -> Arr + 'static) -> Tensor {
        let needs = self.needs_grad();
        let grad_fn: Option<GradFn> = if needs {
            Some(Box::new(move |up| vec![Some(df(up))]))
        } else {
            None
        };
        self.tape.push(value, vec![self.id], grad_fn, needs)
    }

    fn binary(
        &self,
        other: &Tensor,
        value: Arr,
        dfa: impl Fn(&Arr) -> Arr + 'static,
        dfb: impl Fn(&Arr) -> Arr + 'static,
    ) -> Tensor {
        assert!(
            std::rc::Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "operands must live on the same tape"
        );
        let (na, nb) = (self.needs_grad(), other.needs_grad());
        let grad_fn: Option<GradFn> = if na || nb {
            Some(Box::new(move |up| {
                vec![
                    if na { Some(dfa(up)) } else { None },
                    if nb { Some(dfb(up)) } else { None },
                ]
            }))
        } else {
            None
        };
        self.tape
            .push(value, vec![self.id, other.id], grad_fn, na || nb)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.binary(
            other,
            bcast_zip(&a, &b, |x, y| x + y),
            move |up| unbroadcast(up.clone(), &sa),
            move |up| unbroadcast(up.clone(), &sb),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.binary(
            other,
            bcast_zip(&a, &b, |x, y| x - y),
            move |up| unbroadcast(up.clone(), &sa),
            move |up| unbroadcast(-up.clone(), &sb),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let (ac, bc) = (a.clone(), b.clone());
        self.binary(
            other,
            bcast_zip(&a, &b, |x, y| x * y),
            move |up| unbroadcast(bcast_zip(up, &bc, |u, y| u * y), &sa),
            move |up| unbroadcast(bcast_zip(up, &ac, |u, x| u * x), &sb),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let (ac, bc) = (a.clone(), b.clone());
        let bc2 = b.clone();
        self.binary(
            other,
            bcast_zip(&a, &b, |x, y| x / y),
            move |up| unbroadcast(bcast_zip(up, &bc, |u, y| u / y), &sa),
            move |up| {
                let t = bcast_zip(up, &ac, |u, x| u * x);
                unbroadcast(bcast_zip(&t, &bc2, |t, y| -t / (y * y)), &sb)
            },
        )
    }

    pub fn neg(&self) -> Tensor {
        self.unary(self.value().mapv(|x| -x), |up| -up.clone())
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(self.value().mapv(|x| x + c), |up| up.clone())
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary(self.value().mapv(|x| x * c), move |up| up.mapv(|u| u * c))
    }

    pub fn exp(&self) -> Tensor {
        let y = self.value().mapv(f64::exp);
        let yc = y.clone();
        self.unary(y, move |up| up * &yc)
    }

    pub fn recip(&self) -> Tensor {
        let y = self.value().mapv(f64::recip);
        let yc = y.clone();
        self.unary(y, move |up| {
            Zip::from(up).and(&yc).map_collect(|&u, &r| -u * r * r)
        })
    }

    pub fn ln(&self) -> Tensor {
        let x = self.value();
        let xc = x.clone();
        self.unary(x.mapv(f64::ln), move |up| {
            Zip::from(up).and(&xc).map_collect(|&u, &x| u / x)
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let y = self.value().mapv(stable_sigmoid);
        let yc = y.clone();
        self.unary(y, move |up| {
            Zip::from(up)
                .and(&yc)
                .map_collect(|&u, &s| u * s * (1.0 - s))
        })
    }

    pub fn tanh(&self) -> Tensor {
        let y = self.value().mapv(f64::tanh);
        let yc = y.clone();
        self.unary(y, move |up| {
            Zip::from(up)
                .and(&yc)
                .map_collect(|&u, &t| u * (1.0 - t * t))
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let x = self.value();
        let xc = x.clone();
        self.unary(
            x.mapv(|v| if v >= 0.0 { v } else { slope * v }),
            move |up| {
                Zip::from(up)
                    .and(&xc)
                    .map_collect(|&u, &x| if x >= 0.0 { u } else { slope * u })
            },
        )
    }

    /// `(1/beta) * ln(1 + exp(beta * x))`, overflow-safe; gradient is
    /// `sigmoid(beta * x)`, bounded in (0, 1).
    pub fn softplus_beta(&self, beta: f64) -> Tensor {
        assert!(beta > 0.0, "softplus smoothing multiplier must be positive");
        let x = self.value();
        let xc = x.clone();
        self.unary(x.mapv(|v| softplus_scaled(v, beta)), move |up| {
            Zip::from(up)
                .and(&xc)
                .map_collect(|&u, &x| u * stable_sigmoid(beta * x))
        })
    }

    pub fn clamp_min(&self, lo: f64) -> Tensor {
        let x = self.value();
        let xc = x.clone();
        self.unary(x.mapv(|v| v.max(lo)), move |up| {
            Zip::from(up)
                .and(&xc)
                .map_collect(|&u, &x| if x > lo { u } else { 0.0 })
        })
    }

    pub fn clamp_max(&self, hi: f64) -> Tensor {
        let x = self.value();
        let xc = x.clone();
        self.unary(x.mapv(|v| v.min(hi)), move |up| {
            Zip::from(up)
                .and(&xc)
                .map_collect(|&u, &x| if x < hi { u } else { 0.0 })
        })
    }

    pub fn sum_all(&self) -> Tensor {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(Arr::from_elem(IxDyn(&[]), x.sum()), move |up| {
            Arr::from_elem(IxDyn(&shape), up.sum())
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    pub fn sum_axis_keepdim(&self, ax: usize) -> Tensor {
        let x = self.value();
        let shape = x.shape().to_vec();
        let value = x.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        self.unary(value, move |up| {
            up.broadcast(IxDyn(&shape)).expect("sum grad").to_owned()
        })
    }

    pub fn sum_axis(&self, ax: usize) -> Tensor {
        let x = self.value();
        let shape = x.shape().to_vec();
        let value = x.sum_axis(Axis(ax));
        self.unary(value, move |up| {
            up.clone()
                .insert_axis(Axis(ax))
                .broadcast(IxDyn(&shape))
                .expect("sum grad")
                .to_owned()
        })
    }

    /// Per-axis maximum as a constant (not differentiated); used as the
    /// stabilizing shift inside [`Tensor::logsumexp_keepdim`].
    pub fn max_axis_detached(&self, ax: usize) -> Tensor {
        let m = self
            .value()
            .fold_axis(Axis(ax), f64::NEG_INFINITY, |&acc, &v| acc.max(v))
            .insert_axis(Axis(ax));
        self.tape.constant(m)
    }

    /// `ln Σ exp` over one axis, keeping the axis with size 1. The shift by
    /// the detached max leaves the gradient exact (softmax weights).
    pub fn logsumexp_keepdim(&self, ax: usize) -> Tensor {
        let m = self.max_axis_detached(ax);
        self.sub(&m).exp().sum_axis_keepdim(ax).ln().add(&m)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let x = self.value();
        let orig = x.shape().to_vec();
        self.unary(reshape_arr(&x, shape), move |up| reshape_arr(up, &orig))
    }

    pub fn slice_axis(&self, ax: usize, start: usize, len: usize) -> Tensor {
        let x = self.value();
        let shape = x.shape().to_vec();
        let value = x
            .slice_axis(Axis(ax), Slice::from(start..start + len))
            .to_owned();
        self.unary(value, move |up| {
            let mut g = Arr::zeros(IxDyn(&shape));
            g.slice_axis_mut(Axis(ax), Slice::from(start..start + len))
                .assign(up);
            g
        })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        let x = self.value();
        let orig = x.shape().to_vec();
        let value = x.broadcast(IxDyn(shape)).expect("broadcast_to").to_owned();
        self.unary(value, move |up| unbroadcast(up.clone(), &orig))
    }

    pub fn concat(parts: &[&Tensor], ax: usize) -> Tensor {
        assert!(!parts.is_empty());
        let tape = parts[0].tape.clone();
        let values: Vec<Arr> = parts.iter().map(|t| t.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let value = ndarray::concatenate(Axis(ax), &views).expect("concat shapes");
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[ax]).collect();
        let needs: Vec<bool> = parts.iter().map(|t| t.needs_grad()).collect();
        let any = needs.iter().any(|&b| b);
        let grad_fn: Option<GradFn> = if any {
            let needs = needs.clone();
            Some(Box::new(move |up| {
                let mut out = Vec::with_capacity(lens.len());
                let mut offset = 0;
                for (i, &l) in lens.iter().enumerate() {
                    if needs[i] {
                        out.push(Some(
                            up.slice_axis(Axis(ax), Slice::from(offset..offset + l))
                                .to_owned(),
                        ));
                    } else {
                        out.push(None);
                    }
                    offset += l;
                }
                out
            }))
        } else {
            None
        };
        tape.push(value, parts.iter().map(|t| t.id).collect(), grad_fn, any)
    }
}

/// Overflow-safe scalar sigmoid.
pub fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scaled(x: f64, beta: f64) -> f64 {
    let z = beta * x;
    (z.max(0.0) + (-z.abs()).exp().ln_1p()) / beta
}
