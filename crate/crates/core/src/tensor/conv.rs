//! Spatial ops on NCHW tensors: stride-1 convolution (im2col + GEMM),
//! average pooling and nearest-neighbor upsampling.

use ndarray::{Array2, Array4, ArrayView4, Axis};

use super::{Arr, GradFn, Tensor};

fn as4(x: &Arr) -> ArrayView4<'_, f64> {
    x.view()
        .into_dimensionality()
        .expect("expected NCHW tensor")
}

fn im2col(x: &ArrayView4<'_, f64>, k: usize, pad: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let mut cols = Array2::zeros((c * k * k, n * ho * wo));
    for ni in 0..n {
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    for oh in 0..ho {
                        let ih = oh + ki;
                        if ih < pad || ih >= h + pad {
                            continue;
                        }
                        for ow in 0..wo {
                            let iw = ow + kj;
                            if iw < pad || iw >= w + pad {
                                continue;
                            }
                            cols[[row, (ni * ho + oh) * wo + ow]] = x[[ni, ci, ih - pad, iw - pad]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) -> Array4<f64> {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let mut x = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    for oh in 0..ho {
                        let ih = oh + ki;
                        if ih < pad || ih >= h + pad {
                            continue;
                        }
                        for ow in 0..wo {
                            let iw = ow + kj;
                            if iw < pad || iw >= w + pad {
                                continue;
                            }
                            x[[ni, ci, ih - pad, iw - pad]] +=
                                cols[[row, (ni * ho + oh) * wo + ow]];
                        }
                    }
                }
            }
        }
    }
    x
}

fn gemm_to_nchw(y2: &Array2<f64>, n: usize, cout: usize, ho: usize, wo: usize) -> Arr {
    // y2 is [cout, n*ho*wo] with n-major columns.
    let y = y2
        .to_owned()
        .into_shape((cout, n, ho, wo))
        .expect("conv output reshape")
        .permuted_axes([1, 0, 2, 3]);
    y.as_standard_layout().to_owned().into_dyn()
}

fn nchw_to_gemm(dy: &Arr) -> Array2<f64> {
    let v = as4(dy);
    let (n, cout, ho, wo) = v.dim();
    let p = v.permuted_axes([1, 0, 2, 3]);
    p.as_standard_layout()
        .to_owned()
        .into_shape((cout, n * ho * wo))
        .expect("conv grad reshape")
}

impl Tensor {
    /// Stride-1 2-d convolution with square kernel and symmetric zero
    /// padding, plus per-output-channel bias. `x`: `[N, Cin, H, W]`,
    /// `weight`: `[Cout, Cin, k, k]`, `bias`: `[Cout]`.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, pad: usize) -> Tensor {
        let xv = self.value();
        let wv = weight.value();
        let bv = bias.value();
        let x4 = as4(&xv);
        let (n, cin, h, w) = x4.dim();
        let wshape = wv.shape().to_vec();
        assert_eq!(wshape.len(), 4, "conv weight must be [Cout, Cin, k, k]");
        let (cout, wcin, k) = (wshape[0], wshape[1], wshape[2]);
        assert_eq!(wshape[2], wshape[3], "conv kernel must be square");
        assert_eq!(
            cin, wcin,
            "conv channel mismatch: input {cin}, weight {wcin}"
        );
        assert_eq!(bv.len(), cout, "conv bias length mismatch");
        let ho = h + 2 * pad + 1 - k;
        let wo = w + 2 * pad + 1 - k;

        let cols = im2col(&x4, k, pad);
        let w2 = wv
            .view()
            .into_shape((cout, cin * k * k))
            .expect("conv weight reshape");
        let mut y2 = w2.dot(&cols);
        for (mut row, &b) in y2.axis_iter_mut(Axis(0)).zip(bv.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let value = gemm_to_nchw(&y2, n, cout, ho, wo);

        let (nx, nw, nb) = (self.needs_grad(), weight.needs_grad(), bias.needs_grad());
        let grad_fn: Option<GradFn> = if nx || nw || nb {
            let cols = cols;
            let wv = wv.clone();
            Some(Box::new(move |up| {
                let dy2 = nchw_to_gemm(up);
                let dx = if nx {
                    let w2 = wv
                        .view()
                        .into_shape((cout, cin * k * k))
                        .expect("conv weight reshape");
                    let dcols = w2.t().dot(&dy2);
                    Some(col2im(&dcols, n, cin, h, w, k, pad).into_dyn())
                } else {
                    None
                };
                let dw = if nw {
                    let dw2 = dy2.dot(&cols.t());
                    Some(
                        dw2.into_shape((cout, cin, k, k))
                            .expect("conv dW reshape")
                            .into_dyn(),
                    )
                } else {
                    None
                };
                let db = if nb {
                    Some(dy2.sum_axis(Axis(1)).into_dyn())
                } else {
                    None
                };
                vec![dx, dw, db]
            }))
        } else {
            None
        };
        self.tape.push(
            value,
            vec![self.id, weight.id, bias.id],
            grad_fn,
            nx || nw || nb,
        )
    }

    /// Mean over non-overlapping `factor x factor` windows.
    pub fn avg_pool2d(&self, factor: usize) -> Tensor {
        let xv = self.value();
        let value = avg_pool2d_arr(&xv, factor);
        let shape = xv.shape().to_vec();
        self.unary_spatial(value, move |up| {
            let upv = as4(up);
            let (n, c, ho, wo) = upv.dim();
            let inv = 1.0 / (factor * factor) as f64;
            let mut dx = Array4::zeros((n, c, shape[2], shape[3]));
            for ni in 0..n {
                for ci in 0..c {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let g = upv[[ni, ci, oh, ow]] * inv;
                            for i in 0..factor {
                                for j in 0..factor {
                                    dx[[ni, ci, oh * factor + i, ow * factor + j]] = g;
                                }
                            }
                        }
                    }
                }
            }
            dx.into_dyn()
        })
    }

    /// Repeat each pixel into a `factor x factor` block.
    pub fn upsample_nearest(&self, factor: usize) -> Tensor {
        let xv = self.value();
        let value = upsample_nearest_arr(&xv, factor);
        self.unary_spatial(value, move |up| {
            let upv = as4(up);
            let (n, c, ho, wo) = upv.dim();
            let (h, w) = (ho / factor, wo / factor);
            let mut dx = Array4::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            dx[[ni, ci, oh / factor, ow / factor]] += upv[[ni, ci, oh, ow]];
                        }
                    }
                }
            }
            dx.into_dyn()
        })
    }

    fn unary_spatial(&self, value: Arr, df: impl Fn(&Arr) -> Arr + 'static) -> Tensor {
        let needs = self.needs_grad();
        let grad_fn: Option<GradFn> = if needs {
            Some(Box::new(move |up| vec![Some(df(up))]))
        } else {
            None
        };
        self.tape.push(value, vec![self.id], grad_fn, needs)
    }
}

/// Value-level average pooling (shared with the graph op).
pub fn avg_pool2d_arr(x: &Arr, factor: usize) -> Arr {
    let v = as4(x);
    let (n, c, h, w) = v.dim();
    assert!(
        h % factor == 0 && w % factor == 0,
        "pool factor must divide spatial dims"
    );
    let (ho, wo) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut y = Array4::zeros((n, c, ho, wo));
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..factor {
                        for j in 0..factor {
                            acc += v[[ni, ci, oh * factor + i, ow * factor + j]];
                        }
                    }
                    y[[ni, ci, oh, ow]] = acc * inv;
                }
            }
        }
    }
    y.into_dyn()
}

/// Value-level nearest-neighbor upsampling (shared with the graph op).
pub fn upsample_nearest_arr(x: &Arr, factor: usize) -> Arr {
    let v = as4(x);
    let (n, c, h, w) = v.dim();
    let mut y = Array4::zeros((n, c, h * factor, w * factor));
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..h * factor {
                for ow in 0..w * factor {
                    y[[ni, ci, oh, ow]] = v[[ni, ci, oh / factor, ow / factor]];
                }
            }
        }
    }
    y.into_dyn()
}
