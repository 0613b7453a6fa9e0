//! Reverse-mode automatic differentiation on `f64` ndarrays.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients.
//! All kernels are deterministic: parallel sections write disjoint output
//! blocks and never reduce floating-point values across threads, so repeated
//! runs with the same inputs are bit-identical regardless of scheduling.
//!
//! The op set is exactly what the demixing and segmentation networks need:
//! stride-1 convolutions, batch normalization, 2x2 pooling, bilinear 2x
//! upsampling, channel concatenation, pointwise activations and the three
//! training losses.

mod conv;
mod norm;
mod pool;
mod resize;



use ndarray::{ArrayD, Ix1, Ix4, IxDyn};

use crate::losses::{self, Reduction};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (divided by the element count, not count - 1).
    pub var: Vec<f64>,
    /// Elements per channel that entered the statistics.
    pub count: usize,
}

enum Step {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    /// Elementwise multiply by a one-element variable.
    MulScalarVar { x: Var, s: Var },
    MeanOf(Vec<Var>),
    SumAll(Var),
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid { x: Var },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        invstd: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        scale: Vec<f64>,
    },
    AvgPool2(Var),
    MaxPool2 { x: Var, argmax: Vec<u8> },
    UpsampleBilinear2(Var),
    ConcatChannels(Vec<Var>),
    Quantize(Var),
    Tv {
        x: Var,
        norms: ArrayD<f64>,
        scale: f64,
    },
    L1 { x: Var, scale: f64 },
    BceMean { p: Var, target: ArrayD<f64> },
}

struct Node {
    value: ArrayD<f64>,
    step: Step,
    requires_grad: bool,
}

/// Gradients of one scalar output with respect to every recorded node.
pub struct Gradients {
    g: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.g[v.idx()].as_ref()
    }
}

/// Forward-computation recorder.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, step: Step, requires_grad: bool) -> Var {
        let id = u32::try_from(self.nodes.len()).expect("tape overflow");
        self.nodes.push(Node {
            value,
            step,
            requires_grad,
        });
        Var(id)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.idx()].requires_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.idx()].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.len(), 1, "scalar() on non-scalar node");
        *a.iter().next().unwrap()
    }

    pub fn leaf(&mut self, value: ArrayD<f64>, requires_grad: bool) -> Var {
        self.push(value, Step::Leaf, requires_grad)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), value), false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let v = &self.nodes[a.idx()].value + &self.nodes[b.idx()].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Step::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let v = &self.nodes[a.idx()].value - &self.nodes[b.idx()].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Step::Sub(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.idx()].value.mapv(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Step::Scale(a, c), rg)
    }

    /// Elementwise multiply of `x` by the one-element variable `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "mul_scalar_var: s must be scalar");
        let c = self.scalar(s);
        let v = self.nodes[x.idx()].value.mapv(|t| t * c);
        let rg = self.rg(x) || self.rg(s);
        self.push(v, Step::MulScalarVar { x, s }, rg)
    }

    /// Elementwise mean of same-shape inputs.
    pub fn mean_of(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let shape = self.value(parts[0]).raw_dim();
        let mut acc = ArrayD::<f64>::zeros(shape.clone());
        let mut rg = false;
        for &p in parts {
            assert_eq!(self.value(p).raw_dim(), shape, "mean_of shapes");
            acc += &self.nodes[p.idx()].value;
            rg |= self.rg(p);
        }
        acc.mapv_inplace(|x| x / parts.len() as f64);
        self.push(acc, Step::MeanOf(parts.to_vec()), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.idx()].value.sum();
        let rg = self.rg(x);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Step::SumAll(x),
            rg,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.nodes[x.idx()]
            .value
            .mapv(|t| if t > 0.0 { t } else { slope * t });
        let rg = self.rg(x);
        self.push(v, Step::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.nodes[x.idx()].value.mapv(|t| 1.0 / (1.0 + (-t).exp()));
        let rg = self.rg(x);
        self.push(v, Step::Sigmoid { x }, rg)
    }

    /// Stride-1 2-D convolution over NCHW input with symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let bias = b.map(|bv| {
            self.value(bv)
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned()
        });
        let y = conv::conv2d_fwd(&xv, &wv, bias.as_ref(), pad);
        let rg = self.rg(x) || self.rg(w) || b.map(|bv| self.rg(bv)).unwrap_or(false);
        self.push(y.into_dyn(), Step::Conv2d { x, w, b, pad }, rg)
    }

    /// Training-mode batch normalization; returns the output and the batch
    /// statistics so the caller can maintain running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, BatchStats) {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let g = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap();
        let bt = self.value(beta).view().into_dimensionality::<Ix1>().unwrap();
        let (y, mean, var, invstd) = norm::bn_train_fwd(&xv, &g, &bt, eps);
        let count = xv.shape()[0] * xv.shape()[2] * xv.shape()[3];
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            y.into_dyn(),
            Step::BatchNormTrain {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                invstd,
            },
            rg,
        );
        (v, BatchStats {
            mean,
            var,
            count,
        })
    }

    /// Eval-mode batch normalization using fixed statistics. Gradients flow
    /// into `x` only; evaluation passes never update parameters.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: &[f64],
        beta: &[f64],
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (y, scale) = norm::bn_eval_fwd(&xv, gamma, beta, running_mean, running_var, eps);
        let rg = self.rg(x);
        self.push(y.into_dyn(), Step::BatchNormEval { x, scale }, rg)
    }

    /// 2x2 average pooling with stride 2 (spatial dims must be even).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let y = pool::avg_pool2_fwd(&xv);
        let rg = self.rg(x);
        self.push(y.into_dyn(), Step::AvgPool2(x), rg)
    }

    /// 2x2 max pooling with stride 2; ties resolve to the first element in
    /// scan order so the backward pass is deterministic.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (y, argmax) = pool::max_pool2_fwd(&xv);
        let rg = self.rg(x);
        self.push(y.into_dyn(), Step::MaxPool2 { x, argmax }, rg)
    }

    /// Bilinear 2x upsampling (half-pixel convention, edges clamped).
    pub fn upsample_bilinear2(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let y = resize::upsample2_fwd(&xv);
        let rg = self.rg(x);
        self.push(y.into_dyn(), Step::UpsampleBilinear2(x), rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape().to_vec();
        let (n, h, w) = (first[0], first[2], first[3]);
        let c_total: usize = parts.iter().map(|&p| self.value(p).shape()[1]).sum();
        let mut y = ndarray::Array4::<f64>::zeros((n, c_total, h, w));
        {
            let ys = y.as_slice_mut().unwrap();
            let plane = h * w;
            let mut c0 = 0usize;
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.shape()[0], n, "concat_channels batch");
                assert_eq!(&v.shape()[2..], &[h, w], "concat_channels spatial");
                let c = v.shape()[1];
                let vs = v.as_slice().expect("concat_channels: non-contiguous input");
                for ni in 0..n {
                    let dst = (ni * c_total + c0) * plane;
                    let src = ni * c * plane;
                    ys[dst..dst + c * plane].copy_from_slice(&vs[src..src + c * plane]);
                }
                c0 += c;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(y.into_dyn(), Step::ConcatChannels(parts.to_vec()), rg)
    }

    /// Snap values onto the multiples of `1/scale` (round to nearest). The
    /// backward pass treats this as the identity.
    pub fn quantize(&mut self, x: Var, scale: f64) -> Var {
        let v = self.nodes[x.idx()].value.mapv(|t| (t * scale).round() / scale);
        let rg = self.rg(x);
        self.push(v, Step::Quantize(x), rg)
    }

    /// Total-variation structure loss over an NCHW batch (see `losses`).
    pub fn tv_loss(&mut self, x: Var, reduction: Reduction) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let norms = losses::tv_pixel_norms(&xv);
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / norms.len() as f64,
        };
        let total = norms.sum() * scale;
        let rg = self.rg(x);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), total),
            Step::Tv {
                x,
                norms: norms.into_dyn(),
                scale,
            },
            rg,
        )
    }

    /// L1 texture loss over all elements.
    pub fn l1_loss(&mut self, x: Var, reduction: Reduction) -> Var {
        let v = &self.nodes[x.idx()].value;
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / v.len() as f64,
        };
        let total = v.iter().map(|t| t.abs()).sum::<f64>() * scale;
        let rg = self.rg(x);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), total),
            Step::L1 { x, scale },
            rg,
        )
    }

    /// Mean binary cross-entropy of probabilities `p` against targets in
    /// {0,1}; probabilities are clamped to [1e-7, 1-1e-7].
    pub fn bce_mean(&mut self, p: Var, target: &ArrayD<f64>) -> Var {
        let pv = &self.nodes[p.idx()].value;
        assert_eq!(pv.shape(), target.shape(), "bce_mean shapes");
        let total = losses::bce_mean_raw(&pv.view(), &target.view());
        let rg = self.rg(p);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), total),
            Step::BceMean {
                p,
                target: target.clone(),
            },
            rg,
        )
    }

    /// Backpropagate from a one-element `root`, returning per-node gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        assert!(self.rg(root), "backward root does not require gradients");
        let mut g: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.idx()] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));

        for i in (0..=root.idx()).rev() {
            if g[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let dy = g[i].take().unwrap();
            self.step_backward(i, &dy, &mut g);
            // Leaf gradients stay; interior gradients are no longer needed.
            if matches!(self.nodes[i].step, Step::Leaf) {
                g[i] = Some(dy);
            }
        }
        Gradients { g }
    }

    fn step_backward(&self, i: usize, dy: &ArrayD<f64>, g: &mut [Option<ArrayD<f64>>]) {
        let node = &self.nodes[i];
        match &node.step {
            Step::Leaf => {}
            Step::Add(a, b) => {
                self.acc(g, *a, || dy.clone());
                self.acc(g, *b, || dy.clone());
            }
            Step::Sub(a, b) => {
                self.acc(g, *a, || dy.clone());
                self.acc(g, *b, || dy.mapv(|t| -t));
            }
            Step::Scale(a, c) => {
                let c = *c;
                self.acc(g, *a, || dy.mapv(|t| t * c));
            }
            Step::MulScalarVar { x, s } => {
                let c = self.scalar(*s);
                self.acc(g, *x, || dy.mapv(|t| t * c));
                let xv = &self.nodes[x.idx()].value;
                let dot: f64 = dy.iter().zip(xv.iter()).map(|(a, b)| a * b).sum();
                self.acc(g, *s, || ArrayD::from_elem(IxDyn(&[1]), dot));
            }
            Step::MeanOf(parts) => {
                let k = parts.len() as f64;
                for &p in parts {
                    self.acc(g, p, || dy.mapv(|t| t / k));
                }
            }
            Step::SumAll(x) => {
                let d = dy[[0]];
                let shape = self.nodes[x.idx()].value.raw_dim();
                self.acc(g, *x, || ArrayD::from_elem(shape.clone(), d));
            }
            Step::LeakyRelu { x, slope } => {
                let xv = &self.nodes[x.idx()].value;
                let slope = *slope;
                self.acc(g, *x, || {
                    let mut d = dy.clone();
                    d.zip_mut_with(xv, |di, &xi| {
                        if xi <= 0.0 {
                            *di *= slope;
                        }
                    });
                    d
                });
            }
            Step::Sigmoid { x } => {
                let yv = &node.value;
                self.acc(g, *x, || {
                    let mut d = dy.clone();
                    d.zip_mut_with(yv, |di, &yi| *di *= yi * (1.0 - yi));
                    d
                });
            }
            Step::Conv2d { x, w, b, pad } => {
                let xv = self.value(*x).view().into_dimensionality::<Ix4>().unwrap();
                let wv = self.value(*w).view().into_dimensionality::<Ix4>().unwrap();
                let dyv = dy.view().into_dimensionality::<Ix4>().unwrap();
                let need_dx = self.rg(*x);
                let need_dw = self.rg(*w);
                let (dx, dw, db) = conv::conv2d_bwd(&xv, &wv, &dyv, *pad, need_dx, need_dw);
                if let Some(dx) = dx {
                    self.acc(g, *x, || dx.into_dyn());
                }
                if let Some(dw) = dw {
                    self.acc(g, *w, || dw.into_dyn());
                }
                if let Some(bv) = b {
                    if self.rg(*bv) {
                        self.acc(g, *bv, || db.into_dyn());
                    }
                }
            }
            Step::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                invstd,
            } => {
                let xv = self.value(*x).view().into_dimensionality::<Ix4>().unwrap();
                let gv = self
                    .value(*gamma)
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                let dyv = dy.view().into_dimensionality::<Ix4>().unwrap();
                let (dx, dgamma, dbeta) = norm::bn_train_bwd(&xv, &gv, mean, invstd, &dyv);
                self.acc(g, *x, || dx.into_dyn());
                self.acc(g, *gamma, || dgamma.into_dyn());
                self.acc(g, *beta, || dbeta.into_dyn());
            }
            Step::BatchNormEval { x, scale } => {
                let dyv = dy.view().into_dimensionality::<Ix4>().unwrap();
                let dx = norm::bn_eval_bwd(scale, &dyv);
                self.acc(g, *x, || dx.into_dyn());
            }
            Step::AvgPool2(x) => {
                let dyv = dy.view().into_dimensionality::<Ix4>().unwrap();
                let dx = pool::avg_pool2_bwd(&dyv);
                self.acc(g, *x, || dx.into_dyn());
            }
            Step::MaxPool2 { x, argmax } => {
                let dyv = dy.view().into_dimensionality::<Ix4>().unwrap();
                let dx = pool::max_pool2_bwd(&dyv, argmax);
                self.acc(g, *x, || dx.into_dyn());
            }
            Step::UpsampleBilinear2(x) => {
                let dyv = dy.view().into_dimensionality::<Ix4>().unwrap();
                let dx = resize::upsample2_bwd(&dyv);
                self.acc(g, *x, || dx.into_dyn());
            }
            Step::Quantize(x) => {
                self.acc(g, *x, || dy.clone());
            }
            Step::ConcatChannels(parts) => {
                let shape = node.value.shape();
                let (n, c_total, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let plane = h * w;
                let ds = dy.as_slice().expect("concat backward: non-contiguous dy");
                let mut c0 = 0usize;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    let mut part = ndarray::Array4::<f64>::zeros((n, c, h, w));
                    {
                        let ps = part.as_slice_mut().unwrap();
                        for ni in 0..n {
                            let src = (ni * c_total + c0) * plane;
                            let dst = ni * c * plane;
                            ps[dst..dst + c * plane]
                                .copy_from_slice(&ds[src..src + c * plane]);
                        }
                    }
                    self.acc(g, p, || part.into_dyn());
                    c0 += c;
                }
            }
            Step::Tv { x, norms, scale } => {
                let d = dy[[0]] * scale;
                let xv = self.value(*x).view().into_dimensionality::<Ix4>().unwrap();
                let dx = losses::tv_backward(&xv, &norms.view(), d);
                self.acc(g, *x, || dx.into_dyn());
            }
            Step::L1 { x, scale } => {
                let d = dy[[0]] * scale;
                let xv = &self.nodes[x.idx()].value;
                self.acc(g, *x, || {
                    xv.mapv(|t| {
                        if t > 0.0 {
                            d
                        } else if t < 0.0 {
                            -d
                        } else {
                            0.0
                        }
                    })
                });
            }
            Step::BceMean { p, target } => {
                let d = dy[[0]];
                let pv = &self.nodes[p.idx()].value;
                self.acc(g, *p, || losses::bce_backward(pv, target, d));
            }
        }
    }

    fn acc(
        &self,
        g: &mut [Option<ArrayD<f64>>],
        v: Var,
        delta: impl FnOnce() -> ArrayD<f64>,
    ) {
        if !self.rg(v) {
            return;
        }
        match &mut g[v.idx()] {
            Some(acc) => {
                let d = delta();
                debug_assert_eq!(acc.shape(), d.shape());
                *acc += &d;
            }
            slot @ None => *slot = Some(delta()),
        }
    }
}
