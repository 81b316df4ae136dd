use super::kernels::{self, ConvGeom, Dims};
use super::{dims4, matmul, Element, Layout, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How `broadcast_scale` lines its weights up with the feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleAxis {
    /// Weights `N×C×1×1`, one gate per channel.
    Channel,
    /// Weights `N×1×H×W`, one gate per pixel shared across channels.
    Spatial,
    /// Weights `N×k`, one scalar per stacked map (`k` = channels).
    Scalar,
}

/// Per-channel statistics of a train-mode batch norm, for running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool {
        input: Var,
        window: usize,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        window: usize,
    },
    GlobalMax {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvg(Var),
    Resize {
        input: Var,
        oh: usize,
        ow: usize,
    },
    Concat(Vec<Var>),
    SliceChannels {
        input: Var,
        start: usize,
    },
    ChannelStats {
        input: Var,
        argmax: Vec<usize>,
    },
    Scale {
        input: Var,
        weights: Var,
        axis: ScaleAxis,
    },
    Add(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    BceWithLogits {
        logits: Var,
        target: Vec<T>,
    },
    SoftF {
        probs: Var,
        gt: Vec<T>,
        mask: Vec<bool>,
        /// Per image: `dF/dp_j = a·g_j + b` for `j` inside the mask, already
        /// scaled by `−1/valid_images`. `None` for images with empty masks.
        coeffs: Vec<Option<(T, T)>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations.
///
/// Ops append nodes in execution order, so the node list is already a
/// topological order; [`backward`](Graph::backward) walks it once in
/// reverse. A graph is owned by one thread at a time.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    check_finite: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

type Contribution<T> = (Var, Vec<T>);

impl<T: Element> Graph<T> {
    /// Non-finite detection is on in debug builds and off otherwise.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.leaf_grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape().to_vec(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<Dims> {
        Ok(Dims::new(dims4(self.shape(v), op)?))
    }

    // ---------------------------------------------------------------- ops

    /// Cross-correlation of an `N×C×H×W` input with an `O×C×Kh×Kw` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let d = self.dims(input, "conv2d")?;
        let (o, ci, kh, kw) = dims4(self.shape(weight), "conv2d")?;
        if ci != d.c {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                expected: ci,
                actual: d.c,
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if d.h + 2 * padding < kh || d.w + 2 * padding < kw {
            return Err(Error::WindowTooLarge {
                op: "conv2d",
                window: kh.max(kw),
                extent: (d.h + 2 * padding).min(d.w + 2 * padding),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {o} outputs", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            input: d,
            out_c: o,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (d.h + 2 * padding - kh) / stride + 1,
            ow: (d.w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor {
            shape: vec![d.n, o, geom.oh, geom.ow],
            data: out,
        };
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &inputs,
        )
    }

    /// `input (N×in) · weightᵀ (out×in) + bias (out)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, fin) = match *self.shape(input) {
            [n, f] => (n, f),
            ref s => return Err(Error::shape("linear", format!("input must be N×in, got {s:?}"))),
        };
        let (fout, win) = match *self.shape(weight) {
            [o, i] => (o, i),
            ref s => return Err(Error::shape("linear", format!("weight must be out×in, got {s:?}"))),
        };
        if win != fin {
            return Err(Error::shape("linear", format!("input width {fin} vs weight width {win}")));
        }
        let mut out = vec![T::zero(); n * fout];
        matmul(
            Layout::Nt,
            n,
            fin,
            fout,
            self.value(input).data(),
            self.value(weight).data(),
            &mut out,
            false,
        );
        if let Some(b) = bias {
            if self.shape(b) != [fout] {
                return Err(Error::shape("linear", format!("bias {:?} for {fout} outputs", self.shape(b))));
            }
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bv).for_each(|(y, &b)| *y += b);
            }
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "linear",
            Tensor {
                shape: vec![n, fout],
                data: out,
            },
            Op::Linear { input, weight, bias },
            &inputs,
        )
    }

    fn check_norm_params(&self, d: Dims, gamma: Var, beta: Var) -> Result<()> {
        if self.shape(gamma) != [d.c] || self.shape(beta) != [d.c] {
            return Err(Error::shape(
                "batchnorm2d",
                format!("gamma/beta must have length {}", d.c),
            ));
        }
        if d.n * d.plane() == 0 {
            return Err(Error::shape("batchnorm2d", "zero-sized channel slab"));
        }
        Ok(())
    }

    /// Batch norm normalizing each channel over `N×H×W` with batch
    /// statistics.
    pub fn batchnorm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let d = self.dims(input, "batchnorm2d")?;
        self.check_norm_params(d, gamma, beta)?;
        let (y, xhat, inv_std, mean, var) = kernels::batchnorm_train(
            d,
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let v = self.push(
            "batchnorm2d",
            Tensor { shape: d.shape(), data: y },
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[input, gamma, beta],
        )?;
        Ok((
            v,
            BatchStats {
                mean,
                var,
                count: d.n * d.plane(),
            },
        ))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let d = self.dims(input, "batchnorm2d")?;
        self.check_norm_params(d, gamma, beta)?;
        if running_mean.len() != d.c || running_var.len() != d.c {
            return Err(Error::shape("batchnorm2d", "running statistics length"));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (x, ga, be) = (
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let mut y = vec![T::zero(); x.len()];
        for n in 0..d.n {
            for c in 0..d.c {
                let r = (n * d.c + c) * d.plane()..(n * d.c + c + 1) * d.plane();
                for i in r {
                    y[i] = ga[c] * (x[i] - running_mean[c]) * inv_std[c] + be[c];
                }
            }
        }
        self.push(
            "batchnorm2d",
            Tensor { shape: d.shape(), data: y },
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            &[input, gamma, beta],
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, Op::Relu(input), &[input])
    }

    /// Logistic sigmoid, clamped so every output lies strictly inside (0, 1).
    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(input), &[input])
    }

    /// Non-overlapping `window×window` max pooling (stride = window, floor).
    pub fn max_pool(&mut self, input: Var, window: usize) -> Result<Var> {
        let d = self.pool_dims(input, window, "max_pool")?;
        let (out, argmax, od) = kernels::max_pool(d, self.value(input).data(), window);
        self.push(
            "max_pool",
            Tensor { shape: od.shape(), data: out },
            Op::MaxPool { input, window, argmax },
            &[input],
        )
    }

    pub fn avg_pool(&mut self, input: Var, window: usize) -> Result<Var> {
        let d = self.pool_dims(input, window, "avg_pool")?;
        let (out, od) = kernels::avg_pool(d, self.value(input).data(), window);
        self.push(
            "avg_pool",
            Tensor { shape: od.shape(), data: out },
            Op::AvgPool { input, window },
            &[input],
        )
    }

    fn pool_dims(&self, input: Var, window: usize, op: &'static str) -> Result<Dims> {
        let d = self.dims(input, op)?;
        if window == 0 {
            return Err(Error::InvalidArgument(format!("{op}: window must be positive")));
        }
        if window > d.h || window > d.w {
            return Err(Error::WindowTooLarge {
                op,
                window,
                extent: d.h.min(d.w),
            });
        }
        Ok(d)
    }

    /// Global max over each channel plane: `N×C×1×1`.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let d = self.dims(input, "global_max_pool")?;
        if d.plane() == 0 {
            return Err(Error::shape("global_max_pool", "empty plane"));
        }
        let (out, argmax) = kernels::global_max(d, self.value(input).data());
        self.push(
            "global_max_pool",
            Tensor {
                shape: vec![d.n, d.c, 1, 1],
                data: out,
            },
            Op::GlobalMax { input, argmax },
            &[input],
        )
    }

    /// Global mean over each channel plane: `N×C×1×1`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let d = self.dims(input, "global_avg_pool")?;
        if d.plane() == 0 {
            return Err(Error::shape("global_avg_pool", "empty plane"));
        }
        let out = kernels::global_avg(d, self.value(input).data());
        self.push(
            "global_avg_pool",
            Tensor {
                shape: vec![d.n, d.c, 1, 1],
                data: out,
            },
            Op::GlobalAvg(input),
            &[input],
        )
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let d = self.dims(input, "bilinear_resize")?;
        if out_h == 0 || out_w == 0 || d.h == 0 || d.w == 0 {
            return Err(Error::InvalidArgument("bilinear_resize: sizes must be positive".into()));
        }
        let out = kernels::bilinear_forward(d, self.value(input).data(), out_h, out_w);
        self.push(
            "bilinear_resize",
            Tensor {
                shape: vec![d.n, d.c, out_h, out_w],
                data: out,
            },
            Op::Resize {
                input,
                oh: out_h,
                ow: out_w,
            },
            &[input],
        )
    }

    /// Concatenates along the channel axis, preserving input order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_channels of nothing".into()))?;
        let d0 = self.dims(first, "concat_channels")?;
        let mut dims = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let d = self.dims(v, "concat_channels")?;
            if (d.n, d.h, d.w) != (d0.n, d0.h, d0.w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", d.shape(), d0.shape()),
                ));
            }
            dims.push(d);
        }
        let total_c: usize = dims.iter().map(|d| d.c).sum();
        let mut out = Vec::with_capacity(d0.n * total_c * d0.plane());
        for n in 0..d0.n {
            for (&v, d) in inputs.iter().zip(&dims) {
                let data = self.value(v).data();
                out.extend_from_slice(&data[n * d.image()..(n + 1) * d.image()]);
            }
        }
        self.push(
            "concat_channels",
            Tensor {
                shape: vec![d0.n, total_c, d0.h, d0.w],
                data: out,
            },
            Op::Concat(inputs.to_vec()),
            inputs,
        )
    }

    /// Channels `start..start+len` of a feature map.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let d = self.dims(input, "slice_channels")?;
        if start + len > d.c || len == 0 {
            return Err(Error::shape(
                "slice_channels",
                format!("{start}..{} of {} channels", start + len, d.c),
            ));
        }
        let data = self.value(input).data();
        let mut out = Vec::with_capacity(d.n * len * d.plane());
        for n in 0..d.n {
            let base = n * d.image() + start * d.plane();
            out.extend_from_slice(&data[base..base + len * d.plane()]);
        }
        self.push(
            "slice_channels",
            Tensor {
                shape: vec![d.n, len, d.h, d.w],
                data: out,
            },
            Op::SliceChannels { input, start },
            &[input],
        )
    }

    /// Per-pixel channel max (plane 0) and channel mean (plane 1).
    pub fn channel_stats(&mut self, input: Var) -> Result<Var> {
        let d = self.dims(input, "channel_stats")?;
        if d.c == 0 {
            return Err(Error::shape("channel_stats", "no channels"));
        }
        let x = self.value(input).data();
        let count = T::from_usize(d.c).unwrap();
        let mut out = vec![T::zero(); d.n * 2 * d.plane()];
        let mut argmax = vec![0; d.n * d.plane()];
        for n in 0..d.n {
            let img = &x[n * d.image()..(n + 1) * d.image()];
            for p in 0..d.plane() {
                let mut best = 0;
                let mut sum = T::zero();
                for c in 0..d.c {
                    let v = img[c * d.plane() + p];
                    sum += v;
                    if v > img[best * d.plane() + p] {
                        best = c;
                    }
                }
                argmax[n * d.plane() + p] = best;
                out[n * 2 * d.plane() + p] = img[best * d.plane() + p];
                out[n * 2 * d.plane() + d.plane() + p] = sum / count;
            }
        }
        self.push(
            "channel_stats",
            Tensor {
                shape: vec![d.n, 2, d.h, d.w],
                data: out,
            },
            Op::ChannelStats { input, argmax },
            &[input],
        )
    }

    /// Elementwise product with weights broadcast along one declared axis.
    pub fn broadcast_scale(&mut self, input: Var, weights: Var, axis: ScaleAxis) -> Result<Var> {
        let d = self.dims(input, "broadcast_scale")?;
        let ws = self.shape(weights).to_vec();
        let ok = match axis {
            ScaleAxis::Channel => ws == [d.n, d.c, 1, 1],
            ScaleAxis::Spatial => ws == [d.n, 1, d.h, d.w],
            ScaleAxis::Scalar => ws == [d.n, d.c],
        };
        if !ok {
            return Err(Error::shape(
                "broadcast_scale",
                format!("{axis:?} weights {ws:?} for input {:?}", d.shape()),
            ));
        }
        let x = self.value(input).data();
        let w = self.value(weights).data();
        let mut out = vec![T::zero(); x.len()];
        for n in 0..d.n {
            for c in 0..d.c {
                let base = (n * d.c + c) * d.plane();
                match axis {
                    ScaleAxis::Channel | ScaleAxis::Scalar => {
                        let k = w[n * d.c + c];
                        for p in 0..d.plane() {
                            out[base + p] = x[base + p] * k;
                        }
                    }
                    ScaleAxis::Spatial => {
                        let wp = &w[n * d.plane()..(n + 1) * d.plane()];
                        for p in 0..d.plane() {
                            out[base + p] = x[base + p] * wp[p];
                        }
                    }
                }
            }
        }
        self.push(
            "broadcast_scale",
            Tensor { shape: d.shape(), data: out },
            Op::Scale {
                input,
                weights,
                axis,
            },
            &[input, weights],
        )
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor { shape, data }, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", Tensor { shape, data }, Op::Mul(a, b), &[a, b])
    }

    pub fn mul_scalar(&mut self, input: Var, k: T) -> Result<Var> {
        let value = self.value(input).map(|v| v * k);
        self.push("mul_scalar", value, Op::MulScalar(input, k), &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(input).sum());
        self.push("sum", value, Op::Sum(input), &[input])
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        if self.value(input).numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let value = Tensor::scalar(self.value(input).mean());
        self.push("mean", value, Op::Mean(input), &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(input), &[input])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`,
    /// evaluated in the overflow-free logit form.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} vs {:?}", self.shape(logits), target.shape()),
            ));
        }
        let x = self.value(logits).data();
        let total: T = x
            .iter()
            .zip(target.data())
            .map(|(&x, &g)| x.max(T::zero()) - x * g + (-x.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / T::from_usize(x.len().max(1)).unwrap());
        self.push(
            "bce_with_logits",
            value,
            Op::BceWithLogits {
                logits,
                target: target.data().to_vec(),
            },
            &[logits],
        )
    }

    /// `1 − F_β` from relaxed counts restricted to `mask`, averaged over the
    /// batch images whose mask is non-empty. `None` when every mask is empty.
    ///
    /// Per image: `TP = Σ p·g`, `P = TP/(Σp + ε)`, `R = TP/(Σg + ε)`,
    /// `F = (1+β²)PR/(β²P + R + ε)`, sums taken over masked pixels only.
    pub fn soft_f_loss(
        &mut self,
        probs: Var,
        gt: &Tensor<T>,
        mask: &[bool],
        beta_sq: T,
        eps: T,
    ) -> Result<Option<Var>> {
        let d = self.dims(probs, "soft_f_loss")?;
        if gt.shape() != self.shape(probs) || mask.len() != gt.numel() {
            return Err(Error::shape(
                "soft_f_loss",
                format!("probs {:?}, gt {:?}, mask {}", self.shape(probs), gt.shape(), mask.len()),
            ));
        }
        let p = self.value(probs).data();
        let g = gt.data();
        let img = d.image();
        let one = T::one();
        let mut losses = Vec::new();
        let mut coeffs = Vec::with_capacity(d.n);
        let mut raw = Vec::with_capacity(d.n);
        for n in 0..d.n {
            let r = n * img..(n + 1) * img;
            if !mask[r.clone()].iter().any(|&m| m) {
                raw.push(None);
                continue;
            }
            let (mut tp, mut sp, mut sg) = (T::zero(), T::zero(), T::zero());
            for i in r {
                if mask[i] {
                    tp += p[i] * g[i];
                    sp += p[i];
                    sg += g[i];
                }
            }
            let dp = sp + eps;
            let dr = sg + eps;
            let prec = tp / dp;
            let rec = tp / dr;
            let denom = beta_sq * prec + rec + eps;
            let f = (one + beta_sq) * prec * rec / denom;
            losses.push(one - f);
            let df_dp = (one + beta_sq) * rec * (rec + eps) / (denom * denom);
            let df_dr = (one + beta_sq) * prec * (beta_sq * prec + eps) / (denom * denom);
            // dF/dp_j = df_dp·(g_j/dp − tp/dp²) + df_dr·g_j/dr
            let a = df_dp / dp + df_dr / dr;
            let b = -df_dp * tp / (dp * dp);
            raw.push(Some((a, b)));
        }
        if losses.is_empty() {
            return Ok(None);
        }
        let valid = T::from_usize(losses.len()).unwrap();
        let loss = losses.iter().copied().sum::<T>() / valid;
        for c in raw {
            coeffs.push(c.map(|(a, b)| (-a / valid, -b / valid)));
        }
        self.push(
            "soft_f_loss",
            Tensor::scalar(loss),
            Op::SoftF {
                probs,
                gt: g.to_vec(),
                mask: mask.to_vec(),
                coeffs,
            },
            &[probs],
        )
        .map(Some)
    }

    // ----------------------------------------------------------- backward

    /// Accumulates `d(root)/d(leaf)` into every leaf that requires
    /// gradients. Calling it again without [`zero_grad`](Self::zero_grad)
    /// adds to the stored gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let node = &self.nodes[root.0];
        if node.value.numel() != 1 {
            return Err(Error::NonScalarRoot(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (v, contrib) in backprop(&self.nodes, i, &g) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Smallest distance of any recorded value from a point where the
    /// graph is not differentiable: ReLU inputs near zero, and near-ties
    /// between the two largest candidates of any max selection.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        margin = margin.min(v.to_f64_lossy().abs());
                    }
                }
                Op::MaxPool { input, window, .. } => {
                    let d = Dims::new(dims4(self.shape(*input), "").unwrap());
                    let x = self.value(*input).data();
                    for nc in 0..d.n * d.c {
                        for oy in 0..d.h / window {
                            for ox in 0..d.w / window {
                                let vals = (0..window * window).map(|k| {
                                    let (ky, kx) = (k / window, k % window);
                                    x[nc * d.plane() + (oy * window + ky) * d.w + ox * window + kx]
                                });
                                margin = margin.min(top_two_gap(vals));
                            }
                        }
                    }
                }
                Op::GlobalMax { input, .. } => {
                    let d = Dims::new(dims4(self.shape(*input), "").unwrap());
                    for plane in self.value(*input).data().chunks(d.plane()) {
                        margin = margin.min(top_two_gap(plane.iter().copied()));
                    }
                }
                Op::ChannelStats { input, .. } => {
                    let d = Dims::new(dims4(self.shape(*input), "").unwrap());
                    let x = self.value(*input).data();
                    for n in 0..d.n {
                        for p in 0..d.plane() {
                            let vals = (0..d.c).map(|c| x[n * d.image() + c * d.plane() + p]);
                            margin = margin.min(top_two_gap(vals));
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }
}

/// Gap between the two largest values. A tie at exactly zero is ignored:
/// such values come from ReLU clamps, whose inputs are checked separately
/// and stay clamped under a small perturbation.
fn top_two_gap<T: Element>(vals: impl Iterator<Item = T>) -> f64 {
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in vals {
        let v = v.to_f64_lossy();
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    if b == f64::NEG_INFINITY || (a == 0.0 && b == 0.0) {
        f64::INFINITY
    } else {
        a - b
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::from_f64_lossy(2.0);
    s.max(T::min_positive_value()).min(hi)
}

fn zeros_like<T: Element>(nodes: &[Node<T>], v: Var) -> Vec<T> {
    vec![T::zero(); nodes[v.0].value.numel()]
}

fn wants<T: Element>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

/// Gradient contributions of node `i` to its inputs.
fn backprop<T: Element>(nodes: &[Node<T>], i: usize, dy: &[T]) -> Vec<Contribution<T>> {
    let val = |v: Var| nodes[v.0].value.data();
    let mut out = Vec::new();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let mut dx = wants(nodes, *input).then(|| zeros_like(nodes, *input));
            let mut dw = wants(nodes, *weight).then(|| zeros_like(nodes, *weight));
            let mut db = bias.filter(|b| wants(nodes, *b)).map(|b| zeros_like(nodes, b));
            kernels::conv2d_backward(
                geom,
                val(*input),
                val(*weight),
                dy,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            out.extend(dx.map(|g| (*input, g)));
            out.extend(dw.map(|g| (*weight, g)));
            if let (Some(b), Some(g)) = (bias, db) {
                out.push((*b, g));
            }
        }
        Op::Linear { input, weight, bias } => {
            let x = &nodes[input.0].value;
            let (n, fin) = (x.shape()[0], x.shape()[1]);
            let fout = nodes[weight.0].value.shape()[0];
            if wants(nodes, *input) {
                let mut dx = vec![T::zero(); n * fin];
                matmul(Layout::Nn, n, fout, fin, dy, val(*weight), &mut dx, false);
                out.push((*input, dx));
            }
            if wants(nodes, *weight) {
                let mut dw = vec![T::zero(); fout * fin];
                matmul(Layout::Tn, fout, n, fin, dy, x.data(), &mut dw, false);
                out.push((*weight, dw));
            }
            if let Some(b) = bias.filter(|b| wants(nodes, *b)) {
                let mut db = vec![T::zero(); fout];
                for row in dy.chunks(fout) {
                    db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                }
                out.push((b, db));
            }
        }
        Op::BatchNormTrain {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = Dims::new(dims4(nodes[input.0].value.shape(), "").unwrap());
            let mut dx = wants(nodes, *input).then(|| zeros_like(nodes, *input));
            let mut dg = wants(nodes, *gamma).then(|| zeros_like(nodes, *gamma));
            let mut db = wants(nodes, *beta).then(|| zeros_like(nodes, *beta));
            kernels::batchnorm_train_backward(
                d,
                xhat,
                inv_std,
                val(*gamma),
                dy,
                dx.as_deref_mut(),
                dg.as_deref_mut(),
                db.as_deref_mut(),
            );
            out.extend(dx.map(|g| (*input, g)));
            out.extend(dg.map(|g| (*gamma, g)));
            out.extend(db.map(|g| (*beta, g)));
        }
        Op::BatchNormEval {
            input,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let d = Dims::new(dims4(nodes[input.0].value.shape(), "").unwrap());
            let (x, ga) = (val(*input), val(*gamma));
            let mut dx = vec![T::zero(); x.len()];
            let mut dg = vec![T::zero(); d.c];
            let mut db = vec![T::zero(); d.c];
            for n in 0..d.n {
                for c in 0..d.c {
                    let r = (n * d.c + c) * d.plane()..(n * d.c + c + 1) * d.plane();
                    for j in r {
                        dx[j] = dy[j] * ga[c] * inv_std[c];
                        dg[c] += dy[j] * (x[j] - mean[c]) * inv_std[c];
                        db[c] += dy[j];
                    }
                }
            }
            out.push((*input, dx));
            out.push((*gamma, dg));
            out.push((*beta, db));
        }
        Op::Relu(x) => {
            let g = val(*x)
                .iter()
                .zip(dy)
                .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                .collect();
            out.push((*x, g));
        }
        Op::Sigmoid(x) => {
            let s = nodes[i].value.data();
            let g = s.iter().zip(dy).map(|(&s, &g)| g * s * (T::one() - s)).collect();
            out.push((*x, g));
        }
        Op::MaxPool { input, argmax, .. } | Op::GlobalMax { input, argmax } => {
            let mut dx = zeros_like(nodes, *input);
            for (&a, &g) in argmax.iter().zip(dy) {
                dx[a] += g;
            }
            out.push((*input, dx));
        }
        Op::AvgPool { input, window } => {
            let d = Dims::new(dims4(nodes[input.0].value.shape(), "").unwrap());
            let mut dx = zeros_like(nodes, *input);
            kernels::avg_pool_backward(d, *window, dy, &mut dx);
            out.push((*input, dx));
        }
        Op::GlobalAvg(input) => {
            let d = Dims::new(dims4(nodes[input.0].value.shape(), "").unwrap());
            let count = T::from_usize(d.plane()).unwrap();
            let mut dx = zeros_like(nodes, *input);
            for (plane, &g) in dx.chunks_mut(d.plane()).zip(dy) {
                plane.iter_mut().for_each(|v| *v = g / count);
            }
            out.push((*input, dx));
        }
        Op::Resize { input, oh, ow } => {
            let d = Dims::new(dims4(nodes[input.0].value.shape(), "").unwrap());
            let mut dx = zeros_like(nodes, *input);
            kernels::bilinear_backward(d, *oh, *ow, dy, &mut dx);
            out.push((*input, dx));
        }
        Op::Concat(inputs) => {
            let shape = nodes[i].value.shape();
            let (n, total_c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
            let mut offset = 0;
            for &v in inputs {
                let c = nodes[v.0].value.shape()[1];
                if wants(nodes, v) {
                    let mut g = Vec::with_capacity(n * c * plane);
                    for b in 0..n {
                        let base = (b * total_c + offset) * plane;
                        g.extend_from_slice(&dy[base..base + c * plane]);
                    }
                    out.push((v, g));
                }
                offset += c;
            }
        }
        Op::SliceChannels { input, start } => {
            let d = Dims::new(dims4(nodes[input.0].value.shape(), "").unwrap());
            let len = nodes[i].value.shape()[1];
            let mut dx = zeros_like(nodes, *input);
            for n in 0..d.n {
                let base = n * d.image() + start * d.plane();
                let src = &dy[n * len * d.plane()..(n + 1) * len * d.plane()];
                dx[base..base + len * d.plane()].copy_from_slice(src);
            }
            out.push((*input, dx));
        }
        Op::ChannelStats { input, argmax } => {
            let d = Dims::new(dims4(nodes[input.0].value.shape(), "").unwrap());
            let count = T::from_usize(d.c).unwrap();
            let mut dx = zeros_like(nodes, *input);
            for n in 0..d.n {
                for p in 0..d.plane() {
                    let gmax = dy[n * 2 * d.plane() + p];
                    let gmean = dy[n * 2 * d.plane() + d.plane() + p] / count;
                    for c in 0..d.c {
                        dx[n * d.image() + c * d.plane() + p] += gmean;
                    }
                    dx[n * d.image() + argmax[n * d.plane() + p] * d.plane() + p] += gmax;
                }
            }
            out.push((*input, dx));
        }
        Op::Scale {
            input,
            weights,
            axis,
        } => {
            let d = Dims::new(dims4(nodes[input.0].value.shape(), "").unwrap());
            let (x, w) = (val(*input), val(*weights));
            let mut dx = vec![T::zero(); x.len()];
            let mut dw = vec![T::zero(); w.len()];
            for n in 0..d.n {
                for c in 0..d.c {
                    let base = (n * d.c + c) * d.plane();
                    match axis {
                        ScaleAxis::Channel | ScaleAxis::Scalar => {
                            let k = w[n * d.c + c];
                            let mut acc = T::zero();
                            for p in 0..d.plane() {
                                dx[base + p] = dy[base + p] * k;
                                acc += dy[base + p] * x[base + p];
                            }
                            dw[n * d.c + c] += acc;
                        }
                        ScaleAxis::Spatial => {
                            let wb = n * d.plane();
                            for p in 0..d.plane() {
                                dx[base + p] = dy[base + p] * w[wb + p];
                                dw[wb + p] += dy[base + p] * x[base + p];
                            }
                        }
                    }
                }
            }
            out.push((*input, dx));
            out.push((*weights, dw));
        }
        Op::Add(a, b) => {
            out.push((*a, dy.to_vec()));
            out.push((*b, dy.to_vec()));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            out.push((*a, dy.iter().zip(bv).map(|(&g, &y)| g * y).collect()));
            out.push((*b, dy.iter().zip(av).map(|(&g, &x)| g * x).collect()));
        }
        Op::MulScalar(x, k) => out.push((*x, dy.iter().map(|&g| g * *k).collect())),
        Op::Sum(x) => out.push((*x, vec![dy[0]; nodes[x.0].value.numel()])),
        Op::Mean(x) => {
            let n = nodes[x.0].value.numel();
            out.push((*x, vec![dy[0] / T::from_usize(n).unwrap(); n]));
        }
        Op::Reshape(x) => out.push((*x, dy.to_vec())),
        Op::BceWithLogits { logits, target } => {
            let x = val(*logits);
            let scale = dy[0] / T::from_usize(x.len().max(1)).unwrap();
            let g = x
                .iter()
                .zip(target)
                .map(|(&x, &t)| (sigmoid(x) - t) * scale)
                .collect();
            out.push((*logits, g));
        }
        Op::SoftF {
            probs,
            gt,
            mask,
            coeffs,
        } => {
            let img = gt.len() / coeffs.len();
            let mut dx = vec![T::zero(); gt.len()];
            for (n, c) in coeffs.iter().enumerate() {
                let Some((a, b)) = c else { continue };
                for j in n * img..(n + 1) * img {
                    if mask[j] {
                        dx[j] = dy[0] * (*a * gt[j] + *b);
                    }
                }
            }
            out.push((*probs, dx));
        }
    }
    out
}
