//! Recorded-graph reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape: every op pushes one node holding the
//! forward value plus whatever the backward rule needs. Node inputs always
//! precede the node, so backward is a single reverse sweep that visits each
//! op exactly once. One graph is single-threaded; independent graphs may run
//! on different threads.

use super::kernels::{self, Dims};
use super::Tensor;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// Identity forward, zero backward.
    Detach { x: NodeId },
    Conv1x1 { x: NodeId, w: NodeId, b: NodeId },
    Conv3x3 { x: NodeId, w: NodeId, b: NodeId, stride: usize },
    Relu { x: NodeId },
    LRelu { x: NodeId, slope: f32 },
    Sigmoid { x: NodeId },
    Abs { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    AddScalar { x: NodeId },
    MulScalar { x: NodeId, c: f32 },
    AvgPool2 { x: NodeId },
    Upsample2 { x: NodeId },
    GlobalAvgPool { x: NodeId },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f32>,
        invstd: Vec<f32>,
        train_stats: bool,
    },
    InstanceNorm { x: NodeId, mean: Vec<f32>, invstd: Vec<f32> },
    Dropout { x: NodeId, mask: Option<Vec<f32>> },
    ConcatChannels { a: NodeId, b: NodeId, c_a: usize },
    ScaleChannels { x: NodeId, s: NodeId, per_sample: bool },
    ModulateChannels { x: NodeId, s: NodeId, t: NodeId, per_sample: bool },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    BoxMean { x: NodeId, radius: usize },
    PadReplicate { x: NodeId, pad_h: usize, pad_w: usize },
    Crop { x: NodeId, oh: usize, ow: usize },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    /// Precise value for scalar reduction outputs (used by loss reporting
    /// and finite differences).
    val_f64: Option<f64>,
    op: Op,
}

/// Ordered record of executed primitive ops.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, None, Op::Leaf)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value at full precision where the op tracked one.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let node = &self.nodes[id.0];
        node.val_f64.unwrap_or_else(|| node.value.data()[0] as f64)
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, val_f64: Option<f64>, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            val_f64,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // -- elementwise -------------------------------------------------------

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(v, rg, None, Op::Relu { x })
    }

    pub fn lrelu(&mut self, x: NodeId, slope: f32) -> Result<NodeId> {
        if !(0.0..1.0).contains(&slope) || slope <= 0.0 {
            return Err(Error::invalid("lrelu", format!("slope {slope} not in (0,1)")));
        }
        let v = self.value(x).map(|a| if a >= 0.0 { a } else { slope * a });
        let rg = self.any_grad(&[x]);
        Ok(self.push(v, rg, None, Op::LRelu { x, slope }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| 1.0 / (1.0 + (-a).exp()));
        let rg = self.any_grad(&[x]);
        self.push(v, rg, None, Op::Sigmoid { x })
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.abs());
        let rg = self.any_grad(&[x]);
        self.push(v, rg, None, Op::Abs { x })
    }

    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, false, None, Op::Detach { x })
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op_name, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let f64v = match (self.f64_of(a), self.f64_of(b)) {
            (Some(x), Some(y)) => Some(x + y),
            _ => None,
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, rg, f64v, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let f64v = match (self.f64_of(a), self.f64_of(b)) {
            (Some(x), Some(y)) => Some(x - y),
            _ => None,
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, rg, f64v, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, rg, None, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("div", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x / y)
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, rg, None, Op::Div { a, b }))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f32) -> NodeId {
        let v = self.value(x).map(|a| a + c);
        let f64v = self.f64_of(x).map(|a| a + c as f64);
        let rg = self.any_grad(&[x]);
        self.push(v, rg, f64v, Op::AddScalar { x })
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f32) -> NodeId {
        let v = self.value(x).map(|a| a * c);
        let f64v = self.f64_of(x).map(|a| a * c as f64);
        let rg = self.any_grad(&[x]);
        self.push(v, rg, f64v, Op::MulScalar { x, c })
    }

    fn f64_of(&self, id: NodeId) -> Option<f64> {
        if self.nodes[id.0].value.is_scalar() {
            Some(self.scalar_value(id))
        } else {
            None
        }
    }

    // -- convolutions ------------------------------------------------------

    pub fn conv1x1(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.value(x).as_nchw()?;
        let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
        let (co, ci) = match self.value(w).shape() {
            [co, ci] => (*co, *ci),
            s => return Err(Error::shape("conv1x1", format!("weight must be COxCI, got {s:?}"))),
        };
        if ci != dims.c {
            return Err(Error::shape(
                "conv1x1",
                format!("input has {} channels, weight expects {}", dims.c, ci),
            ));
        }
        if self.value(b).shape() != [co] {
            return Err(Error::shape(
                "conv1x1",
                format!("bias shape {:?}, want [{co}]", self.value(b).shape()),
            ));
        }
        let mut out_shape = self.value(x).shape().to_vec();
        let ch_axis = out_shape.len() - 3;
        out_shape[ch_axis] = co;
        let mut out = Tensor::zeros(&out_shape);
        kernels::conv1x1_forward(
            self.value(x).data(),
            dims,
            self.value(w).data(),
            self.value(b).data(),
            co,
            out.data_mut(),
        );
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, rg, None, Op::Conv1x1 { x, w, b }))
    }

    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        if stride != 1 && stride != 2 {
            return Err(Error::invalid("conv3x3", format!("stride {stride} not in {{1,2}}")));
        }
        let d = self.value(x).as_nchw()?;
        let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
        let (co, ci) = match self.value(w).shape() {
            [co, ci, 3, 3] => (*co, *ci),
            s => {
                return Err(Error::shape(
                    "conv3x3",
                    format!("weight must be COxCIx3x3, got {s:?}"),
                ))
            }
        };
        if ci != dims.c {
            return Err(Error::shape(
                "conv3x3",
                format!("input has {} channels, weight expects {}", dims.c, ci),
            ));
        }
        if self.value(b).shape() != [co] {
            return Err(Error::shape(
                "conv3x3",
                format!("bias shape {:?}, want [{co}]", self.value(b).shape()),
            ));
        }
        let (oh, ow) = (
            kernels::conv3x3_out_extent(dims.h, stride),
            kernels::conv3x3_out_extent(dims.w, stride),
        );
        let mut out_shape = self.value(x).shape().to_vec();
        let k = out_shape.len();
        out_shape[k - 3] = co;
        out_shape[k - 2] = oh;
        out_shape[k - 1] = ow;
        let mut out = Tensor::zeros(&out_shape);
        kernels::conv3x3_forward(
            self.value(x).data(),
            dims,
            self.value(w).data(),
            self.value(b).data(),
            co,
            stride,
            out.data_mut(),
        );
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, rg, None, Op::Conv3x3 { x, w, b, stride }))
    }

    // -- pooling / resampling ---------------------------------------------

    pub fn avgpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let d = self.value(x).as_nchw()?;
        let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
        if dims.h < 2 || dims.w < 2 {
            return Err(Error::invalid(
                "avgpool2",
                format!("spatial extent {}x{} < 2", dims.h, dims.w),
            ));
        }
        let (oh, ow) = (kernels::pool2_out_extent(dims.h), kernels::pool2_out_extent(dims.w));
        let mut out_shape = self.value(x).shape().to_vec();
        let k = out_shape.len();
        out_shape[k - 2] = oh;
        out_shape[k - 1] = ow;
        let mut out = Tensor::zeros(&out_shape);
        kernels::avgpool2_forward(self.value(x).data(), dims, out.data_mut());
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, None, Op::AvgPool2 { x }))
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let d = self.value(x).as_nchw()?;
        let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
        let mut out_shape = self.value(x).shape().to_vec();
        let k = out_shape.len();
        out_shape[k - 2] = dims.h * 2;
        out_shape[k - 1] = dims.w * 2;
        let mut out = Tensor::zeros(&out_shape);
        kernels::upsample2_forward(self.value(x).data(), dims, out.data_mut());
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, None, Op::Upsample2 { x }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let d = self.value(x).as_nchw()?;
        let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
        let out_shape = if self.value(x).rank() == 4 {
            vec![dims.n, dims.c]
        } else {
            vec![dims.c]
        };
        let mut out = Tensor::zeros(&out_shape);
        kernels::global_avg_pool_forward(self.value(x).data(), dims, out.data_mut());
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, None, Op::GlobalAvgPool { x }))
    }

    // -- normalization -----------------------------------------------------

    /// Train-mode batch norm. Returns the node plus the batch statistics the
    /// caller folds into running stats.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f32,
    ) -> Result<(NodeId, Vec<f32>, Vec<f32>)> {
        let d = self.value(x).as_nchw()?;
        let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
        self.check_bn_params(dims.c, gamma, beta)?;
        let (mean, var) = kernels::channel_stats(self.value(x).data(), dims);
        let invstd: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = Tensor::zeros(self.value(x).shape());
        kernels::bn_normalize(
            self.value(x).data(),
            dims,
            &mean,
            &invstd,
            self.value(gamma).data(),
            self.value(beta).data(),
            out.data_mut(),
        );
        let rg = self.any_grad(&[x, gamma, beta]);
        let id = self.push(
            out,
            rg,
            None,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                invstd,
                train_stats: true,
            },
        );
        Ok((id, mean, var))
    }

    /// Eval-mode batch norm using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<NodeId> {
        let d = self.value(x).as_nchw()?;
        let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
        self.check_bn_params(dims.c, gamma, beta)?;
        if running_mean.len() != dims.c || running_var.len() != dims.c {
            return Err(Error::shape(
                "batch_norm_eval",
                format!("running stats length != {} channels", dims.c),
            ));
        }
        let invstd: Vec<f32> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = Tensor::zeros(self.value(x).shape());
        kernels::bn_normalize(
            self.value(x).data(),
            dims,
            running_mean,
            &invstd,
            self.value(gamma).data(),
            self.value(beta).data(),
            out.data_mut(),
        );
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            rg,
            None,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                invstd,
                train_stats: false,
            },
        ))
    }

    fn check_bn_params(&self, c: usize, gamma: NodeId, beta: NodeId) -> Result<()> {
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "gamma {:?} / beta {:?}, want [{c}]",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        Ok(())
    }

    /// Per-channel, per-instance normalization over H, W (no affine).
    pub fn instance_norm(&mut self, x: NodeId, eps: f32) -> Result<NodeId> {
        let d = self.value(x).as_nchw()?;
        let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
        let (mean, invstd) = kernels::instance_stats(self.value(x).data(), dims, eps);
        let mut out = Tensor::zeros(self.value(x).shape());
        kernels::instance_normalize(self.value(x).data(), dims, &mean, &invstd, out.data_mut());
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, None, Op::InstanceNorm { x, mean, invstd }))
    }

    /// Inverted dropout: train mode zeroes units with probability `rate` and
    /// scales kept units by `1/(1-rate)`; eval mode is the identity.
    pub fn dropout(&mut self, x: NodeId, rate: f32, seed: u64, train: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} not in [0,1)")));
        }
        let mask = if train && rate > 0.0 {
            let scale = 1.0 / (1.0 - rate);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Some(
                (0..self.value(x).numel())
                    .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { scale })
                    .collect::<Vec<f32>>(),
            )
        } else {
            None
        };
        let v = match &mask {
            None => self.value(x).clone(),
            Some(m) => {
                let data = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(m)
                    .map(|(&a, &f)| a * f)
                    .collect();
                Tensor::new(self.value(x).shape().to_vec(), data)?
            }
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(v, rg, None, Op::Dropout { x, mask }))
    }

    // -- structure ---------------------------------------------------------

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let da = self.value(a).as_nchw()?;
        let db = self.value(b).as_nchw()?;
        if da.0 != db.0 || da.2 != db.2 || da.3 != db.3 {
            return Err(Error::shape(
                "concat_channels",
                format!(
                    "{:?} vs {:?} (batch/spatial extents must match)",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        if self.value(a).rank() != self.value(b).rank() {
            return Err(Error::shape("concat_channels", "mixed rank inputs".to_string()));
        }
        let (n, ca, h, w) = da;
        let cb = db.1;
        let mut out_shape = self.value(a).shape().to_vec();
        let k = out_shape.len();
        out_shape[k - 3] = ca + cb;
        let mut out = Tensor::zeros(&out_shape);
        {
            let hw = h * w;
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            for ni in 0..n {
                let dst = &mut od[ni * (ca + cb) * hw..(ni + 1) * (ca + cb) * hw];
                dst[..ca * hw].copy_from_slice(&ad[ni * ca * hw..(ni + 1) * ca * hw]);
                dst[ca * hw..].copy_from_slice(&bd[ni * cb * hw..(ni + 1) * cb * hw]);
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, None, Op::ConcatChannels { a, b, c_a: ca }))
    }

    fn channel_param_mode(&self, x: NodeId, s: NodeId, op: &'static str) -> Result<bool> {
        let d = self.value(x).as_nchw()?;
        match self.value(s).shape() {
            [c] if *c == d.1 => Ok(false),
            [n, c] if *n == d.0 && *c == d.1 && self.value(x).rank() == 4 => Ok(true),
            s_shape => Err(Error::shape(
                op,
                format!("scale shape {s_shape:?} incompatible with input {:?}", self.value(x).shape()),
            )),
        }
    }

    /// `y[n,c,·] = s[(n,)c] * x[n,c,·]`
    pub fn scale_channels(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let per_sample = self.channel_param_mode(x, s, "scale_channels")?;
        let d = self.value(x).as_nchw()?;
        let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
        let mut out = Tensor::zeros(self.value(x).shape());
        kernels::modulate_channels_forward(
            self.value(x).data(),
            dims,
            self.value(s).data(),
            None,
            per_sample,
            out.data_mut(),
        );
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(out, rg, None, Op::ScaleChannels { x, s, per_sample }))
    }

    /// `y[n,c,·] = s[(n,)c] * x[n,c,·] + t[(n,)c]`
    pub fn modulate_channels(&mut self, x: NodeId, s: NodeId, t: NodeId) -> Result<NodeId> {
        let per_sample = self.channel_param_mode(x, s, "modulate_channels")?;
        if self.value(s).shape() != self.value(t).shape() {
            return Err(Error::shape(
                "modulate_channels",
                format!("scale {:?} vs shift {:?}", self.value(s).shape(), self.value(t).shape()),
            ));
        }
        let d = self.value(x).as_nchw()?;
        let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
        let mut out = Tensor::zeros(self.value(x).shape());
        kernels::modulate_channels_forward(
            self.value(x).data(),
            dims,
            self.value(s).data(),
            Some(self.value(t).data()),
            per_sample,
            out.data_mut(),
        );
        let rg = self.any_grad(&[x, s, t]);
        Ok(self.push(out, rg, None, Op::ModulateChannels { x, s, t, per_sample }))
    }

    /// `y = x W^T + b` for rank-1 `x` `[di]` or rank-2 `x` `[n, di]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, di) = match self.value(x).shape() {
            [di] => (1, *di),
            [n, di] => (*n, *di),
            s => return Err(Error::shape("linear", format!("input rank {} ({s:?})", s.len()))),
        };
        let (dout, wi) = match self.value(w).shape() {
            [o, i] => (*o, *i),
            s => return Err(Error::shape("linear", format!("weight must be OxI, got {s:?}"))),
        };
        if wi != di || self.value(b).shape() != [dout] {
            return Err(Error::shape(
                "linear",
                format!(
                    "x[{di}] w{:?} b{:?} mismatch",
                    self.value(w).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let out_shape = if self.value(x).rank() == 1 {
            vec![dout]
        } else {
            vec![n, dout]
        };
        let mut out = Tensor::zeros(&out_shape);
        kernels::linear_forward(
            self.value(x).data(),
            n,
            di,
            self.value(w).data(),
            self.value(b).data(),
            dout,
            out.data_mut(),
        );
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, rg, None, Op::Linear { x, w, b }))
    }

    pub fn box_mean(&mut self, x: NodeId, radius: usize) -> Result<NodeId> {
        let d = self.value(x).as_nchw()?;
        let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
        if radius == 0 || radius >= dims.h.min(dims.w) {
            return Err(Error::invalid(
                "box_mean",
                format!("radius {radius} vs extent {}x{}", dims.h, dims.w),
            ));
        }
        let mut out = Tensor::zeros(self.value(x).shape());
        kernels::box_mean_forward(self.value(x).data(), dims, radius, out.data_mut());
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, None, Op::BoxMean { x, radius }))
    }

    pub fn pad_replicate(&mut self, x: NodeId, pad_h: usize, pad_w: usize) -> Result<NodeId> {
        if pad_h == 0 && pad_w == 0 {
            // still record a node to keep shapes uniform for callers
        }
        let d = self.value(x).as_nchw()?;
        let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
        let mut out_shape = self.value(x).shape().to_vec();
        let k = out_shape.len();
        out_shape[k - 2] = dims.h + pad_h;
        out_shape[k - 1] = dims.w + pad_w;
        let mut out = Tensor::zeros(&out_shape);
        kernels::pad_replicate_forward(self.value(x).data(), dims, pad_h, pad_w, out.data_mut());
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, None, Op::PadReplicate { x, pad_h, pad_w }))
    }

    pub fn crop(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let d = self.value(x).as_nchw()?;
        let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
        if oh > dims.h || ow > dims.w {
            return Err(Error::shape(
                "crop",
                format!("crop {oh}x{ow} larger than input {}x{}", dims.h, dims.w),
            ));
        }
        let mut out_shape = self.value(x).shape().to_vec();
        let k = out_shape.len();
        out_shape[k - 2] = oh;
        out_shape[k - 1] = ow;
        let mut out = Tensor::zeros(&out_shape);
        kernels::crop_forward(self.value(x).data(), dims, oh, ow, out.data_mut());
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, None, Op::Crop { x, oh, ow }))
    }

    // -- reductions --------------------------------------------------------

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let sum: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(sum as f32), rg, Some(sum), Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let sum: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let mean = sum / n;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(mean as f32), rg, Some(mean), Op::MeanAll { x })
    }

    // -- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss; populates grads of every
    /// `requires_grad` node on the path.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].value.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::DetachedBackward);
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            self.step_backward(id);
        }
        Ok(())
    }

    fn step_backward(&mut self, id: usize) {
        let (before, rest) = self.nodes.split_at_mut(id);
        let node = &mut rest[0];
        let dy = node.grad.as_ref().expect("grad present").clone();
        let out_value = &node.value;

        let ensure = |nodes: &mut [Node], t: NodeId| -> bool {
            if !nodes[t.0].requires_grad {
                return false;
            }
            if nodes[t.0].grad.is_none() {
                let n = nodes[t.0].value.numel();
                nodes[t.0].grad = Some(vec![0.0; n]);
            }
            true
        };

        match &node.op {
            Op::Leaf | Op::Detach { .. } => {}
            Op::Relu { x } => {
                if ensure(before, *x) {
                    let xv = before[x.0].value.data().to_vec();
                    let g = before[x.0].grad.as_mut().unwrap();
                    for (i, &gv) in dy.iter().enumerate() {
                        if xv[i] > 0.0 {
                            g[i] += gv;
                        }
                    }
                }
            }
            Op::LRelu { x, slope } => {
                let slope = *slope;
                if ensure(before, *x) {
                    let xv = before[x.0].value.data().to_vec();
                    let g = before[x.0].grad.as_mut().unwrap();
                    for (i, &gv) in dy.iter().enumerate() {
                        g[i] += if xv[i] > 0.0 { gv } else { slope * gv };
                    }
                }
            }
            Op::Sigmoid { x } => {
                if ensure(before, *x) {
                    let yv = out_value.data().to_vec();
                    let g = before[x.0].grad.as_mut().unwrap();
                    for (i, &gv) in dy.iter().enumerate() {
                        g[i] += gv * yv[i] * (1.0 - yv[i]);
                    }
                }
            }
            Op::Abs { x } => {
                if ensure(before, *x) {
                    let xv = before[x.0].value.data().to_vec();
                    let g = before[x.0].grad.as_mut().unwrap();
                    for (i, &gv) in dy.iter().enumerate() {
                        g[i] += gv * if xv[i] > 0.0 { 1.0 } else if xv[i] < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
            Op::Add { a, b } => {
                for t in [*a, *b] {
                    if ensure(before, t) {
                        let g = before[t.0].grad.as_mut().unwrap();
                        for (gv, &d) in g.iter_mut().zip(&dy) {
                            *gv += d;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if ensure(before, *a) {
                    let g = before[a.0].grad.as_mut().unwrap();
                    for (gv, &d) in g.iter_mut().zip(&dy) {
                        *gv += d;
                    }
                }
                if ensure(before, *b) {
                    let g = before[b.0].grad.as_mut().unwrap();
                    for (gv, &d) in g.iter_mut().zip(&dy) {
                        *gv -= d;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if ensure(before, a) {
                    let bv = before[b.0].value.data().to_vec();
                    let g = before[a.0].grad.as_mut().unwrap();
                    for (i, &d) in dy.iter().enumerate() {
                        g[i] += d * bv[i];
                    }
                }
                if ensure(before, b) {
                    let av = before[a.0].value.data().to_vec();
                    let g = before[b.0].grad.as_mut().unwrap();
                    for (i, &d) in dy.iter().enumerate() {
                        g[i] += d * av[i];
                    }
                }
            }
            Op::Div { a, b } => {
                let (a, b) = (*a, *b);
                let yv = out_value.data().to_vec();
                if ensure(before, a) {
                    let bv = before[b.0].value.data().to_vec();
                    let g = before[a.0].grad.as_mut().unwrap();
                    for (i, &d) in dy.iter().enumerate() {
                        g[i] += d / bv[i];
                    }
                }
                if ensure(before, b) {
                    let bv = before[b.0].value.data().to_vec();
                    let g = before[b.0].grad.as_mut().unwrap();
                    for (i, &d) in dy.iter().enumerate() {
                        g[i] -= d * yv[i] / bv[i];
                    }
                }
            }
            Op::AddScalar { x } => {
                if ensure(before, *x) {
                    let g = before[x.0].grad.as_mut().unwrap();
                    for (gv, &d) in g.iter_mut().zip(&dy) {
                        *gv += d;
                    }
                }
            }
            Op::MulScalar { x, c } => {
                let c = *c;
                if ensure(before, *x) {
                    let g = before[x.0].grad.as_mut().unwrap();
                    for (gv, &d) in g.iter_mut().zip(&dy) {
                        *gv += c * d;
                    }
                }
            }
            Op::Conv1x1 { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let d = before[x.0].value.as_nchw().unwrap();
                let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
                let co = before[w.0].value.shape()[0];
                if ensure(before, x) {
                    let wv = before[w.0].value.data().to_vec();
                    let d_out = Dims { c: co, ..dims };
                    let g = before[x.0].grad.as_mut().unwrap();
                    kernels::conv1x1_backward_input(&dy, d_out, &wv, dims.c, g);
                }
                if before[w.0].requires_grad || before[b.0].requires_grad {
                    let xv = before[x.0].value.data().to_vec();
                    let mut dw = vec![0.0f32; co * dims.c];
                    let mut db = vec![0.0f32; co];
                    kernels::conv1x1_backward_params(&xv, dims, &dy, co, &mut dw, &mut db);
                    if ensure(before, w) {
                        let g = before[w.0].grad.as_mut().unwrap();
                        for (gv, d) in g.iter_mut().zip(dw) {
                            *gv += d;
                        }
                    }
                    if ensure(before, b) {
                        let g = before[b.0].grad.as_mut().unwrap();
                        for (gv, d) in g.iter_mut().zip(db) {
                            *gv += d;
                        }
                    }
                }
            }
            Op::Conv3x3 { x, w, b, stride } => {
                let (x, w, b, stride) = (*x, *w, *b, *stride);
                let d = before[x.0].value.as_nchw().unwrap();
                let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
                let co = before[w.0].value.shape()[0];
                if ensure(before, x) {
                    let wv = before[w.0].value.data().to_vec();
                    let g = before[x.0].grad.as_mut().unwrap();
                    kernels::conv3x3_backward_input(&dy, dims, &wv, co, stride, g);
                }
                if before[w.0].requires_grad || before[b.0].requires_grad {
                    let xv = before[x.0].value.data().to_vec();
                    let mut dw = vec![0.0f32; co * dims.c * 9];
                    let mut db = vec![0.0f32; co];
                    kernels::conv3x3_backward_params(&xv, dims, &dy, co, stride, &mut dw, &mut db);
                    if ensure(before, w) {
                        let g = before[w.0].grad.as_mut().unwrap();
                        for (gv, d) in g.iter_mut().zip(dw) {
                            *gv += d;
                        }
                    }
                    if ensure(before, b) {
                        let g = before[b.0].grad.as_mut().unwrap();
                        for (gv, d) in g.iter_mut().zip(db) {
                            *gv += d;
                        }
                    }
                }
            }
            Op::AvgPool2 { x } => {
                if ensure(before, *x) {
                    let d = before[x.0].value.as_nchw().unwrap();
                    let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
                    let g = before[x.0].grad.as_mut().unwrap();
                    kernels::avgpool2_backward(&dy, dims, g);
                }
            }
            Op::Upsample2 { x } => {
                if ensure(before, *x) {
                    let d = before[x.0].value.as_nchw().unwrap();
                    let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
                    let g = before[x.0].grad.as_mut().unwrap();
                    kernels::upsample2_backward(&dy, dims, g);
                }
            }
            Op::GlobalAvgPool { x } => {
                if ensure(before, *x) {
                    let d = before[x.0].value.as_nchw().unwrap();
                    let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
                    let g = before[x.0].grad.as_mut().unwrap();
                    kernels::global_avg_pool_backward(&dy, dims, g);
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, invstd, train_stats } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (mean, invstd, train_stats) = (mean.clone(), invstd.clone(), *train_stats);
                let d = before[x.0].value.as_nchw().unwrap();
                let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
                let xv = before[x.0].value.data().to_vec();
                let gv = before[gamma.0].value.data().to_vec();
                let mut dx = vec![0.0f32; xv.len()];
                let mut dgamma = vec![0.0f32; dims.c];
                let mut dbeta = vec![0.0f32; dims.c];
                if train_stats {
                    kernels::bn_backward_train(
                        &xv, dims, &dy, &mean, &invstd, &gv, &mut dx, &mut dgamma, &mut dbeta,
                    );
                } else {
                    kernels::bn_backward_eval(
                        &xv, dims, &dy, &mean, &invstd, &gv, &mut dx, &mut dgamma, &mut dbeta,
                    );
                }
                if ensure(before, x) {
                    let g = before[x.0].grad.as_mut().unwrap();
                    for (a, b) in g.iter_mut().zip(dx) {
                        *a += b;
                    }
                }
                if ensure(before, gamma) {
                    let g = before[gamma.0].grad.as_mut().unwrap();
                    for (a, b) in g.iter_mut().zip(dgamma) {
                        *a += b;
                    }
                }
                if ensure(before, beta) {
                    let g = before[beta.0].grad.as_mut().unwrap();
                    for (a, b) in g.iter_mut().zip(dbeta) {
                        *a += b;
                    }
                }
            }
            Op::InstanceNorm { x, mean, invstd } => {
                let x = *x;
                let (mean, invstd) = (mean.clone(), invstd.clone());
                if ensure(before, x) {
                    let d = before[x.0].value.as_nchw().unwrap();
                    let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
                    let xv = before[x.0].value.data().to_vec();
                    let g = before[x.0].grad.as_mut().unwrap();
                    kernels::instance_norm_backward(&xv, dims, &dy, &mean, &invstd, g);
                }
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let mask = mask.clone();
                if ensure(before, x) {
                    let g = before[x.0].grad.as_mut().unwrap();
                    match mask {
                        None => {
                            for (gv, &d) in g.iter_mut().zip(&dy) {
                                *gv += d;
                            }
                        }
                        Some(m) => {
                            for (i, &d) in dy.iter().enumerate() {
                                g[i] += d * m[i];
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels { a, b, c_a } => {
                let (a, b, c_a) = (*a, *b, *c_a);
                let da = before[a.0].value.as_nchw().unwrap();
                let db_ = before[b.0].value.as_nchw().unwrap();
                let hw = da.2 * da.3;
                let (n, ca, cb) = (da.0, c_a, db_.1);
                if ensure(before, a) {
                    let g = before[a.0].grad.as_mut().unwrap();
                    for ni in 0..n {
                        let src = &dy[ni * (ca + cb) * hw..ni * (ca + cb) * hw + ca * hw];
                        for (gv, &d) in g[ni * ca * hw..(ni + 1) * ca * hw].iter_mut().zip(src) {
                            *gv += d;
                        }
                    }
                }
                if ensure(before, b) {
                    let g = before[b.0].grad.as_mut().unwrap();
                    for ni in 0..n {
                        let src =
                            &dy[ni * (ca + cb) * hw + ca * hw..(ni + 1) * (ca + cb) * hw];
                        for (gv, &d) in g[ni * cb * hw..(ni + 1) * cb * hw].iter_mut().zip(src) {
                            *gv += d;
                        }
                    }
                }
            }
            Op::ScaleChannels { x, s, per_sample } => {
                let (x, s, per_sample) = (*x, *s, *per_sample);
                let d = before[x.0].value.as_nchw().unwrap();
                let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
                let xv = before[x.0].value.data().to_vec();
                let sv = before[s.0].value.data().to_vec();
                let mut dx = vec![0.0f32; xv.len()];
                let mut ds = vec![0.0f32; sv.len()];
                kernels::modulate_channels_backward(
                    &xv, dims, &dy, &sv, per_sample, &mut dx, &mut ds, None,
                );
                if ensure(before, x) {
                    let g = before[x.0].grad.as_mut().unwrap();
                    for (a, b) in g.iter_mut().zip(dx) {
                        *a += b;
                    }
                }
                if ensure(before, s) {
                    let g = before[s.0].grad.as_mut().unwrap();
                    for (a, b) in g.iter_mut().zip(ds) {
                        *a += b;
                    }
                }
            }
            Op::ModulateChannels { x, s, t, per_sample } => {
                let (x, s, t, per_sample) = (*x, *s, *t, *per_sample);
                let d = before[x.0].value.as_nchw().unwrap();
                let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
                let xv = before[x.0].value.data().to_vec();
                let sv = before[s.0].value.data().to_vec();
                let mut dx = vec![0.0f32; xv.len()];
                let mut ds = vec![0.0f32; sv.len()];
                let mut dt = vec![0.0f32; sv.len()];
                kernels::modulate_channels_backward(
                    &xv, dims, &dy, &sv, per_sample, &mut dx, &mut ds, Some(&mut dt),
                );
                if ensure(before, x) {
                    let g = before[x.0].grad.as_mut().unwrap();
                    for (a, b) in g.iter_mut().zip(dx) {
                        *a += b;
                    }
                }
                if ensure(before, s) {
                    let g = before[s.0].grad.as_mut().unwrap();
                    for (a, b) in g.iter_mut().zip(ds) {
                        *a += b;
                    }
                }
                if ensure(before, t) {
                    let g = before[t.0].grad.as_mut().unwrap();
                    for (a, b) in g.iter_mut().zip(dt) {
                        *a += b;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (n, di) = match before[x.0].value.shape() {
                    [di] => (1, *di),
                    [n, di] => (*n, *di),
                    _ => unreachable!(),
                };
                let dout = before[w.0].value.shape()[0];
                let xv = before[x.0].value.data().to_vec();
                let wv = before[w.0].value.data().to_vec();
                let mut dx = vec![0.0f32; xv.len()];
                let mut dw = vec![0.0f32; wv.len()];
                let mut db = vec![0.0f32; dout];
                kernels::linear_backward(&xv, n, di, &wv, dout, &dy, &mut dx, &mut dw, &mut db);
                if ensure(before, x) {
                    let g = before[x.0].grad.as_mut().unwrap();
                    for (a, b2) in g.iter_mut().zip(dx) {
                        *a += b2;
                    }
                }
                if ensure(before, w) {
                    let g = before[w.0].grad.as_mut().unwrap();
                    for (a, b2) in g.iter_mut().zip(dw) {
                        *a += b2;
                    }
                }
                if ensure(before, b) {
                    let g = before[b.0].grad.as_mut().unwrap();
                    for (a, b2) in g.iter_mut().zip(db) {
                        *a += b2;
                    }
                }
            }
            Op::BoxMean { x, radius } => {
                let (x, radius) = (*x, *radius);
                if ensure(before, x) {
                    let d = before[x.0].value.as_nchw().unwrap();
                    let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
                    let g = before[x.0].grad.as_mut().unwrap();
                    kernels::box_mean_backward(&dy, dims, radius, g);
                }
            }
            Op::PadReplicate { x, pad_h, pad_w } => {
                let (x, ph, pw) = (*x, *pad_h, *pad_w);
                if ensure(before, x) {
                    let d = before[x.0].value.as_nchw().unwrap();
                    let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
                    let g = before[x.0].grad.as_mut().unwrap();
                    kernels::pad_replicate_backward(&dy, dims, ph, pw, g);
                }
            }
            Op::Crop { x, oh, ow } => {
                let (x, oh, ow) = (*x, *oh, *ow);
                if ensure(before, x) {
                    let d = before[x.0].value.as_nchw().unwrap();
                    let dims = Dims { n: d.0, c: d.1, h: d.2, w: d.3 };
                    let g = before[x.0].grad.as_mut().unwrap();
                    kernels::crop_backward(&dy, dims, oh, ow, g);
                }
            }
            Op::SumAll { x } => {
                if ensure(before, *x) {
                    let d = dy[0];
                    let g = before[x.0].grad.as_mut().unwrap();
                    for gv in g.iter_mut() {
                        *gv += d;
                    }
                }
            }
            Op::MeanAll { x } => {
                if ensure(before, *x) {
                    let n = before[x.0].value.numel() as f32;
                    let d = dy[0] / n;
                    let g = before[x.0].grad.as_mut().unwrap();
                    for gv in g.iter_mut() {
                        *gv += d;
                    }
                }
            }
        }
    }
}
