//! Adaptive universal color transformation: a pixel-independent 1x1-conv
//! base network, modulated per image by a condition vector extracted from a
//! guided-filter base/detail split of the downsampled input.
//!
//! The condition network runs two block stacks side by side: CHM blocks
//! (1x1 conv, average pool, LReLU, channel-selective norm) on the smooth
//! base layer, and FCM blocks (strided 3x3 conv, LReLU, batch norm) on the
//! detail layer, so low- and high-frequency statistics both reach the
//! condition vector.

use super::{
    AuctConfig, BnParams, ChmBlock, ConvParams, CsnormParams, FcmBlock, GfmHead, LinearParams,
    ParamKind, BN_EPS, BN_MOMENTUM, DROPOUT_RATE, GUIDED_EPS, GUIDED_RADIUS, IN_EPS, LRELU_SLOPE,
};
use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::kernels::{self, Dims};
use crate::tensor::{derive_seed, InitScheme, ParamInit, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AuctParams {
    pub base: Vec<ConvParams>,
    pub chm: Vec<ChmBlock>,
    pub fcm: Vec<FcmBlock>,
    pub fuse0: ConvParams,
    pub fuse1: ConvParams,
    pub gfm_heads: Vec<GfmHead>,
}

impl AuctParams {
    /// `base_noise` scales the fan-in noise added to the identity-seeded
    /// base convolutions; 0 gives the exact identity stack.
    pub fn init(cfg: &AuctConfig, seed: u64, base_noise: f32) -> Self {
        let mk = |name: &str, scheme: InitScheme, shape: &[usize]| {
            ParamInit {
                scheme,
                seed: derive_seed(seed, name),
            }
            .materialize(shape)
        };
        let base = (0..cfg.n_layers)
            .map(|i| {
                let (ci, co) = (cfg.base_layer_in(i), cfg.base_layer_out(i));
                ConvParams {
                    w: mk(
                        &format!("auct.base.{i}.w"),
                        InitScheme::IdentityConv { fan_in: ci, noise: base_noise },
                        &[co, ci],
                    ),
                    b: Tensor::zeros(&[co]),
                }
            })
            .collect();
        let cc = cfg.cond_channels;
        let chm = (0..cfg.n_blocks)
            .map(|i| {
                let ci = if i == 0 { 3 } else { cc };
                ChmBlock {
                    conv: ConvParams {
                        w: mk(
                            &format!("auct.chm.{i}.conv.w"),
                            InitScheme::FanInUniform { fan_in: ci },
                            &[cc, ci],
                        ),
                        b: Tensor::zeros(&[cc]),
                    },
                    norm: CsnormParams {
                        gate_logits: Tensor::zeros(&[cc]),
                        gamma: Tensor::full(&[cc], 1.0),
                        beta: Tensor::zeros(&[cc]),
                    },
                }
            })
            .collect();
        let fcm = (0..cfg.n_blocks)
            .map(|i| {
                let ci = if i == 0 { 3 } else { cc };
                FcmBlock {
                    conv: ConvParams {
                        w: mk(
                            &format!("auct.fcm.{i}.conv.w"),
                            InitScheme::FanInUniform { fan_in: ci * 9 },
                            &[cc, ci, 3, 3],
                        ),
                        b: Tensor::zeros(&[cc]),
                    },
                    norm: BnParams {
                        gamma: Tensor::full(&[cc], 1.0),
                        beta: Tensor::zeros(&[cc]),
                        running_mean: Tensor::zeros(&[cc]),
                        running_var: Tensor::full(&[cc], 1.0),
                    },
                }
            })
            .collect();
        let vdim = cfg.cond_vector_dim;
        let fuse0 = ConvParams {
            w: mk(
                "auct.fuse0.w",
                InitScheme::FanInUniform { fan_in: 2 * cc },
                &[vdim, 2 * cc],
            ),
            b: Tensor::zeros(&[vdim]),
        };
        let fuse1 = ConvParams {
            w: mk(
                "auct.fuse1.w",
                InitScheme::FanInUniform { fan_in: vdim },
                &[vdim, vdim],
            ),
            b: Tensor::zeros(&[vdim]),
        };
        let gfm_heads = (0..cfg.n_layers)
            .map(|i| {
                let co = cfg.base_layer_out(i);
                GfmHead {
                    scale: LinearParams {
                        w: Tensor::zeros(&[co, vdim]),
                        b: Tensor::zeros(&[co]),
                    },
                    shift: LinearParams {
                        w: Tensor::zeros(&[co, vdim]),
                        b: Tensor::zeros(&[co]),
                    },
                }
            })
            .collect();
        AuctParams {
            base,
            chm,
            fcm,
            fuse0,
            fuse1,
            gfm_heads,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        use ParamKind::*;
        for (i, c) in self.base.iter().enumerate() {
            f(&format!("auct.base.{i}.w"), &c.w, Trainable);
            f(&format!("auct.base.{i}.b"), &c.b, Trainable);
        }
        for (i, b) in self.chm.iter().enumerate() {
            f(&format!("auct.chm.{i}.conv.w"), &b.conv.w, Trainable);
            f(&format!("auct.chm.{i}.conv.b"), &b.conv.b, Trainable);
            f(&format!("auct.chm.{i}.gate"), &b.norm.gate_logits, Trainable);
            f(&format!("auct.chm.{i}.gamma"), &b.norm.gamma, Trainable);
            f(&format!("auct.chm.{i}.beta"), &b.norm.beta, Trainable);
        }
        for (i, b) in self.fcm.iter().enumerate() {
            f(&format!("auct.fcm.{i}.conv.w"), &b.conv.w, Trainable);
            f(&format!("auct.fcm.{i}.conv.b"), &b.conv.b, Trainable);
            f(&format!("auct.fcm.{i}.bn.gamma"), &b.norm.gamma, Trainable);
            f(&format!("auct.fcm.{i}.bn.beta"), &b.norm.beta, Trainable);
            f(&format!("auct.fcm.{i}.bn.running_mean"), &b.norm.running_mean, Buffer);
            f(&format!("auct.fcm.{i}.bn.running_var"), &b.norm.running_var, Buffer);
        }
        f("auct.fuse0.w", &self.fuse0.w, Trainable);
        f("auct.fuse0.b", &self.fuse0.b, Trainable);
        f("auct.fuse1.w", &self.fuse1.w, Trainable);
        f("auct.fuse1.b", &self.fuse1.b, Trainable);
        for (i, h) in self.gfm_heads.iter().enumerate() {
            f(&format!("auct.head.{i}.scale.w"), &h.scale.w, Trainable);
            f(&format!("auct.head.{i}.scale.b"), &h.scale.b, Trainable);
            f(&format!("auct.head.{i}.shift.w"), &h.shift.w, Trainable);
            f(&format!("auct.head.{i}.shift.b"), &h.shift.b, Trainable);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        use ParamKind::*;
        for (i, c) in self.base.iter_mut().enumerate() {
            f(&format!("auct.base.{i}.w"), &mut c.w, Trainable);
            f(&format!("auct.base.{i}.b"), &mut c.b, Trainable);
        }
        for (i, b) in self.chm.iter_mut().enumerate() {
            f(&format!("auct.chm.{i}.conv.w"), &mut b.conv.w, Trainable);
            f(&format!("auct.chm.{i}.conv.b"), &mut b.conv.b, Trainable);
            f(&format!("auct.chm.{i}.gate"), &mut b.norm.gate_logits, Trainable);
            f(&format!("auct.chm.{i}.gamma"), &mut b.norm.gamma, Trainable);
            f(&format!("auct.chm.{i}.beta"), &mut b.norm.beta, Trainable);
        }
        for (i, b) in self.fcm.iter_mut().enumerate() {
            f(&format!("auct.fcm.{i}.conv.w"), &mut b.conv.w, Trainable);
            f(&format!("auct.fcm.{i}.conv.b"), &mut b.conv.b, Trainable);
            f(&format!("auct.fcm.{i}.bn.gamma"), &mut b.norm.gamma, Trainable);
            f(&format!("auct.fcm.{i}.bn.beta"), &mut b.norm.beta, Trainable);
            f(&format!("auct.fcm.{i}.bn.running_mean"), &mut b.norm.running_mean, Buffer);
            f(&format!("auct.fcm.{i}.bn.running_var"), &mut b.norm.running_var, Buffer);
        }
        f("auct.fuse0.w", &mut self.fuse0.w, Trainable);
        f("auct.fuse0.b", &mut self.fuse0.b, Trainable);
        f("auct.fuse1.w", &mut self.fuse1.w, Trainable);
        f("auct.fuse1.b", &mut self.fuse1.b, Trainable);
        for (i, h) in self.gfm_heads.iter_mut().enumerate() {
            f(&format!("auct.head.{i}.scale.w"), &mut h.scale.w, Trainable);
            f(&format!("auct.head.{i}.scale.b"), &mut h.scale.b, Trainable);
            f(&format!("auct.head.{i}.shift.w"), &mut h.shift.w, Trainable);
            f(&format!("auct.head.{i}.shift.b"), &mut h.shift.b, Trainable);
        }
    }
}

/// Forward execution mode for graph builders.
#[derive(Debug, Clone, Copy)]
pub enum ExecMode {
    Train { dropout_seed: u64 },
    Eval,
}

impl ExecMode {
    pub fn is_train(&self) -> bool {
        matches!(self, ExecMode::Train { .. })
    }
}

/// Graph node ids of all AUCT parameters, in the layout of [`AuctParams`].
pub struct AuctNodes {
    pub base: Vec<(NodeId, NodeId)>,
    pub chm: Vec<(NodeId, NodeId, NodeId, NodeId, NodeId)>, // w, b, gate, gamma, beta
    pub fcm: Vec<(NodeId, NodeId, NodeId, NodeId)>,         // w, b, gamma, beta
    pub fcm_running: Vec<(Vec<f32>, Vec<f32>)>,
    pub fuse0: (NodeId, NodeId),
    pub fuse1: (NodeId, NodeId),
    pub heads: Vec<(NodeId, NodeId, NodeId, NodeId)>, // sw, sb, tw, tb
}

impl AuctParams {
    /// Insert every parameter as a graph leaf. When `trainable`, each
    /// trainable tensor's node id is appended to `registry` in visit order.
    pub fn to_graph(
        &self,
        g: &mut Graph,
        trainable: bool,
        registry: &mut Vec<NodeId>,
    ) -> AuctNodes {
        let mut leaf = |g: &mut Graph, t: &Tensor, reg: &mut Vec<NodeId>| {
            let id = g.leaf(t.clone(), trainable);
            if trainable {
                reg.push(id);
            }
            id
        };
        let base = self
            .base
            .iter()
            .map(|c| (leaf(g, &c.w, registry), leaf(g, &c.b, registry)))
            .collect();
        let chm = self
            .chm
            .iter()
            .map(|b| {
                (
                    leaf(g, &b.conv.w, registry),
                    leaf(g, &b.conv.b, registry),
                    leaf(g, &b.norm.gate_logits, registry),
                    leaf(g, &b.norm.gamma, registry),
                    leaf(g, &b.norm.beta, registry),
                )
            })
            .collect();
        let fcm = self
            .fcm
            .iter()
            .map(|b| {
                (
                    leaf(g, &b.conv.w, registry),
                    leaf(g, &b.conv.b, registry),
                    leaf(g, &b.norm.gamma, registry),
                    leaf(g, &b.norm.beta, registry),
                )
            })
            .collect();
        let fcm_running = self
            .fcm
            .iter()
            .map(|b| {
                (
                    b.norm.running_mean.data().to_vec(),
                    b.norm.running_var.data().to_vec(),
                )
            })
            .collect();
        let fuse0 = (leaf(g, &self.fuse0.w, registry), leaf(g, &self.fuse0.b, registry));
        let fuse1 = (leaf(g, &self.fuse1.w, registry), leaf(g, &self.fuse1.b, registry));
        let heads = self
            .gfm_heads
            .iter()
            .map(|h| {
                (
                    leaf(g, &h.scale.w, registry),
                    leaf(g, &h.scale.b, registry),
                    leaf(g, &h.shift.w, registry),
                    leaf(g, &h.shift.b, registry),
                )
            })
            .collect();
        AuctNodes {
            base,
            chm,
            fcm,
            fcm_running,
            fuse0,
            fuse1,
            heads,
        }
    }
}

/// Gated per-channel normalization: `y_c = g_c (gamma_c IN(x)_c + beta_c)
/// + (1 - g_c) x_c` with `g = sigmoid(gate_logits)`.
pub fn csnorm_graph(
    g: &mut Graph,
    x: NodeId,
    gate_logits: NodeId,
    gamma: NodeId,
    beta: NodeId,
) -> Result<NodeId> {
    let gates = g.sigmoid(gate_logits);
    let normed = g.instance_norm(x, IN_EPS)?;
    let affine = g.modulate_channels(normed, gamma, beta)?;
    let on = g.scale_channels(affine, gates)?;
    let neg = g.mul_scalar(gates, -1.0);
    let inv = g.add_scalar(neg, 1.0);
    let off = g.scale_channels(x, inv)?;
    g.add(on, off)
}

/// Self-guided edge-preserving filter built from differentiable primitives:
/// `a = var/(var+eps)`, `b = mean - a*mean`, `out = mean(a)*x + mean(b)`.
pub fn guided_filter_graph(g: &mut Graph, p: NodeId, radius: usize, eps: f32) -> Result<NodeId> {
    let (_, _, h, w) = g.value(p).as_nchw()?;
    if radius >= h.min(w) {
        return Err(Error::invalid(
            "guided_filter",
            format!("radius {radius} >= min extent {}", h.min(w)),
        ));
    }
    let mean_p = g.box_mean(p, radius)?;
    let pp = g.mul(p, p)?;
    let corr = g.box_mean(pp, radius)?;
    let mm = g.mul(mean_p, mean_p)?;
    let var = g.sub(corr, mm)?;
    let var_eps = g.add_scalar(var, eps);
    let a = g.div(var, var_eps)?;
    let am = g.mul(a, mean_p)?;
    let b = g.sub(mean_p, am)?;
    let mean_a = g.box_mean(a, radius)?;
    let mean_b = g.box_mean(b, radius)?;
    let ai = g.mul(mean_a, p)?;
    g.add(ai, mean_b)
}

/// Batch statistics produced by train-mode batch norms, in FCM block order.
pub type BnBatchStats = Vec<(Vec<f32>, Vec<f32>)>;

/// Condition network: guided-filter base/detail split, CHM and FCM stacks,
/// concat, 1x1 convs with dropout between, then global average pooling.
/// `x_lr` is the already-downsampled input.
pub fn condition_graph(
    g: &mut Graph,
    cfg: &AuctConfig,
    nodes: &AuctNodes,
    x_lr: NodeId,
    mode: ExecMode,
) -> Result<(NodeId, BnBatchStats)> {
    let (_, _, h, w) = g.value(x_lr).as_nchw()?;
    let need = cfg.min_cond_extent();
    if h < need || w < need {
        return Err(Error::invalid(
            "condition_forward",
            format!("condition input {h}x{w} smaller than {need} (cannot pool {} times)", cfg.n_blocks),
        ));
    }
    let base = guided_filter_graph(g, x_lr, GUIDED_RADIUS, GUIDED_EPS)?;
    let detail = g.sub(x_lr, base)?;

    let mut c = base;
    for (w_id, b_id, gate, gamma, beta) in &nodes.chm {
        c = g.conv1x1(c, *w_id, *b_id)?;
        c = g.avgpool2(c)?;
        c = g.lrelu(c, LRELU_SLOPE)?;
        c = csnorm_graph(g, c, *gate, *gamma, *beta)?;
    }

    let mut f = detail;
    let mut stats = Vec::new();
    for (i, (w_id, b_id, gamma, beta)) in nodes.fcm.iter().enumerate() {
        f = g.conv3x3(f, *w_id, *b_id, 2)?;
        f = g.lrelu(f, LRELU_SLOPE)?;
        f = match mode {
            ExecMode::Train { .. } => {
                let (y, m, v) = g.batch_norm_train(f, *gamma, *beta, BN_EPS)?;
                stats.push((m, v));
                y
            }
            ExecMode::Eval => {
                let (rm, rv) = &nodes.fcm_running[i];
                g.batch_norm_eval(f, *gamma, *beta, rm, rv, BN_EPS)?
            }
        };
    }

    let cat = g.concat_channels(c, f)?;
    let z = g.conv1x1(cat, nodes.fuse0.0, nodes.fuse0.1)?;
    let z = match mode {
        ExecMode::Train { dropout_seed } => g.dropout(z, DROPOUT_RATE, dropout_seed, true)?,
        ExecMode::Eval => g.dropout(z, DROPOUT_RATE, 0, false)?,
    };
    let z = g.conv1x1(z, nodes.fuse1.0, nodes.fuse1.1)?;
    let v = g.global_avg_pool(z)?;
    Ok((v, stats))
}

/// GFM heads: per modulated layer, `scale = 1 + W_s v + b_s` and
/// `shift = W_t v + b_t` (identity modulation at zero init).
pub fn gfm_heads_graph(
    g: &mut Graph,
    nodes: &AuctNodes,
    v: NodeId,
) -> Result<Vec<(NodeId, NodeId)>> {
    nodes
        .heads
        .iter()
        .map(|(sw, sb, tw, tb)| {
            let s_raw = g.linear(v, *sw, *sb)?;
            let s = g.add_scalar(s_raw, 1.0);
            let t = g.linear(v, *tw, *tb)?;
            Ok((s, t))
        })
        .collect()
}

/// Base network: `(conv1x1 -> GFM -> ReLU)^(N-1) -> conv1x1 -> GFM`.
pub fn base_graph(
    g: &mut Graph,
    cfg: &AuctConfig,
    nodes: &AuctNodes,
    x: NodeId,
    gfm: &[(NodeId, NodeId)],
) -> Result<NodeId> {
    if gfm.len() != cfg.n_layers {
        return Err(Error::shape(
            "base_forward",
            format!("{} GFM heads for {} layers", gfm.len(), cfg.n_layers),
        ));
    }
    let mut y = x;
    for (i, ((w_id, b_id), (s, t))) in nodes.base.iter().zip(gfm).enumerate() {
        y = g.conv1x1(y, *w_id, *b_id)?;
        y = g.modulate_channels(y, *s, *t)?;
        if i + 1 < cfg.n_layers {
            y = g.relu(y);
        }
    }
    Ok(y)
}

/// Full AUCT on the graph: condition pass on `x_lr`, heads, then the base
/// network on the full-resolution input. Output is unclamped.
pub fn auct_graph(
    g: &mut Graph,
    cfg: &AuctConfig,
    nodes: &AuctNodes,
    full: NodeId,
    x_lr: NodeId,
    mode: ExecMode,
) -> Result<(NodeId, BnBatchStats)> {
    let (v, stats) = condition_graph(g, cfg, nodes, x_lr, mode)?;
    let gfm = gfm_heads_graph(g, nodes, v)?;
    let out = base_graph(g, cfg, nodes, full, &gfm)?;
    Ok((out, stats))
}

/// Fold train-mode batch statistics into the stored running statistics.
pub fn update_running_stats(params: &mut AuctParams, stats: &BnBatchStats) {
    for (block, (mean, var)) in params.fcm.iter_mut().zip(stats) {
        let m = block.norm.running_mean.data_mut();
        for (r, &b) in m.iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        let v = block.norm.running_var.data_mut();
        for (r, &b) in v.iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

// ---------------------------------------------------------------------------
// Inference path
// ---------------------------------------------------------------------------

/// Per-layer GFM coefficients for a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct GfmParams {
    /// (scale, shift) per base layer, each of that layer's output width.
    pub layers: Vec<(Vec<f32>, Vec<f32>)>,
}

impl AuctParams {
    /// Eval-mode condition vector for one image (input already downsampled).
    /// Runs on a no-grad graph; the condition path is cheap at low res.
    pub fn condition_vector(&self, cfg: &AuctConfig, x_lr: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut reg = Vec::new();
        let nodes = self.to_graph(&mut g, false, &mut reg);
        let x = g.constant(x_lr.clone());
        let (v, _) = condition_graph(&mut g, cfg, &nodes, x, ExecMode::Eval)?;
        Ok(g.value(v).clone())
    }

    /// Evaluate the GFM heads for a condition vector.
    pub fn gfm_params(&self, v: &Tensor) -> Result<GfmParams> {
        let d = v.numel();
        let layers = self
            .gfm_heads
            .iter()
            .map(|h| {
                let co = h.scale.b.numel();
                let mut s = vec![0.0f32; co];
                let mut t = vec![0.0f32; co];
                kernels::linear_forward(v.data(), 1, d, h.scale.w.data(), h.scale.b.data(), co, &mut s);
                for sv in &mut s {
                    *sv += 1.0;
                }
                kernels::linear_forward(v.data(), 1, d, h.shift.w.data(), h.shift.b.data(), co, &mut t);
                (s, t)
            })
            .collect();
        Ok(GfmParams { layers })
    }

    /// Fast base-network inference: pixels stream through the whole layer
    /// stack in blocks. Pixel-independent, so any spatial subset produces
    /// bit-identical values to the full image.
    pub fn base_infer(&self, cfg: &AuctConfig, x: &Tensor, gfm: &GfmParams) -> Result<Tensor> {
        let (n, c, h, w) = x.as_nchw()?;
        if c != 3 {
            return Err(Error::shape("base_forward", format!("expected 3 channels, got {c}")));
        }
        if gfm.layers.len() != cfg.n_layers {
            return Err(Error::shape(
                "base_forward",
                format!("{} GFM layers for {} convs", gfm.layers.len(), cfg.n_layers),
            ));
        }
        let hw = h * w;
        let mut out = Tensor::zeros(x.shape());
        const BLOCK: usize = 2048;
        let cb = cfg.base_channels;
        let blocks_per_image = hw.div_ceil(BLOCK);
        let out_slice = UnsafeSlice(out.data_mut().as_mut_ptr());
        crate::parallel::for_each_range(n * blocks_per_image, |range| {
            let out_slice = out_slice;
            let mut buf_a = vec![0.0f32; cb * BLOCK];
            let mut buf_b = vec![0.0f32; cb * BLOCK];
            for unit in range {
                let ni = unit / blocks_per_image;
                let p0 = (unit % blocks_per_image) * BLOCK;
                let p1 = (p0 + BLOCK).min(hw);
                let len = p1 - p0;
                // gather input block [3][len]
                for ch in 0..3 {
                    let src = &x.data()[(ni * 3 + ch) * hw + p0..(ni * 3 + ch) * hw + p1];
                    buf_a[ch * len..(ch + 1) * len].copy_from_slice(src);
                }
                let mut cur_c = 3;
                for (i, layer) in self.base.iter().enumerate() {
                    let co = cfg.base_layer_out(i);
                    let (scale, shift) = &gfm.layers[i];
                    let wd = layer.w.data();
                    let bd = layer.b.data();
                    let last = i + 1 == cfg.n_layers;
                    for o in 0..co {
                        let (s, t) = (scale[o], shift[o]);
                        let row = &wd[o * cur_c..(o + 1) * cur_c];
                        let dst = &mut buf_b[o * len..(o + 1) * len];
                        dst.fill(bd[o]);
                        for (ci, &wv) in row.iter().enumerate() {
                            let srcrow = &buf_a[ci * len..(ci + 1) * len];
                            for (d, &v) in dst.iter_mut().zip(srcrow) {
                                *d += wv * v;
                            }
                        }
                        for d in dst.iter_mut() {
                            *d = s * *d + t;
                            if !last {
                                *d = d.max(0.0);
                            }
                        }
                    }
                    std::mem::swap(&mut buf_a, &mut buf_b);
                    cur_c = co;
                }
                // scatter output block [3][len]
                for ch in 0..3 {
                    let src = &buf_a[ch * len..(ch + 1) * len];
                    // Safety: (ni, ch, p0..p1) ranges are disjoint per unit.
                    unsafe {
                        std::ptr::copy_nonoverlapping(
                            src.as_ptr(),
                            out_slice.0.add((ni * 3 + ch) * hw + p0),
                            len,
                        );
                    }
                }
            }
        });
        Ok(out)
    }

    /// Whole AUCT stage for one 3 x H x W image; returns the unclamped
    /// color-transformed image.
    pub fn infer(&self, cfg: &AuctConfig, m_s: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = m_s.as_nchw()?;
        let need = cfg.min_input_extent();
        if h < need || w < need {
            return Err(Error::invalid(
                "auct_forward",
                format!("input {h}x{w} smaller than minimum {need}x{need}"),
            ));
        }
        let x_lr = downsample_for_condition(cfg, m_s)?;
        let v = self.condition_vector(cfg, &x_lr)?;
        let gfm = self.gfm_params(&v)?;
        self.base_infer(cfg, m_s, &gfm)
    }
}

/// Bilinear downsample of the full image for the condition network
/// (extents round up: `ceil(x / cond_downscale)`).
pub fn downsample_for_condition(cfg: &AuctConfig, full: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = full.as_nchw()?;
    let oh = h.div_ceil(cfg.cond_downscale);
    let ow = w.div_ceil(cfg.cond_downscale);
    let mut shape = full.shape().to_vec();
    let k = shape.len();
    shape[k - 2] = oh;
    shape[k - 1] = ow;
    let mut out = Tensor::zeros(&shape);
    kernels::bilinear_resize(full.data(), Dims { n, c, h, w }, oh, ow, out.data_mut());
    Ok(out)
}

#[derive(Clone, Copy)]
struct UnsafeSlice(*mut f32);
unsafe impl Send for UnsafeSlice {}
unsafe impl Sync for UnsafeSlice {}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            shape.to_vec(),
            (0..shape.iter().product::<usize>()).map(|_| rng.gen::<f32>()).collect(),
        )
        .unwrap()
    }

    fn small_cfg() -> AuctConfig {
        AuctConfig {
            n_layers: 3,
            base_channels: 8,
            n_blocks: 2,
            cond_channels: 4,
            cond_vector_dim: 8,
            cond_downscale: 2,
        }
    }

    #[test]
    fn csnorm_gate_off_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&[4, 6, 6], 1));
        let gate = g.constant(Tensor::full(&[4], -40.0)); // sigmoid -> ~0
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = csnorm_graph(&mut g, x, gate, gamma, beta).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn csnorm_gate_on_fully_normalizes() {
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&[4, 6, 6], 2));
        let gate = g.constant(Tensor::full(&[4], 40.0)); // sigmoid -> ~1
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = csnorm_graph(&mut g, x, gate, gamma, beta).unwrap();
        let yd = g.value(y).data();
        for c in 0..4 {
            let ch = &yd[c * 36..(c + 1) * 36];
            let m = ch.iter().map(|&v| v as f64).sum::<f64>() / 36.0;
            let v = ch.iter().map(|&a| (a as f64 - m).powi(2)).sum::<f64>() / 36.0;
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "var {v}");
        }
    }

    #[test]
    fn csnorm_half_gate_on_constant_channel() {
        // IN(const) = 0, so y = g*beta + (1-g)*x with g = 0.5.
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 3, 3], 0.8));
        let gate = g.constant(Tensor::zeros(&[1])); // sigmoid(0) = 0.5
        let gamma = g.constant(Tensor::full(&[1], 1.0));
        let beta = g.constant(Tensor::full(&[1], 0.4));
        let y = csnorm_graph(&mut g, x, gate, gamma, beta).unwrap();
        for &v in g.value(y).data() {
            assert!((v - (0.5 * 0.4 + 0.5 * 0.8)).abs() < 1e-6);
        }
    }

    #[test]
    fn guided_filter_constant_stays_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[3, 12, 12], 0.37));
        let y = guided_filter_graph(&mut g, x, GUIDED_RADIUS, GUIDED_EPS).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.37).abs() < 1e-5);
        }
    }

    #[test]
    fn guided_filter_large_eps_is_double_box() {
        let mut g = Graph::new();
        let t = random_tensor(&[1, 16, 16], 3);
        let x = g.constant(t.clone());
        let y = guided_filter_graph(&mut g, x, 3, 1e9).unwrap();
        let b1 = g.box_mean(x, 3).unwrap();
        let b2 = g.box_mean(b1, 3).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(b2).data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn guided_filter_preserves_step_edge() {
        // Step edge: output overshoot stays within 5% of the step height,
        // checked against a straight-line per-pixel reference of the same
        // filter definition evaluated in f64.
        let (h, w) = (20usize, 20usize);
        let mut data = vec![0.1f32; h * w];
        for y in 0..h {
            for x in w / 2..w {
                data[y * w + x] = 0.9;
            }
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, h, w], data.clone()).unwrap());
        let yid = guided_filter_graph(&mut g, x, GUIDED_RADIUS, GUIDED_EPS).unwrap();
        let got = g.value(yid).data();
        for &v in got {
            assert!((-0.04..=1.04).contains(&v.into()), "overshoot {v}");
        }
        let reference = reference_guided_filter(&data, h, w, GUIDED_RADIUS, GUIDED_EPS as f64);
        for (a, &b) in reference.iter().zip(got) {
            assert!((a - b as f64).abs() < 1e-4, "{a} vs {b}");
        }
        // the edge survives: large contrast across the boundary remains
        let mid = h / 2 * w;
        assert!(got[mid + w / 2 + 2] - got[mid + w / 2 - 3] > 0.5);
    }

    fn reference_guided_filter(p: &[f32], h: usize, w: usize, r: usize, eps: f64) -> Vec<f64> {
        let boxf = |src: &dyn Fn(usize, usize) -> f64, y: usize, x: usize| -> f64 {
            let mut s = 0.0;
            for dy in 0..=2 * r {
                for dx in 0..=2 * r {
                    let sy = (y + dy).saturating_sub(r).min(h - 1);
                    let sx = (x + dx).saturating_sub(r).min(w - 1);
                    s += src(sy, sx);
                }
            }
            s / ((2 * r + 1) * (2 * r + 1)) as f64
        };
        let at = |y: usize, x: usize| p[y * w + x] as f64;
        let mut a = vec![0.0; h * w];
        let mut b = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mp = boxf(&at, y, x);
                let mpp = boxf(&|yy, xx| at(yy, xx) * at(yy, xx), y, x);
                let var = mpp - mp * mp;
                a[y * w + x] = var / (var + eps);
                b[y * w + x] = mp - a[y * w + x] * mp;
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let ma = boxf(&|yy, xx| a[yy * w + xx], y, x);
                let mb = boxf(&|yy, xx| b[yy * w + xx], y, x);
                out[y * w + x] = ma * at(y, x) + mb;
            }
        }
        out
    }

    #[test]
    fn chm_shape_law_matches_pool_chain() {
        // 120 -> 60 -> 30 -> 15 -> 8 over four blocks (replicate-pad rule).
        let cfg = AuctConfig {
            cond_downscale: 1,
            ..AuctConfig::default()
        };
        let params = AuctParams::init(&cfg, 1, 0.25);
        let mut g = Graph::new();
        let mut reg = Vec::new();
        let nodes = params.to_graph(&mut g, false, &mut reg);
        let mut c = g.constant(random_tensor(&[3, 120, 120], 5));
        let mut extents = Vec::new();
        for (w_id, b_id, gate, gamma, beta) in &nodes.chm {
            c = g.conv1x1(c, *w_id, *b_id).unwrap();
            c = g.avgpool2(c).unwrap();
            c = g.lrelu(c, LRELU_SLOPE).unwrap();
            c = csnorm_graph(&mut g, c, *gate, *gamma, *beta).unwrap();
            let s = g.value(c).shape().to_vec();
            extents.push(s[1]);
        }
        assert_eq!(extents, vec![60, 30, 15, 8]);
    }

    #[test]
    fn gfm_heads_identity_at_zero_init() {
        let cfg = small_cfg();
        let params = AuctParams::init(&cfg, 3, 0.25);
        let v = random_tensor(&[cfg.cond_vector_dim], 9);
        let gfm = params.gfm_params(&v).unwrap();
        assert_eq!(gfm.layers.len(), cfg.n_layers);
        for (s, t) in &gfm.layers {
            assert!(s.iter().all(|&x| x == 1.0));
            assert!(t.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn base_identity_composition() {
        // Noise-free identity init with identity GFM: output equals input.
        let cfg = small_cfg();
        let params = AuctParams::init(&cfg, 0, 0.0);
        let x = random_tensor(&[3, 6, 7], 11);
        let v = Tensor::zeros(&[cfg.cond_vector_dim]);
        let gfm = params.gfm_params(&v).unwrap();
        let y = params.base_infer(&cfg, &x, &gfm).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn base_infer_matches_graph_forward() {
        let cfg = small_cfg();
        let params = AuctParams::init(&cfg, 21, 0.25);
        let x = random_tensor(&[3, 9, 13], 22);
        let v = random_tensor(&[cfg.cond_vector_dim], 23);
        let gfm = params.gfm_params(&v).unwrap();
        let fast = params.base_infer(&cfg, &x, &gfm).unwrap();

        let mut g = Graph::new();
        let mut reg = Vec::new();
        let nodes = params.to_graph(&mut g, false, &mut reg);
        let xid = g.constant(x);
        let vid = g.constant(v);
        let heads = gfm_heads_graph(&mut g, &nodes, vid).unwrap();
        let out = base_graph(&mut g, &cfg, &nodes, xid, &heads).unwrap();
        let slow = g.value(out);
        assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn condition_vector_shape_and_determinism() {
        let cfg = small_cfg();
        let params = AuctParams::init(&cfg, 31, 0.25);
        let x_lr = random_tensor(&[3, 8, 8], 32);
        let v1 = params.condition_vector(&cfg, &x_lr).unwrap();
        let v2 = params.condition_vector(&cfg, &x_lr).unwrap();
        assert_eq!(v1.shape(), &[cfg.cond_vector_dim]);
        assert_eq!(v1.data(), v2.data());
        v1.validate_finite("condition vector").unwrap();
    }

    #[test]
    fn condition_rejects_small_input() {
        let cfg = small_cfg(); // needs >= 4x4 after two pools -> min 4
        let params = AuctParams::init(&cfg, 1, 0.25);
        let tiny = random_tensor(&[3, cfg.min_cond_extent() - 1, 8], 1);
        assert!(params.condition_vector(&cfg, &tiny).is_err());
    }

    #[test]
    fn gradients_reach_condition_vector_inputs() {
        // After one backward pass, d loss / d heads is nonzero, so the
        // condition vector influences the output image.
        let cfg = small_cfg();
        let params = AuctParams::init(&cfg, 41, 0.25);
        let mut g = Graph::new();
        let mut reg = Vec::new();
        let nodes = params.to_graph(&mut g, true, &mut reg);
        let full = g.constant(random_tensor(&[1, 3, 8, 8], 42));
        let lr = g.constant(random_tensor(&[1, 3, 8, 8], 43));
        let (out, _) = auct_graph(&mut g, &cfg, &nodes, full, lr, ExecMode::Eval).unwrap();
        let loss = g.mean_all(out);
        g.backward(loss).unwrap();
        // scale head weight of layer 0 receives gradient through V
        let (sw, _, _, _) = nodes.heads[0];
        let grad = g.grad(sw).expect("head gradient populated");
        assert!(grad.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn infer_requires_minimum_extent() {
        let cfg = AuctConfig::default();
        let params = AuctParams::init(&cfg, 1, 0.25);
        let too_small = random_tensor(&[3, 63, 64], 2);
        assert!(params.infer(&cfg, &too_small).is_err());
    }
}
