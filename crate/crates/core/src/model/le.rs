//! Local enhancement: a three-level U-Net whose bottleneck and decoder
//! features are modulated elementwise (SFT) by maps from a multi-scale
//! condition branch over the color-transformed input.
//!
//! Inputs pad (replicate, bottom/right) to a multiple of 4 and crop back, so
//! encoder/decoder extents always reconcile.

use super::{AuctConfig, ConvParams, LeConfig, ParamKind, LRELU_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::kernels::{self, Dims};
use crate::tensor::{derive_seed, InitScheme, ParamInit, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SftHead {
    /// Scale-map conv (bias starts at 1: identity modulation).
    pub m: ConvParams,
    /// Shift-map conv (zero init).
    pub n: ConvParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeParams {
    pub head: ConvParams,
    pub enc1: ConvParams,
    pub enc2: ConvParams,
    pub bottleneck: ConvParams,
    pub dec1_up: ConvParams,
    pub dec1_fuse: ConvParams,
    pub dec2_up: ConvParams,
    pub dec2_fuse: ConvParams,
    pub tail: ConvParams,
    /// Condition-branch stages at strides 1, 2, 2 (cumulative 1, 2, 4).
    pub cond: Vec<ConvParams>,
    /// SFT heads per site: stride 1, stride 2, stride 4.
    pub sft: Vec<SftHead>,
}

fn conv3(name: &str, seed: u64, co: usize, ci: usize) -> ConvParams {
    ConvParams {
        w: ParamInit {
            scheme: InitScheme::FanInUniform { fan_in: ci * 9 },
            seed: derive_seed(seed, name),
        }
        .materialize(&[co, ci, 3, 3]),
        b: Tensor::zeros(&[co]),
    }
}

fn conv3_zero(co: usize, ci: usize, bias: f32) -> ConvParams {
    ConvParams {
        w: Tensor::zeros(&[co, ci, 3, 3]),
        b: Tensor::full(&[co], bias),
    }
}

impl LeParams {
    pub fn init(cfg: &LeConfig, seed: u64) -> Self {
        let c = cfg.base_width;
        LeParams {
            head: conv3("le.head", seed, c, 3),
            enc1: conv3("le.enc1", seed, 2 * c, c),
            enc2: conv3("le.enc2", seed, 4 * c, 2 * c),
            bottleneck: conv3("le.bottleneck", seed, 4 * c, 4 * c),
            dec1_up: conv3("le.dec1_up", seed, 2 * c, 4 * c),
            dec1_fuse: conv3("le.dec1_fuse", seed, 2 * c, 4 * c),
            dec2_up: conv3("le.dec2_up", seed, c, 2 * c),
            dec2_fuse: conv3("le.dec2_fuse", seed, c, 2 * c),
            // tail starts at zero so the residual path is exactly identity
            tail: conv3_zero(3, c, 0.0),
            cond: vec![
                conv3("le.cond.0", seed, c, 3),
                conv3("le.cond.1", seed, 2 * c, c),
                conv3("le.cond.2", seed, 4 * c, 2 * c),
            ],
            sft: vec![
                SftHead { m: conv3_zero(c, c, 1.0), n: conv3_zero(c, c, 0.0) },
                SftHead { m: conv3_zero(2 * c, 2 * c, 1.0), n: conv3_zero(2 * c, 2 * c, 0.0) },
                SftHead { m: conv3_zero(4 * c, 4 * c, 1.0), n: conv3_zero(4 * c, 4 * c, 0.0) },
            ],
        }
    }

    /// Identical to [`Self::init`]: SFT heads and tail already make the
    /// stage an exact identity at initialization.
    pub fn init_identity(cfg: &LeConfig) -> Self {
        Self::init(cfg, 0)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        use ParamKind::Trainable;
        let convs: [(&str, &ConvParams); 9] = [
            ("le.head", &self.head),
            ("le.enc1", &self.enc1),
            ("le.enc2", &self.enc2),
            ("le.bottleneck", &self.bottleneck),
            ("le.dec1_up", &self.dec1_up),
            ("le.dec1_fuse", &self.dec1_fuse),
            ("le.dec2_up", &self.dec2_up),
            ("le.dec2_fuse", &self.dec2_fuse),
            ("le.tail", &self.tail),
        ];
        for (name, c) in convs {
            f(&format!("{name}.w"), &c.w, Trainable);
            f(&format!("{name}.b"), &c.b, Trainable);
        }
        for (i, c) in self.cond.iter().enumerate() {
            f(&format!("le.cond.{i}.w"), &c.w, Trainable);
            f(&format!("le.cond.{i}.b"), &c.b, Trainable);
        }
        for (i, h) in self.sft.iter().enumerate() {
            f(&format!("le.sft.{i}.m.w"), &h.m.w, Trainable);
            f(&format!("le.sft.{i}.m.b"), &h.m.b, Trainable);
            f(&format!("le.sft.{i}.n.w"), &h.n.w, Trainable);
            f(&format!("le.sft.{i}.n.b"), &h.n.b, Trainable);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        use ParamKind::Trainable;
        let convs: [(&str, &mut ConvParams); 9] = [
            ("le.head", &mut self.head),
            ("le.enc1", &mut self.enc1),
            ("le.enc2", &mut self.enc2),
            ("le.bottleneck", &mut self.bottleneck),
            ("le.dec1_up", &mut self.dec1_up),
            ("le.dec1_fuse", &mut self.dec1_fuse),
            ("le.dec2_up", &mut self.dec2_up),
            ("le.dec2_fuse", &mut self.dec2_fuse),
            ("le.tail", &mut self.tail),
        ];
        for (name, c) in convs {
            f(&format!("{name}.w"), &mut c.w, Trainable);
            f(&format!("{name}.b"), &mut c.b, Trainable);
        }
        for (i, c) in self.cond.iter_mut().enumerate() {
            f(&format!("le.cond.{i}.w"), &mut c.w, Trainable);
            f(&format!("le.cond.{i}.b"), &mut c.b, Trainable);
        }
        for (i, h) in self.sft.iter_mut().enumerate() {
            f(&format!("le.sft.{i}.m.w"), &mut h.m.w, Trainable);
            f(&format!("le.sft.{i}.m.b"), &mut h.m.b, Trainable);
            f(&format!("le.sft.{i}.n.w"), &mut h.n.w, Trainable);
            f(&format!("le.sft.{i}.n.b"), &mut h.n.b, Trainable);
        }
    }
}

/// Receptive-field radius of the stage in input pixels, derived by walking
/// the deepest layer path (conv radius x current stride product).
pub fn receptive_field_radius() -> usize {
    // (kernel radius, stride) along main path: head, enc1, enc2, bottleneck
    let mut r = 0usize;
    let mut jump = 1usize;
    for (rad, stride) in [(1usize, 1usize), (1, 2), (1, 2), (1, 1)] {
        r += rad * jump;
        jump *= stride;
    }
    // decoder path back to full res: dec1_up, dec1_fuse at /2; dec2_up,
    // dec2_fuse and tail at /1
    jump /= 2;
    r += jump; // dec1_up
    r += jump; // dec1_fuse
    jump /= 2;
    r += jump; // dec2_up
    r += jump; // dec2_fuse
    r += jump; // tail
    // condition path to the deepest SFT site reaches radius 8 at /4 before
    // joining the same decoder suffix, which is never larger.
    r
}

/// Halo that guarantees tile/untiled agreement, rounded up so tile geometry
/// stays aligned with the /4 stride grid.
pub fn tile_halo() -> usize {
    receptive_field_radius().div_ceil(4) * 4
}

pub struct LeNodes {
    convs: Vec<(NodeId, NodeId)>, // visit order of the 9 main convs
    cond: Vec<(NodeId, NodeId)>,
    sft: Vec<((NodeId, NodeId), (NodeId, NodeId))>, // (m.w, m.b), (n.w, n.b)
}

impl LeParams {
    pub fn to_graph(&self, g: &mut Graph, trainable: bool, registry: &mut Vec<NodeId>) -> LeNodes {
        let mut leaf = |g: &mut Graph, t: &Tensor, reg: &mut Vec<NodeId>| {
            let id = g.leaf(t.clone(), trainable);
            if trainable {
                reg.push(id);
            }
            id
        };
        let convs = [
            &self.head,
            &self.enc1,
            &self.enc2,
            &self.bottleneck,
            &self.dec1_up,
            &self.dec1_fuse,
            &self.dec2_up,
            &self.dec2_fuse,
            &self.tail,
        ]
        .iter()
        .map(|c| (leaf(g, &c.w, registry), leaf(g, &c.b, registry)))
        .collect();
        let cond = self
            .cond
            .iter()
            .map(|c| (leaf(g, &c.w, registry), leaf(g, &c.b, registry)))
            .collect();
        let sft = self
            .sft
            .iter()
            .map(|h| {
                (
                    (leaf(g, &h.m.w, registry), leaf(g, &h.m.b, registry)),
                    (leaf(g, &h.n.w, registry), leaf(g, &h.n.b, registry)),
                )
            })
            .collect();
        LeNodes { convs, cond, sft }
    }
}

fn sft_apply(g: &mut Graph, x: NodeId, m: NodeId, n: NodeId) -> Result<NodeId> {
    let mx = g.mul(m, x)?;
    g.add(mx, n)
}

/// Build the LE forward pass on a graph. Input is `N x 3 x H x W` (or rank
/// 3); output has identical extents. Unclamped.
pub fn le_graph(g: &mut Graph, cfg: &LeConfig, nodes: &LeNodes, x: NodeId) -> Result<NodeId> {
    let (_, c_in, h, w) = g.value(x).as_nchw()?;
    if c_in != 3 {
        return Err(Error::shape("le_forward", format!("expected 3 channels, got {c_in}")));
    }
    if h < 4 || w < 4 {
        return Err(Error::invalid(
            "le_forward",
            format!("input {h}x{w} smaller than 4x4"),
        ));
    }
    let (ph, pw) = ((4 - h % 4) % 4, (4 - w % 4) % 4);
    let xp = if ph > 0 || pw > 0 {
        g.pad_replicate(x, ph, pw)?
    } else {
        x
    };

    // condition branch
    let c1 = g.conv3x3(xp, nodes.cond[0].0, nodes.cond[0].1, 1)?;
    let c1 = g.lrelu(c1, LRELU_SLOPE)?;
    let c2 = g.conv3x3(c1, nodes.cond[1].0, nodes.cond[1].1, 2)?;
    let c2 = g.lrelu(c2, LRELU_SLOPE)?;
    let c3 = g.conv3x3(c2, nodes.cond[2].0, nodes.cond[2].1, 2)?;
    let c3 = g.lrelu(c3, LRELU_SLOPE)?;
    let maps: Vec<(NodeId, NodeId)> = [(c1, 0usize), (c2, 1), (c3, 2)]
        .iter()
        .map(|&(feat, i)| {
            let ((mw, mb), (nw, nb)) = nodes.sft[i];
            let m = g.conv3x3(feat, mw, mb, 1)?;
            let n = g.conv3x3(feat, nw, nb, 1)?;
            Ok((m, n))
        })
        .collect::<Result<_>>()?;

    // main branch
    let f0 = g.conv3x3(xp, nodes.convs[0].0, nodes.convs[0].1, 1)?;
    let e1 = g.conv3x3(f0, nodes.convs[1].0, nodes.convs[1].1, 2)?;
    let e1 = g.lrelu(e1, LRELU_SLOPE)?;
    let e2 = g.conv3x3(e1, nodes.convs[2].0, nodes.convs[2].1, 2)?;
    let e2 = g.lrelu(e2, LRELU_SLOPE)?;
    let bott = g.conv3x3(e2, nodes.convs[3].0, nodes.convs[3].1, 1)?;
    let bott = sft_apply(g, bott, maps[2].0, maps[2].1)?;

    let d1 = g.upsample2(bott)?;
    let d1 = g.conv3x3(d1, nodes.convs[4].0, nodes.convs[4].1, 1)?;
    let d1 = g.concat_channels(d1, e1)?;
    let d1 = g.conv3x3(d1, nodes.convs[5].0, nodes.convs[5].1, 1)?;
    let d1 = g.lrelu(d1, LRELU_SLOPE)?;
    let d1 = sft_apply(g, d1, maps[1].0, maps[1].1)?;

    let d2 = g.upsample2(d1)?;
    let d2 = g.conv3x3(d2, nodes.convs[6].0, nodes.convs[6].1, 1)?;
    let d2 = g.concat_channels(d2, f0)?;
    let d2 = g.conv3x3(d2, nodes.convs[7].0, nodes.convs[7].1, 1)?;
    let d2 = g.lrelu(d2, LRELU_SLOPE)?;
    let d2 = sft_apply(g, d2, maps[0].0, maps[0].1)?;

    let t = g.conv3x3(d2, nodes.convs[8].0, nodes.convs[8].1, 1)?;
    let out = if cfg.residual_output { g.add(xp, t)? } else { t };
    if ph > 0 || pw > 0 {
        g.crop(out, h, w)
    } else {
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Inference path (kernel calls, buffers dropped as soon as possible)
// ---------------------------------------------------------------------------

struct Feat {
    data: Vec<f32>,
    c: usize,
    h: usize,
    w: usize,
}

impl Feat {
    fn dims(&self) -> Dims {
        Dims { n: 1, c: self.c, h: self.h, w: self.w }
    }
    fn check_finite(&self, layer: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("le_forward layer {layer}"),
                index: i,
            });
        }
        Ok(())
    }
}

fn conv3_infer(x: &Feat, p: &ConvParams, stride: usize, lrelu: bool, layer: &str) -> Result<Feat> {
    let co = p.w.shape()[0];
    let oh = kernels::conv3x3_out_extent(x.h, stride);
    let ow = kernels::conv3x3_out_extent(x.w, stride);
    let mut out = Feat { data: vec![0.0; co * oh * ow], c: co, h: oh, w: ow };
    kernels::conv3x3_forward(&x.data, x.dims(), p.w.data(), p.b.data(), co, stride, &mut out.data);
    if lrelu {
        for v in &mut out.data {
            if *v < 0.0 {
                *v *= LRELU_SLOPE;
            }
        }
    }
    out.check_finite(layer)?;
    Ok(out)
}

impl LeParams {
    /// Inference for one image (3 x H x W); output unclamped, extents
    /// preserved. Intermediates are validated finite per layer.
    pub fn infer(&self, cfg: &LeConfig, m_auct: &Tensor) -> Result<Tensor> {
        let (c_in, h, w) = m_auct.as_chw()?;
        if c_in != 3 {
            return Err(Error::shape("le_forward", format!("expected 3 channels, got {c_in}")));
        }
        if h < 4 || w < 4 {
            return Err(Error::invalid(
                "le_forward",
                format!("input {h}x{w} smaller than 4x4"),
            ));
        }
        let (ph, pw) = ((4 - h % 4) % 4, (4 - w % 4) % 4);
        let xp = if ph > 0 || pw > 0 {
            let mut out = Feat { data: vec![0.0; 3 * (h + ph) * (w + pw)], c: 3, h: h + ph, w: w + pw };
            kernels::pad_replicate_forward(
                m_auct.data(),
                Dims { n: 1, c: 3, h, w },
                ph,
                pw,
                &mut out.data,
            );
            out
        } else {
            Feat { data: m_auct.data().to_vec(), c: 3, h, w }
        };

        // condition branch
        let c1 = conv3_infer(&xp, &self.cond[0], 1, true, "cond.0")?;
        let c2 = conv3_infer(&c1, &self.cond[1], 2, true, "cond.1")?;
        let c3 = conv3_infer(&c2, &self.cond[2], 2, true, "cond.2")?;
        let m1 = conv3_infer(&c1, &self.sft[0].m, 1, false, "sft.0.m")?;
        let n1 = conv3_infer(&c1, &self.sft[0].n, 1, false, "sft.0.n")?;
        drop(c1);
        let m2 = conv3_infer(&c2, &self.sft[1].m, 1, false, "sft.1.m")?;
        let n2 = conv3_infer(&c2, &self.sft[1].n, 1, false, "sft.1.n")?;
        drop(c2);
        let m3 = conv3_infer(&c3, &self.sft[2].m, 1, false, "sft.2.m")?;
        let n3 = conv3_infer(&c3, &self.sft[2].n, 1, false, "sft.2.n")?;
        drop(c3);

        let sft = |f: &mut Feat, m: &Feat, n: &Feat| {
            for ((v, &mv), &nv) in f.data.iter_mut().zip(&m.data).zip(&n.data) {
                *v = mv * *v + nv;
            }
        };

        // main branch
        let f0 = conv3_infer(&xp, &self.head, 1, false, "head")?;
        let e1 = conv3_infer(&f0, &self.enc1, 2, true, "enc1")?;
        let e2 = conv3_infer(&e1, &self.enc2, 2, true, "enc2")?;
        let mut bott = conv3_infer(&e2, &self.bottleneck, 1, false, "bottleneck")?;
        drop(e2);
        sft(&mut bott, &m3, &n3);
        drop((m3, n3));

        let mut up = Feat {
            data: vec![0.0; bott.c * bott.h * bott.w * 4],
            c: bott.c,
            h: bott.h * 2,
            w: bott.w * 2,
        };
        kernels::upsample2_forward(&bott.data, bott.dims(), &mut up.data);
        drop(bott);
        let d1 = conv3_infer(&up, &self.dec1_up, 1, false, "dec1_up")?;
        let cat1 = concat(&d1, &e1);
        drop((d1, e1));
        let mut d1 = conv3_infer(&cat1, &self.dec1_fuse, 1, true, "dec1_fuse")?;
        drop(cat1);
        sft(&mut d1, &m2, &n2);
        drop((m2, n2));

        let mut up2 = Feat {
            data: vec![0.0; d1.c * d1.h * d1.w * 4],
            c: d1.c,
            h: d1.h * 2,
            w: d1.w * 2,
        };
        kernels::upsample2_forward(&d1.data, d1.dims(), &mut up2.data);
        drop(d1);
        let d2 = conv3_infer(&up2, &self.dec2_up, 1, false, "dec2_up")?;
        drop(up2);
        let cat2 = concat(&d2, &f0);
        drop((d2, f0));
        let mut d2 = conv3_infer(&cat2, &self.dec2_fuse, 1, true, "dec2_fuse")?;
        drop(cat2);
        sft(&mut d2, &m1, &n1);
        drop((m1, n1));

        let mut t = conv3_infer(&d2, &self.tail, 1, false, "tail")?;
        drop(d2);
        if cfg.residual_output {
            for (v, &xv) in t.data.iter_mut().zip(&xp.data) {
                *v += xv;
            }
        }
        let out = if ph > 0 || pw > 0 {
            let mut cropped = vec![0.0f32; 3 * h * w];
            kernels::crop_forward(&t.data, t.dims(), h, w, &mut cropped);
            cropped
        } else {
            t.data
        };
        Tensor::new(vec![3, h, w], out)
    }
}

fn concat(a: &Feat, b: &Feat) -> Feat {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity((a.c + b.c) * a.h * a.w);
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feat { data, c: a.c + b.c, h: a.h, w: a.w }
}

/// Downstream condition-input helper reused by the pipeline.
pub fn auct_then_le_min_extent(auct_cfg: &AuctConfig) -> usize {
    auct_cfg.min_input_extent().max(4)
}
