//! Two-stage pipeline composition and tiled inference.
//!
//! The condition pass runs once per image. The base network is
//! pixel-independent, so its tiles need no halo and must be bit-identical
//! to the untiled result. LE tiles need a halo of at least the stage's
//! receptive-field radius; tile origins and halos stay aligned to the /4
//! stride grid so tiled and untiled geometry coincide.

use super::auct::{auct_graph, downsample_for_condition, ExecMode};
use super::le::{le_graph, tile_halo};
use super::{AuctConfig, LeConfig, ModelParams};
use crate::color::{ClampStats, ColorState, ImagePlanar};
use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::kernels::{self, Dims};
use crate::tensor::Tensor;
use std::sync::Mutex;

/// Which part of the pipeline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Global color transform only.
    Auct,
    /// Color transform followed by local enhancement.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileConfig {
    /// Tile edge in pixels (snapped down to a multiple of 4, min 16).
    pub tile: usize,
    /// Halo in pixels for the enhancement stage (snapped up to a multiple
    /// of 4 and to at least the receptive-field radius).
    pub halo: usize,
}

impl TileConfig {
    pub fn new(tile: usize) -> Self {
        TileConfig { tile, halo: tile_halo() }
    }

    fn normalized(&self) -> TileConfig {
        let tile = (self.tile / 4 * 4).max(16);
        let halo = self.halo.max(tile_halo()).div_ceil(4) * 4;
        TileConfig { tile, halo }
    }
}

/// Untiled inference for one 3 x H x W image. Output is unclamped.
pub fn infer(params: &ModelParams, m_s: &Tensor, stage: Stage) -> Result<Tensor> {
    let auct_out = params.auct.infer(&params.auct_cfg, m_s)?;
    match stage {
        Stage::Auct => Ok(auct_out),
        Stage::Full => params.le.infer(&params.le_cfg, &auct_out),
    }
}

/// Tiled inference; bit-identical to [`infer`] for the color-transform
/// stage and within float tolerance (same arithmetic per pixel away from
/// tile seams) for the full pipeline.
pub fn infer_tiled(
    params: &ModelParams,
    m_s: &Tensor,
    stage: Stage,
    tiles: TileConfig,
) -> Result<Tensor> {
    let tiles = tiles.normalized();
    let (c, h, w) = m_s.as_chw()?;
    if c != 3 {
        return Err(Error::shape("infer_tiled", format!("expected 3 channels, got {c}")));
    }
    let need = params.auct_cfg.min_input_extent();
    if h < need || w < need {
        return Err(Error::invalid(
            "infer_tiled",
            format!("input {h}x{w} smaller than minimum {need}x{need}"),
        ));
    }

    // Condition pass once on the full image.
    let x_lr = downsample_for_condition(&params.auct_cfg, m_s)?;
    let v = params.auct.condition_vector(&params.auct_cfg, &x_lr)?;
    let gfm = params.auct.gfm_params(&v)?;

    // Stage 1: pixel-independent tiles, no halo.
    let auct_out = run_tiles(h, w, tiles.tile, 0, |rect| {
        let sub = extract(m_s.data(), h, w, rect);
        let t = Tensor::new(vec![3, rect.h, rect.w], sub)?;
        params.auct.base_infer(&params.auct_cfg, &t, &gfm)
    })?;
    if stage == Stage::Auct {
        return Ok(auct_out);
    }

    // Stage 2: pad to /4 globally, tile with halo, crop back.
    let (ph, pw) = ((4 - h % 4) % 4, (4 - w % 4) % 4);
    let (gh, gw) = (h + ph, w + pw);
    let padded = if ph > 0 || pw > 0 {
        let mut out = vec![0.0f32; 3 * gh * gw];
        kernels::pad_replicate_forward(
            auct_out.data(),
            Dims { n: 1, c: 3, h, w },
            ph,
            pw,
            &mut out,
        );
        out
    } else {
        auct_out.data().to_vec()
    };
    let enhanced = run_tiles(gh, gw, tiles.tile, tiles.halo, |rect| {
        let ext = rect.expanded(tiles.halo, gh, gw);
        let sub = extract(&padded, gh, gw, ext);
        let t = Tensor::new(vec![3, ext.h, ext.w], sub)?;
        let out = params.le.infer(&params.le_cfg, &t)?;
        // keep only the un-haloed core
        let mut core = vec![0.0f32; 3 * rect.h * rect.w];
        for ch in 0..3 {
            for y in 0..rect.h {
                let src_y = rect.y0 - ext.y0 + y;
                let src = &out.data()[ch * ext.h * ext.w + src_y * ext.w + (rect.x0 - ext.x0)..];
                core[ch * rect.h * rect.w + y * rect.w..][..rect.w]
                    .copy_from_slice(&src[..rect.w]);
            }
        }
        Tensor::new(vec![3, rect.h, rect.w], core)
    })?;
    if ph > 0 || pw > 0 {
        let mut out = Tensor::zeros(&[3, h, w]);
        kernels::crop_forward(
            enhanced.data(),
            Dims { n: 1, c: 3, h: gh, w: gw },
            h,
            w,
            out.data_mut(),
        );
        Ok(out)
    } else {
        Ok(enhanced)
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
}

impl Rect {
    fn expanded(&self, halo: usize, max_h: usize, max_w: usize) -> Rect {
        let y0 = self.y0.saturating_sub(halo);
        let x0 = self.x0.saturating_sub(halo);
        let y1 = (self.y0 + self.h + halo).min(max_h);
        let x1 = (self.x0 + self.w + halo).min(max_w);
        Rect { y0, x0, h: y1 - y0, w: x1 - x0 }
    }
}

fn extract(src: &[f32], h: usize, w: usize, rect: Rect) -> Vec<f32> {
    let mut out = vec![0.0f32; 3 * rect.h * rect.w];
    for c in 0..3 {
        for y in 0..rect.h {
            let s = &src[c * h * w + (rect.y0 + y) * w + rect.x0..][..rect.w];
            out[c * rect.h * rect.w + y * rect.w..][..rect.w].copy_from_slice(s);
        }
    }
    out
}

fn run_tiles(
    h: usize,
    w: usize,
    tile: usize,
    _halo: usize,
    f: impl Fn(Rect) -> Result<Tensor> + Sync,
) -> Result<Tensor> {
    let mut rects = Vec::new();
    let mut y = 0;
    while y < h {
        let th = tile.min(h - y);
        let mut x = 0;
        while x < w {
            let tw = tile.min(w - x);
            rects.push(Rect { y0: y, x0: x, h: th, w: tw });
            x += tw;
        }
        y += th;
    }
    let results: Mutex<Vec<Option<Result<Tensor>>>> =
        Mutex::new((0..rects.len()).map(|_| None).collect());
    crate::parallel::for_each_range(rects.len(), |range| {
        for i in range {
            let r = f(rects[i]);
            results.lock().unwrap()[i] = Some(r);
        }
    });
    let mut out = Tensor::zeros(&[3, h, w]);
    let od = out.data_mut();
    for (rect, res) in rects.iter().zip(results.into_inner().unwrap()) {
        let t = res.expect("tile computed")?;
        let td = t.data();
        for c in 0..3 {
            for yy in 0..rect.h {
                od[c * h * w + (rect.y0 + yy) * w + rect.x0..][..rect.w]
                    .copy_from_slice(&td[c * rect.h * rect.w + yy * rect.w..][..rect.w]);
            }
        }
    }
    Ok(out)
}

/// Training/eval graph for the composed pipeline on batched inputs.
/// Returns the unclamped prediction and any train-mode BN batch stats.
#[allow(clippy::too_many_arguments)]
pub fn pipeline_graph(
    g: &mut Graph,
    auct_cfg: &AuctConfig,
    le_cfg: &LeConfig,
    auct_nodes: &super::auct::AuctNodes,
    le_nodes: &super::le::LeNodes,
    crops: NodeId,
    cond_in: NodeId,
    mode: ExecMode,
    stage: Stage,
) -> Result<(NodeId, super::auct::BnBatchStats)> {
    let (auct_out, stats) = auct_graph(g, auct_cfg, auct_nodes, crops, cond_in, mode)?;
    let out = match stage {
        Stage::Auct => auct_out,
        Stage::Full => le_graph(g, le_cfg, le_nodes, auct_out)?,
    };
    Ok((out, stats))
}

/// File-facing conversion: SDR image in, clamped HDR image out.
pub fn convert_image(
    params: &ModelParams,
    sdr: &ImagePlanar,
    stage: Stage,
    tiles: Option<TileConfig>,
) -> Result<(ImagePlanar, ClampStats)> {
    sdr.expect_state(ColorState::SDR, "convert")?;
    let x = sdr.to_tensor();
    let out = match tiles {
        None => infer(params, &x, stage)?,
        Some(t) => infer_tiled(params, &x, stage, t)?,
    };
    ImagePlanar::from_tensor_clamped(&out, ColorState::HDR)
}
