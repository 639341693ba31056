//! Multi-scale feature fusion for a single frame.
//!
//! The base frame is upsampled 2x, split into four base-sized tiles, and
//! every tile goes through the same encoder as the base frame. The tile maps
//! are reassembled in tile order, 2x2 average-pooled back to the base map
//! size and averaged with the base map. No parameters are added.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Real, UpsampleMode, Var};
use crate::encoder::FrameEncoder;
use crate::error::{shape_err, Result};
use crate::params::Bound;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

impl From<Interpolation> for UpsampleMode {
    fn from(i: Interpolation) -> Self {
        match i {
            Interpolation::Nearest => UpsampleMode::Nearest,
            Interpolation::Bilinear => UpsampleMode::Bilinear,
        }
    }
}

/// Two scales on a fixed 2x2 tile grid with mean fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoomConfig {
    pub base_res: usize,
    pub upsample: Interpolation,
}

impl Default for ZoomConfig {
    fn default() -> Self {
        Self {
            base_res: 112,
            upsample: Interpolation::Bilinear,
        }
    }
}

impl ZoomConfig {
    pub fn hi_res(&self) -> usize {
        2 * self.base_res
    }
}

fn expect_square(g: &Graph<impl Real>, x: Var, res: usize, what: &str) -> Result<()> {
    match *g.dims(x) {
        [1, h, w] if h == res && w == res => Ok(()),
        ref d => Err(shape_err!("{what}: expected 1x{res}x{res}, got {d:?}")),
    }
}

pub fn upsample<T: Real>(g: &mut Graph<T>, image: Var, cfg: &ZoomConfig) -> Result<Var> {
    expect_square(g, image, cfg.base_res, "upsample")?;
    g.upsample2x(image, cfg.upsample.into())
}

/// Quadrants in row-major order: top-left, top-right, bottom-left,
/// bottom-right.
pub fn split_tiles<T: Real>(g: &mut Graph<T>, image: Var, cfg: &ZoomConfig) -> Result<[Var; 4]> {
    expect_square(g, image, cfg.hi_res(), "split_tiles")?;
    let b = cfg.base_res;
    Ok([
        g.crop(image, 0, 0, b, b)?,
        g.crop(image, 0, b, b, b)?,
        g.crop(image, b, 0, b, b)?,
        g.crop(image, b, b, b, b)?,
    ])
}

pub fn assemble_feature_map<T: Real>(g: &mut Graph<T>, tile_maps: [Var; 4]) -> Result<Var> {
    g.assemble_quadrants(tile_maps)
}

pub fn pool_to_base<T: Real>(g: &mut Graph<T>, map: Var) -> Result<Var> {
    match *g.dims(map) {
        [_, h, w] if h % 2 == 0 && w % 2 == 0 => g.avg_pool2d(map, 2),
        ref d => Err(shape_err!("pool_to_base: extents must be even, got {d:?}")),
    }
}

/// Elementwise mean of the two scales.
pub fn fuse<T: Real>(g: &mut Graph<T>, base: Var, pooled: Var) -> Result<Var> {
    let s = g.add(base, pooled)?;
    Ok(g.scale(s, T::c(0.5)))
}

pub fn echozoom_forward<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    image: Var,
    encoder: &FrameEncoder,
    cfg: &ZoomConfig,
) -> Result<Var> {
    let base = encoder.encode_frame(g, bound, image)?.feature_map;
    let hi = upsample(g, image, cfg)?;
    let tiles = split_tiles(g, hi, cfg)?;
    let mut maps = [base; 4];
    for (slot, tile) in maps.iter_mut().zip(tiles) {
        *slot = encoder.encode_frame(g, bound, tile)?.feature_map;
    }
    let assembled = assemble_feature_map(g, maps)?;
    let pooled = pool_to_base(g, assembled)?;
    fuse(g, base, pooled)
}
