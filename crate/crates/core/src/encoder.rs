//! Frame encoder and class-prototype embeddings.
//!
//! The frame encoder is a stack of stride-2 3x3 convolutions, each followed
//! by a per-channel bias and tanh. Borders are edge-replicated so that a
//! constant image produces constant feature maps. Prototypes are per-bin
//! embedding rows initialised from hashed prompt text.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, PadMode, Real, Tensor, Var};
use crate::echozoom::{echozoom_forward, ZoomConfig};
use crate::error::{shape_err, Error, Result};
use crate::ordinal::BinSpec;
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub base_resolution: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stage_channels: vec![8, 16, 32],
            base_resolution: 112,
        }
    }
}

impl EncoderConfig {
    /// Feature dimension `C`, the channel count of the last stage.
    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().expect("validated config")
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 {
            return Err(Error::Config("frames are single-channel".into()));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config(format!(
                "invalid stage channels {:?}",
                self.stage_channels
            )));
        }
        let factor = 1usize << self.stage_channels.len();
        if self.base_resolution % factor != 0 {
            return Err(Error::Config(format!(
                "base resolution {} must be divisible by {factor}",
                self.base_resolution
            )));
        }
        Ok(())
    }

    /// Input extents accepted by [`FrameEncoder::encode_frame`]: the base
    /// resolution and, when every stage still halves it exactly, its half.
    pub fn supports(&self, h: usize) -> bool {
        let factor = 1usize << self.stage_channels.len();
        h == self.base_resolution || (2 * h == self.base_resolution && h % factor == 0)
    }

    /// Feature-map extent for an `h x h` input.
    pub fn map_extent(&self, h: usize) -> usize {
        h >> self.stage_channels.len()
    }
}

#[derive(Clone, Debug)]
struct Stage {
    kernels: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct FrameEncoder {
    cfg: EncoderConfig,
    stages: Vec<Stage>,
}

/// Last-stage feature map and its global average.
#[derive(Clone, Copy, Debug)]
pub struct FrameEncoding {
    pub feature_map: Var,
    pub pooled: Var,
}

impl FrameEncoder {
    pub fn new<T: Real, R: Rng>(cfg: EncoderConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut cin = cfg.in_channels;
        let mut stages = Vec::new();
        for (i, &cout) in cfg.stage_channels.iter().enumerate() {
            let fan_in = cin * 9;
            let kernels = store.add_uniform(format!("encoder.stage{i}.kernels"), &[cout, cin, 3, 3], fan_in, rng)?;
            let bias = store.add_uniform(format!("encoder.stage{i}.bias"), &[cout], fan_in, rng)?;
            stages.push(Stage { kernels, bias });
            cin = cout;
        }
        Ok(Self { cfg, stages })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    /// Encodes one `1 x h x h` image.
    pub fn encode_frame<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, image: Var) -> Result<FrameEncoding> {
        match *g.dims(image) {
            [1, h, w] if h == w && self.cfg.supports(h) => {}
            ref d => {
                return Err(shape_err!(
                    "encoder accepts 1x{r}x{r} or 1x{h}x{h} frames, got {d:?}",
                    r = self.cfg.base_resolution,
                    h = self.cfg.base_resolution / 2
                ))
            }
        }
        let mut x = image;
        for stage in &self.stages {
            x = g.conv2d_padded(x, bound.get(stage.kernels), 2, 1, PadMode::Replicate)?;
            x = g.bias_channels(x, bound.get(stage.bias))?;
            x = g.tanh(x);
        }
        let pooled = g.global_avg_pool(x)?;
        Ok(FrameEncoding {
            feature_map: x,
            pooled,
        })
    }

    /// Encodes every frame into one row of a `B x C` feature matrix. With a
    /// zoom config, each frame's map is the multi-scale fusion before
    /// pooling.
    pub fn encode_video<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        frames: &[Tensor<T>],
        zoom: Option<&ZoomConfig>,
    ) -> Result<Var> {
        if frames.is_empty() {
            return Err(Error::Contract("cannot encode an empty clip".into()));
        }
        let mut rows = Vec::with_capacity(frames.len());
        for frame in frames {
            let image = g.constant(frame.clone());
            let row = match zoom {
                None => self.encode_frame(g, bound, image)?.pooled,
                Some(cfg) => {
                    let fused = echozoom_forward(g, bound, image, self, cfg)?;
                    g.global_avg_pool(fused)?
                }
            };
            rows.push(row);
        }
        g.stack_rows(&rows)
    }
}

fn category(lo: f64) -> &'static str {
    if lo >= 70.0 {
        "hyperdynamic"
    } else if lo >= 55.0 {
        "normal"
    } else if lo >= 45.0 {
        "mildly reduced"
    } else if lo >= 30.0 {
        "moderately reduced"
    } else {
        "severely reduced"
    }
}

fn fmt_pct(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v:.1}")
    }
}

/// Human-readable range of bin `[lo, hi)`; integer half-open ranges are
/// written inclusively (45-54), the closed top bin keeps its upper edge.
pub fn range_label(lo: f64, hi: f64, closed: bool) -> String {
    let upper = if !closed && lo.fract() == 0.0 && hi.fract() == 0.0 && hi - lo >= 2.0 {
        hi - 1.0
    } else {
        hi
    };
    format!("{}-{}", fmt_pct(lo), fmt_pct(upper))
}

/// Templated clinical descriptions of one ejection-fraction interval.
pub fn prompt_variants(lo: f64, hi: f64, closed: bool) -> Vec<String> {
    let r = range_label(lo, hi, closed);
    let cat = category(lo);
    vec![
        format!("The left ventricular ejection fraction is estimated to be {cat} LVEF ({r}%)"),
        format!("Left ventricular systolic function is {cat}, with an ejection fraction of {r}%."),
        format!("Echocardiogram shows an LVEF in the range {r}%, consistent with {cat} function."),
        format!("Estimated ejection fraction: {r}% ({cat})."),
        format!("The apical four-chamber view demonstrates {cat} left ventricular function, EF {r}%."),
    ]
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn unit_vector(prompt: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(prompt.as_bytes()) ^ seed.rotate_left(29));
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    normalized(v)
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Per-bin embedding rows (the classifier weights) with their source text.
#[derive(Clone, Debug)]
pub struct ClassPrototypes {
    pub id: ParamId,
    pub prompt_texts: Vec<Vec<String>>,
}

/// Initial `K x C` prototype matrix: for each bin, the re-normalised mean of
/// the unit vectors seeded by each of its prompt strings.
pub fn prototype_matrix(bins: &BinSpec, seed: u64, dim: usize) -> (Tensor<f64>, Vec<Vec<String>>) {
    let k = bins.k();
    let mut data = Vec::with_capacity(k * dim);
    let mut texts = Vec::with_capacity(k);
    for i in 0..k {
        let (lo, hi) = bins.range(i);
        let prompts = prompt_variants(lo, hi, i + 1 == k);
        let mut mean = vec![0.0; dim];
        for p in &prompts {
            for (m, v) in mean.iter_mut().zip(unit_vector(p, seed, dim)) {
                *m += v;
            }
        }
        data.extend(normalized(mean));
        texts.push(prompts);
    }
    (Tensor::new(&[k, dim], data).expect("k x dim"), texts)
}

pub fn build_prototypes<T: Real>(
    store: &mut ParamStore<T>,
    bins: &BinSpec,
    seed: u64,
    dim: usize,
) -> Result<ClassPrototypes> {
    let (matrix, prompt_texts) = prototype_matrix(bins, seed, dim);
    let id = store.add("prototypes", matrix.cast())?;
    Ok(ClassPrototypes { id, prompt_texts })
}
