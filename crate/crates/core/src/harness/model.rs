use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{frame_sample, VideoClip};
use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::echozoom::ZoomConfig;
use crate::encoder::{build_prototypes, ClassPrototypes, FrameEncoder};
use crate::error::{Error, Result};
use crate::mfl::Aggregator;
use crate::ordinal::{classify, expected_value, loss_or, predict_shifts, BinSpec, RegressorParams};
use crate::params::{Bound, ParamStore};

use super::config::TrainConfig;

/// Graph nodes of one clip's prediction.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    pub feature: Var,
    pub logits: Var,
    pub probs: Var,
    pub shifts: Var,
    pub y_star: Var,
}

/// Frame encoder, temporal aggregator, class prototypes and shift regressor
/// over one parameter store.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub store: ParamStore<T>,
    pub encoder: FrameEncoder,
    pub aggregator: Aggregator,
    pub prototypes: ClassPrototypes,
    pub regressor: RegressorParams,
    pub bins: BinSpec,
    pub zoom: Option<ZoomConfig>,
    pub cfg: TrainConfig,
}

impl<T: Real> Model<T> {
    /// Fresh parameters drawn from `cfg.seed`. Parameter order and values do
    /// not depend on whether EchoZoom is enabled.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let encoder = FrameEncoder::new(cfg.encoder_config(), &mut store, &mut rng)?;
        let dim = encoder.feature_dim();
        let aggregator = Aggregator::new(cfg.aggregator, dim, &mut store, &mut rng)?;
        let bins = cfg.bin_spec()?;
        let prototypes = build_prototypes(&mut store, &bins, cfg.seed, dim)?;
        let regressor = RegressorParams::new(&mut store, dim, bins.k(), &mut rng)?;
        Ok(Self {
            store,
            encoder,
            aggregator,
            prototypes,
            regressor,
            bins,
            zoom: cfg.zoom_config(),
            cfg: cfg.clone(),
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, frames: &[Tensor<T>]) -> Result<Prediction> {
        let rows = self.encoder.encode_video(g, bound, frames, self.zoom.as_ref())?;
        let feature = self.aggregator.forward(g, bound, rows)?;
        let cls = classify(g, feature, bound.get(self.prototypes.id), self.cfg.temperature)?;
        let shifts = predict_shifts(g, bound, &self.regressor, feature)?;
        let y_star = expected_value(g, cls.probs, shifts, &self.bins)?;
        Ok(Prediction {
            feature,
            logits: cls.logits,
            probs: cls.probs,
            shifts,
            y_star,
        })
    }

    pub fn loss(&self, g: &mut Graph<T>, pred: &Prediction, label_ef: f64) -> Result<Var> {
        loss_or(
            g,
            pred.logits,
            pred.y_star,
            label_ef,
            &self.bins,
            self.cfg.reg_loss,
            self.cfg.reg_threshold,
        )
    }

    /// Frames of `clip` starting at `offset` with the configured length and stride.
    pub fn sample(&self, clip: &VideoClip, offset: usize) -> Result<Vec<Tensor<T>>> {
        if clip.height != self.cfg.resolution || clip.width != self.cfg.resolution {
            return Err(Error::Validation(format!(
                "clip `{}` is {}x{}, model expects {r}x{r}",
                clip.id,
                clip.height,
                clip.width,
                r = self.cfg.resolution
            )));
        }
        frame_sample(clip, self.cfg.clip_length, self.cfg.clip_stride, offset)
    }

    /// Point estimate for a clip with evaluation-time (offset 0) sampling.
    pub fn predict(&self, clip: &VideoClip) -> Result<f64> {
        let frames = self.sample(clip, 0)?;
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let pred = self.forward(&mut g, &bound, &frames)?;
        let y = g.value(pred.y_star).item().f64();
        if !y.is_finite() {
            return Err(Error::Numerical(format!("non-finite prediction for `{}`", clip.id)));
        }
        Ok(y)
    }
}
