//! Attention-based aggregation of per-frame features into one video vector.
//!
//! The default aggregator scores every frame with a bias-free two-hidden-layer
//! tanh network, softmax-normalises the scores over frames, takes the
//! weighted sum of the frame features and applies a square projection.
//! The remaining variants reproduce the aggregation ablations: no
//! projection, a tanh projection, a recurrent pre-pass over the frames, plain
//! mean pooling, and multi-head self-attention.
//!
//! All matrices act on row vectors: a frame feature `f` (1 x C) is scored as
//! `tanh(tanh(f W1) W2) W3`, and the projection is `f W_proj`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Real, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

pub const SCORE_HIDDEN_1: usize = 64;
pub const SCORE_HIDDEN_2: usize = 32;
pub const ATTENTION_HEADS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Mfl,
    MflNoProj,
    MflNonlinearProj,
    MflGru,
    MeanPool,
    MultiHead,
    MultiHeadGru,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 7] = [
        Self::Mfl,
        Self::MflNoProj,
        Self::MflNonlinearProj,
        Self::MflGru,
        Self::MeanPool,
        Self::MultiHead,
        Self::MultiHeadGru,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mfl => "mfl",
            Self::MflNoProj => "mfl_no_proj",
            Self::MflNonlinearProj => "mfl_nonlinear_proj",
            Self::MflGru => "mfl_gru",
            Self::MeanPool => "mean_pool",
            Self::MultiHead => "multi_head",
            Self::MultiHeadGru => "multi_head_gru",
        }
    }

    fn uses_scoring(self) -> bool {
        matches!(
            self,
            Self::Mfl | Self::MflNoProj | Self::MflNonlinearProj | Self::MflGru
        )
    }

    fn uses_projection(self) -> bool {
        matches!(self, Self::Mfl | Self::MflNonlinearProj | Self::MflGru)
    }

    fn uses_gru(self) -> bool {
        matches!(self, Self::MflGru | Self::MultiHeadGru)
    }

    fn uses_multi_head(self) -> bool {
        matches!(self, Self::MultiHead | Self::MultiHeadGru)
    }

    /// Whether the output is invariant to reordering the frames.
    pub fn permutation_invariant(self) -> bool {
        !self.uses_gru()
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregator `{s}`")))
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Frame-scoring weights and the output projection.
#[derive(Clone, Debug)]
pub struct MflParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
    pub w_proj: Option<ParamId>,
}

/// Single-layer gated recurrent unit with hidden size `C`; gate blocks are
/// ordered reset, update, candidate.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

#[derive(Clone, Debug)]
pub struct MultiHeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Debug)]
pub struct Aggregator {
    pub kind: AggregatorKind,
    pub dim: usize,
    pub mfl: Option<MflParams>,
    pub gru: Option<GruParams>,
    pub multi_head: Option<MultiHeadParams>,
}

impl Aggregator {
    pub fn new<T: Real, R: Rng>(
        kind: AggregatorKind,
        dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let gru = if kind.uses_gru() {
            Some(GruParams {
                w_ih: store.add_uniform("gru.w_ih", &[dim, 3 * dim], dim, rng)?,
                w_hh: store.add_uniform("gru.w_hh", &[dim, 3 * dim], dim, rng)?,
                b_ih: store.add_uniform("gru.b_ih", &[1, 3 * dim], dim, rng)?,
                b_hh: store.add_uniform("gru.b_hh", &[1, 3 * dim], dim, rng)?,
            })
        } else {
            None
        };
        let mfl = if kind.uses_scoring() {
            Some(MflParams {
                w1: store.add_uniform("mfl.w1", &[dim, SCORE_HIDDEN_1], dim, rng)?,
                w2: store.add_uniform("mfl.w2", &[SCORE_HIDDEN_1, SCORE_HIDDEN_2], SCORE_HIDDEN_1, rng)?,
                w3: store.add_uniform("mfl.w3", &[SCORE_HIDDEN_2, 1], SCORE_HIDDEN_2, rng)?,
                w_proj: if kind.uses_projection() {
                    Some(store.add_uniform("mfl.w_proj", &[dim, dim], dim, rng)?)
                } else {
                    None
                },
            })
        } else {
            None
        };
        let multi_head = if kind.uses_multi_head() {
            if dim % ATTENTION_HEADS != 0 {
                return Err(Error::Config(format!(
                    "feature dim {dim} not divisible by {ATTENTION_HEADS} heads"
                )));
            }
            let mut mat = |name: &str| store.add_uniform(format!("attn.{name}"), &[dim, dim], dim, rng);
            Some(MultiHeadParams {
                wq: mat("wq")?,
                wk: mat("wk")?,
                wv: mat("wv")?,
                wo: mat("wo")?,
            })
        } else {
            None
        };
        Ok(Self {
            kind,
            dim,
            mfl,
            gru,
            multi_head,
        })
    }

    fn check_frames<T: Real>(&self, g: &Graph<T>, frames: Var) -> Result<usize> {
        match *g.dims(frames) {
            [b, c] if c == self.dim && b >= 1 => Ok(b),
            ref d => Err(shape_err!(
                "aggregator expects B x {} frame features, got {d:?}",
                self.dim
            )),
        }
    }

    /// Video representation of a `B x C` frame-feature matrix.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, frames: Var) -> Result<Var> {
        self.check_frames(g, frames)?;
        let frames = match &self.gru {
            Some(p) => gru_sequence(g, bound, p, frames, self.dim)?,
            None => frames,
        };
        match self.kind {
            AggregatorKind::MeanPool => g.mean_rows(frames),
            AggregatorKind::MultiHead | AggregatorKind::MultiHeadGru => {
                let p = self.multi_head.as_ref().expect("multi-head params");
                multi_head_pool(g, bound, p, frames, self.dim)
            }
            _ => {
                let p = self.mfl.as_ref().expect("mfl params");
                let scores = score_frames(g, bound, p, frames)?;
                let alpha = normalize_weights(g, scores)?;
                let agg = aggregate(g, frames, alpha)?;
                project(g, bound, p, agg, self.kind)
            }
        }
    }
}

/// `s_i = tanh(tanh(f_i W1) W2) W3`, one score per frame.
pub fn score_frames<T: Real>(g: &mut Graph<T>, bound: &Bound, p: &MflParams, frames: Var) -> Result<Var> {
    let b = match *g.dims(frames) {
        [b, _] if b >= 1 => b,
        ref d => return Err(shape_err!("score_frames: expected B x C, got {d:?}")),
    };
    let h = g.matmul(frames, bound.get(p.w1))?;
    let h = g.tanh(h);
    let h = g.matmul(h, bound.get(p.w2))?;
    let h = g.tanh(h);
    let s = g.matmul(h, bound.get(p.w3))?;
    g.reshape(s, &[b])
}

/// Softmax over frames.
pub fn normalize_weights<T: Real>(g: &mut Graph<T>, scores: Var) -> Result<Var> {
    g.softmax(scores)
}

/// `sum_i alpha_i f_i`.
pub fn aggregate<T: Real>(g: &mut Graph<T>, frames: Var, alpha: Var) -> Result<Var> {
    let (b, c) = match *g.dims(frames) {
        [b, c] => (b, c),
        ref d => return Err(shape_err!("aggregate: expected B x C, got {d:?}")),
    };
    if g.dims(alpha) != [b] {
        return Err(shape_err!(
            "aggregate: {} weights for {b} frames",
            g.value(alpha).len()
        ));
    }
    let row = g.reshape(alpha, &[1, b])?;
    let agg = g.matmul(row, frames)?;
    g.reshape(agg, &[c])
}

/// `F_agg W_proj`, identity without a projection, `tanh(F_agg W_proj)` for
/// the nonlinear variant.
pub fn project<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    p: &MflParams,
    agg: Var,
    kind: AggregatorKind,
) -> Result<Var> {
    let Some(w) = p.w_proj else {
        return Ok(agg);
    };
    let c = g.value(agg).len();
    let row = g.reshape(agg, &[1, c])?;
    let out = g.matmul(row, bound.get(w))?;
    let out = g.reshape(out, &[c])?;
    Ok(if kind == AggregatorKind::MflNonlinearProj {
        g.tanh(out)
    } else {
        out
    })
}

/// Runs the recurrent unit over frames in order (zero initial state) and
/// returns the per-step hidden states as a `B x C` matrix.
pub fn gru_sequence<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    p: &GruParams,
    frames: Var,
    dim: usize,
) -> Result<Var> {
    let b = g.dims(frames)[0];
    let gi_all = g.matmul(frames, bound.get(p.w_ih))?;
    let mut h = g.constant(crate::diffcore::Tensor::zeros(&[1, dim]));
    let mut outputs = Vec::with_capacity(b);
    for t in 0..b {
        let gi = g.row(gi_all, t)?;
        let gi = g.reshape(gi, &[1, 3 * dim])?;
        let gi = g.add(gi, bound.get(p.b_ih))?;
        let gh = g.matmul(h, bound.get(p.w_hh))?;
        let gh = g.add(gh, bound.get(p.b_hh))?;
        let (i_r, i_z, i_n) = (g.slice_cols(gi, 0, dim)?, g.slice_cols(gi, dim, dim)?, g.slice_cols(gi, 2 * dim, dim)?);
        let (h_r, h_z, h_n) = (g.slice_cols(gh, 0, dim)?, g.slice_cols(gh, dim, dim)?, g.slice_cols(gh, 2 * dim, dim)?);
        let r = g.add(i_r, h_r)?;
        let r = g.sigmoid(r);
        let z = g.add(i_z, h_z)?;
        let z = g.sigmoid(z);
        let rh = g.mul(r, h_n)?;
        let n = g.add(i_n, rh)?;
        let n = g.tanh(n);
        // h' = (1 - z) n + z h = n + z (h - n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        h = g.add(n, zd)?;
        outputs.push(g.reshape(h, &[dim])?);
    }
    g.stack_rows(&outputs)
}

/// Multi-head scaled dot-product self-attention over frames without
/// positional information, output projection, then mean over frames.
pub fn multi_head_pool<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    p: &MultiHeadParams,
    frames: Var,
    dim: usize,
) -> Result<Var> {
    let q = g.matmul(frames, bound.get(p.wq))?;
    let k = g.matmul(frames, bound.get(p.wk))?;
    let v = g.matmul(frames, bound.get(p.wv))?;
    let d = dim / ATTENTION_HEADS;
    let scale = T::c(1.0 / (d as f64).sqrt());
    let mut heads = Vec::with_capacity(ATTENTION_HEADS);
    for h in 0..ATTENTION_HEADS {
        let qh = g.slice_cols(q, h * d, d)?;
        let kh = g.slice_cols(k, h * d, d)?;
        let vh = g.slice_cols(v, h * d, d)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale);
        let a = g.softmax_rows(s)?;
        heads.push(g.matmul(a, vh)?);
    }
    let cat = g.concat_cols(&heads)?;
    let out = g.matmul(cat, bound.get(p.wo))?;
    g.mean_rows(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradcheck, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const C: usize = 8;

    fn setup(kind: AggregatorKind, seed: u64) -> (ParamStore<f64>, Aggregator) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let agg = Aggregator::new(kind, C, &mut store, &mut rng).unwrap();
        (store, agg)
    }

    fn frames(rng: &mut ChaCha8Rng, b: usize) -> Tensor<f64> {
        Tensor::new(&[b, C], (0..b * C).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn kind_strings_round_trip() {
        for k in AggregatorKind::ALL {
            assert_eq!(k.as_str().parse::<AggregatorKind>().unwrap(), k);
        }
        assert!(matches!("attention".parse::<AggregatorKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_blocks_follow_kind() {
        let names = |k| {
            let (s, _) = setup(k, 0);
            s.iter().map(|(n, _)| n.to_string()).collect::<Vec<_>>()
        };
        assert_eq!(names(AggregatorKind::MeanPool), Vec::<String>::new());
        assert_eq!(names(AggregatorKind::Mfl), ["mfl.w1", "mfl.w2", "mfl.w3", "mfl.w_proj"]);
        assert_eq!(names(AggregatorKind::MflNoProj), ["mfl.w1", "mfl.w2", "mfl.w3"]);
        assert!(names(AggregatorKind::MflGru).contains(&"gru.w_hh".to_string()));
        assert_eq!(names(AggregatorKind::MultiHead).len(), 4);
        assert_eq!(names(AggregatorKind::MultiHeadGru).len(), 8);
        let (s, _) = setup(AggregatorKind::Mfl, 0);
        assert_eq!(s.by_name("mfl.w1").unwrap().dims(), &[C, 64]);
        assert_eq!(s.by_name("mfl.w2").unwrap().dims(), &[64, 32]);
        assert_eq!(s.by_name("mfl.w3").unwrap().dims(), &[32, 1]);
        assert_eq!(s.by_name("mfl.w_proj").unwrap().dims(), &[C, C]);
    }

    #[test]
    fn identical_frames_score_equally_and_zero_w3_gives_zero() {
        let (mut store, agg) = setup(AggregatorKind::Mfl, 1);
        let p = agg.mfl.clone().unwrap();
        let row: Vec<f64> = (0..C).map(|i| i as f64 * 0.1 - 0.3).collect();
        let f = Tensor::new(&[5, C], row.repeat(5)).unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let fv = g.constant(f.clone());
        let s = score_frames(&mut g, &bound, &p, fv).unwrap();
        let v = g.value(s).data();
        assert!(v.iter().all(|&x| x == v[0]));

        store.get_mut(p.w3).data_mut().fill(0.0);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let fv = g.constant(f);
        let s = score_frames(&mut g, &bound, &p, fv).unwrap();
        assert!(g.value(s).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_weights_examples() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::zeros(&[4]));
        let a = normalize_weights(&mut g, s).unwrap();
        assert_eq!(g.value(a).data(), &[0.25; 4]);
        let e = std::f64::consts::E;
        for c in [-7.0, 0.0, 3.5] {
            let s = g.constant(Tensor::from_f64(&[2], &[c + 1.0, c]).unwrap());
            let a = normalize_weights(&mut g, s).unwrap();
            let v = g.value(a).data();
            assert!((v[0] - e / (e + 1.0)).abs() < 1e-15);
            assert!((v[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        }
        let s = g.constant(Tensor::from_f64(&[2], &[10.0, -10.0]).unwrap());
        let a = normalize_weights(&mut g, s).unwrap();
        assert!(g.value(a).data()[0] >= 1.0 - 1e-8);
    }

    #[test]
    fn aggregate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::<f64>::new();
        let f = frames(&mut rng, 3);
        let fv = g.constant(f.clone());
        let onehot = g.constant(Tensor::from_f64(&[3], &[0.0, 1.0, 0.0]).unwrap());
        let a = aggregate(&mut g, fv, onehot).unwrap();
        assert_eq!(g.value(a).data(), &f.data()[C..2 * C]);

        let alpha = [0.2, 0.5, 0.3];
        let av = g.constant(Tensor::from_f64(&[3], &alpha).unwrap());
        let a = aggregate(&mut g, fv, av).unwrap();
        for j in 0..C {
            let direct: f64 = (0..3).map(|i| alpha[i] * f.data()[i * C + j]).sum();
            assert!((g.value(a).data()[j] - direct).abs() < 1e-12);
        }
        let same = g.constant(Tensor::new(&[4, C], f.data()[..C].repeat(4)).unwrap());
        let w = g.constant(Tensor::from_f64(&[4], &[0.1, 0.6, 0.2, 0.1]).unwrap());
        let a = aggregate(&mut g, same, w).unwrap();
        for (x, y) in g.value(a).data().iter().zip(&f.data()[..C]) {
            assert!((x - y).abs() < 1e-15);
        }
        let short = g.constant(Tensor::from_f64(&[2], &[0.5, 0.5]).unwrap());
        assert!(matches!(aggregate(&mut g, fv, short), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_on_identical_frames() {
        let row: Vec<f64> = (0..C).map(|i| (i as f64 - 3.0) / 4.0).collect();
        let f = Tensor::new(&[6, C], row.repeat(6)).unwrap();
        for kind in [AggregatorKind::MeanPool, AggregatorKind::Mfl, AggregatorKind::MflNoProj] {
            let (store, agg) = setup(kind, 3);
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let fv = g.constant(f.clone());
            let out = agg.forward(&mut g, &bound, fv).unwrap();
            let expected: Vec<f64> = match kind {
                AggregatorKind::Mfl => {
                    let w = store.by_name("mfl.w_proj").unwrap().data();
                    (0..C).map(|j| (0..C).map(|i| row[i] * w[i * C + j]).sum()).collect()
                }
                _ => row.clone(),
            };
            for (x, y) in g.value(out).data().iter().zip(&expected) {
                assert!((x - y).abs() < 1e-12, "{kind}");
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let (store, agg) = setup(AggregatorKind::Mfl, 0);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let fv = g.constant(Tensor::zeros(&[3, C + 1]));
        assert!(matches!(agg.forward(&mut g, &bound, fv), Err(Error::Shape(_))));
    }

    #[test]
    fn permutation_invariance_except_recurrent_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = frames(&mut rng, 5);
        let order = [3, 0, 4, 1, 2];
        let permuted: Vec<f64> = order.iter().flat_map(|&i| f.data()[i * C..(i + 1) * C].to_vec()).collect();
        let fp = Tensor::new(&[5, C], permuted).unwrap();
        for kind in AggregatorKind::ALL {
            let (store, agg) = setup(kind, 4);
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let (a, b) = (g.constant(f.clone()), g.constant(fp.clone()));
            let oa = agg.forward(&mut g, &bound, a).unwrap();
            let ob = agg.forward(&mut g, &bound, b).unwrap();
            let max_diff = g
                .value(oa)
                .data()
                .iter()
                .zip(g.value(ob).data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            if kind.permutation_invariant() {
                assert!(max_diff < 1e-9, "{kind}: {max_diff}");
            } else {
                assert!(max_diff > 1e-6, "{kind} should depend on order");
            }
        }
    }

    #[test]
    fn every_variant_passes_gradcheck() {
        for kind in AggregatorKind::ALL {
            for seed in 0..5u64 {
                let (store, agg) = setup(kind, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
                let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
                inputs.push(frames(&mut rng, 4));
                let head: Vec<f64> = (0..C).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = store.len();
                let r = gradcheck(
                    kind.as_str(),
                    |g, v| {
                        let bound = Bound::from_vars(v[..n].to_vec());
                        let out = agg.forward(g, &bound, v[n])?;
                        let w = g.constant(Tensor::new(&[C], head.clone())?);
                        let s = g.mul(out, w)?;
                        Ok(g.sum(s))
                    },
                    &inputs,
                )
                .unwrap();
                assert!(r.passed(1e-4), "{kind} seed {seed}: {} at {:?}", r.max_rel_error, r.worst_coordinate);
            }
        }
    }
}
