//! Coarse-to-fine ordinal regression head.
//!
//! The coarse stage classifies a video feature into ejection-fraction bins
//! by cosine similarity against per-bin prototypes. The fine stage predicts
//! one bounded shift per bin and decodes
//! `y* = sum_i p_i * b_i / (1 + delta_i)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Real, RegressionKind, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

pub const REGRESSOR_HIDDEN: usize = 32;
/// Shifts are `SHIFT_BOUND * tanh(raw)`, so `1 + delta` stays in (0.5, 1.5).
pub const SHIFT_BOUND: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinScheme {
    Uniform,
    Clinical4,
}

impl BinScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "clinical4" => Ok(Self::Clinical4),
            other => Err(Error::Config(format!("unknown bin scheme `{other}`"))),
        }
    }
}

/// Ascending bin edges spanning [0, 100].
#[derive(Clone, Debug, PartialEq)]
pub struct BinSpec {
    edges: Vec<f64>,
}

impl BinSpec {
    pub fn from_edges(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::Config("a bin spec needs at least two edges".into()));
        }
        if edges[0] != 0.0 || *edges.last().unwrap() != 100.0 {
            return Err(Error::Config(format!(
                "bin edges must span [0, 100], got {edges:?}"
            )));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config(format!("bin edges not ascending: {edges:?}")));
        }
        Ok(Self { edges })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("bin count must be positive".into()));
        }
        Self::from_edges((0..=k).map(|i| 100.0 * i as f64 / k as f64).collect())
    }

    /// Severely reduced, moderately reduced, mildly reduced, normal.
    pub fn clinical4() -> Self {
        Self::from_edges(vec![0.0, 30.0, 45.0, 55.0, 100.0]).expect("valid edges")
    }

    pub fn from_scheme(scheme: BinScheme, k: usize) -> Result<Self> {
        match scheme {
            BinScheme::Uniform => Self::uniform(k),
            BinScheme::Clinical4 => Ok(Self::clinical4()),
        }
    }

    pub fn k(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn range(&self, i: usize) -> (f64, f64) {
        (self.edges[i], self.edges[i + 1])
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect()
    }
}

/// Index `i` with `edges[i] <= ef < edges[i+1]`; 100 maps to the last bin.
pub fn assign_bin(ef: f64, bins: &BinSpec) -> Result<usize> {
    if !(0.0..=100.0).contains(&ef) {
        return Err(Error::Validation(format!("ejection fraction {ef} outside [0, 100]")));
    }
    let k = bins.k();
    Ok(bins.edges[1..k]
        .iter()
        .take_while(|&&e| e <= ef)
        .count())
}

/// Cosine-similarity logits and class probabilities.
#[derive(Clone, Copy, Debug)]
pub struct Classification {
    pub logits: Var,
    pub probs: Var,
}

/// `logits_j = cos(feature, prototype_j) / temperature`, `p = softmax(logits)`.
pub fn classify<T: Real>(
    g: &mut Graph<T>,
    feature: Var,
    prototypes: Var,
    temperature: f64,
) -> Result<Classification> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let c = match *g.dims(feature) {
        [c] => c,
        ref d => return Err(Error::Shape(format!("classify: feature dims {d:?}"))),
    };
    let k = match *g.dims(prototypes) {
        [k, pc] if pc == c => k,
        ref d => {
            return Err(Error::Shape(format!(
                "classify: prototypes {d:?} for a {c}-dim feature"
            )))
        }
    };
    let col = g.reshape(feature, &[c, 1])?;
    let col = g.transpose(col)?;
    let unit = g.l2_normalize_rows(col)?;
    let unit = g.transpose(unit)?;
    let protos = g.l2_normalize_rows(prototypes)?;
    let cos = g.matmul(protos, unit)?;
    let cos = g.reshape(cos, &[k])?;
    let logits = g.scale(cos, T::c(1.0 / temperature));
    let probs = g.softmax(logits)?;
    Ok(Classification { logits, probs })
}

/// Two-layer tanh perceptron `C -> 32 -> K` producing raw shift logits.
#[derive(Clone, Debug)]
pub struct RegressorParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub feature_dim: usize,
    pub k: usize,
}

impl RegressorParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        feature_dim: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let h = REGRESSOR_HIDDEN;
        Ok(Self {
            w1: store.add_uniform("regressor.w1", &[feature_dim, h], feature_dim, rng)?,
            b1: store.add_uniform("regressor.b1", &[1, h], feature_dim, rng)?,
            w2: store.add_uniform("regressor.w2", &[h, k], h, rng)?,
            b2: store.add_uniform("regressor.b2", &[1, k], h, rng)?,
            feature_dim,
            k,
        })
    }
}

/// `delta = 0.5 * tanh(mlp(feature))`, one shift per bin.
pub fn predict_shifts<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    params: &RegressorParams,
    feature: Var,
) -> Result<Var> {
    let row = g.reshape(feature, &[1, params.feature_dim])?;
    let h = g.matmul(row, bound.get(params.w1))?;
    let h = g.add(h, bound.get(params.b1))?;
    let h = g.tanh(h);
    let raw = g.matmul(h, bound.get(params.w2))?;
    let raw = g.add(raw, bound.get(params.b2))?;
    let raw = g.reshape(raw, &[params.k])?;
    let t = g.tanh(raw);
    Ok(g.scale(t, T::c(SHIFT_BOUND)))
}

/// Decoded estimate `sum_i p_i * b_i / (1 + delta_i)` as a `[1]` tensor.
pub fn expected_value<T: Real>(g: &mut Graph<T>, probs: Var, shifts: Var, bins: &BinSpec) -> Result<Var> {
    expected_value_with_centers(g, probs, shifts, &bins.centers())
}

/// [`expected_value`] over explicit bin centres.
pub fn expected_value_with_centers<T: Real>(
    g: &mut Graph<T>,
    probs: Var,
    shifts: Var,
    centers: &[f64],
) -> Result<Var> {
    let k = centers.len();
    if g.dims(probs) != [k] || g.dims(shifts) != [k] {
        return Err(Error::Shape(format!(
            "expected_value: p {:?} / delta {:?} for {k} bins",
            g.dims(probs),
            g.dims(shifts)
        )));
    }
    if g.value(shifts).data().iter().any(|&d| !(d > -T::one())) {
        return Err(Error::Contract("bin shift with 1 + delta <= 0".into()));
    }
    let centers = Tensor::from_f64(&[k], centers)?;
    let centers = g.constant(centers);
    let denom = g.add_scalar(shifts, T::one());
    let shifted = g.div(centers, denom)?;
    let weighted = g.mul(probs, shifted)?;
    Ok(g.sum(weighted))
}

/// Unweighted sum of the bin cross-entropy and the regression loss.
#[allow(clippy::too_many_arguments)]
pub fn loss_or<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    y_star: Var,
    label_ef: f64,
    bins: &BinSpec,
    kind: RegressionKind,
    threshold: f64,
) -> Result<Var> {
    let target = assign_bin(label_ef, bins)?;
    let ce = g.cross_entropy(logits, target)?;
    let reg = g.regression_loss(y_star, T::c(label_ef), kind, T::c(threshold))?;
    g.add(ce, reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_bins_and_centers() {
        let b = BinSpec::uniform(10).unwrap();
        assert_eq!(b.k(), 10);
        assert_eq!(b.centers()[5], 55.0);
        for (i, c) in b.centers().iter().enumerate() {
            let (lo, hi) = b.range(i);
            assert!(lo < *c && *c < hi);
        }
        assert!(BinSpec::from_edges(vec![0.0, 50.0, 50.0, 100.0]).is_err());
        assert!(BinSpec::from_edges(vec![5.0, 100.0]).is_err());
        assert!(BinSpec::uniform(0).is_err());
    }

    #[test]
    fn assign_bin_examples() {
        let b = BinSpec::uniform(10).unwrap();
        assert_eq!(assign_bin(55.0, &b).unwrap(), 5);
        assert_eq!(assign_bin(0.0, &b).unwrap(), 0);
        assert_eq!(assign_bin(100.0, &b).unwrap(), 9);
        assert_eq!(assign_bin(49.999, &b).unwrap(), 4);
        assert_eq!(assign_bin(50.0, &b).unwrap(), 5);
        assert!(matches!(assign_bin(100.5, &b), Err(Error::Validation(_))));
        assert!(matches!(assign_bin(-1.0, &b), Err(Error::Validation(_))));
        let c = BinSpec::clinical4();
        assert_eq!(assign_bin(45.0, &c).unwrap(), 2);
        assert_eq!(c.range(2), (45.0, 55.0));
    }

    fn vec_const(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.constant(Tensor::from_f64(&[v.len()], v).unwrap())
    }

    #[test]
    fn classify_matching_prototype_dominates() {
        let mut g = Graph::<f64>::new();
        let protos = g.constant(Tensor::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let f = vec_const(&mut g, &[0., 2.5, 0.]);
        let c = classify(&mut g, f, protos, 0.07).unwrap();
        assert!(g.value(c.probs).data()[1] >= 0.99);
    }

    #[test]
    fn classify_orthogonal_feature_is_uniform() {
        let mut g = Graph::<f64>::new();
        let protos = g.constant(Tensor::from_f64(&[2, 3], &[1., 0., 0., 0., 1., 0.]).unwrap());
        let f = vec_const(&mut g, &[0., 0., 4.]);
        let c = classify(&mut g, f, protos, 0.07).unwrap();
        assert_eq!(g.value(c.probs).data(), &[0.5, 0.5]);
    }

    #[test]
    fn classify_degenerate_and_bad_temperature() {
        let mut g = Graph::<f64>::new();
        let protos = g.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
        let zero = vec_const(&mut g, &[0., 0.]);
        assert!(matches!(classify(&mut g, zero, protos, 0.07), Err(Error::Numerical(_))));
        let f = vec_const(&mut g, &[1., 0.]);
        assert!(matches!(classify(&mut g, f, protos, 0.0), Err(Error::Config(_))));
        let bad = g.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 0.]).unwrap());
        assert!(matches!(classify(&mut g, f, bad, 0.07), Err(Error::Numerical(_))));
    }

    #[test]
    fn expected_value_examples() {
        let mut g = Graph::<f64>::new();
        let bins = BinSpec::uniform(10).unwrap();
        let mut onehot = vec![0.0; 10];
        onehot[5] = 1.0;
        let p = vec_const(&mut g, &onehot);
        let d = vec_const(&mut g, &[0.0; 10]);
        let y = expected_value(&mut g, p, d, &bins).unwrap();
        assert_eq!(g.value(y).item(), 55.0);

        let p = vec_const(&mut g, &[0.5, 0.5]);
        let d = vec_const(&mut g, &[0.0, 0.0]);
        let y = expected_value_with_centers(&mut g, p, d, &[40.0, 60.0]).unwrap();
        assert_eq!(g.value(y).item(), 50.0);
    }

    #[test]
    fn expected_value_with_shifts_matches_hand_computation() {
        // 0.25 * 30 / 1.25 + 0.75 * 70 / 0.75 = 6 + 70
        let mut g = Graph::<f64>::new();
        let p = vec_const(&mut g, &[0.25, 0.75]);
        let d = vec_const(&mut g, &[0.25, -0.25]);
        let y = expected_value_with_centers(&mut g, p, d, &[30.0, 70.0]).unwrap();
        assert!((g.value(y).item() - 76.0).abs() < 1e-12);
    }

    #[test]
    fn expected_value_rejects_singular_shift() {
        let bins = BinSpec::uniform(2).unwrap();
        let mut g = Graph::<f64>::new();
        let p = vec_const(&mut g, &[0.5, 0.5]);
        let d = vec_const(&mut g, &[-1.0, 0.0]);
        assert!(matches!(expected_value(&mut g, p, d, &bins), Err(Error::Contract(_))));
    }

    #[test]
    fn shifts_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let reg = RegressorParams::new(&mut store, 4, 6, &mut rng).unwrap();
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 40.0);
        }
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let f = vec_const(&mut g, &[3.0, -2.0, 5.0, 1.0]);
        let d = predict_shifts(&mut g, &bound, &reg, f).unwrap();
        for &v in g.value(d).data() {
            // tanh saturates to exactly 1.0 in floating point
            assert!(v.abs() <= SHIFT_BOUND, "{v}");
        }
    }

    #[test]
    fn loss_or_examples() {
        let bins = BinSpec::uniform(10).unwrap();
        let mut g = Graph::<f64>::new();
        let uniform = vec_const(&mut g, &[0.0; 10]);
        let y = g.constant(Tensor::scalar(63.0));
        let l = loss_or(&mut g, uniform, y, 63.0, &bins, RegressionKind::Mae, 1.0).unwrap();
        assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-12);

        let mut sat = vec![0.0; 10];
        sat[6] = 100.0;
        let sat = vec_const(&mut g, &sat);
        let l = loss_or(&mut g, sat, y, 63.0, &bins, RegressionKind::Mae, 1.0).unwrap();
        assert!(g.value(l).item() < 1e-12);
    }

    #[test]
    fn loss_or_gradcheck_through_head() {
        let bins = BinSpec::uniform(5).unwrap();
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f64>::new();
            let reg = RegressorParams::new(&mut store, 6, 5, &mut rng).unwrap();
            let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
            let rnd = |rng: &mut ChaCha8Rng, dims: &[usize]| {
                let n = dims.iter().product();
                Tensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            };
            inputs.push(rnd(&mut rng, &[6]));
            inputs.push(rnd(&mut rng, &[5, 6]));
            let label = rng.gen_range(5.0..95.0);
            let r = gradcheck(
                "loss_or",
                |g, v| {
                    let bound = Bound::from_vars(v[..4].to_vec());
                    let cls = classify(g, v[4], v[5], 0.5)?;
                    let d = predict_shifts(g, &bound, &reg, v[4])?;
                    let y = expected_value(g, cls.probs, d, &bins)?;
                    loss_or(g, cls.logits, y, label, &bins, RegressionKind::Mse, 1.0)
                },
                &inputs,
            )
            .unwrap();
            assert!(r.passed(1e-4), "seed {seed}: {} at {:?}", r.max_rel_error, r.worst_coordinate);
        }
    }
}
