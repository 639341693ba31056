//! Finite-difference verification of every differentiable op and of the
//! composite forward passes, over several random seeds each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{gradcheck, GradCheckReport, Graph, PadMode, RegressionKind, Tensor, UpsampleMode, Var};
use crate::echozoom::{echozoom_forward, Interpolation, ZoomConfig};
use crate::encoder::{EncoderConfig, FrameEncoder};
use crate::error::Result;
use crate::mfl::{Aggregator, AggregatorKind};
use crate::ordinal::{classify, expected_value, loss_or, predict_shifts, BinSpec, RegressorParams};
use crate::params::{Bound, ParamStore};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

type Func = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    f: Func,
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive dims")
}

/// Values with magnitude in `[0.5, 2]` and random sign, safe as divisors.
fn away_from_zero(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.5..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(dims, data).expect("positive dims")
}

/// `sum(out * w)` for a fixed random `w`, turning any output into a scalar
/// whose gradient exercises every output coordinate.
fn contract(g: &mut Graph<f64>, out: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Case whose output has `out_dims` and is contracted with random weights.
fn weighted<F>(rng: &mut ChaCha8Rng, inputs: Vec<Tensor<f64>>, out_dims: &[usize], f: F) -> Case
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
{
    let w = rand_tensor(rng, out_dims, -1.0, 1.0);
    Case {
        inputs,
        f: Box::new(move |g, v| {
            let out = f(g, v)?;
            contract(g, out, &w)
        }),
    }
}

fn op_cases() -> Vec<(String, fn(&mut ChaCha8Rng) -> Case)> {
    let mut v: Vec<(String, fn(&mut ChaCha8Rng) -> Case)> = vec![
        ("matmul".into(), |r| {
            let ins = vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4, 2], -1.0, 1.0)];
            weighted(r, ins, &[3, 2], |g, v| g.matmul(v[0], v[1]))
        }),
        ("transpose".into(), |r| {
            let ins = vec![rand_tensor(r, &[3, 4], -1.0, 1.0)];
            weighted(r, ins, &[4, 3], |g, v| g.transpose(v[0]))
        }),
        ("conv2d[s1,p1,zero]".into(), |r| conv_case(r, 1, 1, PadMode::Zero)),
        ("conv2d[s2,p1,zero]".into(), |r| conv_case(r, 2, 1, PadMode::Zero)),
        ("conv2d[s2,p0,zero]".into(), |r| conv_case(r, 2, 0, PadMode::Zero)),
        ("conv2d[s1,p1,replicate]".into(), |r| conv_case(r, 1, 1, PadMode::Replicate)),
        ("conv2d[s2,p1,replicate]".into(), |r| conv_case(r, 2, 1, PadMode::Replicate)),
        ("bias_channels".into(), |r| {
            let ins = vec![rand_tensor(r, &[2, 3, 3], -1.0, 1.0), rand_tensor(r, &[2], -1.0, 1.0)];
            weighted(r, ins, &[2, 3, 3], |g, v| g.bias_channels(v[0], v[1]))
        }),
        ("tanh".into(), |r| {
            let ins = vec![rand_tensor(r, &[7], -2.0, 2.0)];
            weighted(r, ins, &[7], |g, v| Ok(g.tanh(v[0])))
        }),
        ("sigmoid".into(), |r| {
            let ins = vec![rand_tensor(r, &[7], -3.0, 3.0)];
            weighted(r, ins, &[7], |g, v| Ok(g.sigmoid(v[0])))
        }),
        ("softmax".into(), |r| {
            let ins = vec![rand_tensor(r, &[6], -2.0, 2.0)];
            weighted(r, ins, &[6], |g, v| g.softmax(v[0]))
        }),
        ("softmax_rows".into(), |r| {
            let ins = vec![rand_tensor(r, &[3, 4], -2.0, 2.0)];
            weighted(r, ins, &[3, 4], |g, v| g.softmax_rows(v[0]))
        }),
        ("avg_pool2d".into(), |r| {
            let ins = vec![rand_tensor(r, &[2, 4, 4], -1.0, 1.0)];
            weighted(r, ins, &[2, 2, 2], |g, v| g.avg_pool2d(v[0], 2))
        }),
        ("global_avg_pool".into(), |r| {
            let ins = vec![rand_tensor(r, &[3, 2, 4], -1.0, 1.0)];
            weighted(r, ins, &[3], |g, v| g.global_avg_pool(v[0]))
        }),
        ("add".into(), |r| {
            let ins = vec![rand_tensor(r, &[2, 3], -1.0, 1.0), rand_tensor(r, &[2, 3], -1.0, 1.0)];
            weighted(r, ins, &[2, 3], |g, v| g.add(v[0], v[1]))
        }),
        ("sub".into(), |r| {
            let ins = vec![rand_tensor(r, &[2, 3], -1.0, 1.0), rand_tensor(r, &[2, 3], -1.0, 1.0)];
            weighted(r, ins, &[2, 3], |g, v| g.sub(v[0], v[1]))
        }),
        ("mul".into(), |r| {
            let ins = vec![rand_tensor(r, &[5], -1.0, 1.0), rand_tensor(r, &[5], -1.0, 1.0)];
            weighted(r, ins, &[5], |g, v| g.mul(v[0], v[1]))
        }),
        ("div".into(), |r| {
            let ins = vec![rand_tensor(r, &[5], -1.0, 1.0), away_from_zero(r, &[5])];
            weighted(r, ins, &[5], |g, v| g.div(v[0], v[1]))
        }),
        ("scale".into(), |r| {
            let c = r.gen_range(-2.0..2.0);
            let ins = vec![rand_tensor(r, &[4], -1.0, 1.0)];
            weighted(r, ins, &[4], move |g, v| Ok(g.scale(v[0], c)))
        }),
        ("add_scalar".into(), |r| {
            let c = r.gen_range(-2.0..2.0);
            let ins = vec![rand_tensor(r, &[4], -1.0, 1.0)];
            weighted(r, ins, &[4], move |g, v| Ok(g.add_scalar(v[0], c)))
        }),
        ("sum".into(), |r| {
            let ins = vec![rand_tensor(r, &[2, 3], -1.0, 1.0)];
            weighted(r, ins, &[1], |g, v| Ok(g.sum(v[0])))
        }),
        ("mean_rows".into(), |r| {
            let ins = vec![rand_tensor(r, &[4, 3], -1.0, 1.0)];
            weighted(r, ins, &[3], |g, v| g.mean_rows(v[0]))
        }),
        ("reshape".into(), |r| {
            let ins = vec![rand_tensor(r, &[2, 6], -1.0, 1.0)];
            weighted(r, ins, &[3, 4], |g, v| g.reshape(v[0], &[3, 4]))
        }),
        ("stack_rows".into(), |r| {
            let ins = vec![rand_tensor(r, &[3], -1.0, 1.0), rand_tensor(r, &[3], -1.0, 1.0)];
            weighted(r, ins, &[2, 3], |g, v| g.stack_rows(&[v[0], v[1]]))
        }),
        ("concat_cols".into(), |r| {
            let ins = vec![rand_tensor(r, &[2, 3], -1.0, 1.0), rand_tensor(r, &[2, 1], -1.0, 1.0)];
            weighted(r, ins, &[2, 4], |g, v| g.concat_cols(&[v[0], v[1]]))
        }),
        ("slice_cols".into(), |r| {
            let ins = vec![rand_tensor(r, &[3, 5], -1.0, 1.0)];
            weighted(r, ins, &[3, 2], |g, v| g.slice_cols(v[0], 2, 2))
        }),
        ("row".into(), |r| {
            let ins = vec![rand_tensor(r, &[3, 4], -1.0, 1.0)];
            weighted(r, ins, &[4], |g, v| g.row(v[0], 1))
        }),
        ("crop".into(), |r| {
            let ins = vec![rand_tensor(r, &[2, 5, 6], -1.0, 1.0)];
            weighted(r, ins, &[2, 3, 2], |g, v| g.crop(v[0], 1, 3, 3, 2))
        }),
        ("assemble_quadrants".into(), |r| {
            let ins: Vec<_> = (0..4).map(|_| rand_tensor(r, &[2, 2, 3], -1.0, 1.0)).collect();
            weighted(r, ins, &[2, 4, 6], |g, v| g.assemble_quadrants([v[0], v[1], v[2], v[3]]))
        }),
        ("upsample2x[nearest]".into(), |r| {
            let ins = vec![rand_tensor(r, &[2, 3, 3], -1.0, 1.0)];
            weighted(r, ins, &[2, 6, 6], |g, v| g.upsample2x(v[0], UpsampleMode::Nearest))
        }),
        ("upsample2x[bilinear]".into(), |r| {
            let ins = vec![rand_tensor(r, &[2, 3, 3], -1.0, 1.0)];
            weighted(r, ins, &[2, 6, 6], |g, v| g.upsample2x(v[0], UpsampleMode::Bilinear))
        }),
        ("l2_normalize_rows".into(), |r| {
            let ins = vec![away_from_zero(r, &[3, 4])];
            weighted(r, ins, &[3, 4], |g, v| g.l2_normalize_rows(v[0]))
        }),
        ("cross_entropy".into(), |r| {
            let label = r.gen_range(0..5);
            let ins = vec![rand_tensor(r, &[5], -3.0, 3.0)];
            weighted(r, ins, &[1], move |g, v| g.cross_entropy(v[0], label))
        }),
    ];
    v.push(("regression_loss[mae]".into(), |r| regression_case(r, RegressionKind::Mae)));
    v.push(("regression_loss[mse]".into(), |r| regression_case(r, RegressionKind::Mse)));
    v.push(("regression_loss[smooth_l1]".into(), |r| regression_case(r, RegressionKind::SmoothL1)));
    v.push(("regression_loss[huber]".into(), |r| regression_case(r, RegressionKind::Huber)));
    v
}

fn conv_case(r: &mut ChaCha8Rng, stride: usize, padding: usize, mode: PadMode) -> Case {
    let ins = vec![rand_tensor(r, &[2, 6, 6], -1.0, 1.0), rand_tensor(r, &[3, 2, 3, 3], -1.0, 1.0)];
    let ext = (6 + 2 * padding - 3) / stride + 1;
    weighted(r, ins, &[3, ext, ext], move |g, v| g.conv2d_padded(v[0], v[1], stride, padding, mode))
}

/// Residuals of either sign, kept away from the kinks at 0 and at the threshold.
fn regression_case(r: &mut ChaCha8Rng, kind: RegressionKind) -> Case {
    let magnitude = if r.gen_bool(0.5) { r.gen_range(0.1..0.9) } else { r.gen_range(1.1..4.0) };
    let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
    let target = r.gen_range(10.0..90.0);
    let pred = Tensor::from_f64(&[1], &[target + sign * magnitude]).expect("scalar");
    Case {
        inputs: vec![pred],
        f: Box::new(move |g, v| g.regression_loss(v[0], target, kind, 1.0)),
    }
}

/// Store tensors followed by `extra`, with a closure that rebinds them.
fn store_case<F>(store: ParamStore<f64>, extra: Vec<Tensor<f64>>, f: F) -> Case
where
    F: Fn(&mut Graph<f64>, &Bound, &[Var]) -> Result<Var> + 'static,
{
    let n = store.len();
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.extend(extra);
    Case {
        inputs,
        f: Box::new(move |g, v| {
            let bound = Bound::from_vars(v[..n].to_vec());
            f(g, &bound, &v[n..])
        }),
    }
}

fn mfl_case(r: &mut ChaCha8Rng, kind: AggregatorKind) -> Result<Case> {
    const C: usize = 8;
    let mut store = ParamStore::new();
    let agg = Aggregator::new(kind, C, &mut store, r)?;
    let frames = rand_tensor(r, &[4, C], -1.0, 1.0);
    let w = rand_tensor(r, &[C], -1.0, 1.0);
    Ok(store_case(store, vec![frames], move |g, bound, x| {
        let out = agg.forward(g, bound, x[0])?;
        contract(g, out, &w)
    }))
}

fn echozoom_case(r: &mut ChaCha8Rng) -> Result<Case> {
    let cfg = EncoderConfig {
        in_channels: 1,
        stage_channels: vec![2, 3],
        base_resolution: 8,
    };
    let mut store = ParamStore::new();
    let enc = FrameEncoder::new(cfg, &mut store, r)?;
    let zoom = ZoomConfig {
        base_res: 8,
        upsample: Interpolation::Bilinear,
    };
    let image = rand_tensor(r, &[1, 8, 8], 0.0, 1.0);
    let w = rand_tensor(r, &[3, 2, 2], -1.0, 1.0);
    Ok(store_case(store, vec![image], move |g, bound, x| {
        let out = echozoom_forward(g, bound, x[0], &enc, &zoom)?;
        contract(g, out, &w)
    }))
}

fn loss_or_case(r: &mut ChaCha8Rng, kind: RegressionKind) -> Result<Case> {
    const C: usize = 6;
    let bins = BinSpec::uniform(5)?;
    let mut store = ParamStore::new();
    let reg = RegressorParams::new(&mut store, C, bins.k(), r)?;
    let feature = rand_tensor(r, &[C], -1.0, 1.0);
    let protos = rand_tensor(r, &[bins.k(), C], -1.0, 1.0);
    let label = r.gen_range(5.0..95.0);
    let temperature = r.gen_range(0.5..2.0);
    Ok(store_case(store, vec![feature, protos], move |g, bound, x| {
        let cls = classify(g, x[0], x[1], temperature)?;
        let shifts = predict_shifts(g, bound, &reg, x[0])?;
        let y = expected_value(g, cls.probs, shifts, &bins)?;
        loss_or(g, cls.logits, y, label, &bins, kind, 1.0)
    }))
}

fn composite_cases() -> Vec<(String, Box<dyn Fn(&mut ChaCha8Rng) -> Result<Case>>)> {
    let mut v: Vec<(String, Box<dyn Fn(&mut ChaCha8Rng) -> Result<Case>>)> = Vec::new();
    for kind in AggregatorKind::ALL {
        v.push((format!("mfl_forward[{kind}]"), Box::new(move |r| mfl_case(r, kind))));
    }
    v.push(("echozoom_forward".into(), Box::new(echozoom_case)));
    for kind in [RegressionKind::Mae, RegressionKind::Mse, RegressionKind::SmoothL1, RegressionKind::Huber] {
        v.push((format!("loss_or[{}]", kind.as_str()), Box::new(move |r| loss_or_case(r, kind))));
    }
    v
}

fn merge(name: &str, reports: Vec<GradCheckReport>) -> GradCheckReport {
    let coordinates_checked = reports.iter().map(|r| r.coordinates_checked).sum();
    let max_abs_error = reports.iter().map(|r| r.max_abs_error).fold(0.0, f64::max);
    let worst = reports
        .into_iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("at least one seed");
    GradCheckReport {
        op_name: name.to_string(),
        max_abs_error,
        coordinates_checked,
        ..worst
    }
}

fn seed_rng(seed: u64, case: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ case as u64)
}

/// One merged report (worst seed) per op and composite, 64-bit throughout.
pub fn gradcheck_all(seeds: u64) -> Result<Vec<GradCheckReport>> {
    let seeds = seeds.max(1);
    let mut out = Vec::new();
    let mut idx = 0usize;
    for (name, build) in op_cases() {
        let mut reports = Vec::new();
        for s in 0..seeds {
            let case = build(&mut seed_rng(s, idx));
            reports.push(gradcheck(&name, case.f, &case.inputs)?);
        }
        out.push(merge(&name, reports));
        idx += 1;
    }
    for (name, build) in composite_cases() {
        let mut reports = Vec::new();
        for s in 0..seeds {
            let case = build(&mut seed_rng(s, idx))?;
            reports.push(gradcheck(&name, case.f, &case.inputs)?);
        }
        out.push(merge(&name, reports));
        idx += 1;
    }
    Ok(out)
}
