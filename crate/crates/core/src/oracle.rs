//! Independent reference computations used by the test suites and by
//! `selfcheck`: central finite differences for every differentiable op,
//! and naive brute-force versions of the feature, split and F1 routines.
//!
//! Nothing here calls into the code paths it is meant to verify.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::nn::{Graph, Mode, Tensor, Var};
use crate::rng::{Rng, StreamKey};

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares reverse-mode gradients of a scalar-valued `build` against
/// central finite differences w.r.t. every element of every input.
///
/// `build` is called repeatedly on fresh graphs and must be deterministic
/// (stochastic ops re-seed their generator on each call).
pub fn gradient_check<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone(), false)).collect();
        let l = build(&mut g, &vars)?;
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    Ok(worst)
}

fn random_tensor(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| { let e: f64 = StandardNormal.sample(rng); scale * e }).collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).expect("shape from product")
}

fn one_hot(classes: usize, pixels: usize, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(&[classes, pixels]);
    for i in 0..pixels {
        let c = rng.random_range(0..classes);
        t.data_mut()[c * pixels + i] = 1.0;
    }
    t
}

/// Reduces a tensor to a scalar through a fixed random projection so every
/// output element contributes to the checked gradient.
fn project(g: &mut Graph<'_>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let r = random_tensor(&shape, &mut StreamKey::new(seed).named("proj").rng(), 1.0);
    let r = g.constant(r);
    let m = g.mul(y, r)?;
    g.sum(m)
}

/// One named case of the gradient suite.
pub struct GradCase {
    pub name: &'static str,
    pub max_rel_error: f64,
}

/// Finite-difference check of every layer kind and both losses on random
/// tensors with at most 4×4 spatial extent, for one seed.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let key = StreamKey::new(seed).named("gradient-suite");
    let mut rng = key.rng();
    let mut out = Vec::new();
    let mut case = |name: &'static str, err: f64| out.push(GradCase { name, max_rel_error: err });

    let x = random_tensor(&[2, 4, 4], &mut rng, 1.0);
    let w = random_tensor(&[3, 2, 3, 3], &mut rng, 0.5);
    let b = random_tensor(&[3], &mut rng, 0.5);
    case(
        "conv2d_3x3",
        gradient_check(&[x.clone(), w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]))?;
            project(g, y, seed)
        })?,
    );
    let w1 = random_tensor(&[2, 2, 1, 1], &mut rng, 0.5);
    let b1 = random_tensor(&[2], &mut rng, 0.5);
    case(
        "conv2d_1x1",
        gradient_check(&[x.clone(), w1, b1], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]))?;
            project(g, y, seed)
        })?,
    );
    case(
        "maxpool2d_2x2",
        gradient_check(&[x.clone()], |g, v| {
            let y = g.max_pool(v[0], 2, 2)?;
            project(g, y, seed)
        })?,
    );
    case(
        "maxpool2d_3x3",
        gradient_check(&[x.clone()], |g, v| {
            let y = g.max_pool(v[0], 3, 3)?;
            project(g, y, seed)
        })?,
    );
    let wd = random_tensor(&[5, 32], &mut rng, 0.3);
    let bd = random_tensor(&[5], &mut rng, 0.3);
    case(
        "dense",
        gradient_check(&[x.clone(), wd, bd], |g, v| {
            let y = g.dense(v[0], v[1], Some(v[2]))?;
            project(g, y, seed)
        })?,
    );
    case(
        "relu",
        gradient_check(&[x.clone()], |g, v| {
            let y = g.relu(v[0])?;
            project(g, y, seed)
        })?,
    );
    case(
        "sigmoid",
        gradient_check(&[x.clone()], |g, v| {
            let y = g.sigmoid(v[0])?;
            project(g, y, seed)
        })?,
    );
    case(
        "softmax",
        gradient_check(&[x.clone()], |g, v| {
            let y = g.softmax(v[0])?;
            project(g, y, seed)
        })?,
    );
    case(
        "dropout",
        gradient_check(&[x.clone()], |g, v| {
            let mut r = key.named("dropout").rng();
            let y = g.dropout(v[0], 0.3, Mode::Train.stochastic(), &mut r)?;
            project(g, y, seed)
        })?,
    );
    case(
        "upsample_nearest",
        gradient_check(&[x.clone()], |g, v| {
            let y = g.upsample_nearest(v[0], 2)?;
            project(g, y, seed)
        })?,
    );
    let x2 = random_tensor(&[1, 4, 4], &mut rng, 1.0);
    case(
        "concat",
        gradient_check(&[x.clone(), x2], |g, v| {
            let y = g.concat(v[0], v[1])?;
            project(g, y, seed)
        })?,
    );
    let gate = random_tensor(&[2], &mut rng, 1.0);
    case(
        "channel_scale",
        gradient_check(&[x.clone(), gate], |g, v| {
            let y = g.channel_scale(v[0], v[1])?;
            project(g, y, seed)
        })?,
    );

    let z = random_tensor(&[2, 4, 4], &mut rng, 1.0);
    let labels = one_hot(2, 16, &mut rng).reshape(vec![2, 4, 4])?;
    case(
        "softmax_cross_entropy",
        gradient_check(&[z.clone()], |g, v| {
            let p = g.softmax(v[0])?;
            g.cross_entropy(p, &labels, None)
        })?,
    );
    case(
        "weighted_cross_entropy",
        gradient_check(&[z.clone()], |g, v| {
            let p = g.softmax(v[0])?;
            g.cross_entropy(p, &labels, Some(&[1.0, 3.0]))
        })?,
    );
    let s = random_tensor(&[1, 4, 4], &mut rng, 1.0);
    case(
        "aleatoric_loss",
        gradient_check(&[z.clone(), s], |g, v| {
            let mut r = key.named("aleatoric").rng();
            g.aleatoric_loss(v[0], v[1], &labels, 8, &mut r, None)
        })?,
    );
    let pred = random_tensor(&[3], &mut rng, 1.0);
    case(
        "mse",
        gradient_check(&[pred], |g, v| g.mse(v[0], &[0.1, -0.2, 0.3]))?,
    );
    Ok(out)
}

/// Percentile by sorting and interpolating at rank `(p/100)(n-1)`.
pub fn naive_percentile(values: &[f64], p: f64) -> f64 {
    let mut s = values.to_vec();
    // insertion sort keeps the reference free of library sorting
    for i in 1..s.len() {
        let mut j = i;
        while j > 0 && s[j - 1] > s[j] {
            s.swap(j - 1, j);
            j -= 1;
        }
    }
    let rank = p / 100.0 * (s.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    s[lo] + (rank - lo as f64) * (s[hi] - s[lo])
}

/// Fraction of values `<= t` by counting.
pub fn naive_fraction_at_most(values: &[f64], t: f64) -> f64 {
    let mut count = 0usize;
    for &v in values {
        if v <= t {
            count += 1;
        }
    }
    count as f64 / values.len() as f64
}

/// (mean, population variance, skewness, kurtosis) by explicit loops.
pub fn naive_moments(values: &[f64]) -> [f64; 4] {
    let n = values.len() as f64;
    let mut mean = 0.0;
    for v in values {
        mean += v;
    }
    mean /= n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in values {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if m2 < 1e-24 {
        return [mean, m2, 0.0, 0.0];
    }
    [mean, m2, m3 / m2.powf(1.5), m4 / (m2 * m2)]
}

/// Exhaustive best split over all (feature, midpoint threshold) pairs, scored
/// by direct sum-of-squares reduction. Near-ties (relative 1e-9) resolve to
/// the lowest feature index, then lowest threshold.
pub fn brute_force_split(x: &[Vec<f64>], y: &[f64]) -> Option<(usize, f64)> {
    let sse = |rows: &[usize]| -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let m = rows.iter().map(|&r| y[r]).sum::<f64>() / rows.len() as f64;
        rows.iter().map(|&r| (y[r] - m) * (y[r] - m)).sum()
    };
    let all: Vec<usize> = (0..y.len()).collect();
    let parent = sse(&all);
    let n_features = x.first().map_or(0, Vec::len);
    let mut candidates = Vec::new();
    for f in 0..n_features {
        let mut vals: Vec<f64> = x.iter().map(|r| r[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let thr = (w[0] + w[1]) / 2.0;
            let (left, right): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&r| x[r][f] <= thr);
            let gain = parent - sse(&left) - sse(&right);
            candidates.push((f, thr, gain));
        }
    }
    let best = candidates.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() || best <= 1e-12 * parent.max(1e-300) || best <= 0.0 {
        return None;
    }
    candidates
        .into_iter()
        .find(|c| c.2 >= best - 1e-9 * best.abs().max(1e-12))
        .map(|(f, t, _)| (f, t))
}

/// F1 by explicit pixel counting.
pub fn naive_f1(truth: &[bool], predicted: &[bool]) -> f64 {
    let (mut tp, mut nt, mut np) = (0u64, 0u64, 0u64);
    for i in 0..truth.len() {
        if truth[i] {
            nt += 1;
        }
        if predicted[i] {
            np += 1;
        }
        if truth[i] && predicted[i] {
            tp += 1;
        }
    }
    if nt == 0 && np == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (nt + np) as f64
    }
}
