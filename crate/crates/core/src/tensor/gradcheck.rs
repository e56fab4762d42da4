//! Central finite-difference gradient checking.

use super::graph::{Graph, NodeId};
use super::Tensor;
use crate::error::Result;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_DELTA: f32 = 1e-3;
pub const DEFAULT_TOL: f32 = 5e-3;

/// Relative error uses `max(|analytic|, |numeric|, FLOOR)` as denominator so
/// near-zero gradients are judged on an absolute scale.
const DENOM_FLOOR: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_err: f64,
    /// Flat index of the worst element plus its analytic/numeric values.
    pub worst: Option<(usize, f64, f64)>,
    pub elements_checked: usize,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (self.passed, self.worst) {
            (true, _) => write!(
                f,
                "pass (max rel err {:.3e} over {} elements)",
                self.max_rel_err, self.elements_checked
            ),
            (false, Some((i, a, n))) => write!(
                f,
                "FAIL at flat index {i}: analytic {a:.6e} vs numeric {n:.6e} (rel err {:.3e})",
                self.max_rel_err
            ),
            (false, None) => write!(f, "FAIL (no gradient)"),
        }
    }
}

/// Checks analytic gradients of `f` at `x` against central differences on
/// every element. `f` builds the computation on a fresh graph and returns a
/// scalar output node.
pub fn gradcheck<F>(f: F, x: &Tensor, delta: f32, tol: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    gradcheck_elements(f, x, delta, tol, &all)
}

/// Like [`gradcheck`] but limits the finite-difference sweep to a random
/// subset of `max_elements` (seeded); large composite networks would
/// otherwise need thousands of forward passes.
pub fn gradcheck_sampled<F>(
    f: F,
    x: &Tensor,
    delta: f32,
    tol: f32,
    max_elements: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if x.numel() <= max_elements {
        return gradcheck(f, x, delta, tol);
    }
    let mut idx: Vec<usize> = (0..x.numel()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(max_elements);
    idx.sort_unstable();
    gradcheck_elements(f, x, delta, tol, &idx)
}

fn gradcheck_elements<F>(
    f: F,
    x: &Tensor,
    delta: f32,
    tol: f32,
    elements: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    // Analytic pass.
    let mut g = Graph::new();
    let xid = g.leaf(x.clone(), true);
    let out = f(&mut g, xid)?;
    g.backward(out)?;
    let analytic: Vec<f32> = g.grad(xid).map(|s| s.to_vec()).unwrap_or_default();

    let eval = |data: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xid = g.leaf(data.clone(), false);
        let out = f(&mut g, xid)?;
        Ok(g.scalar_value(out))
    };

    let mut probe = x.clone();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    for &i in elements {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + delta;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - delta;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * delta as f64);
        let a = analytic.get(i).copied().unwrap_or(0.0) as f64;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
        if rel > max_rel {
            max_rel = rel;
            worst = Some((i, a, numeric));
        }
    }
    Ok(GradCheckReport {
        passed: max_rel <= tol as f64,
        max_rel_err: max_rel,
        worst,
        elements_checked: elements.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tensor(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen::<f32>() * (hi - lo) + lo)
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn sum_of_squares_passes() {
        let x = random_tensor(&[12], 1, -1.0, 1.0);
        let report = gradcheck(
            |g, x| {
                let y = g.mul(x, x)?;
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_DELTA,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(report.passed, "{report}");
    }

    #[test]
    fn wrong_backward_rule_fails_with_location() {
        // detach() drops half the gradient: analytic 1, numeric 2.
        let x = random_tensor(&[6], 2, 0.5, 1.5);
        let report = gradcheck(
            |g, x| {
                let d = g.detach(x);
                let y = g.add(x, d)?;
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_DELTA,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(!report.passed);
        let (_, a, n) = report.worst.expect("worst location reported");
        assert!((a - 1.0).abs() < 1e-3 && (n - 2.0).abs() < 1e-3, "a={a} n={n}");
    }

    #[test]
    fn sampled_check_covers_subset() {
        let x = random_tensor(&[100], 3, -1.0, 1.0);
        let report = gradcheck_sampled(
            |g, x| {
                let y = g.mul(x, x)?;
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_DELTA,
            DEFAULT_TOL,
            16,
            9,
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.elements_checked, 16);
    }

    /// Every differentiable primitive, checked on random inputs away from
    /// relu/lrelu kinks (|x| > 10 * delta). Ops whose output couples every
    /// element through batch statistics use a larger step: the perturbation
    /// re-rounds the whole channel in f32, which drowns a 1e-3 step.
    #[test]
    fn all_primitives_pass_gradcheck() {
        type Builder = Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId>>;
        let shape = [4usize, 3, 5, 5];
        const STATS_DELTA: f32 = 1e-2;
        let cases: Vec<(&str, f32, Builder)> = vec![
            ("relu", DEFAULT_DELTA, Box::new(|g: &mut Graph, x| { let y = g.relu(x); Ok(g.sum_all(y)) })),
            ("lrelu", DEFAULT_DELTA, Box::new(|g: &mut Graph, x| { let y = g.lrelu(x, 0.1)?; Ok(g.sum_all(y)) })),
            ("sigmoid", DEFAULT_DELTA, Box::new(|g: &mut Graph, x| { let y = g.sigmoid(x); let y2 = g.mul(y, y)?; Ok(g.sum_all(y2)) })),
            ("abs", DEFAULT_DELTA, Box::new(|g: &mut Graph, x| { let y = g.abs(x); Ok(g.sum_all(y)) })),
            ("avgpool2", DEFAULT_DELTA, Box::new(|g: &mut Graph, x| { let y = g.avgpool2(x)?; let y2 = g.mul(y, y)?; Ok(g.sum_all(y2)) })),
            ("upsample2", DEFAULT_DELTA, Box::new(|g: &mut Graph, x| { let y = g.upsample2(x)?; let y2 = g.mul(y, y)?; Ok(g.sum_all(y2)) })),
            ("gap", DEFAULT_DELTA, Box::new(|g: &mut Graph, x| { let y = g.global_avg_pool(x)?; let y2 = g.mul(y, y)?; Ok(g.sum_all(y2)) })),
            // Normalization ops use a random-weighted linear loss: powers of
            // the normalized output amplify f32 forward noise past what
            // central differences can resolve.
            ("instance_norm", STATS_DELTA, Box::new(|g: &mut Graph, x| {
                let y = g.instance_norm(x, 1e-5)?;
                let w = g.constant(random_tensor(&[4, 3, 5, 5], 114, -1.0, 1.0));
                let wy = g.mul(y, w)?;
                Ok(g.sum_all(wy))
            })),
            ("box_mean", DEFAULT_DELTA, Box::new(|g: &mut Graph, x| { let y = g.box_mean(x, 2)?; let y2 = g.mul(y, y)?; Ok(g.sum_all(y2)) })),
            ("pad_crop", DEFAULT_DELTA, Box::new(|g: &mut Graph, x| { let p = g.pad_replicate(x, 3, 2)?; let p2 = g.mul(p, p)?; let c = g.crop(p2, 4, 4)?; Ok(g.sum_all(c)) })),
            ("mean_all", DEFAULT_DELTA, Box::new(|g: &mut Graph, x| { let y = g.mul(x, x)?; Ok(g.mean_all(y)) })),
            (
                "conv1x1",
                DEFAULT_DELTA,
                Box::new(|g: &mut Graph, x| {
                    let w = g.constant(random_tensor(&[2, 3], 100, -0.5, 0.5));
                    let b = g.constant(random_tensor(&[2], 101, -0.5, 0.5));
                    let y = g.conv1x1(x, w, b)?;
                    let y2 = g.mul(y, y)?;
                    Ok(g.sum_all(y2))
                }),
            ),
            (
                "conv3x3_s1",
                DEFAULT_DELTA,
                Box::new(|g: &mut Graph, x| {
                    let w = g.constant(random_tensor(&[2, 3, 3, 3], 102, -0.3, 0.3));
                    let b = g.constant(random_tensor(&[2], 103, -0.5, 0.5));
                    let y = g.conv3x3(x, w, b, 1)?;
                    let y2 = g.mul(y, y)?;
                    Ok(g.sum_all(y2))
                }),
            ),
            (
                "conv3x3_s2",
                DEFAULT_DELTA,
                Box::new(|g: &mut Graph, x| {
                    let w = g.constant(random_tensor(&[2, 3, 3, 3], 104, -0.3, 0.3));
                    let b = g.constant(random_tensor(&[2], 105, -0.5, 0.5));
                    let y = g.conv3x3(x, w, b, 2)?;
                    let y2 = g.mul(y, y)?;
                    Ok(g.sum_all(y2))
                }),
            ),
            (
                "batch_norm_train",
                STATS_DELTA,
                Box::new(|g: &mut Graph, x| {
                    let gamma = g.constant(random_tensor(&[3], 106, 0.5, 1.5));
                    let beta = g.constant(random_tensor(&[3], 107, -0.5, 0.5));
                    let (y, _, _) = g.batch_norm_train(x, gamma, beta, 1e-5)?;
                    let w = g.constant(random_tensor(&[4, 3, 5, 5], 115, -1.0, 1.0));
                    let wy = g.mul(y, w)?;
                    Ok(g.sum_all(wy))
                }),
            ),
            (
                "scale_channels",
                DEFAULT_DELTA,
                Box::new(|g: &mut Graph, x| {
                    let s = g.constant(random_tensor(&[3], 108, 0.5, 1.5));
                    let y = g.scale_channels(x, s)?;
                    let y2 = g.mul(y, y)?;
                    Ok(g.sum_all(y2))
                }),
            ),
            (
                "modulate_channels",
                DEFAULT_DELTA,
                Box::new(|g: &mut Graph, x| {
                    let s = g.constant(random_tensor(&[4, 3], 109, 0.5, 1.5));
                    let t = g.constant(random_tensor(&[4, 3], 110, -0.5, 0.5));
                    let y = g.modulate_channels(x, s, t)?;
                    let y2 = g.mul(y, y)?;
                    Ok(g.sum_all(y2))
                }),
            ),
            (
                "concat",
                DEFAULT_DELTA,
                Box::new(|g: &mut Graph, x| {
                    let other = g.constant(random_tensor(&[4, 2, 5, 5], 111, -1.0, 1.0));
                    let y = g.concat_channels(x, other)?;
                    let y2 = g.mul(y, y)?;
                    Ok(g.sum_all(y2))
                }),
            ),
            (
                "div",
                DEFAULT_DELTA,
                Box::new(|g: &mut Graph, x| {
                    let den = g.mul(x, x)?;
                    let den = g.add_scalar(den, 1.5);
                    let y = g.div(x, den)?;
                    Ok(g.sum_all(y))
                }),
            ),
            (
                "dropout_fixed_seed",
                DEFAULT_DELTA,
                Box::new(|g: &mut Graph, x| {
                    let y = g.dropout(x, 0.3, 42, true)?;
                    let y2 = g.mul(y, y)?;
                    Ok(g.sum_all(y2))
                }),
            ),
            (
                "linear",
                DEFAULT_DELTA,
                Box::new(|g: &mut Graph, x| {
                    let p = g.global_avg_pool(x)?; // [4,3]
                    let w = g.constant(random_tensor(&[2, 3], 112, -0.5, 0.5));
                    let b = g.constant(random_tensor(&[2], 113, -0.5, 0.5));
                    let y = g.linear(p, w, b)?;
                    let y2 = g.mul(y, y)?;
                    Ok(g.sum_all(y2))
                }),
            ),
        ];
        for seed in 0..3u64 {
            for (name, delta, builder) in &cases {
                // keep clear of activation kinks: |x| in [0.05, 1.0]
                let mut x = random_tensor(&shape, 7 + seed, -1.0, 1.0);
                for v in x.data_mut() {
                    if v.abs() < 0.05 {
                        *v += 0.1;
                    }
                }
                let report = gradcheck(builder, &x, *delta, DEFAULT_TOL).unwrap();
                assert!(report.passed, "{name} seed {seed}: {report}");
            }
        }
    }
}
