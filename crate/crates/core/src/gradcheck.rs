//! Central-difference gradient checking in double precision.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorLabel, MatchResult};
use crate::autograd::{Tape, Var};
use crate::error::TensorError;
use crate::loss::{multibox_on_tape, MultiboxConfig};
use crate::ops::EltwiseMode;
use crate::tensor::Tensor;

/// Compares the tape's analytic gradient of a scalar function against central
/// differences `(f(x+ε) − f(x−ε)) / 2ε` for every element of every input, and
/// returns the worst relative error `|a − n| / max(|a|, |n|, 1e-8)`.
///
/// `f` receives a fresh tape plus one trainable leaf per input and must return
/// a scalar.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    assert!((1e-6..=1e-4).contains(&eps), "grad_check eps {eps} outside [1e-6, 1e-4]");
    let eval = |values: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Largest relative error a check may report.
pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub op: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// A random permutation of evenly spaced values, so no two pool candidates
/// are within ε of each other.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape, vals).expect("sized above")
}

type Case = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>;

/// Projects `out` onto fixed random weights so every output element matters.
fn project(t: &mut Tape<f64>, out: Var, w: &Tensor<f64>) -> Result<Var, TensorError> {
    t.weighted_sum(out, w.clone())
}

fn random_matches(rng: &mut ChaCha8Rng, anchors: usize, classes: usize) -> MatchResult {
    let labels: Vec<AnchorLabel> = (0..anchors)
        .map(|a| if a % 4 == 0 { AnchorLabel::Object { class: rng.gen_range(0..classes), gt: 0 } } else { AnchorLabel::Background })
        .collect();
    let loc_targets = labels
        .iter()
        .map(|l| if l.is_positive() { std::array::from_fn(|_| rng.gen_range(-2.0..2.0)) } else { [0.0; 4] })
        .collect();
    MatchResult { labels, loc_targets }
}

/// Builds one check: the function under test and its inputs.
fn case(op: &str, rng: &mut ChaCha8Rng) -> (Case, Vec<Tensor<f64>>) {
    match op {
        "conv2d" => {
            let w = uniform(rng, &[2, 4, 3, 3], -1.0, 1.0);
            let inputs = vec![uniform(rng, &[2, 3, 5, 5], -1.0, 1.0), uniform(rng, &[4, 3, 3, 3], -1.0, 1.0), uniform(rng, &[4], -1.0, 1.0)];
            (Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                project(t, y, &w)
            }), inputs)
        }
        "deconv2d" => {
            let w = uniform(rng, &[2, 2, 5, 5], -1.0, 1.0);
            let inputs = vec![uniform(rng, &[2, 3, 3, 3], -1.0, 1.0), uniform(rng, &[3, 2, 3, 3], -1.0, 1.0)];
            (Box::new(move |t, v| {
                let y = t.deconv2d(v[0], v[1], 2, 1)?;
                project(t, y, &w)
            }), inputs)
        }
        "batch_norm" => {
            let w = uniform(rng, &[4, 3, 2, 2], -1.0, 1.0);
            let inputs = vec![uniform(rng, &[4, 3, 2, 2], -2.0, 2.0), uniform(rng, &[3], 0.5, 1.5), uniform(rng, &[3], -1.0, 1.0)];
            (Box::new(move |t, v| {
                let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                project(t, y, &w)
            }), inputs)
        }
        "relu" => {
            let w = uniform(rng, &[2, 3, 4, 4], -1.0, 1.0);
            let inputs = vec![off_zero(rng, &[2, 3, 4, 4])];
            (Box::new(move |t, v| {
                let y = t.relu(v[0]);
                project(t, y, &w)
            }), inputs)
        }
        "max_pool2d" => {
            let w = uniform(rng, &[1, 2, 3, 3], -1.0, 1.0);
            let inputs = vec![distinct(rng, &[1, 2, 5, 5])];
            (Box::new(move |t, v| {
                let y = t.max_pool2d(v[0], 3, 2, 1)?;
                project(t, y, &w)
            }), inputs)
        }
        "concat_channels" => {
            let w = uniform(rng, &[2, 5, 3, 3], -1.0, 1.0);
            let inputs = vec![uniform(rng, &[2, 2, 3, 3], -1.0, 1.0), uniform(rng, &[2, 3, 3, 3], -1.0, 1.0)];
            (Box::new(move |t, v| {
                let y = t.concat_channels(&[v[0], v[1]])?;
                project(t, y, &w)
            }), inputs)
        }
        "eltwise_sum" | "eltwise_prod" => {
            let mode = if op == "eltwise_sum" { EltwiseMode::Sum } else { EltwiseMode::Prod };
            let w = uniform(rng, &[2, 3, 3, 3], -1.0, 1.0);
            let inputs = vec![uniform(rng, &[2, 3, 3, 3], -1.0, 1.0), uniform(rng, &[2, 3, 3, 3], -1.0, 1.0)];
            (Box::new(move |t, v| {
                let y = t.eltwise(v[0], v[1], mode)?;
                project(t, y, &w)
            }), inputs)
        }
        "flatten_head" => {
            let w = uniform(rng, &[2, 8, 3], -1.0, 1.0);
            let inputs = vec![uniform(rng, &[2, 6, 2, 2], -1.0, 1.0)];
            (Box::new(move |t, v| {
                let y = t.flatten_head(v[0], 3)?;
                project(t, y, &w)
            }), inputs)
        }
        "concat_rows" => {
            let w = uniform(rng, &[2, 7, 3], -1.0, 1.0);
            let inputs = vec![uniform(rng, &[2, 3, 3], -1.0, 1.0), uniform(rng, &[2, 4, 3], -1.0, 1.0)];
            (Box::new(move |t, v| {
                let y = t.concat_rows(&[v[0], v[1]])?;
                project(t, y, &w)
            }), inputs)
        }
        "softmax_ce" => {
            let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..4)).collect();
            let inputs = vec![uniform(rng, &[6, 4], -3.0, 3.0)];
            (Box::new(move |t, v| t.softmax_ce(v[0], &labels)), inputs)
        }
        "smooth_l1" => {
            let target = uniform(rng, &[5, 4], -2.0, 2.0);
            // Differences in both branches, clear of the |x| = 1 seam.
            let pred = Tensor::from_fn(&[5, 4], |i| {
                let m = if i % 2 == 0 { rng.gen_range(0.05..0.9) } else { rng.gen_range(1.1..3.0) };
                target.data()[i] + if rng.gen_bool(0.5) { m } else { -m }
            });
            (Box::new(move |t, v| t.smooth_l1(v[0], &target)), vec![pred])
        }
        "multibox" => {
            let (anchors, classes) = (12, 3);
            let matches = random_matches(rng, anchors, classes);
            let inputs = vec![uniform(rng, &[1, anchors, classes + 1], -2.0, 2.0), uniform(rng, &[1, anchors, 4], -2.0, 2.0)];
            (Box::new(move |t, v| multibox_on_tape(t, v[0], v[1], std::slice::from_ref(&matches), &MultiboxConfig::default()).map(|r| r.0)), inputs)
        }
        other => panic!("no gradient check for `{other}`"),
    }
}

/// Operations covered by [`op_suite`].
pub const SUITE_OPS: [&str; 14] = [
    "conv2d",
    "deconv2d",
    "batch_norm",
    "relu",
    "max_pool2d",
    "concat_channels",
    "eltwise_sum",
    "eltwise_prod",
    "flatten_head",
    "concat_rows",
    "softmax_ce",
    "smooth_l1",
    "multibox",
    "network",
];

/// A small conv → bn → relu → pool → deconv → merge chain with a head-style
/// flatten, checked end to end.
fn network_case(rng: &mut ChaCha8Rng) -> (Case, Vec<Tensor<f64>>) {
    let w = uniform(rng, &[2, 4, 2], -1.0, 1.0);
    let inputs = vec![
        uniform(rng, &[2, 2, 4, 4], -1.0, 1.0),
        uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
        uniform(rng, &[3], 0.5, 1.5),
        uniform(rng, &[3], -0.5, 0.5),
        uniform(rng, &[3, 3, 2, 2], -1.0, 1.0),
        uniform(rng, &[2, 3, 3, 3], -1.0, 1.0),
    ];
    (
        Box::new(move |t, v| {
            let c = t.conv2d(v[0], v[1], None, 1, 1)?;
            let (n, _, _) = t.batch_norm_train(c, v[2], v[3], 1e-5)?;
            let r = t.relu(n);
            let p = t.max_pool2d(r, 2, 2, 0)?;
            let up = t.deconv2d(p, v[4], 2, 0)?;
            let m = t.eltwise(up, r, EltwiseMode::Sum)?;
            let h = t.conv2d(m, v[5], None, 2, 1)?;
            let f = t.flatten_head(h, 2)?;
            project(t, f, &w)
        }),
        inputs,
    )
}

/// Checks every op in [`SUITE_OPS`] once per seed.
pub fn op_suite(seeds: &[u64]) -> Result<Vec<CheckRow>, TensorError> {
    SUITE_OPS
        .iter()
        .map(|&op| {
            let mut worst = 0.0f64;
            for &seed in seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (f, inputs) = if op == "network" { network_case(&mut rng) } else { case(op, &mut rng) };
                worst = worst.max(grad_check(f, &inputs, EPS)?);
            }
            Ok(CheckRow { op: op.to_string(), seeds: seeds.len(), max_rel_error: worst, passed: worst <= TOLERANCE })
        })
        .collect()
}

/// Fixed-width table, one row per op.
pub fn format_table(rows: &[CheckRow]) -> String {
    let mut out = format!("{:<16} {:>5} {:>12}  result\n", "op", "seeds", "max_rel_err");
    for r in rows {
        out += &format!("{:<16} {:>5} {:>12.3e}  {}\n", r.op, r.seeds, r.max_rel_error, if r.passed { "PASS" } else { "FAIL" });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_is_exact_away_from_zero() {
        let x = Tensor::new(&[4], vec![-1.5, -0.3, 0.7, 2.0]).unwrap();
        let w = Tensor::new(&[4], vec![0.3, -1.1, 0.8, 1.7]).unwrap();
        let err = grad_check(
            |t, v| {
                let r = t.relu(v[0]);
                t.weighted_sum(r, w.clone())
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn reports_mismatch_at_relu_kink() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let r = t.relu(v[0]);
                Ok(t.sum(r))
            },
            &[x],
            1e-6,
        )
        .unwrap();
        // Central difference at the kink gives 0.5, analytic subgradient 0.
        assert!((err - 1.0).abs() < 1e-9, "{err}");
    }

    #[test]
    fn suite_passes_one_seed() {
        let rows = op_suite(&[0]).unwrap();
        assert_eq!(rows.len(), SUITE_OPS.len());
        for r in &rows {
            assert!(r.passed, "{r:?}");
        }
        assert!(format_table(&rows).contains("multibox"));
    }
}
