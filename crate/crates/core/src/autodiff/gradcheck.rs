//! Central finite-difference checks of the tape's backward rules.
//!
//! Only forward evaluations feed the numerical estimate, so a check is
//! independent of the backward code it validates. Runs in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

use super::kernels::Padding;
use super::tape::{Tape, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub instances: usize,
    pub entries: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares `backward` against central differences for every entry of
/// every input. `build` maps input vars to a scalar loss.
pub fn check<F>(inputs: &[Tensor<f64>], build: F) -> Result<(usize, f64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss)[0])
    };

    let mut tape = Tape::new();
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| t.clone().with_requires_grad(true))
        .collect();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut probe = inputs.to_vec();
    for (i, &var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - STEP;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(a, numeric));
            entries += 1;
        }
    }
    Ok((entries, worst))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero by more than the finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Distinct values with gaps of at least 1e-3, so every pooling window
/// has a unique maximum well outside the step size.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(shape, |i| {
        order[i] as f64 * 0.01 + rng.random_range(0.0..0.005) - 0.5
    })
}

/// Reduces an arbitrary output to a scalar through a fixed random projection.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights =
        uniform(&mut rng, tape.shape(out), -1.0, 1.0).reshape(tape.shape(out).to_vec())?;
    let w = tape.leaf_owned(weights);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn run_case(
    name: &str,
    instances: usize,
    seed: u64,
    mut make: impl FnMut(&mut ChaCha8Rng, u64) -> Result<(usize, f64)>,
) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck {
        name: name.to_string(),
        instances,
        entries: 0,
        max_rel_error: 0.0,
    };
    for i in 0..instances {
        let (entries, err) = make(&mut rng, seed.wrapping_mul(31).wrapping_add(i as u64))?;
        report.entries += entries;
        report.max_rel_error = report.max_rel_error.max(err);
    }
    Ok(report)
}

/// Finite-difference checks for every layer type plus a composite
/// conv → relu → dense → cross-entropy graph.
pub fn check_all_layers(instances: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for (name, k, stride, padding) in [
        ("conv2d 3x3 same", 3, 1, Padding::Same),
        ("conv2d 3x3 valid", 3, 1, Padding::Valid),
        ("conv2d 3x3 stride2 same", 3, 2, Padding::Same),
        ("conv2d 1x1", 1, 1, Padding::Same),
    ] {
        out.push(run_case(name, instances, seed ^ 0x10, |rng, s| {
            let x = uniform(rng, &[2, 5, 4, 3], -1.0, 1.0);
            let w = uniform(rng, &[k, k, 3, 2], -1.0, 1.0);
            let b = uniform(rng, &[2], -1.0, 1.0);
            check(&[x, w, b], |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, padding)?;
                project(t, y, s)
            })
        })?);
    }
    out.push(run_case("dense", instances, seed ^ 0x20, |rng, s| {
        let x = uniform(rng, &[3, 4], -1.0, 1.0);
        let w = uniform(rng, &[4, 5], -1.0, 1.0);
        let b = uniform(rng, &[5], -1.0, 1.0);
        check(&[x, w, b], |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            project(t, y, s)
        })
    })?);
    out.push(run_case("relu", instances, seed ^ 0x30, |rng, s| {
        let x = away_from_zero(rng, &[2, 3, 3, 2]);
        check(&[x], |t, v| {
            let y = t.relu(v[0]);
            project(t, y, s)
        })
    })?);
    out.push(run_case("maxpool2", instances, seed ^ 0x40, |rng, s| {
        let x = distinct(rng, &[2, 4, 6, 2]);
        check(&[x], |t, v| {
            let y = t.maxpool2(v[0])?;
            project(t, y, s)
        })
    })?);
    out.push(run_case(
        "softmax_cross_entropy",
        instances,
        seed ^ 0x50,
        |rng, _| {
            let z = uniform(rng, &[4, 5], -3.0, 3.0);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            check(&[z], |t, v| t.softmax_cross_entropy(v[0], &labels))
        },
    )?);
    out.push(run_case(
        "sub_channel",
        instances,
        seed ^ 0x60,
        |rng, s| {
            let x = uniform(rng, &[2, 2, 2, 3], 0.0, 1.0);
            let means: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            check(&[x], |t, v| {
                let y = t.sub_channel(v[0], &means)?;
                project(t, y, s)
            })
        },
    )?);
    out.push(run_case("flatten", instances, seed ^ 0x70, |rng, s| {
        let x = uniform(rng, &[2, 2, 3, 2], -1.0, 1.0);
        check(&[x], |t, v| {
            let y = t.flatten(v[0])?;
            project(t, y, s)
        })
    })?);
    out.push(run_case("mul", instances, seed ^ 0x80, |rng, _| {
        let a = uniform(rng, &[6], -1.0, 1.0);
        let b = uniform(rng, &[6], -1.0, 1.0);
        check(&[a, b], |t, v| {
            let y = t.mul(v[0], v[1])?;
            Ok(t.sum(y))
        })
    })?);
    out.push(run_case(
        "conv-relu-dense-ce",
        instances,
        seed ^ 0x90,
        |rng, _| {
            let x = uniform(rng, &[2, 4, 4, 3], 0.0, 1.0);
            let w1 = uniform(rng, &[3, 3, 3, 4], -0.5, 0.5);
            let b1 = uniform(rng, &[4], 0.05, 0.2);
            let w2 = uniform(rng, &[64, 3], -0.5, 0.5);
            let b2 = uniform(rng, &[3], -0.5, 0.5);
            let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..3)).collect();
            check(&[x, w1, b1, w2, b2], |t, v| {
                let h = t.conv2d(v[0], v[1], v[2], 1, Padding::Same)?;
                let h = t.relu(h);
                let h = t.flatten(h)?;
                let z = t.dense(h, v[3], v[4])?;
                t.softmax_cross_entropy(z, &labels)
            })
        },
    )?);
    Ok(out)
}
