//! Finite-difference verification of the tape's analytic gradients.
//!
//! Each [`GradCase`] builds a small float64 problem: named parameter tensors
//! and a closure recording a scalar loss on a fresh tape. The checker
//! compares the backward pass against central differences with step
//! [`STEP`], coordinate by coordinate. Cases live in a [`GradRegistry`] so
//! the CLI and tests can run all of them or pick one by name.

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{self, ExtractorRegistry, LossParts, LossWeights};
use crate::net::{
    discriminator_forward, generator_forward, is_buffer, DiscriminatorConfig, GeneratorConfig,
    NamedVars,
};
use crate::nn::{INSTANCE_NORM_EPS, LEAKY_RELU_SLOPE, SIGMA_FLOOR};
use crate::tensor::{Tape, Tensor, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the worst relative error of a case.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so that gradients which are
/// zero up to rounding do not divide by zero.
pub const ABS_FLOOR: f64 = 1e-6;

type LossFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync>;

/// A float64 loss over named parameter tensors.
pub struct Problem {
    pub params: Vec<(String, Tensor<f64>)>,
    pub loss: LossFn,
}

impl Problem {
    fn evaluate(&self, values: &[Tensor<f64>]) -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = (self.loss)(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    }
}

pub trait GradCase: Send + Sync {
    fn name(&self) -> &str;

    fn problem(&self, rng: &mut ChaCha8Rng) -> Result<Problem>;

    /// Coordinates checked per parameter tensor; `None` checks all of them.
    fn samples_per_param(&self) -> Option<usize> {
        None
    }

    /// Hook applied to analytic gradients before comparison. Only the
    /// negative control uses it.
    fn tamper(&self, _grad: &mut Tensor<f64>) {}
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: String,
    pub elapsed: Duration,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Runs one case with its parameters drawn from `seed`.
pub fn check(case: &dyn GradCase, seed: u64) -> Result<CaseReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let problem = case.problem(&mut rng)?;
    let mut values: Vec<Tensor<f64>> = problem.params.iter().map(|(_, t)| t.clone()).collect();

    let (tape, vars, loss) = problem.evaluate(&values)?;
    let mut grads = tape.backward(loss)?;
    let mut coordinates = 0;
    let mut worst = (0.0, String::new());
    for (p, (name, _)) in problem.params.iter().enumerate() {
        let mut analytic = grads
            .take(vars[p])
            .unwrap_or_else(|| Tensor::zeros(values[p].shape()));
        case.tamper(&mut analytic);
        let n = values[p].numel();
        let indices = match case.samples_per_param() {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in indices {
            let orig = values[p].data()[i];
            values[p].data_mut()[i] = orig + STEP;
            let plus = loss_value(&problem, &values)?;
            values[p].data_mut()[i] = orig - STEP;
            let minus = loss_value(&problem, &values)?;
            values[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(analytic.data()[i], numeric);
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, format!("{name}[{i}]"));
            }
            coordinates += 1;
        }
    }
    Ok(CaseReport {
        name: case.name().to_string(),
        coordinates,
        max_rel_error: worst.0,
        worst: worst.1,
        elapsed: start.elapsed(),
    })
}

fn loss_value(problem: &Problem, values: &[Tensor<f64>]) -> Result<f64> {
    let (tape, _, loss) = problem.evaluate(values)?;
    Ok(tape.value(loss).item())
}

/// Plain function-backed case.
struct FnCase {
    name: &'static str,
    samples: Option<usize>,
    build: fn(&mut ChaCha8Rng) -> Result<Problem>,
}

impl GradCase for FnCase {
    fn name(&self) -> &str {
        self.name
    }

    fn problem(&self, rng: &mut ChaCha8Rng) -> Result<Problem> {
        (self.build)(rng)
    }

    fn samples_per_param(&self) -> Option<usize> {
        self.samples
    }
}

/// Wraps a correct case and perturbs its analytic gradient by 1%, which
/// the checker must flag.
struct NegativeControl(FnCase);

impl GradCase for NegativeControl {
    fn name(&self) -> &str {
        "negative-control"
    }

    fn problem(&self, rng: &mut ChaCha8Rng) -> Result<Problem> {
        self.0.problem(rng)
    }

    fn tamper(&self, grad: &mut Tensor<f64>) {
        grad.data_mut().iter_mut().for_each(|g| *g *= 1.01);
    }
}

pub struct GradRegistry {
    cases: Vec<Box<dyn GradCase>>,
}

impl Default for GradRegistry {
    /// Every differentiable operation, each loss term, and the full networks.
    fn default() -> Self {
        let mut reg = Self { cases: Vec::new() };
        let table: [(
            &'static str,
            Option<usize>,
            fn(&mut ChaCha8Rng) -> Result<Problem>,
        ); 26] = [
            ("conv2d", None, case_conv2d),
            ("conv2d-strided", None, case_conv2d_strided),
            ("conv2d-transposed", None, case_conv2d_transposed),
            ("instance-norm", None, case_instance_norm),
            ("relu", None, case_relu),
            ("leaky-relu", None, case_leaky_relu),
            ("tanh", None, case_tanh),
            ("add", None, case_add),
            ("sub", None, case_sub),
            ("mul", None, case_mul),
            ("scale-shift", None, case_scale_shift),
            ("reduce-mean", None, case_mean),
            ("reduce-sum", None, case_sum),
            ("reduce-abs-mean", None, case_abs_mean),
            ("reduce-sq-mean", None, case_sq_mean),
            ("downsample-avg", None, case_downsample),
            ("reflect-pad", None, case_reflect_pad),
            ("spectral-scale", None, case_spectral_scale),
            ("loss-adversarial-d", None, case_adv_d),
            ("loss-adversarial-g", None, case_adv_g),
            ("loss-feature-matching", Some(40), case_fm),
            ("loss-pixel", None, case_pixel),
            ("loss-perceptual", Some(60), case_perceptual),
            ("loss-total", None, case_total),
            ("generator", Some(4), case_generator),
            ("discriminator", Some(4), case_discriminator),
        ];
        for (name, samples, build) in table {
            reg.register(Box::new(FnCase {
                name,
                samples,
                build,
            }));
        }
        reg
    }
}

impl GradRegistry {
    /// The default cases plus the deliberately broken negative control.
    pub fn with_negative_control() -> Self {
        let mut reg = Self::default();
        reg.register(Box::new(NegativeControl(FnCase {
            name: "conv2d",
            samples: None,
            build: case_conv2d,
        })));
        reg
    }

    pub fn register(&mut self, case: Box<dyn GradCase>) {
        self.cases.push(case);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.cases.iter().map(|c| c.name())
    }

    pub fn get(&self, name: &str) -> Option<&dyn GradCase> {
        self.cases
            .iter()
            .find(|c| c.name() == name)
            .map(|c| c.as_ref())
    }

    pub fn run(&self, name: &str, seed: u64) -> Result<CaseReport> {
        let case = self.get(name).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown gradient case {name:?}; known: {}",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        check(case, seed)
    }

    pub fn run_all(&self, seed: u64) -> Result<Vec<CaseReport>> {
        self.cases.iter().map(|c| check(c.as_ref(), seed)).collect()
    }
}

fn rand(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Uniform in `[-1, 1]` with `|x| >= margin`, keeping kinks out of reach of
/// the finite-difference step.
fn rand_off_kink(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    rand(rng, shape).map(|v| {
        if v.abs() < margin {
            v.signum() * margin + v
        } else {
            v
        }
    })
}

fn params(list: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    list.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// `sum(out * r)` for a fixed random cotangent `r`, exercising every output
/// element of a non-scalar op.
fn project(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv)?;
    Ok(tape.sum(prod))
}

/// Builds a problem whose loss is `unary(x)` projected on a random cotangent.
fn unary_problem(
    rng: &mut ChaCha8Rng,
    x: Tensor<f64>,
    out_shape: &[usize],
    op: fn(&mut Tape<f64>, Var) -> Result<Var>,
) -> Problem {
    let r = rand(rng, out_shape);
    Problem {
        params: params(vec![("x", x)]),
        loss: Box::new(move |tape, v| {
            let y = op(tape, v[0])?;
            project(tape, y, &r)
        }),
    }
}

fn case_conv2d(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let r = rand(rng, &[2, 3, 4, 4]);
    Ok(Problem {
        params: params(vec![
            ("x", rand(rng, &[2, 2, 4, 4])),
            ("w", rand(rng, &[3, 2, 3, 3])),
            ("b", rand(rng, &[3])),
        ]),
        loss: Box::new(move |tape, v| {
            let y = tape.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            project(tape, y, &r)
        }),
    })
}

fn case_conv2d_strided(rng: &mut ChaCha8Rng) -> Result<Problem> {
    Ok(Problem {
        params: params(vec![
            ("x", rand(rng, &[1, 2, 6, 6])),
            ("w", rand(rng, &[2, 2, 4, 4])),
        ]),
        loss: Box::new(|tape, v| {
            let y = tape.conv2d(v[0], v[1], None, 2, 1)?;
            Ok(tape.sq_mean(y))
        }),
    })
}

fn case_conv2d_transposed(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let r = rand(rng, &[1, 2, 6, 6]);
    Ok(Problem {
        params: params(vec![
            ("x", rand(rng, &[1, 3, 3, 3])),
            ("w", rand(rng, &[3, 2, 4, 4])),
            ("b", rand(rng, &[2])),
        ]),
        loss: Box::new(move |tape, v| {
            let y = tape.conv2d_transposed(v[0], v[1], Some(v[2]), 2, 1)?;
            project(tape, y, &r)
        }),
    })
}

fn case_instance_norm(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let r = rand(rng, &[2, 3, 3, 3]);
    Ok(Problem {
        params: params(vec![
            ("x", rand(rng, &[2, 3, 3, 3])),
            ("gamma", rand(rng, &[3])),
            ("beta", rand(rng, &[3])),
        ]),
        loss: Box::new(move |tape, v| {
            let y = tape.instance_norm(v[0], Some(v[1]), Some(v[2]), INSTANCE_NORM_EPS)?;
            project(tape, y, &r)
        }),
    })
}

fn case_relu(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let x = rand_off_kink(rng, &[2, 3, 3], 1e-3);
    Ok(unary_problem(rng, x, &[2, 3, 3], |t, x| Ok(t.relu(x))))
}

fn case_leaky_relu(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let x = rand_off_kink(rng, &[2, 3, 3], 1e-3);
    Ok(unary_problem(rng, x, &[2, 3, 3], |t, x| {
        Ok(t.leaky_relu(x, LEAKY_RELU_SLOPE))
    }))
}

fn case_tanh(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let x = rand(rng, &[2, 3, 3]).map(|v| 2.0 * v);
    Ok(unary_problem(rng, x, &[2, 3, 3], |t, x| Ok(t.tanh(x))))
}

fn binary_problem(
    rng: &mut ChaCha8Rng,
    op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
) -> Problem {
    let r = rand(rng, &[2, 2, 3]);
    Problem {
        params: params(vec![
            ("a", rand(rng, &[2, 2, 3])),
            ("b", rand(rng, &[2, 2, 3])),
            ("s", rand(rng, &[1])),
        ]),
        loss: Box::new(move |tape, v| {
            let ab = op(tape, v[0], v[1])?;
            // scalar broadcast on either side
            let sa = op(tape, ab, v[2])?;
            let y = op(tape, v[2], sa)?;
            project(tape, y, &r)
        }),
    }
}

fn case_add(rng: &mut ChaCha8Rng) -> Result<Problem> {
    Ok(binary_problem(rng, |t, a, b| t.add(a, b)))
}

fn case_sub(rng: &mut ChaCha8Rng) -> Result<Problem> {
    Ok(binary_problem(rng, |t, a, b| t.sub(a, b)))
}

fn case_mul(rng: &mut ChaCha8Rng) -> Result<Problem> {
    Ok(binary_problem(rng, |t, a, b| t.mul(a, b)))
}

fn case_scale_shift(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let x = rand(rng, &[3, 4]);
    Ok(unary_problem(rng, x, &[3, 4], |t, x| {
        let s = t.scale(x, -1.7);
        Ok(t.shift(s, 0.3))
    }))
}

fn reduce_problem(rng: &mut ChaCha8Rng, op: fn(&mut Tape<f64>, Var) -> Var) -> Problem {
    Problem {
        params: params(vec![("x", rand_off_kink(rng, &[2, 3, 4], 1e-3))]),
        loss: Box::new(move |tape, v| {
            // squared so that linear reductions still have a non-constant gradient
            let y = op(tape, v[0]);
            tape.mul(y, y)
        }),
    }
}

fn case_mean(rng: &mut ChaCha8Rng) -> Result<Problem> {
    Ok(reduce_problem(rng, |t, x| t.mean(x)))
}

fn case_sum(rng: &mut ChaCha8Rng) -> Result<Problem> {
    Ok(reduce_problem(rng, |t, x| t.sum(x)))
}

fn case_abs_mean(rng: &mut ChaCha8Rng) -> Result<Problem> {
    Ok(reduce_problem(rng, |t, x| t.abs_mean(x)))
}

fn case_sq_mean(rng: &mut ChaCha8Rng) -> Result<Problem> {
    Ok(reduce_problem(rng, |t, x| t.sq_mean(x)))
}

fn case_downsample(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let x = rand(rng, &[1, 2, 8, 8]);
    Ok(unary_problem(rng, x, &[1, 2, 2, 2], |t, x| {
        t.downsample_avg(x, 4)
    }))
}

fn case_reflect_pad(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let x = rand(rng, &[1, 2, 3, 4]);
    Ok(unary_problem(rng, x, &[1, 2, 5, 6], |t, x| {
        t.reflect_pad(x, 1)
    }))
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = rand(rng, &[n]).into_vec();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn case_spectral_scale(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let w = rand(rng, &[4, 3, 2, 2]);
    // estimates aligned with w so sigma stays well away from the floor
    let mut u = unit(rng, 4);
    let v = unit(rng, 12);
    let wv: Vec<f64> = (0..4)
        .map(|i| (0..12).map(|j| w.data()[i * 12 + j] * v[j]).sum())
        .collect();
    let norm = wv.iter().map(|x| x * x).sum::<f64>().sqrt();
    u.iter_mut().zip(&wv).for_each(|(u, x)| *u = x / norm);
    let r = rand(rng, &[4, 3, 2, 2]);
    Ok(Problem {
        params: params(vec![("w", w)]),
        loss: Box::new(move |tape, p| {
            let (y, _) = tape.spectral_scale(p[0], &u, &v, SIGMA_FLOOR)?;
            project(tape, y, &r)
        }),
    })
}

const MAP_SHAPES: [[usize; 4]; 3] = [[1, 1, 4, 4], [1, 1, 2, 2], [1, 1, 1, 1]];

fn case_adv_d(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let mut list = Vec::new();
    for (i, s) in MAP_SHAPES.iter().enumerate() {
        list.push((format!("real{i}"), rand(rng, s)));
        list.push((format!("fake{i}"), rand(rng, s)));
    }
    Ok(Problem {
        params: list,
        loss: Box::new(|tape, v| {
            let real: Vec<Var> = v.iter().step_by(2).copied().collect();
            let fake: Vec<Var> = v.iter().skip(1).step_by(2).copied().collect();
            losses::adversarial_loss_d(tape, &real, &fake)
        }),
    })
}

fn case_adv_g(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let list = MAP_SHAPES
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("fake{i}"), rand(rng, s)))
        .collect();
    Ok(Problem {
        params: list,
        loss: Box::new(losses::adversarial_loss_g),
    })
}

fn case_fm(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let mut list = Vec::new();
    for s in 0..3 {
        for l in 0..5 {
            let shape = [1, 2, 2, 2];
            list.push((format!("real.{s}.{l}"), rand_off_kink(rng, &shape, 1e-3)));
            list.push((format!("fake.{s}.{l}"), rand_off_kink(rng, &shape, 1e-3)));
        }
    }
    Ok(Problem {
        params: list,
        loss: Box::new(|tape, v| {
            let nest = |offset: usize| -> Vec<Vec<Var>> {
                (0..3)
                    .map(|s| (0..5).map(|l| v[2 * (s * 5 + l) + offset]).collect())
                    .collect()
            };
            losses::feature_matching_loss(tape, &nest(0), &nest(1))
        }),
    })
}

fn case_pixel(rng: &mut ChaCha8Rng) -> Result<Problem> {
    Ok(Problem {
        params: params(vec![
            ("fake", rand(rng, &[1, 3, 4, 4])),
            ("real", rand(rng, &[1, 3, 4, 4])),
        ]),
        loss: Box::new(|tape, v| losses::pixel_loss(tape, v[0], v[1])),
    })
}

fn case_perceptual(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let extractor = ExtractorRegistry::<f64>::default().build("random-pyramid")?;
    let coeffs = LossWeights::default().perceptual_coeffs;
    Ok(Problem {
        params: params(vec![
            ("fake", rand(rng, &[1, 3, 32, 32])),
            ("real", rand(rng, &[1, 3, 32, 32])),
        ]),
        loss: Box::new(move |tape, v| {
            losses::perceptual_loss(tape, v[0], v[1], extractor.as_ref(), &coeffs)
        }),
    })
}

fn case_total(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let w = LossWeights::default();
    Ok(Problem {
        params: params(vec![
            ("adversarial", rand(rng, &[1])),
            ("feature_matching", rand(rng, &[1])),
            ("pixel", rand(rng, &[1])),
            ("perceptual", rand(rng, &[1])),
        ]),
        loss: Box::new(move |tape, v| {
            let parts = LossParts {
                adversarial: v[0],
                feature_matching: v[1],
                pixel: v[2],
                perceptual: v[3],
            };
            let total = losses::total_generator_loss(tape, &parts, &w)?;
            tape.mul(total, total)
        }),
    })
}

/// Random non-identity affines so the norm parameters carry gradient.
fn perturb_affines(weights: &mut crate::checkpoint::ModelWeights<f64>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = weights
        .names()
        .filter(|n| n.ends_with(".gamma") || n.ends_with(".beta") || n.ends_with(".b"))
        .map(str::to_string)
        .collect();
    for n in names {
        let shape = weights
            .get(&n)
            .map(|t| t.shape().to_vec())
            .unwrap_or_default();
        weights.set(n, rand(rng, &shape).map(|v| 0.5 * v + 1.0));
    }
}

fn case_generator(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let cfg = GeneratorConfig {
        encoder_channels: [2, 3, 3, 4, 4],
        n_residual_blocks: 1,
    };
    let mut weights = cfg.init_weights::<f64>(rng.gen::<u64>())?;
    perturb_affines(&mut weights, rng);
    let mut list: Vec<(String, Tensor<f64>)> = weights
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    list.push(("input".into(), rand(rng, &[1, 3, 32, 32])));
    let names: Vec<String> = list.iter().map(|(n, _)| n.clone()).collect();
    let r = rand(rng, &[1, 3, 32, 32]);
    Ok(Problem {
        params: list,
        loss: Box::new(move |tape, v| {
            let mut vars = NamedVars::default();
            for (n, &var) in names.iter().zip(v) {
                vars.insert(n.clone(), var);
            }
            let out = generator_forward(tape, vars.get("input")?, &vars, &cfg)?;
            project(tape, out.image, &r)
        }),
    })
}

fn case_discriminator(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let cfg = DiscriminatorConfig {
        base_channels: 2,
        ..Default::default()
    };
    let mut weights = cfg.init_weights::<f64>(rng.gen::<u64>())?;
    cfg.power_iterate(&mut weights, 3)?;
    perturb_affines(&mut weights, rng);
    let buffers: Vec<(String, Tensor<f64>)> = weights
        .iter()
        .filter(|(n, _)| is_buffer(n))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let mut list: Vec<(String, Tensor<f64>)> = weights
        .iter()
        .filter(|(n, _)| !is_buffer(n))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    list.push(("input".into(), rand(rng, &[1, 3, 32, 32])));
    let names: Vec<String> = list.iter().map(|(n, _)| n.clone()).collect();
    let rs: Vec<Tensor<f64>> = cfg
        .patch_extents(32)
        .iter()
        .map(|&e| rand(rng, &[1, 1, e, e]))
        .collect();
    Ok(Problem {
        params: list,
        loss: Box::new(move |tape, v| {
            let mut vars = NamedVars::default();
            for (n, &var) in names.iter().zip(v) {
                vars.insert(n.clone(), var);
            }
            for (n, t) in &buffers {
                let c = tape.constant(t.clone());
                vars.insert(n.clone(), c);
            }
            let out = discriminator_forward(tape, vars.get("input")?, &vars, &cfg)?;
            let mut total = None;
            for (map, r) in out.patch_maps().into_iter().zip(&rs) {
                let p = project(tape, map, r)?;
                total = Some(match total {
                    None => p,
                    Some(t) => tape.add(t, p)?,
                });
            }
            total.ok_or_else(|| Error::InvalidArgument("discriminator produced no scales".into()))
        }),
    })
}
