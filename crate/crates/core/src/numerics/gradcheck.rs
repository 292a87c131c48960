//! Central finite-difference gradient checking.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{KeySets, NumericsError, ParamStore, Tape, Tensor, Unary, Var};

type Result<T> = std::result::Result<T, NumericsError>;

/// Settings for a gradient check. Each evaluation runs on a fresh tape with
/// the same mode and seed, so dropout masks repeat between the analytic and
/// numeric passes.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub epsilon: f64,
    pub train: bool,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            train: false,
            seed: 0,
        }
    }
}

impl GradCheck {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn train(mut self, seed: u64) -> Self {
        self.train = true;
        self.seed = seed;
        self
    }

    /// Max relative error over every coordinate of `inputs`.
    pub fn inputs<F>(&self, inputs: &[Tensor], f: F) -> Result<f64>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let store = ParamStore::new();
        self.run(&store, inputs, false, |t, _, v| f(t, v))
    }

    /// Max relative error over every coordinate of `inputs` and every trainable
    /// parameter in `store`.
    pub fn with_params<F>(&self, store: &ParamStore, inputs: &[Tensor], f: F) -> Result<f64>
    where
        F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
    {
        self.run(store, inputs, true, f)
    }

    fn run<F>(&self, store: &ParamStore, inputs: &[Tensor], params: bool, f: F) -> Result<f64>
    where
        F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
    {
        if !(1e-7..=1e-3).contains(&self.epsilon) {
            return Err(NumericsError::Invalid(format!(
                "gradient check epsilon {} outside [1e-7, 1e-3]",
                self.epsilon
            )));
        }
        if let Some(bad) = inputs.iter().position(|t| !t.is_finite()) {
            return Err(NumericsError::Invalid(format!("input {bad} is not finite")));
        }

        let mut tape = Tape::with_mode(self.train, self.seed);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, store, &vars)?;
        let loss = reduce(&mut tape, out)?;
        if let Some(op) = tape.first_non_finite() {
            return Err(NumericsError::NonFinite(op));
        }
        tape.backward(loss)?;
        let analytic_inputs: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| {
                tape.grad(*v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.len()])
            })
            .collect();
        let analytic_params = tape.param_grads();

        let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::with_mode(self.train, self.seed);
            let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
            let out = f(&mut tape, store, &vars)?;
            let loss = reduce(&mut tape, out)?;
            if let Some(op) = tape.first_non_finite() {
                return Err(NumericsError::NonFinite(op));
            }
            Ok(tape.value(loss).item())
        };

        let eps = self.epsilon;
        let mut worst: f64 = 0.0;
        let mut probe = inputs.to_vec();
        for (ti, analytic) in analytic_inputs.iter().enumerate() {
            for ci in 0..probe[ti].len() {
                let orig = probe[ti].data()[ci];
                probe[ti].data_mut()[ci] = orig + eps;
                let plus = eval(store, &probe)?;
                probe[ti].data_mut()[ci] = orig - eps;
                let minus = eval(store, &probe)?;
                probe[ti].data_mut()[ci] = orig;
                worst = worst.max(rel_err(analytic[ci], (plus - minus) / (2.0 * eps)));
            }
        }

        if params {
            let mut perturbed = store.clone();
            let ids: Vec<_> = store
                .iter()
                .filter(|(_, p)| p.trainable())
                .map(|(id, _)| id)
                .collect();
            for id in ids {
                let zeros;
                let analytic = match analytic_params.get(id) {
                    Some(g) => g,
                    None => {
                        zeros = vec![0.0; store.value(id).len()];
                        &zeros
                    }
                };
                for ci in 0..store.value(id).len() {
                    let orig = store.value(id).data()[ci];
                    perturbed.get_mut(id).value.data_mut()[ci] = orig + eps;
                    let plus = eval(&perturbed, inputs)?;
                    perturbed.get_mut(id).value.data_mut()[ci] = orig - eps;
                    let minus = eval(&perturbed, inputs)?;
                    perturbed.get_mut(id).value.data_mut()[ci] = orig;
                    worst = worst.max(rel_err(analytic[ci], (plus - minus) / (2.0 * eps)));
                }
            }
        }
        Ok(worst)
    }
}

/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Non-scalar outputs are projected onto fixed pseudo-random weights so every
/// output coordinate contributes to the checked gradient.
fn reduce(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let w = Tensor::from_fn(&shape, |i| (0.37 * i as f64 + 0.11).sin() + 0.25);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Convenience wrapper with default settings.
pub fn grad_check<F>(inputs: &[Tensor], epsilon: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    GradCheck::new(epsilon).inputs(inputs, f)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

type Inputs = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
type Body = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn one(shape: &'static [usize]) -> Inputs {
    Box::new(move |rng| vec![rand_tensor(rng, shape)])
}

fn two(a: &'static [usize], b: &'static [usize]) -> Inputs {
    Box::new(move |rng| vec![rand_tensor(rng, a), rand_tensor(rng, b)])
}

fn three(a: &'static [usize], b: &'static [usize], c: &'static [usize]) -> Inputs {
    Box::new(move |rng| vec![rand_tensor(rng, a), rand_tensor(rng, b), rand_tensor(rng, c)])
}

fn primitive_cases() -> Vec<(String, Inputs, Body)> {
    let mut cases: Vec<(String, Inputs, Body)> = vec![
        ("matmul".into(), two(&[3, 4], &[4, 2]), Box::new(|t, v| t.matmul(v[0], v[1]))),
        (
            "linear".into(),
            three(&[4, 3], &[3, 5], &[5]),
            Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
        ),
        ("add".into(), two(&[3, 4], &[3, 4]), Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub".into(), two(&[3, 4], &[3, 4]), Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul".into(), two(&[3, 4], &[3, 4]), Box::new(|t, v| t.mul(v[0], v[1]))),
        (
            "div".into(),
            two(&[3, 4], &[3, 4]),
            Box::new(|t, v| {
                let d = t.exp(v[1]);
                t.div(v[0], d)
            }),
        ),
        ("add_row".into(), two(&[3, 4], &[4]), Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("mul_row".into(), two(&[3, 4], &[4]), Box::new(|t, v| t.mul_row(v[0], v[1]))),
        (
            "scale_rows".into(),
            one(&[3, 4]),
            Box::new(|t, v| t.scale_rows(v[0], vec![0.5, -1.0, 2.0])),
        ),
        ("scale".into(), one(&[3, 4]), Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        (
            "add_scalar".into(),
            one(&[3, 4]),
            Box::new(|t, v| {
                let y = t.add_scalar(v[0], 0.3);
                t.mul(y, y)
            }),
        ),
    ];
    for f in [
        Unary::Relu,
        Unary::Gelu,
        Unary::Sigmoid,
        Unary::Softplus,
        Unary::Tanh,
        Unary::Exp,
        Unary::Abs,
    ] {
        cases.push((format!("{f:?}").to_lowercase(), one(&[3, 4]), Box::new(move |t, v| Ok(t.unary(v[0], f)))));
    }
    let more: Vec<(String, Inputs, Body)> = vec![
        (
            "smooth_l1".into(),
            one(&[3, 4]),
            Box::new(|t, v| {
                let y = t.scale(v[0], 1.5);
                Ok(t.smooth_l1(y))
            }),
        ),
        (
            "ln".into(),
            one(&[3, 4]),
            Box::new(|t, v| {
                let p = t.exp(v[0]);
                Ok(t.ln(p))
            }),
        ),
        (
            "concat_cols".into(),
            two(&[3, 2], &[3, 4]),
            Box::new(|t, v| {
                let c = t.concat_cols(&[v[0], v[1], v[0]])?;
                t.mul(c, c)
            }),
        ),
        (
            "concat_rows".into(),
            two(&[2, 3], &[4, 3]),
            Box::new(|t, v| {
                let c = t.concat_rows(&[v[0], v[1]])?;
                t.mul(c, c)
            }),
        ),
        (
            "slice_cols".into(),
            one(&[3, 5]),
            Box::new(|t, v| {
                let s = t.slice_cols(v[0], 1, 3)?;
                t.mul(s, s)
            }),
        ),
        (
            "gather_rows".into(),
            one(&[4, 3]),
            Box::new(|t, v| {
                let g = t.gather_rows(v[0], vec![3, 0, 3, 1])?;
                t.mul(g, g)
            }),
        ),
        (
            "reshape".into(),
            one(&[4, 3]),
            Box::new(|t, v| {
                let r = t.reshape(v[0], &[2, 6])?;
                t.mul(r, r)
            }),
        ),
        ("softmax".into(), one(&[3, 5]), Box::new(|t, v| Ok(t.softmax(v[0])))),
        ("log_softmax".into(), one(&[3, 5]), Box::new(|t, v| Ok(t.log_softmax(v[0])))),
        (
            "sum".into(),
            one(&[3, 5]),
            Box::new(|t, v| {
                let y = t.mul(v[0], v[0])?;
                Ok(t.sum(y))
            }),
        ),
        (
            "mean".into(),
            one(&[3, 5]),
            Box::new(|t, v| {
                let y = t.mul(v[0], v[0])?;
                Ok(t.mean(y))
            }),
        ),
        (
            "layer_norm".into(),
            three(&[6, 4], &[4], &[4]),
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
        ),
        (
            "batch_norm_train".into(),
            three(&[6, 4], &[4], &[4]),
            Box::new(|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 3)?.0)),
        ),
        (
            "batch_norm_eval".into(),
            three(&[6, 4], &[4], &[4]),
            Box::new(|t, v| t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3, 0.0], &[0.5, 1.0, 2.0, 0.8])),
        ),
        (
            "causal_conv1d".into(),
            two(&[8, 3], &[3, 3, 2]),
            Box::new(|t, v| t.causal_conv1d(v[0], v[1], 4)),
        ),
    ];
    cases.extend(more);
    let keys = Arc::new(KeySets::from_lists(&[vec![0, 1, 2], vec![4], vec![], vec![0, 2, 3, 4, 1]]));
    cases.push((
        "attention".into(),
        three(&[4, 6], &[5, 6], &[5, 4]),
        Box::new(move |t, v| t.attention(v[0], v[1], v[2], 2, keys.clone())),
    ));
    cases
}

/// Worst relative error of every differentiable primitive over `points`
/// seeded random inputs. Dropout is checked in training mode with a fixed
/// mask per point.
pub fn primitive_suite(points: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    let check = GradCheck::default();
    let mut out = Vec::new();
    for (name, make, body) in primitive_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let inputs = make(&mut rng);
            worst = worst.max(check.inputs(&inputs, &body)?);
        }
        out.push((name, worst));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for point in 0..points {
        let x = rand_tensor(&mut rng, &[4, 4]);
        let err = GradCheck::default().train(seed ^ point as u64).inputs(&[x], |t, v| {
            let d = t.dropout(v[0], 0.3)?;
            t.mul(d, d)
        })?;
        worst = worst.max(err);
    }
    out.push(("dropout".into(), worst));
    Ok(out)
}
