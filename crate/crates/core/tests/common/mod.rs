//! Helpers shared by the integration tests and the acceptance harness.

#![allow(dead_code)]

use owfs::config::RunConfig;
use owfs::tensor::{BnMode, Graph, Padding, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Where an op's input values are drawn from.
#[derive(Clone, Copy, Debug)]
pub enum Domain {
    /// Uniform in [-2, 2].
    Any,
    /// Uniform in [0.5, 2].
    Positive,
}

pub type OpFn = for<'g> fn(&'g Graph, &[Var<'g>]) -> owfs::Result<Var<'g>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Domain)>,
    pub f: OpFn,
}

fn case(name: &'static str, inputs: &[(&[usize], Domain)], f: OpFn) -> OpCase {
    OpCase {
        name,
        inputs: inputs.iter().map(|(s, d)| (s.to_vec(), *d)).collect(),
        f,
    }
}

const BN_MEAN: [f64; 3] = [0.1, -0.2, 0.3];
const BN_VAR: [f64; 3] = [0.5, 1.5, 2.0];

/// One case per differentiable operation.
pub fn op_cases() -> Vec<OpCase> {
    use Domain::{Any, Positive};
    let m23: &[usize] = &[2, 3];
    vec![
        case("add", &[(m23, Any), (m23, Any)], |_, x| x[0].add(x[1])),
        case("add_scalar_operand", &[(m23, Any), (&[1], Any)], |_, x| x[0].add(x[1])),
        case("sub", &[(m23, Any), (m23, Any)], |_, x| x[0].sub(x[1])),
        case("mul", &[(m23, Any), (m23, Any)], |_, x| x[0].mul(x[1])),
        case("div", &[(m23, Any), (m23, Positive)], |_, x| x[0].div(x[1])),
        case("add_const", &[(m23, Any)], |_, x| Ok(x[0].add_scalar(0.7))),
        case("mul_const", &[(m23, Any)], |_, x| Ok(x[0].mul_scalar(-1.3))),
        case("neg", &[(m23, Any)], |_, x| Ok(x[0].neg())),
        case("square", &[(m23, Any)], |_, x| Ok(x[0].square())),
        case("exp", &[(m23, Any)], |_, x| Ok(x[0].exp())),
        case("log", &[(m23, Positive)], |_, x| Ok(x[0].log())),
        case("sqrt", &[(m23, Positive)], |_, x| Ok(x[0].sqrt())),
        case("relu", &[(m23, Any)], |_, x| Ok(x[0].relu())),
        case("leaky_relu", &[(m23, Any)], |_, x| Ok(x[0].leaky_relu(0.01))),
        case("softplus", &[(m23, Any)], |_, x| Ok(x[0].softplus())),
        case("clamp_min", &[(m23, Any)], |_, x| Ok(x[0].clamp_min(0.3))),
        case("sum", &[(m23, Any)], |_, x| Ok(x[0].sum())),
        case("mean", &[(m23, Any)], |_, x| Ok(x[0].mean())),
        case("sum_rows", &[(&[4, 3], Any)], |_, x| x[0].sum_rows()),
        case("mean_rows", &[(&[4, 3], Any)], |_, x| x[0].mean_rows()),
        case("reshape", &[(m23, Any)], |_, x| x[0].reshape(&[3, 2])),
        case("narrow", &[(&[4, 3], Any)], |_, x| x[0].narrow(1, 2)),
        case("tile_rows", &[(&[3], Any)], |_, x| x[0].tile_rows(4)),
        case("matmul", &[(&[2, 4], Any), (&[4, 3], Any)], |_, x| x[0].matmul(x[1])),
        case("softmax", &[(&[5], Any)], |_, x| x[0].softmax()),
        case("log_softmax", &[(&[5], Any)], |_, x| x[0].log_softmax()),
        case("logsumexp", &[(&[5], Any)], |_, x| x[0].logsumexp()),
        case("concat", &[(m23, Any), (&[1, 3], Any)], |g, x| g.concat(&[x[0], x[1]])),
        case(
            "conv2d_same",
            &[(&[1, 1, 5, 5], Any), (&[2, 1, 3, 3], Any), (&[2], Any)],
            |g, x| g.conv2d(x[0], x[1], Some(x[2]), Padding::Same),
        ),
        case(
            "conv2d_valid",
            &[(&[2, 2, 4, 4], Any), (&[3, 2, 3, 3], Any)],
            |g, x| g.conv2d(x[0], x[1], None, Padding::Valid),
        ),
        case("max_pool2d", &[(&[2, 2, 5, 4], Any)], |g, x| g.max_pool2d(x[0])),
        case(
            "batch_norm_batch",
            &[(&[4, 3, 2, 2], Any), (&[3], Any), (&[3], Any)],
            |g, x| Ok(g.batch_norm(x[0], x[1], x[2], BnMode::Batch { eps: 1e-5 })?.0),
        ),
        case(
            "batch_norm_fixed",
            &[(&[4, 3, 2, 2], Any), (&[3], Any), (&[3], Any)],
            |g, x| {
                let mode = BnMode::Fixed {
                    mean: &BN_MEAN,
                    var: &BN_VAR,
                    eps: 1e-5,
                };
                Ok(g.batch_norm(x[0], x[1], x[2], mode)?.0)
            },
        ),
    ]
}

fn draw(rng: &mut ChaCha8Rng, shape: &[usize], domain: Domain) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| match domain {
            Domain::Any => rng.random_range(-2.0..2.0),
            Domain::Positive => rng.random_range(0.5..2.0),
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar loss `sum(w ⊙ f(inputs))` with fixed random weights `w`, so every
/// output element contributes a distinct amount.
fn loss_value(c: &OpCase, inputs: &[Tensor], weights: &mut Option<Tensor>, rng: &mut ChaCha8Rng) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (c.f)(&g, &vars).unwrap();
    let shape = out.shape();
    let w = weights.get_or_insert_with(|| draw(rng, &shape, Domain::Any));
    out.mul(g.constant(w.clone())).unwrap().sum().item()
}

/// Central finite difference check of one random instance. Returns the
/// worst `|analytic - numeric| / (1 + |numeric|)` over all input elements.
pub fn grad_check(c: &OpCase, seed: u64, h: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = c.inputs.iter().map(|(s, d)| draw(&mut rng, s, *d)).collect();
    let mut weights = None;
    loss_value(c, &inputs, &mut weights, &mut rng);

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (c.f)(&g, &vars).unwrap();
    let loss = out
        .mul(g.constant(weights.clone().unwrap()))
        .unwrap()
        .sum();
    g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = v.grad().unwrap();
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (loss_value(c, &plus, &mut weights, &mut rng)
                - loss_value(c, &minus, &mut weights, &mut rng))
                / (2.0 * h);
            let err = (analytic.data()[j] - numeric).abs() / (1.0 + numeric.abs());
            worst = worst.max(err);
        }
    }
    worst
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    draw(rng, &[rows, cols], Domain::Any)
}

/// A network small enough to train in about a second per thousand
/// episodes on one core, on separable synthetic blobs.
pub fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(
        "image_size = 16\n\
         blocks = 3\n\
         channels = 16\n\
         synth_classes = 100\n\
         lr = 0.003\n\
         episodes_per_epoch = 1000\n\
         epochs = 2\n\
         eval_episodes = 1000\n",
    )
    .unwrap();
    cfg
}

/// Far smaller again, for tests that only exercise plumbing.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(
        "image_size = 8\n\
         blocks = 2\n\
         channels = 4\n\
         synth_classes = 10\n\
         synth_per_class = 8\n\
         episodes_per_epoch = 20\n\
         epochs = 1\n\
         eval_episodes = 40\n",
    )
    .unwrap();
    cfg
}
