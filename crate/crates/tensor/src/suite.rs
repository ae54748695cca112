//! Finite-difference cases for every differentiable primitive, shared by
//! the tensor tests and downstream acceptance suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{grad_check, GradCheckReport, Graph, Result, Tensor, Var};

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `y` to a scalar with fixed random weights so that every output
/// element contributes a distinct amount to the gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone().reshaped(g.shape(y).to_vec())?);
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Build = dyn Fn(&mut Graph<f64>, Var, &[Tensor<f64>]) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    input: Vec<usize>,
    consts: Vec<Vec<usize>>,
    out_len: usize,
    positive: bool,
    build: Box<Build>,
}

fn case(
    name: &'static str,
    input: &[usize],
    consts: &[&[usize]],
    out_len: usize,
    build: impl Fn(&mut Graph<f64>, Var, &[Tensor<f64>]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        input: input.to_vec(),
        consts: consts.iter().map(|s| s.to_vec()).collect(),
        out_len,
        positive: false,
        build: Box::new(build),
    }
}

// stop_gradient and straight_through are deliberately absent: their
// backward is not the derivative of their forward.
pub fn op_cases() -> Vec<OpCase> {
    let mut v = vec![
        case("matmul_left", &[3, 4], &[&[4, 2]], 6, |g, x, c| {
            let b = g.constant(c[0].clone());
            g.matmul(x, b)
        }),
        case("matmul_right", &[4, 2], &[&[3, 4]], 6, |g, x, c| {
            let a = g.constant(c[0].clone());
            g.matmul(a, x)
        }),
        case("add", &[2, 3], &[&[2, 3]], 6, |g, x, c| {
            let b = g.constant(c[0].clone());
            g.add(x, b)
        }),
        case("sub", &[2, 3], &[&[2, 3]], 6, |g, x, c| {
            let b = g.constant(c[0].clone());
            g.sub(b, x)
        }),
        case("mul_self", &[5], &[], 5, |g, x, _| g.mul(x, x)),
        case("add_row_x", &[3, 2], &[&[2]], 6, |g, x, c| {
            let b = g.constant(c[0].clone());
            g.add_row(x, b)
        }),
        case("add_row_bias", &[2], &[&[3, 2]], 6, |g, x, c| {
            let m = g.constant(c[0].clone());
            g.add_row(m, x)
        }),
        case("scale", &[4], &[], 4, |g, x, _| g.scale(x, -2.5)),
        case("add_scalar", &[4], &[], 4, |g, x, _| g.add_scalar(x, 0.7)),
        case("relu", &[6], &[], 6, |g, x, _| g.relu(x)),
        case("exp", &[4], &[], 4, |g, x, _| g.exp(x)),
        case("softmax", &[2, 4], &[], 8, |g, x, _| g.softmax(x)),
        case("log_softmax", &[2, 4], &[], 8, |g, x, _| g.log_softmax(x)),
        case("sum", &[3, 2], &[], 1, |g, x, _| g.sum(x)),
        case("mean", &[3, 2], &[], 1, |g, x, _| g.mean(x)),
        case("sum_last", &[3, 2], &[], 3, |g, x, _| g.sum_last(x)),
        case("concat_rows", &[2, 3], &[&[1, 3]], 15, |g, x, c| {
            let b = g.constant(c[0].clone());
            g.concat(&[x, b, x], 0)
        }),
        case("concat_cols", &[2, 3], &[&[2, 1]], 8, |g, x, c| {
            let b = g.constant(c[0].clone());
            g.concat(&[b, x], 1)
        }),
        case("slice_rows", &[4, 2], &[], 4, |g, x, _| g.slice(x, 0, 1, 2)),
        case("slice_cols", &[3, 4], &[], 6, |g, x, _| g.slice(x, 1, 2, 2)),
        case("gather_rows", &[3, 2], &[], 10, |g, x, _| g.gather_rows(x, &[2, 0, 2, 1, 2])),
        case("segment_mean", &[5, 3], &[], 6, |g, x, _| g.segment_mean(x, &[0, 0, 1, 1, 1], 2)),
        case("l2_normalize", &[3, 4], &[], 12, |g, x, _| g.l2_normalize(x)),
        case("cosine_left", &[2, 5], &[&[2, 5]], 2, |g, x, c| {
            let b = g.constant(c[0].clone());
            g.cosine_similarity(x, b)
        }),
        case("cosine_self_pair", &[2, 3], &[], 1, |g, x, _| {
            let a = g.slice(x, 0, 0, 1)?;
            let b = g.slice(x, 0, 1, 1)?;
            g.cosine_similarity(a, b)
        }),
        case("dot_last", &[3, 4], &[&[3, 4]], 3, |g, x, c| {
            let b = g.constant(c[0].clone());
            g.dot_last(b, x)
        }),
        case("transpose", &[2, 3], &[], 6, |g, x, _| g.transpose(x)),
        case("reshape", &[2, 3], &[], 6, |g, x, _| g.reshape(x, vec![3, 2])),
        case("conv1d_x", &[5, 2], &[&[6, 3], &[3]], 15, |g, x, c| {
            let w = g.constant(c[0].clone());
            let b = g.constant(c[1].clone());
            g.conv1d(x, w, b, Some(&[0, 0, 0, 1, 1]))
        }),
        case("conv1d_w", &[6, 3], &[&[5, 2], &[3]], 15, |g, w, c| {
            let x = g.constant(c[0].clone());
            let b = g.constant(c[1].clone());
            g.conv1d(x, w, b, None)
        }),
        case("conv1d_b", &[3], &[&[5, 2], &[6, 3]], 15, |g, b, c| {
            let x = g.constant(c[0].clone());
            let w = g.constant(c[1].clone());
            g.conv1d(x, w, b, None)
        }),
        case("max_last", &[3, 4], &[], 3, |g, x, _| g.max_last(x)),
        case("layer_norm", &[2, 5], &[], 10, |g, x, _| g.layer_norm(x, 1e-5)),
    ];
    let mut log = case("log", &[4], &[], 4, |g, x, _| g.log(x));
    log.positive = true;
    v.push(log);
    v
}

impl OpCase {
    /// Checks the case at a random point drawn from `seed`. The output is
    /// reduced with fixed random weights.
    pub fn check(&self, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut point = random(&mut rng, self.input.clone());
        if self.positive {
            point.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.1);
        }
        let consts: Vec<_> = self.consts.iter().map(|s| random(&mut rng, s.clone())).collect();
        let weights = random(&mut rng, vec![self.out_len]);
        grad_check(
            |g, x| {
                let y = (self.build)(g, x, &consts)?;
                weighted_sum(g, y, &weights)
            },
            &point,
            h,
            tol,
        )
    }
}
