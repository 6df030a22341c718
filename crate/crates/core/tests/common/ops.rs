//! Gradient-check cases for every graph op.

use mpum::tensor::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(-1.0..1.0);
        // keep clear of the relu kink so central differences stay valid
        if v.abs() < 1e-2 {
            v + 0.05
        } else {
            v
        }
    })
}

/// `sum(f(x) * w)` for a fixed random weighting `w`.
pub fn weighted<F>(f: F, weights: Tensor<f64>) -> impl Fn(&mut Graph<f64>, &[Var]) -> mpum::Result<Var>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> mpum::Result<Var>,
{
    move |g, v| {
        let y = f(g, v)?;
        let w = g.constant(weights.clone())?;
        let p = g.mul(y, w)?;
        g.sum(p)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum OpCase {
    Matmul,
    Conv,
    Conv1,
    Relu,
    Leaky,
    Sigmoid,
    Exp,
    Log,
    Scale,
    AddScalar,
    Add,
    Mul,
    Div,
    Bias,
    Concat,
    Upsample,
    Reshape,
    ChannelSum,
    LogSoftmax,
}

pub const ALL_OPS: [OpCase; 19] = [
    OpCase::Matmul,
    OpCase::Conv,
    OpCase::Conv1,
    OpCase::Relu,
    OpCase::Leaky,
    OpCase::Sigmoid,
    OpCase::Exp,
    OpCase::Log,
    OpCase::Scale,
    OpCase::AddScalar,
    OpCase::Add,
    OpCase::Mul,
    OpCase::Div,
    OpCase::Bias,
    OpCase::Concat,
    OpCase::Upsample,
    OpCase::Reshape,
    OpCase::ChannelSum,
    OpCase::LogSoftmax,
];

/// Runs grad_check for one op on shapes drawn from `seed`.
pub fn check_op(op: OpCase, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (b, c, d, h, w) = (dim(1, 2), dim(1, 3), dim(2, 4), dim(2, 4), dim(2, 4));
    let (m, k, n) = (dim(1, 4), dim(1, 4), dim(1, 4));
    let stride = dim(1, 2);
    let cout = dim(1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let vol = [b, c, d, h, w];
    let wsum = |shape: &[usize], rng: &mut ChaCha8Rng| random(shape, rng);
    let res = match op {
        OpCase::Matmul => {
            let wt = wsum(&[m, n], &mut rng);
            grad_check(weighted(|g, v| g.matmul(v[0], v[1]), wt), &[random(&[m, k], &mut rng), random(&[k, n], &mut rng)], GRAD_EPS)
        }
        OpCase::Conv => {
            let ext = |n: usize| (n + 2 - 3) / stride + 1;
            let wt = wsum(&[b, cout, ext(d), ext(h), ext(w)], &mut rng);
            let x = random(&vol, &mut rng);
            let kk = random(&[cout, c, 3, 3, 3], &mut rng);
            grad_check(weighted(move |g, v| g.conv3d(v[0], v[1], stride, 1), wt), &[x, kk], GRAD_EPS)
        }
        OpCase::Conv1 => {
            let wt = wsum(&[b, cout, d, h, w], &mut rng);
            grad_check(weighted(|g, v| g.conv1x1(v[0], v[1]), wt), &[random(&vol, &mut rng), random(&[cout, c], &mut rng)], GRAD_EPS)
        }
        OpCase::Relu | OpCase::Leaky | OpCase::Sigmoid | OpCase::Exp | OpCase::Scale | OpCase::AddScalar => {
            let kind = match op {
                OpCase::Relu => Pointwise::Relu,
                OpCase::Leaky => Pointwise::LeakyRelu,
                OpCase::Sigmoid => Pointwise::Sigmoid,
                OpCase::Exp => Pointwise::Exp,
                OpCase::Scale => Pointwise::Scale(-1.7),
                _ => Pointwise::AddScalar(0.3),
            };
            let wt = wsum(&vol, &mut rng);
            grad_check(weighted(move |g, v| g.map(v[0], kind), wt), &[random(&vol, &mut rng)], GRAD_EPS)
        }
        OpCase::Log => {
            let wt = wsum(&vol, &mut rng);
            let x = random(&vol, &mut rng).map(|v| v.abs() + 0.5);
            grad_check(weighted(|g, v| g.map(v[0], Pointwise::Log), wt), &[x], GRAD_EPS)
        }
        OpCase::Add | OpCase::Mul | OpCase::Div => {
            let wt = wsum(&vol, &mut rng);
            let x = random(&vol, &mut rng);
            let y = random(&vol, &mut rng);
            let y = if matches!(op, OpCase::Div) { y.map(|v| v.signum() * (v.abs() + 0.5)) } else { y };
            grad_check(
                weighted(
                    move |g, v| match op {
                        OpCase::Add => g.add(v[0], v[1]),
                        OpCase::Mul => g.mul(v[0], v[1]),
                        _ => g.div(v[0], v[1]),
                    },
                    wt,
                ),
                &[x, y],
                GRAD_EPS,
            )
        }
        OpCase::Bias => {
            let wt = wsum(&vol, &mut rng);
            grad_check(weighted(|g, v| g.add_bias(v[0], v[1], 1), wt), &[random(&vol, &mut rng), random(&[c], &mut rng)], GRAD_EPS)
        }
        OpCase::Concat => {
            let wt = wsum(&[b, c + cout, d, h, w], &mut rng);
            grad_check(weighted(|g, v| g.concat_channels(v[0], v[1]), wt), &[random(&vol, &mut rng), random(&[b, cout, d, h, w], &mut rng)], GRAD_EPS)
        }
        OpCase::Upsample => {
            let wt = wsum(&[b, c, 2 * d, 2 * h, 2 * w], &mut rng);
            grad_check(weighted(|g, v| g.upsample2x(v[0]), wt), &[random(&vol, &mut rng)], GRAD_EPS)
        }
        OpCase::Reshape => {
            let wt = wsum(&[b * c, d * h * w], &mut rng);
            grad_check(weighted(move |g, v| g.reshape(v[0], &[b * c, d * h * w]), wt), &[random(&vol, &mut rng)], GRAD_EPS)
        }
        OpCase::ChannelSum => {
            let wt = wsum(&[c], &mut rng);
            grad_check(weighted(|g, v| g.channel_sum(v[0]), wt), &[random(&vol, &mut rng)], GRAD_EPS)
        }
        OpCase::LogSoftmax => {
            let wt = wsum(&vol, &mut rng);
            grad_check(weighted(|g, v| g.log_softmax_channels(v[0]), wt), &[random(&vol, &mut rng)], GRAD_EPS)
        }
    };
    res.unwrap()
}
