//! Reverse-mode gradients against central differences of independent f64
//! reference implementations, at five random points per primitive.
//!
//! Shared by the `gradients` and `acceptance` test targets.

use learngene::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const POINTS: u64 = 5;
pub const TOLERANCE: f64 = 1e-3;
const LN_EPS: f64 = 1e-6;

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> learngene::Result<Var> + 'a;
type Reference<'a> = dyn Fn(&[Vec<f64>]) -> Vec<f64> + 'a;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
}

/// Relative error `||a - n|| / max(||n||, 1e-6)` per input, maximized over inputs.
fn gradient_error(inputs: &[Tensor], build: &Build<'_>, reference: &Reference<'_>, rng: &mut ChaCha8Rng) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars).expect("forward");
    let out_shape = tape.value(out).shape().to_vec();
    let weights = randn(&out_shape, rng);
    let wv = tape.constant(weights.clone());
    let weighted = tape.mul(out, wv).expect("mul");
    let loss = tape.sum(weighted).expect("sum");
    let grads = tape.backward(loss).expect("backward");

    let point: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let reference_out = reference(&point);
    let tape_out = tape.value(out).data();
    assert_eq!(reference_out.len(), tape_out.len(), "reference output size");
    for (r, t) in reference_out.iter().zip(tape_out) {
        assert!((r - *t as f64).abs() <= 1e-4 * (1.0 + r.abs()), "forward mismatch {r} vs {t}");
    }
    let w: Vec<f64> = weights.data().iter().map(|&v| v as f64).collect();
    let objective = |p: &[Vec<f64>]| reference(p).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();

    let mut worst = 0.0f64;
    for (j, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient");
        let mut diff = 0.0;
        let mut norm = 0.0;
        for e in 0..point[j].len() {
            let h = 1e-6 * point[j][e].abs().max(1.0);
            let mut plus = point.clone();
            plus[j][e] += h;
            let mut minus = point.clone();
            minus[j][e] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            diff += (analytic.data()[e] as f64 - numeric).powi(2);
            norm += numeric * numeric;
        }
        worst = worst.max(diff.sqrt() / norm.sqrt().max(1e-6));
    }
    worst
}

/// Worst relative error over [`POINTS`] random inputs.
fn check(name: &str, shapes: &[&[usize]], build: &Build<'_>, reference: &Reference<'_>) -> f64 {
    check_with(name, shapes, |_, t| t, build, reference)
}

/// Like [`check`], with a hook that adjusts the sampled inputs.
fn check_with(
    name: &str,
    shapes: &[&[usize]],
    adjust: impl Fn(usize, Tensor) -> Tensor,
    build: &Build<'_>,
    reference: &Reference<'_>,
) -> f64 {
    (0..POINTS)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
            let inputs: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| adjust(i, randn(s, &mut rng))).collect();
            gradient_error(&inputs, build, reference, &mut rng)
        })
        .fold(0.0, f64::max)
}

// f64 references, row-major.

fn mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a[i * k + t] * b[t * m + j]).sum();
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    x.chunks(cols)
        .flat_map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = g.len();
    x.chunks(d)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.iter().enumerate().map(move |(j, v)| (v - mean) * r * g[j] + b[j]).collect::<Vec<_>>()
        })
        .collect()
}


pub type Case = (&'static str, fn() -> f64);

/// Every differentiable tape operation plus the adapter expression, clean and noisy.
pub const CASES: &[Case] = &[
    ("matmul", matmul),
    ("add_bias", add_bias),
    ("linear", linear),
    ("add", add),
    ("mul", mul),
    ("scale", scale),
    ("gelu", gelu_op),
    ("softplus", softplus_op),
    ("softmax", softmax),
    ("layer_norm", layer_norm_op),
    ("slice_cols", slice_cols),
    ("gather_rows", gather_rows),
    ("to_heads", to_heads),
    ("from_heads", from_heads),
    ("batch_matmul", batch_matmul),
    ("batch_matmul_t", batch_matmul_t),
    ("mean_tokens", mean_tokens),
    ("sum", sum),
    ("mean", mean),
    ("cross_entropy", cross_entropy),
    ("route_merge", route_merge),
    ("dad_clean", dad_clean),
    ("dad_noisy", dad_noisy),
];

fn matmul() -> f64 {
    check("matmul", &[&[3, 4], &[4, 5]], &|t, v| t.matmul(v[0], v[1]), &|p| mm(&p[0], &p[1], 3, 4, 5))
}

fn add_bias() -> f64 {
    check("add_bias", &[&[4, 3], &[3]], &|t, v| t.add_bias(v[0], v[1]), &|p| {
        p[0].chunks(3).flat_map(|r| r.iter().zip(&p[1]).map(|(a, b)| a + b).collect::<Vec<_>>()).collect()
    })
}

fn linear() -> f64 {
    check(
        "linear",
        &[&[2, 3], &[3, 4], &[4]],
        &|t, v| t.linear(v[0], v[1], v[2]),
        &|p| {
            let y = mm(&p[0], &p[1], 2, 3, 4);
            y.chunks(4).flat_map(|r| r.iter().zip(&p[2]).map(|(a, b)| a + b).collect::<Vec<_>>()).collect()
        },
    )
}

fn add() -> f64 {
    check("add", &[&[3, 3], &[3, 3]], &|t, v| t.add(v[0], v[1]), &|p| {
        p[0].iter().zip(&p[1]).map(|(a, b)| a + b).collect()
    })
}

fn mul() -> f64 {
    check("mul", &[&[3, 3], &[3, 3]], &|t, v| t.mul(v[0], v[1]), &|p| {
        p[0].iter().zip(&p[1]).map(|(a, b)| a * b).collect()
    })
}

fn scale() -> f64 {
    check("scale", &[&[2, 5]], &|t, v| t.scale(v[0], -1.7), &|p| {
        p[0].iter().map(|a| a * -1.7f32 as f64).collect()
    })
}

fn gelu_op() -> f64 {
    check("gelu", &[&[4, 4]], &|t, v| t.gelu(v[0]), &|p| p[0].iter().map(|&x| gelu(x)).collect())
}

fn softplus_op() -> f64 {
    check_with(
        "softplus",
        &[&[4, 4]],
        |_, x| x.map(|v| 3.0 * v),
        &|t, v| t.softplus(v[0]),
        &|p| p[0].iter().map(|&x| softplus(x)).collect(),
    )
}

fn softmax() -> f64 {
    check("softmax", &[&[3, 5]], &|t, v| t.softmax(v[0]), &|p| softmax_rows(&p[0], 5))
}

fn layer_norm_op() -> f64 {
    check(
        "layer_norm",
        &[&[3, 6], &[6], &[6]],
        &|t, v| t.layer_norm(v[0], v[1], v[2], LN_EPS),
        &|p| layer_norm(&p[0], &p[1], &p[2]),
    )
}

fn slice_cols() -> f64 {
    check("slice_cols", &[&[3, 6]], &|t, v| t.slice_cols(v[0], 2, 3), &|p| {
        p[0].chunks(6).flat_map(|r| r[2..5].to_vec()).collect()
    })
}

fn gather_rows() -> f64 {
    check("gather_rows", &[&[4, 3]], &|t, v| t.gather_rows(v[0], &[2, 0, 2, 3]), &|p| {
        [2, 0, 2, 3].iter().flat_map(|&r| p[0][r * 3..r * 3 + 3].to_vec()).collect()
    })
}

/// `[B*T, H*dh]` to `[B*H, T, dh]` with B=2, T=3, H=2, dh=2.
fn heads_layout(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..2 {
        for t in 0..3 {
            for h in 0..2 {
                for i in 0..2 {
                    out[((b * 2 + h) * 3 + t) * 2 + i] = x[(b * 3 + t) * 4 + h * 2 + i];
                }
            }
        }
    }
    out
}

fn to_heads() -> f64 {
    check("to_heads", &[&[6, 4]], &|t, v| t.to_heads(v[0], 3, 2), &|p| heads_layout(&p[0]))
}

fn from_heads() -> f64 {
    check("from_heads", &[&[4, 3, 2]], &|t, v| t.from_heads(v[0], 2), &|p| {
        let mut out = vec![0.0; 24];
        let reordered = heads_layout(&(0..24).map(|i| i as f64).collect::<Vec<_>>());
        for (dst, src) in reordered.iter().enumerate() {
            out[*src as usize] = p[0][dst];
        }
        out
    })
}

fn batch_matmul() -> f64 {
    check("batch_matmul", &[&[2, 3, 4], &[2, 4, 2]], &|t, v| t.batch_matmul(v[0], v[1], false), &|p| {
        (0..2).flat_map(|g| mm(&p[0][g * 12..(g + 1) * 12], &p[1][g * 8..(g + 1) * 8], 3, 4, 2)).collect()
    })
}

fn batch_matmul_t() -> f64 {
    check("batch_matmul_t", &[&[2, 3, 4], &[2, 5, 4]], &|t, v| t.batch_matmul(v[0], v[1], true), &|p| {
        (0..2)
            .flat_map(|g| {
                let a = &p[0][g * 12..(g + 1) * 12];
                let b = &p[1][g * 20..(g + 1) * 20];
                let mut out = vec![0.0; 15];
                for i in 0..3 {
                    for j in 0..5 {
                        out[i * 5 + j] = (0..4).map(|k| a[i * 4 + k] * b[j * 4 + k]).sum();
                    }
                }
                out
            })
            .collect()
    })
}

fn mean_tokens() -> f64 {
    check("mean_tokens", &[&[6, 3]], &|t, v| t.mean_tokens(v[0], 3), &|p| {
        (0..2)
            .flat_map(|b| (0..3).map(move |j| (0..3).map(|t| p[0][(b * 3 + t) * 3 + j]).sum::<f64>() / 3.0).collect::<Vec<_>>())
            .collect()
    })
}

fn sum() -> f64 {
    check("sum", &[&[3, 4]], &|t, v| t.sum(v[0]), &|p| vec![p[0].iter().sum()])
}

fn mean() -> f64 {
    check("mean", &[&[3, 4]], &|t, v| t.mean(v[0]), &|p| vec![p[0].iter().sum::<f64>() / 12.0])
}

fn cross_entropy() -> f64 {
    let labels = [2usize, 0, 4];
    check("cross_entropy", &[&[3, 5]], &|t, v| t.cross_entropy(v[0], &labels), &|p| {
        let probs = softmax_rows(&p[0], 5);
        vec![labels.iter().enumerate().map(|(i, &y)| -probs[i * 5 + y].ln()).sum::<f64>() / 3.0]
    })
}

fn route_merge() -> f64 {
    // 3 samples of 2 tokens, width 2; samples 0 and 2 go to block 1.
    let assignment = [1u8, 0, 1];
    (0..POINTS)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let probs = learngene::softmax_rows(&randn(&[3, 2], &mut rng));
            let inputs = vec![probs.clone(), randn(&[2, 2], &mut rng), randn(&[4, 2], &mut rng)];
            let alternates = [randn(&[4, 2], &mut rng), randn(&[2, 2], &mut rng)];
            let (a0, a1) = (alternates[0].clone(), alternates[1].clone());
            let build = move |t: &mut Tape, v: &[Var]| {
                t.route_merge(v[0], [Some(v[1]), Some(v[2])], [Some(a0.clone()), Some(a1.clone())], &assignment, 2)
            };
            // Value: the routed rows. Slope in the probabilities: that of
            // `sum_k p[s,k] * block_k(x_s)`, written as a first-order term around
            // the sampled probabilities so it vanishes at the point itself.
            let p0: Vec<f64> = probs.data().iter().map(|&v| v as f64).collect();
            let alt: Vec<Vec<f64>> = alternates.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
            let reference = move |p: &[Vec<f64>]| -> Vec<f64> {
                let parts = [&p[1], &p[2]];
                let mut cursor = [0usize; 2];
                let mut out = Vec::new();
                for (s, &k) in assignment.iter().enumerate() {
                    let k = k as usize;
                    let o = 1 - k;
                    let own = &parts[k][cursor[k] * 4..cursor[k] * 4 + 4];
                    let other = &alt[o][cursor[k] * 4..cursor[k] * 4 + 4];
                    cursor[k] += 1;
                    let (dk, dother) = (p[0][s * 2 + k] - p0[s * 2 + k], p[0][s * 2 + o] - p0[s * 2 + o]);
                    out.extend((0..4).map(|i| own[i] + dk * own[i] + dother * other[i]));
                }
                out
            };
            gradient_error(&inputs, &build, &reference, &mut rng)
        })
        .fold(0.0, f64::max)
}

/// `softmax(x W1 + softplus(x W2) * eps)`, with `eps = 1` when clean.
fn dad_expression(noisy: bool) -> f64 {
    let eps: Vec<f64> = if noisy {
        vec![0.3, -1.2, 0.8, 0.1, -0.5, 1.7, -0.9, 0.4]
    } else {
        vec![1.0; 8]
    };
    let eps_tensor = Tensor::new(vec![4, 2], eps.iter().map(|&v| v as f32).collect()).unwrap();
    check(
        if noisy { "dad_noisy" } else { "dad_clean" },
        &[&[4, 6], &[6, 2], &[6, 2]],
        &move |t, v| {
            let clean = t.matmul(v[0], v[1])?;
            let gate = t.matmul(v[0], v[2])?;
            let mut smooth = t.softplus(gate)?;
            if noisy {
                let e = t.constant(eps_tensor.clone());
                smooth = t.mul(smooth, e)?;
            }
            let logits = t.add(clean, smooth)?;
            t.softmax(logits)
        },
        &move |p| {
            let clean = mm(&p[0], &p[1], 4, 6, 2);
            let gate = mm(&p[0], &p[2], 4, 6, 2);
            let logits: Vec<f64> = (0..8).map(|i| clean[i] + softplus(gate[i]) * eps[i]).collect();
            softmax_rows(&logits, 2)
        },
    )
}

fn dad_clean() -> f64 {
    dad_expression(false)
}

fn dad_noisy() -> f64 {
    dad_expression(true)
}

/// Largest gap between the library adapter's probabilities and the checked expression.
pub fn dad_weights_forward_gap() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dad = learngene::DadWeights::from_tensors(randn(&[6, 2], &mut rng), randn(&[6, 2], &mut rng)).unwrap();
    let x = randn(&[4, 6], &mut rng);
    let probs = learngene::route_probabilities::<ChaCha8Rng>(&dad, &x, false, None).unwrap();
    let xd: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let w1: Vec<f64> = dad.w1.value().data().iter().map(|&v| v as f64).collect();
    let w2: Vec<f64> = dad.w2.value().data().iter().map(|&v| v as f64).collect();
    let clean = mm(&xd, &w1, 4, 6, 2);
    let gate = mm(&xd, &w2, 4, 6, 2);
    let logits: Vec<f64> = (0..8).map(|i| clean[i] + softplus(gate[i])).collect();
    softmax_rows(&logits, 2).iter().zip(probs.data()).map(|(a, b)| (a - *b as f64).abs()).fold(0.0, f64::max)
}
