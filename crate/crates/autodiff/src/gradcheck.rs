//! Finite-difference oracle for the primitive set.
//!
//! Every case pairs a tape builder with a plain 64-bit reference forward
//! written independently of the kernels in this crate. The scalar probe is
//! `Σ wᵢ·outᵢ` for fixed random weights `w`, so one check covers the whole
//! vector-Jacobian product. Finite differences use the five-point central
//! stencil with `h = 1e-3`, evaluated on the reference forward in f64.

use std::sync::Arc;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::Real;

/// Outcome of one primitive check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    /// `‖analytic − numeric‖ / max(‖numeric‖, 1e-8)` over all inputs.
    pub rel_err: f64,
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
type Reference = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    domain: Domain,
    build: Builder,
    reference: Reference,
}

#[derive(Clone, Copy)]
enum Domain {
    /// Uniform in [-2, 2].
    Full,
    /// Uniform in [-2, 2] but at least 0.05 away from zero (kinks).
    AwayFromZero,
    /// Uniform in [0.2, 2].
    Positive,
    /// Magnitude in [0.5, 2], either sign.
    Denominator,
}

/// Small deterministic generator so the oracle has no dependencies.
struct SplitMix(u64);

impl SplitMix {
    fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64
    }

    fn sample(&mut self, d: Domain) -> f64 {
        let u = self.next_f64();
        match d {
            Domain::Full => 4.0 * u - 2.0,
            Domain::AwayFromZero => {
                let mag = 0.05 + 1.95 * u;
                if self.next_f64() < 0.5 {
                    -mag
                } else {
                    mag
                }
            }
            Domain::Positive => 0.2 + 1.8 * u,
            Domain::Denominator => {
                let mag = 0.5 + 1.5 * u;
                if self.next_f64() < 0.5 {
                    -mag
                } else {
                    mag
                }
            }
        }
    }
}

fn unary_case(
    name: &'static str,
    domain: Domain,
    op: fn(&mut Graph, Var) -> Result<Var>,
    f: fn(f64) -> f64,
) -> Case {
    Case {
        name,
        shapes: vec![vec![3, 5]],
        domain,
        build: Box::new(move |g, v| op(g, v[0])),
        reference: Box::new(move |x| x[0].iter().map(|v| f(*v)).collect()),
    }
}

fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

/// Direct-sum convolution, NCHW, zero padding.
#[allow(clippy::too_many_arguments)]
fn ref_conv(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    (b, c, h, wd): (usize, usize, usize, usize),
    (o, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[oc]);
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((bi * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w[((oc * c + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

fn cases() -> Vec<Case> {
    let mut v = vec![
        Case {
            name: "add",
            shapes: vec![vec![3, 4], vec![4]],
            domain: Domain::Full,
            build: Box::new(|g, v| g.add(v[0], v[1])),
            reference: Box::new(|x| (0..12).map(|i| x[0][i] + x[1][i % 4]).collect()),
        },
        Case {
            name: "subtract",
            shapes: vec![vec![3, 1], vec![3, 4]],
            domain: Domain::Full,
            build: Box::new(|g, v| g.sub(v[0], v[1])),
            reference: Box::new(|x| (0..12).map(|i| x[0][i / 4] - x[1][i]).collect()),
        },
        Case {
            name: "multiply",
            shapes: vec![vec![2, 3, 2], vec![3, 1]],
            domain: Domain::Full,
            build: Box::new(|g, v| g.mul(v[0], v[1])),
            reference: Box::new(|x| (0..12).map(|i| x[0][i] * x[1][(i / 2) % 3]).collect()),
        },
        Case {
            name: "divide",
            shapes: vec![vec![2, 3], vec![2, 3]],
            domain: Domain::Denominator,
            build: Box::new(|g, v| g.div(v[0], v[1])),
            reference: Box::new(|x| (0..6).map(|i| x[0][i] / x[1][i]).collect()),
        },
        Case {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 2]],
            domain: Domain::Full,
            build: Box::new(|g, v| g.matmul(v[0], v[1])),
            reference: Box::new(|x| ref_matmul(&x[0], &x[1], 3, 4, 2)),
        },
        Case {
            name: "linear",
            shapes: vec![vec![5, 3], vec![3, 4], vec![4]],
            domain: Domain::Full,
            build: Box::new(|g, v| g.linear(v[0], v[1], v[2])),
            reference: Box::new(|x| {
                let mut y = ref_matmul(&x[0], &x[1], 5, 3, 4);
                y.iter_mut().enumerate().for_each(|(i, v)| *v += x[2][i % 4]);
                y
            }),
        },
        Case {
            name: "conv2d",
            shapes: vec![vec![2, 2, 5, 6], vec![3, 2, 3, 3], vec![3]],
            domain: Domain::Full,
            build: Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
            reference: Box::new(|x| ref_conv(&x[0], &x[1], Some(&x[2]), (2, 2, 5, 6), (3, 3, 3), 2, 1)),
        },
        Case {
            name: "upsample+conv2d",
            shapes: vec![vec![1, 2, 3, 3], vec![1, 2, 3, 3]],
            domain: Domain::Full,
            build: Box::new(|g, v| {
                let u = g.upsample_nearest(v[0], 2)?;
                g.conv2d(u, v[1], None, 1, 1)
            }),
            reference: Box::new(|x| {
                let mut up = vec![0.0; 2 * 36];
                for c in 0..2 {
                    for y in 0..6 {
                        for xx in 0..6 {
                            up[(c * 6 + y) * 6 + xx] = x[0][(c * 3 + y / 2) * 3 + xx / 2];
                        }
                    }
                }
                ref_conv(&up, &x[1], None, (1, 2, 6, 6), (1, 3, 3), 1, 1)
            }),
        },
        Case {
            name: "reduce_sum",
            shapes: vec![vec![2, 2]],
            domain: Domain::Full,
            build: Box::new(|g, v| g.sum(v[0])),
            reference: Box::new(|x| vec![x[0].iter().sum()]),
        },
        Case {
            name: "reduce_mean",
            shapes: vec![vec![4]],
            domain: Domain::Full,
            build: Box::new(|g, v| g.mean(v[0])),
            reference: Box::new(|x| vec![x[0].iter().sum::<f64>() / 4.0]),
        },
        Case {
            name: "sum_axis",
            shapes: vec![vec![2, 3, 2]],
            domain: Domain::Full,
            build: Box::new(|g, v| g.sum_axis(v[0], 1)),
            reference: Box::new(|x| {
                (0..4)
                    .map(|o| (0..3).map(|l| x[0][(o / 2 * 3 + l) * 2 + o % 2]).sum())
                    .collect()
            }),
        },
        Case {
            name: "broadcast",
            shapes: vec![vec![3, 1]],
            domain: Domain::Full,
            build: Box::new(|g, v| g.broadcast_to(v[0], &[2, 3, 4])),
            reference: Box::new(|x| (0..24).map(|i| x[0][(i / 4) % 3]).collect()),
        },
        Case {
            name: "reshape",
            shapes: vec![vec![2, 3]],
            domain: Domain::Full,
            build: Box::new(|g, v| {
                let r = g.reshape(v[0], &[3, 2])?;
                g.square(r)
            }),
            reference: Box::new(|x| x[0].iter().map(|v| v * v).collect()),
        },
        Case {
            name: "concatenate",
            shapes: vec![vec![2, 2], vec![2, 3]],
            domain: Domain::Full,
            build: Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
            reference: Box::new(|x| {
                let mut out = Vec::new();
                for r in 0..2 {
                    out.extend_from_slice(&x[0][r * 2..r * 2 + 2]);
                    out.extend_from_slice(&x[1][r * 3..r * 3 + 3]);
                }
                out
            }),
        },
        Case {
            name: "slice",
            shapes: vec![vec![3, 5]],
            domain: Domain::Full,
            build: Box::new(|g, v| g.slice(v[0], 1, 1, 3)),
            reference: Box::new(|x| {
                (0..3).flat_map(|r| (1..4).map(move |c| (r, c))).map(|(r, c)| x[0][r * 5 + c]).collect()
            }),
        },
        Case {
            name: "gather",
            shapes: vec![vec![6]],
            domain: Domain::Full,
            build: Box::new(|g, v| g.gather(v[0], Arc::new(vec![5, 0, 0, 3, 2]), &[5])),
            reference: Box::new(|x| [5, 0, 0, 3, 2].iter().map(|i| x[0][*i]).collect()),
        },
        Case {
            name: "cumsum",
            shapes: vec![vec![2, 4]],
            domain: Domain::Full,
            build: Box::new(|g, v| g.cumsum(v[0], true)),
            reference: Box::new(|x| {
                let mut out = Vec::new();
                for r in 0..2 {
                    let mut acc = 0.0;
                    for c in 0..4 {
                        out.push(acc);
                        acc += x[0][r * 4 + c];
                    }
                }
                out
            }),
        },
        Case {
            name: "scale",
            shapes: vec![vec![4]],
            domain: Domain::Full,
            build: Box::new(|g, v| g.scale(v[0], -1.5)),
            reference: Box::new(|x| x[0].iter().map(|v| -1.5 * v).collect()),
        },
    ];
    v.extend([
        unary_case("relu", Domain::AwayFromZero, Graph::relu, |x| x.max(0.0)),
        unary_case("leaky_relu", Domain::AwayFromZero, |g, a| g.leaky_relu(a, 0.2), |x| {
            if x > 0.0 {
                x
            } else {
                0.2 * x
            }
        }),
        unary_case("sigmoid", Domain::Full, Graph::sigmoid, |x| 1.0 / (1.0 + (-x).exp())),
        unary_case("tanh", Domain::Full, Graph::tanh, f64::tanh),
        unary_case("exp", Domain::Full, Graph::exp, f64::exp),
        unary_case("log", Domain::Positive, Graph::log, f64::ln),
        unary_case("square", Domain::Full, Graph::square, |x| x * x),
        unary_case("sqrt", Domain::Positive, Graph::sqrt, f64::sqrt),
        unary_case("softplus", Domain::Full, Graph::softplus, |x| (1.0 + x.exp()).ln()),
        unary_case("neg", Domain::Full, Graph::neg, |x| -x),
    ]);
    v
}

fn check_case(case: &Case, rng: &mut SplitMix) -> Result<CheckReport> {
    let inputs: Vec<Vec<f64>> = case
        .shapes
        .iter()
        .map(|s| (0..s.iter().product::<usize>()).map(|_| rng.sample(case.domain)).collect())
        .collect();
    // round to the working precision so both paths see identical inputs
    let inputs: Vec<Vec<f64>> = inputs
        .into_iter()
        .map(|v| v.into_iter().map(|x| x as Real as f64).collect())
        .collect();
    let out_len = (case.reference)(&inputs).len();
    let weights: Vec<f64> = (0..out_len).map(|_| rng.sample(Domain::Full)).collect();

    let mut g = Graph::with_finite_checks(true);
    let vars = inputs
        .iter()
        .zip(&case.shapes)
        .map(|(d, s)| g.variable(s, d.iter().map(|x| *x as Real).collect()))
        .collect::<Result<Vec<_>>>()?;
    let out = (case.build)(&mut g, &vars)?;
    let w = g.constant(g.shape(out).to_vec().as_slice(), weights.iter().map(|x| *x as Real).collect())?;
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod)?;
    let grads = g.backward(loss)?;

    let probe = |x: &[Vec<f64>]| -> f64 {
        (case.reference)(x).iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let h = 1e-3;
    let (mut num2, mut diff2) = (0.0f64, 0.0f64);
    let mut work = inputs.clone();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[Real]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let x0 = inputs[k][i];
            let mut at = |dx: f64| {
                work[k][i] = x0 + dx;
                probe(&work)
            };
            let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            work[k][i] = x0;
            num2 += numeric * numeric;
            diff2 += (analytic[i] as f64 - numeric).powi(2);
        }
    }
    Ok(CheckReport {
        name: case.name,
        rel_err: diff2.sqrt() / num2.sqrt().max(1e-8),
    })
}

/// Runs every primitive case with inputs drawn from `seed`.
pub fn check_primitives(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = SplitMix(seed);
    cases().iter().map(|c| check_case(c, &mut rng)).collect()
}

/// Names of the primitives covered by [`check_primitives`].
pub fn primitive_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}
