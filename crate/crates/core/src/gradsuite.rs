//! Finite-difference checks of every differentiable op on random shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::ctc_loss_node;
use crate::error::Result;
use crate::tensor::gradcheck::{check_gradients, project, DEFAULT_STEP};
use crate::tensor::nn::{
    blstm_layer, lstm_direction, multi_head_attention, transformer_encoder_layer, AttentionParams, EncoderLayerParams,
    LstmParams,
};
use crate::tensor::{conv_output_extent, Graph, Mode, Tensor, Var};

/// Acceptance bound on the worst relative error of any op.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub cases: usize,
    pub worst: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    mode: Mode,
    build: Build,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Values kept at least 0.05 away from zero so kinks stay out of reach of
/// the finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_t(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v += 0.05f64.copysign(*v));
    t
}

fn projected(seed: u64, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Build {
    Box::new(move |g, v| {
        let y = f(g, v)?;
        project(g, y, seed)
    })
}

fn attention_inputs(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<Tensor> {
    let mut v = vec![rand_t(rng, &[t, d])];
    for _ in 0..4 {
        v.push(rand_t(rng, &[d, d]));
        v.push(rand_t(rng, &[d]));
    }
    v
}

fn attention_params(v: &[Var]) -> AttentionParams {
    AttentionParams {
        wq: v[0],
        bq: v[1],
        wk: v[2],
        bk: v[3],
        wv: v[4],
        bv: v[5],
        wo: v[6],
        bo: v[7],
    }
}

fn cases_for(op: &str, rng: &mut ChaCha8Rng, k: usize) -> Case {
    let seed = rng.gen::<u64>();
    let eval = |inputs: Vec<Tensor>, build: Build| Case {
        inputs,
        mode: Mode::Eval,
        build,
    };
    match op {
        "conv2d" => loop {
            let cin = rng.gen_range(1..=2);
            let cout = rng.gen_range(1..=2);
            let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
            let (kh, kw) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let stride = (rng.gen_range(1..=2), rng.gen_range(1..=2));
            let pad = (rng.gen_range(0..=1), rng.gen_range(0..=1));
            if conv_output_extent(h, kh, stride.0, pad.0).is_none()
                || conv_output_extent(w, kw, stride.1, pad.1).is_none()
            {
                continue;
            }
            let inputs = vec![
                rand_t(rng, &[cin, h, w]),
                rand_t(rng, &[cout, cin, kh, kw]),
                rand_t(rng, &[cout]),
            ];
            break eval(
                inputs,
                projected(seed, move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad)),
            );
        },
        "batch_norm" => {
            let c = rng.gen_range(1..=3);
            let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
            let inputs = vec![rand_t(rng, &[c, h, w]), rand_t(rng, &[c]), rand_t(rng, &[c])];
            let running = (vec![0.0; c], vec![1.0; c]);
            Case {
                inputs,
                mode: Mode::Train,
                build: projected(seed, move |g, v| {
                    g.batch_norm(v[0], v[1], v[2], (&running.0, &running.1), 0)
                }),
            }
        }
        "batch_norm_eval" => {
            let c = rng.gen_range(1..=3);
            let n = rng.gen_range(2..=6);
            let inputs = vec![rand_t(rng, &[c, n]), rand_t(rng, &[c]), rand_t(rng, &[c])];
            let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
            eval(
                inputs,
                projected(seed, move |g, v| g.batch_norm(v[0], v[1], v[2], (&mean, &var), 0)),
            )
        }
        "layer_norm" => {
            let (t, d) = (rng.gen_range(1..=4), rng.gen_range(2..=6));
            let inputs = vec![rand_t(rng, &[t, d]), rand_t(rng, &[d]), rand_t(rng, &[d])];
            eval(inputs, projected(seed, |g, v| g.layer_norm(v[0], v[1], v[2])))
        }
        "relu" | "sigmoid" | "tanh" | "scale" | "sum" => {
            let shape = [rng.gen_range(1..=4), rng.gen_range(1..=5)];
            let s = rng.gen_range(-2.0..2.0);
            let op = op.to_string();
            eval(
                vec![away_from_zero(rng, &shape)],
                projected(seed, move |g, v| {
                    Ok(match op.as_str() {
                        "relu" => g.relu(v[0]),
                        "sigmoid" => g.sigmoid(v[0]),
                        "tanh" => g.tanh(v[0]),
                        "scale" => g.scale(v[0], s),
                        _ => g.sum(v[0]),
                    })
                }),
            )
        }
        "dropout" => {
            let shape = [rng.gen_range(1..=4), rng.gen_range(2..=6)];
            let p = rng.gen_range(0.1..0.6);
            Case {
                inputs: vec![rand_t(rng, &shape)],
                mode: Mode::Train,
                build: projected(seed, move |g, v| Ok(g.dropout(v[0], p))),
            }
        }
        "matmul" | "dense" | "add_row_bias" => {
            let (m, kk, n) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
            match op {
                "matmul" => eval(
                    vec![rand_t(rng, &[m, kk]), rand_t(rng, &[kk, n])],
                    projected(seed, |g, v| g.matmul(v[0], v[1])),
                ),
                "dense" => eval(
                    vec![rand_t(rng, &[m, kk]), rand_t(rng, &[kk, n]), rand_t(rng, &[n])],
                    projected(seed, |g, v| g.dense(v[0], v[1], v[2])),
                ),
                _ => eval(
                    vec![rand_t(rng, &[m, n]), rand_t(rng, &[n])],
                    projected(seed, |g, v| g.add_row_bias(v[0], v[1])),
                ),
            }
        }
        "add" | "mul" => {
            let shape = [rng.gen_range(1..=4), rng.gen_range(1..=4)];
            let mul = op == "mul";
            eval(
                vec![rand_t(rng, &shape), rand_t(rng, &shape)],
                projected(
                    seed,
                    move |g, v| if mul { g.mul(v[0], v[1]) } else { g.add(v[0], v[1]) },
                ),
            )
        }
        "log_softmax" | "softmax" | "transpose" => {
            let shape = [rng.gen_range(1..=4), rng.gen_range(1..=5)];
            let op = op.to_string();
            eval(
                vec![rand_t(rng, &shape).reshape(shape.to_vec()).expect("shape")],
                projected(seed, move |g, v| match op.as_str() {
                    "log_softmax" => g.log_softmax(v[0]),
                    "softmax" => g.softmax(v[0]),
                    _ => g.transpose(v[0]),
                }),
            )
        }
        "slice_cols" => {
            let (r, c) = (rng.gen_range(1..=3), rng.gen_range(2..=6));
            let start = rng.gen_range(0..c);
            let len = rng.gen_range(1..=c - start);
            eval(
                vec![rand_t(rng, &[r, c])],
                projected(seed, move |g, v| g.slice_cols(v[0], start, len)),
            )
        }
        "concat_cols" => {
            let r = rng.gen_range(1..=3);
            let inputs: Vec<Tensor> = (0..rng.gen_range(2..=3))
                .map(|_| {
                    let c = rng.gen_range(1..=3);
                    rand_t(rng, &[r, c])
                })
                .collect();
            eval(inputs, projected(seed, |g, v| g.concat_cols(v)))
        }
        "row" | "stack_rows" => {
            let (r, c) = (rng.gen_range(2..=4), rng.gen_range(1..=4));
            let i = rng.gen_range(0..r);
            if op == "row" {
                eval(vec![rand_t(rng, &[r, c])], projected(seed, move |g, v| g.row(v[0], i)))
            } else {
                eval(
                    vec![rand_t(rng, &[r, c])],
                    projected(seed, move |g, v| {
                        let rows: Vec<Var> = (0..r).rev().map(|k| g.row(v[0], k)).collect::<Result<_>>()?;
                        g.stack_rows(&rows)
                    }),
                )
            }
        }
        "flatten_transpose" | "reshape" => {
            let shape = [rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3)];
            let n: usize = shape.iter().product();
            if op == "reshape" {
                eval(
                    vec![rand_t(rng, &shape)],
                    projected(seed, move |g, v| g.reshape(v[0], vec![n, 1])),
                )
            } else {
                eval(
                    vec![rand_t(rng, &shape)],
                    projected(seed, |g, v| g.flatten_transpose(v[0])),
                )
            }
        }
        "multi_head_attention" => {
            let heads = 1 + k % 2;
            let d = heads * rng.gen_range(1..=2);
            let t = rng.gen_range(1..=4);
            eval(
                attention_inputs(rng, t, d),
                projected(seed, move |g, v| {
                    Ok(multi_head_attention(g, v[0], &attention_params(&v[1..]), heads)?.output)
                }),
            )
        }
        "transformer_encoder_layer" => {
            let heads = 1 + k % 2;
            let d = heads * 2;
            let (t, ff) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let mut inputs = attention_inputs(rng, t, d);
            for shape in [
                vec![d],
                vec![d],
                vec![d, ff],
                vec![ff],
                vec![ff, d],
                vec![d],
                vec![d],
                vec![d],
            ] {
                inputs.push(rand_t(rng, &shape));
            }
            // odd cases also exercise dropout inside the block
            let (mode, p) = if k % 2 == 1 {
                (Mode::Train, 0.2)
            } else {
                (Mode::Eval, 0.0)
            };
            Case {
                inputs,
                mode,
                build: projected(seed, move |g, v| {
                    let params = EncoderLayerParams {
                        attn: attention_params(&v[1..9]),
                        ln1_gamma: v[9],
                        ln1_beta: v[10],
                        ff1_w: v[11],
                        ff1_b: v[12],
                        ff2_w: v[13],
                        ff2_b: v[14],
                        ln2_gamma: v[15],
                        ln2_beta: v[16],
                    };
                    transformer_encoder_layer(g, v[0], &params, heads, p)
                }),
            }
        }
        "lstm_direction" | "blstm_layer" => {
            let (t, d, h) = (rng.gen_range(1..=4), rng.gen_range(1..=3), rng.gen_range(1..=2));
            let mut inputs = vec![rand_t(rng, &[t, d])];
            let dirs = if op == "blstm_layer" { 2 } else { 1 };
            for _ in 0..dirs {
                inputs.push(rand_t(rng, &[d, 4 * h]));
                inputs.push(rand_t(rng, &[h, 4 * h]));
                inputs.push(rand_t(rng, &[4 * h]));
            }
            let reverse = k % 2 == 1;
            eval(
                inputs,
                projected(seed, move |g, v| {
                    let p = |i: usize| LstmParams {
                        w_ih: v[i],
                        w_hh: v[i + 1],
                        bias: v[i + 2],
                    };
                    if dirs == 2 {
                        blstm_layer(g, v[0], &p(1), &p(4))
                    } else {
                        lstm_direction(g, v[0], &p(1), reverse)
                    }
                }),
            )
        }
        "ctc_loss" => {
            let n_sym = rng.gen_range(2..=4);
            let blank = n_sym - 1;
            let len = rng.gen_range(0..=3);
            let target: Vec<usize> = (0..len).map(|_| rng.gen_range(0..blank)).collect();
            let need = crate::ctc::min_frames(&target).max(1);
            let t = need + rng.gen_range(0..=3);
            Case {
                inputs: vec![rand_t(rng, &[t, n_sym])],
                mode: Mode::Eval,
                build: Box::new(move |g, v| {
                    let lp = g.log_softmax(v[0])?;
                    ctc_loss_node(g, lp, &target, blank)
                }),
            }
        }
        other => unreachable!("unknown op {other}"),
    }
}

/// Every op the suite covers.
pub const OPS: &[&str] = &[
    "conv2d",
    "batch_norm",
    "batch_norm_eval",
    "layer_norm",
    "relu",
    "sigmoid",
    "tanh",
    "dropout",
    "matmul",
    "add_row_bias",
    "dense",
    "add",
    "mul",
    "scale",
    "log_softmax",
    "softmax",
    "transpose",
    "slice_cols",
    "concat_cols",
    "row",
    "stack_rows",
    "flatten_transpose",
    "reshape",
    "sum",
    "multi_head_attention",
    "transformer_encoder_layer",
    "lstm_direction",
    "blstm_layer",
    "ctc_loss",
];

/// Runs `cases` random shapes per op.
pub fn run_suite(seed: u64, cases: usize) -> Result<Vec<OpCheck>> {
    use rayon::prelude::*;
    OPS.par_iter()
        .enumerate()
        .map(|(i, op)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut worst = 0.0f64;
            for k in 0..cases {
                let c = cases_for(op, &mut rng, k);
                let build = c.build;
                let err = check_gradients(&c.inputs, c.mode, seed ^ k as u64, DEFAULT_STEP, move |g, v| {
                    build(g, v)
                })?;
                worst = worst.max(err);
            }
            Ok(OpCheck {
                op: op.to_string(),
                cases,
                worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        for r in run_suite(3, 2).unwrap() {
            assert!(r.passed(), "{}: {}", r.op, r.worst);
        }
    }
}
