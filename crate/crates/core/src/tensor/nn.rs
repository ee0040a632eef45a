//! Composite layers built from tape ops: multi-head self-attention, the
//! post-norm Transformer encoder block, and bidirectional LSTM.

use std::sync::RwLock;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerParams {
    pub attn: AttentionParams,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

/// One LSTM direction. Gates are packed `[input, forget, cell, output]`
/// along the `4H` axis.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    /// `D × 4H`
    pub w_ih: Var,
    /// `H × 4H`
    pub w_hh: Var,
    /// `4H`
    pub bias: Var,
}

/// Output of [`multi_head_attention`]; `weights[h]` is the `T×T` row-stochastic
/// attention matrix of head `h`.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

pub fn multi_head_attention(g: &mut Graph, x: Var, p: &AttentionParams, heads: usize) -> Result<AttentionOutput> {
    let d = g.shape(x)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by {heads} attention heads"
        )));
    }
    let dk = d / heads;
    let q = g.dense(x, p.wq, p.bq)?;
    let k = g.dense(x, p.wk, p.bk)?;
    let v = g.dense(x, p.wv, p.bv)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dk, dk)?;
        let kh = g.slice_cols(k, h * dk, dk)?;
        let vh = g.slice_cols(v, h * dk, dk)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let a = g.softmax(scores)?;
        weights.push(a);
        outs.push(g.matmul(a, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let output = g.dense(merged, p.wo, p.bo)?;
    Ok(AttentionOutput { output, weights })
}

/// Post-norm encoder block:
/// `y = LN(x + drop(MHA(x)))`, `out = LN(y + drop(W2·drop(relu(W1·y))))`.
pub fn transformer_encoder_layer(
    g: &mut Graph,
    x: Var,
    p: &EncoderLayerParams,
    heads: usize,
    dropout: f64,
) -> Result<Var> {
    let attn = multi_head_attention(g, x, &p.attn, heads)?.output;
    let attn = g.dropout(attn, dropout);
    let res = g.add(x, attn)?;
    let y = g.layer_norm(res, p.ln1_gamma, p.ln1_beta)?;
    let h = g.dense(y, p.ff1_w, p.ff1_b)?;
    let h = g.relu(h);
    let h = g.dropout(h, dropout);
    let f = g.dense(h, p.ff2_w, p.ff2_b)?;
    let f = g.dropout(f, dropout);
    let res = g.add(y, f)?;
    g.layer_norm(res, p.ln2_gamma, p.ln2_beta)
}

/// Runs one LSTM direction over the rows of `x` (`T×D`) and returns the
/// hidden states `T×H` in input order.
pub fn lstm_direction(g: &mut Graph, x: Var, p: &LstmParams, reverse: bool) -> Result<Var> {
    let t_len = g.shape(x)[0];
    if t_len == 0 {
        return Err(Error::Shape("lstm: empty sequence".into()));
    }
    let hidden = g.shape(p.w_hh)[0];
    if g.shape(p.w_hh) != [hidden, 4 * hidden] || g.shape(p.w_ih)[1] != 4 * hidden {
        return Err(Error::Shape(format!(
            "lstm: w_ih {:?}, w_hh {:?}",
            g.shape(p.w_ih),
            g.shape(p.w_hh)
        )));
    }
    let projected = g.dense(x, p.w_ih, p.bias)?;
    let mut h = g.constant(Tensor::zeros(&[1, hidden]));
    let mut c = g.constant(Tensor::zeros(&[1, hidden]));
    let mut states = vec![h; t_len];
    let order: Vec<usize> = if reverse {
        (0..t_len).rev().collect()
    } else {
        (0..t_len).collect()
    };
    for t in order {
        let xt = g.row(projected, t)?;
        let rec = g.matmul(h, p.w_hh)?;
        let gates = g.add(xt, rec)?;
        let i = g.slice_cols(gates, 0, hidden)?;
        let i = g.sigmoid(i);
        let f = g.slice_cols(gates, hidden, hidden)?;
        let f = g.sigmoid(f);
        let cand = g.slice_cols(gates, 2 * hidden, hidden)?;
        let cand = g.tanh(cand);
        let o = g.slice_cols(gates, 3 * hidden, hidden)?;
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let tc = g.tanh(c);
        h = g.mul(o, tc)?;
        states[t] = h;
    }
    g.stack_rows(&states)
}

/// Concatenation of a forward and a backward LSTM pass: `T×D → T×2H`.
pub fn blstm_layer(g: &mut Graph, x: Var, fwd: &LstmParams, bwd: &LstmParams) -> Result<Var> {
    let f = lstm_direction(g, x, fwd, false)?;
    let b = lstm_direction(g, x, bwd, true)?;
    g.concat_cols(&[f, b])
}

/// Fixed sinusoidal position code: `pe[t, 2i] = sin(t / 10000^(2i/D))`,
/// `pe[t, 2i+1] = cos(…)`.
pub fn sinusoidal_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for t in 0..len {
        for j in 0..dim {
            let i = (j / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * i / dim as f64);
            data[t * dim + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("shape")
}

/// Positional table grown on demand to the longest sequence requested.
#[derive(Debug)]
pub struct PositionalTable {
    dim: usize,
    table: RwLock<Tensor>,
}

impl PositionalTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            table: RwLock::new(Tensor::zeros(&[0, dim])),
        }
    }

    pub fn capacity(&self) -> usize {
        self.table.read().expect("positional table lock").shape()[0]
    }

    /// First `len` rows of the table.
    pub fn get(&self, len: usize) -> Tensor {
        {
            let t = self.table.read().expect("positional table lock");
            if t.shape()[0] >= len {
                return Tensor::new(vec![len, self.dim], t.data()[..len * self.dim].to_vec()).expect("shape");
            }
        }
        let mut t = self.table.write().expect("positional table lock");
        if t.shape()[0] < len {
            // grow geometrically so long pages do not rebuild on every call
            let cap = len.max(2 * t.shape()[0]);
            *t = sinusoidal_encoding(cap, self.dim);
        }
        Tensor::new(vec![len, self.dim], t.data()[..len * self.dim].to_vec()).expect("shape")
    }
}

impl Clone for PositionalTable {
    fn clone(&self) -> Self {
        Self::new(self.dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(d: usize) -> Tensor {
        Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 })
    }

    fn attention_params(g: &mut Graph, d: usize, wk: Tensor, rng: &mut ChaCha8Rng) -> AttentionParams {
        AttentionParams {
            wq: g.leaf(Tensor::uniform(&[d, d], 0.5, rng), true),
            bq: g.leaf(Tensor::zeros(&[d]), true),
            wk: g.leaf(wk, true),
            bk: g.leaf(Tensor::zeros(&[d]), true),
            wv: g.leaf(identity(d), true),
            bv: g.leaf(Tensor::zeros(&[d]), true),
            wo: g.leaf(identity(d), true),
            bo: g.leaf(Tensor::zeros(&[d]), true),
        }
    }

    #[test]
    fn equal_keys_give_mean_of_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.constant(Tensor::uniform(&[5, 3], 1.0, &mut rng));
        // zero key projection => identical keys => uniform weights
        let p = attention_params(&mut g, 3, Tensor::zeros(&[3, 3]), &mut rng);
        let out = multi_head_attention(&mut g, x, &p, 1).unwrap();
        let xs = g.value(x).clone();
        for j in 0..3 {
            let mean: f64 = (0..5).map(|t| xs.at2(t, j)).sum::<f64>() / 5.0;
            for t in 0..5 {
                assert!((g.value(out.output).at2(t, j) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.constant(Tensor::uniform(&[1, 4], 1.0, &mut rng));
        let wk = Tensor::uniform(&[4, 4], 0.5, &mut rng);
        let mut p = attention_params(&mut g, 4, wk, &mut rng);
        let wv = Tensor::uniform(&[4, 4], 0.5, &mut rng);
        p.wv = g.leaf(wv, true);
        let out = multi_head_attention(&mut g, x, &p, 2).unwrap();
        let xv = g.value(x).clone();
        let wvv = g.value(p.wv).clone();
        for j in 0..4 {
            let want: f64 = (0..4).map(|i| xv.data()[i] * wvv.at2(i, j)).sum();
            assert!((g.value(out.output).data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.constant(Tensor::uniform(&[4, 8], 2.0, &mut rng));
        let wk = Tensor::uniform(&[8, 8], 1.0, &mut rng);
        let p = attention_params(&mut g, 8, wk, &mut rng);
        let out = multi_head_attention(&mut g, x, &p, 2).unwrap();
        for w in out.weights {
            let a = g.value(w);
            for r in 0..4 {
                let s: f64 = a.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.constant(Tensor::zeros(&[2, 6]));
        let p = attention_params(&mut g, 6, Tensor::zeros(&[6, 6]), &mut rng);
        assert!(matches!(multi_head_attention(&mut g, x, &p, 4), Err(Error::Config(_))));
    }

    #[test]
    fn positional_table_grows_lazily() {
        let table = PositionalTable::new(4);
        assert_eq!(table.capacity(), 0);
        let a = table.get(3);
        assert_eq!(a.shape(), &[3, 4]);
        let b = table.get(10);
        assert!(table.capacity() >= 10);
        assert_eq!(&b.data()[..12], a.data());
        assert_eq!(b.at2(0, 1), 1.0);
    }
}
