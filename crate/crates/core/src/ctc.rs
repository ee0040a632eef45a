//! Connectionist temporal classification: loss with analytic gradient,
//! best-path decoding, and an exhaustive alignment oracle.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Stand-in for `ln 0`. Finite so that log-space sums never produce NaN
/// from `-inf - -inf`; any value at or below it is treated as zero
/// probability.
pub const LOG_ZERO: f64 = -1.0e30;

/// Paths the brute-force oracle is willing to enumerate.
pub const BRUTE_FORCE_BUDGET: u128 = 20_000_000;

/// Target symbol ids with the blank excluded.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct LabelSequence {
    ids: Vec<usize>,
}

impl LabelSequence {
    pub fn new(ids: Vec<usize>, n_symbols: usize, blank: usize) -> Result<Self> {
        for &id in &ids {
            if id == blank {
                return Err(Error::Contract(format!("label contains the blank id {blank}")));
            }
            if id >= n_symbols {
                return Err(Error::Contract(format!(
                    "label id {id} outside alphabet of {n_symbols}"
                )));
            }
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Fewest frames that can emit this target: one per symbol plus a
    /// separating blank between each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        min_frames(&self.ids)
    }
}

pub fn min_frames(ids: &[usize]) -> usize {
    ids.len() + ids.windows(2).filter(|w| w[0] == w[1]).count()
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a <= LOG_ZERO {
        return b.max(LOG_ZERO);
    }
    if b <= LOG_ZERO {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[derive(Clone, Debug)]
pub struct CtcOutput {
    /// `-ln P(target | log_probs)`.
    pub loss: f64,
    /// `∂loss/∂log_probs`, row-major `T×K`.
    pub grad: Vec<f64>,
}

/// CTC negative log-likelihood of `target` under frame log-probabilities
/// `log_probs` (`T×K`), summed over all admissible alignments in log space.
pub fn ctc_loss(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<CtcOutput> {
    log_probs.expect_rank(2, "ctc_loss")?;
    let (frames, k) = (log_probs.shape()[0], log_probs.shape()[1]);
    if blank >= k {
        return Err(Error::Contract(format!("blank {blank} outside {k} classes")));
    }
    if let Some(&bad) = target.iter().find(|&&id| id >= k || id == blank) {
        return Err(Error::Contract(format!("target id {bad} invalid for {k} classes")));
    }
    let required = min_frames(target);
    if frames < required.max(1) {
        return Err(Error::InfeasibleLength {
            frames,
            required: required.max(1),
        });
    }
    let lp = log_probs.data();

    // Extended label: blank, l1, blank, l2, …, blank.
    let s_len = 2 * target.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { blank } else { target[s / 2] })
        .collect();
    let skip_ok: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2])
        .collect();

    let mut alpha = vec![LOG_ZERO; frames * s_len];
    alpha[0] = lp[blank];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        let row = &lp[t * k..(t + 1) * k];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_ok[s] {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc <= LOG_ZERO { LOG_ZERO } else { acc + row[ext[s]] };
        }
    }

    // beta excludes the emission at its own frame.
    let mut beta = vec![LOG_ZERO; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        let row = &lp[(t + 1) * k..(t + 2) * k];
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s] + row[ext[s]];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1] + row[ext[s + 1]]);
            }
            if s + 2 < s_len && skip_ok[s + 2] {
                acc = log_add(acc, next[s + 2] + row[ext[s + 2]]);
            }
            beta[t * s_len + s] = acc.max(LOG_ZERO);
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if log_p <= LOG_ZERO {
        return Err(Error::NonFinite("ctc_loss: target has zero probability".into()));
    }

    let mut grad = vec![0.0; frames * k];
    let mut occupancy = vec![LOG_ZERO; k];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|v| *v = LOG_ZERO);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            occupancy[ext[s]] = log_add(occupancy[ext[s]], ab);
        }
        for (c, occ) in occupancy.iter().enumerate() {
            if *occ > LOG_ZERO {
                grad[t * k + c] = -(occ - log_p).exp();
            }
        }
    }
    Ok(CtcOutput { loss: -log_p, grad })
}

/// Records `ctc_loss(log_probs)` on the tape so gradients flow back into
/// whatever produced `log_probs`.
pub fn ctc_loss_node(g: &mut Graph, log_probs: Var, target: &[usize], blank: usize) -> Result<Var> {
    let out = ctc_loss(g.value(log_probs), target, blank)?;
    g.loss_node(log_probs, out.loss, out.grad)
}

/// Collapses a frame path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Exhaustive CTC: sums the probability of every one of the `K^T` frame paths
/// that collapses to `target`. Returns `-ln P` (infinite when `P == 0`).
pub fn ctc_brute_force(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<f64> {
    log_probs.expect_rank(2, "ctc_brute_force")?;
    let (frames, k) = (log_probs.shape()[0], log_probs.shape()[1]);
    let paths = (k as u128).checked_pow(frames as u32).unwrap_or(u128::MAX);
    if paths > BRUTE_FORCE_BUDGET {
        return Err(Error::Budget(paths));
    }
    let lp = log_probs.data();
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    for _ in 0..paths {
        if collapse(&path, blank) == target {
            let logp: f64 = path.iter().enumerate().map(|(t, &c)| lp[t * k + c]).sum();
            total += logp.exp();
        }
        // odometer increment
        for slot in path.iter_mut().rev() {
            *slot += 1;
            if *slot < k {
                break;
            }
            *slot = 0;
        }
    }
    Ok(-total.ln())
}

/// Frame-wise argmax (ties go to the lowest id), then [`collapse`].
pub fn best_path_decode(log_probs: &Tensor, blank: usize) -> Vec<usize> {
    if log_probs.is_empty() {
        return Vec::new();
    }
    let k = log_probs.shape()[log_probs.rank() - 1];
    let path: Vec<usize> = log_probs
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    collapse(&path, blank)
}
