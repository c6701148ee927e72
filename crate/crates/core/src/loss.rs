//! The three training losses and their weighted combination
//! `L = lambda * L_ctc + (1 - lambda) * L_gr + alpha * L_pr`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::vocab::BLANK_ID;

/// Weights of the multitask objective: `lambda` interpolates CTC against
/// the grapheme attention loss, `alpha` scales the phoneme auxiliary loss.
#[derive(Debug, Clone, Copy)]
pub struct MultiTaskLossConfig {
    pub lambda: f64,
    pub alpha: f64,
}

impl Default for MultiTaskLossConfig {
    fn default() -> Self {
        MultiTaskLossConfig {
            lambda: 0.3,
            alpha: 0.6,
        }
    }
}

impl MultiTaskLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// The four scalars of the multitask objective, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_ctc: f64,
    pub l_pr: f64,
    pub l_gr: f64,
    pub l_total: f64,
}

/// Combine the three loss scalars per the multitask objective. The returned
/// breakdown's `l_total` is computed with the same operation order as the
/// graph node, so the two agree exactly.
pub fn multitask_loss(
    g: &mut Graph,
    l_ctc: Var,
    l_gr: Var,
    l_pr: Var,
    cfg: &MultiTaskLossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let ctc_term = g.scale(l_ctc, cfg.lambda);
    let gr_term = g.scale(l_gr, 1.0 - cfg.lambda);
    let pr_term = g.scale(l_pr, cfg.alpha);
    let partial = g.add(ctc_term, gr_term)?;
    let total = g.add(partial, pr_term)?;
    let breakdown = LossBreakdown {
        l_ctc: g.scalar_value(l_ctc),
        l_pr: g.scalar_value(l_pr),
        l_gr: g.scalar_value(l_gr),
        l_total: g.scalar_value(total),
    };
    Ok((total, breakdown))
}

/// Frames needed to emit `target`: its length plus one separating blank per
/// adjacent repeated symbol.
pub fn ctc_required_len(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// CTC negative log-likelihood and its gradient w.r.t. the per-frame log
/// probabilities, via the forward-backward recursions over the
/// blank-interleaved extended target.
///
/// `logp` is a row-major `[t_len x v]` matrix of log probabilities.
pub fn ctc_loss_grad(
    logp: &[f64],
    t_len: usize,
    v: usize,
    target: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if logp.len() != t_len * v {
        return Err(Error::InvalidArg(format!(
            "log prob buffer has {} entries for [{t_len} x {v}]",
            logp.len()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&c| c == BLANK_ID || c >= v) {
        return Err(Error::InvalidArg(format!(
            "ctc target symbol {bad} invalid for vocab of {v} with blank {BLANK_ID}"
        )));
    }
    let required = ctc_required_len(target);
    if t_len < required {
        return Err(Error::TargetUnalignable {
            input_len: t_len,
            target_len: target.len(),
            required,
        });
    }
    let s_len = 2 * target.len() + 1;
    let ext = |s: usize| -> usize {
        if s % 2 == 0 {
            BLANK_ID
        } else {
            target[s / 2]
        }
    };
    let neg = f64::NEG_INFINITY;
    let idx = |t: usize, s: usize| t * s_len + s;

    let mut alpha = vec![neg; t_len * s_len];
    alpha[idx(0, 0)] = logp[BLANK_ID];
    if s_len > 1 {
        alpha[idx(0, 1)] = logp[ext(1)];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[idx(t - 1, s)];
            if s >= 1 {
                acc = log_add(acc, alpha[idx(t - 1, s - 1)]);
            }
            if s >= 2 && ext(s) != BLANK_ID && ext(s) != ext(s - 2) {
                acc = log_add(acc, alpha[idx(t - 1, s - 2)]);
            }
            alpha[idx(t, s)] = acc + logp[t * v + ext(s)];
        }
    }
    let mut log_z = alpha[idx(t_len - 1, s_len - 1)];
    if s_len > 1 {
        log_z = log_add(log_z, alpha[idx(t_len - 1, s_len - 2)]);
    }
    if log_z == f64::NEG_INFINITY {
        return Err(Error::NonFinite("ctc loss: no feasible alignment".into()));
    }

    // beta[t][s]: emissions strictly after t
    let mut beta = vec![neg; t_len * s_len];
    beta[idx(t_len - 1, s_len - 1)] = 0.0;
    if s_len > 1 {
        beta[idx(t_len - 1, s_len - 2)] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[idx(t + 1, s)] + logp[(t + 1) * v + ext(s)];
            if s + 1 < s_len {
                acc = log_add(acc, beta[idx(t + 1, s + 1)] + logp[(t + 1) * v + ext(s + 1)]);
            }
            if s + 2 < s_len && ext(s + 2) != BLANK_ID && ext(s + 2) != ext(s) {
                acc = log_add(acc, beta[idx(t + 1, s + 2)] + logp[(t + 1) * v + ext(s + 2)]);
            }
            beta[idx(t, s)] = acc;
        }
    }

    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        let mut per_symbol = vec![neg; v];
        for s in 0..s_len {
            let k = ext(s);
            per_symbol[k] = log_add(per_symbol[k], alpha[idx(t, s)] + beta[idx(t, s)]);
        }
        for k in 0..v {
            if per_symbol[k] != f64::NEG_INFINITY {
                grad[t * v + k] = -(per_symbol[k] - log_z).exp();
            }
        }
    }
    Ok((-log_z, grad))
}

/// CTC loss as a graph node over one utterance's `[T x V]` log probs.
pub fn ctc_loss_op(g: &mut Graph, logp: Var, target: &[usize]) -> Result<Var> {
    let shape = g.shape(logp).to_vec();
    let (t_len, v) = match shape.as_slice() {
        [t, v] => (*t, *v),
        _ => {
            return Err(Error::InvalidArg(format!(
                "ctc_loss wants [T x V] log probs, got {shape:?}"
            )))
        }
    };
    let (loss, grad) = ctc_loss_grad(g.data(logp), t_len, v, target)?;
    g.scalar_with_grad(logp, loss, grad)
}

/// Mean token-level cross entropy from `[R x V]` logits.
///
/// Rows whose target equals `pad_id` are excluded from both the sum and the
/// count. With `label_smoothing > 0` the target distribution mixes in
/// `smoothing / V` of uniform mass.
pub fn seq_cross_entropy(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    pad_id: Option<usize>,
    label_smoothing: f64,
) -> Result<Var> {
    let (rows, v) = match g.shape(logits) {
        [r, v] => (*r, *v),
        other => {
            return Err(Error::InvalidArg(format!(
                "seq_cross_entropy wants [R x V] logits, got {other:?}"
            )))
        }
    };
    if targets.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "seq_cross_entropy",
            lhs: vec![rows, v],
            rhs: vec![targets.len()],
        });
    }
    let mut weights = vec![1.0; rows];
    let mut picked_idx = Vec::with_capacity(rows);
    let mut count = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        if Some(t) == pad_id {
            weights[i] = 0.0;
            picked_idx.push(0);
        } else {
            if t >= v {
                return Err(Error::InvalidArg(format!(
                    "target id {t} out of range for {v} classes"
                )));
            }
            picked_idx.push(t);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArg(
            "seq_cross_entropy: all positions padded".into(),
        ));
    }
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.pick_per_row(logp, &picked_idx)?;
    let w = g.constant(vec![rows], weights.clone());
    let weighted = g.mul(picked, w)?;
    let nll_sum = g.sum_all(weighted);
    let mut loss = g.scale(nll_sum, -(1.0 - label_smoothing) / count as f64);
    if label_smoothing > 0.0 {
        // uniform-mass term: mean over classes of -log p, per counted row
        let ones = g.constant(vec![v, 1], vec![1.0; v]);
        let row_sums = g.matmul(logp, ones)?;
        let row_sums = g.reshape(row_sums, vec![rows])?;
        let w = g.constant(vec![rows], weights);
        let weighted = g.mul(row_sums, w)?;
        let total = g.sum_all(weighted);
        let smooth = g.scale(total, -label_smoothing / (count * v) as f64);
        loss = g.add(loss, smooth)?;
    }
    Ok(loss)
}

/// Padded-batch convenience: logits `[B x U x V]`, targets `[B x U]` with
/// pad positions marked by `pad_id`.
pub fn seq_cross_entropy_padded(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    pad_id: usize,
    label_smoothing: f64,
) -> Result<Var> {
    let (b, u, v) = match g.shape(logits) {
        [b, u, v] => (*b, *u, *v),
        other => {
            return Err(Error::InvalidArg(format!(
                "expected [B x U x V] logits, got {other:?}"
            )))
        }
    };
    let flat = g.reshape(logits, vec![b * u, v])?;
    seq_cross_entropy(g, flat, targets, Some(pad_id), label_smoothing)
}
