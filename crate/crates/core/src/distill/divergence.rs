use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{log_softmax_row, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    #[default]
    ForwardKl,
    ReverseKl,
    Tvd,
}

impl DivergenceKind {
    pub fn name(self) -> &'static str {
        match self {
            DivergenceKind::ForwardKl => "fkl",
            DivergenceKind::ReverseKl => "rkl",
            DivergenceKind::Tvd => "tvd",
        }
    }
}

/// Divergence between two probability vectors, with `0·log 0 = 0`.
pub fn divergence_probs(p: &[f64], q: &[f64], kind: DivergenceKind) -> f64 {
    let kl = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (x.ln() - y.ln()))
            .sum::<f64>()
            .max(0.0)
    };
    match kind {
        DivergenceKind::ForwardKl => kl(p, q),
        DivergenceKind::ReverseKl => kl(q, p),
        DivergenceKind::Tvd => 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>(),
    }
}

/// Divergence between the distributions of two logit rows, in f64.
pub fn divergence_logits<T: Real>(p_logits: &[T], q_logits: &[T], kind: DivergenceKind) -> f64 {
    let lp = log_softmax_row(p_logits);
    let lq = log_softmax_row(q_logits);
    let kl = |la: &[f64], lb: &[f64]| {
        la.iter()
            .zip(lb)
            .map(|(&a, &b)| a.exp() * (a - b))
            .sum::<f64>()
            .max(0.0)
    };
    match kind {
        DivergenceKind::ForwardKl => kl(&lp, &lq),
        DivergenceKind::ReverseKl => kl(&lq, &lp),
        DivergenceKind::Tvd => {
            0.5 * lp
                .iter()
                .zip(&lq)
                .map(|(a, b)| (a.exp() - b.exp()).abs())
                .sum::<f64>()
        }
    }
}

/// One divergence per row of two `[positions, vocab]` logit matrices.
/// `p` plays the teacher, `q` the student.
pub fn tokenwise_divergence<T: Real>(
    p_logits: &Tensor<T>,
    q_logits: &Tensor<T>,
    kind: DivergenceKind,
) -> Result<Vec<f64>> {
    if p_logits.shape() != q_logits.shape() || p_logits.shape().len() != 2 {
        return Err(Error::Shape {
            op: "tokenwise_divergence",
            left: p_logits.shape().to_vec(),
            right: q_logits.shape().to_vec(),
        });
    }
    Ok((0..p_logits.rows())
        .map(|r| divergence_logits(p_logits.row(r), q_logits.row(r), kind))
        .collect())
}

/// Negative log-likelihood of `label` under a logit row, in f64.
pub fn cross_entropy_logits<T: Real>(logits: &[T], label: usize) -> f64 {
    -log_softmax_row(logits)[label]
}

/// Records per-row divergences of student logits `q` (a graph node of
/// shape `[n, vocab]`) from constant teacher logits, as a `[n]` node.
pub fn divergence_graph<T: Real>(
    g: &mut Graph<T>,
    teacher_logits: &Tensor<T>,
    q: Var,
    kind: DivergenceKind,
) -> Result<Var> {
    if g.value(q).shape() != teacher_logits.shape() {
        return Err(Error::Shape {
            op: "divergence",
            left: teacher_logits.shape().to_vec(),
            right: g.value(q).shape().to_vec(),
        });
    }
    let teacher_lp = crate::numcore::log_softmax(teacher_logits, 1)?;
    match kind {
        DivergenceKind::ForwardKl => {
            let p: Vec<T> = teacher_lp.data().iter().map(|x| x.exp()).collect();
            let n = teacher_lp.rows();
            let v = teacher_lp.cols();
            let entropy_term: Vec<T> = (0..n)
                .map(|r| {
                    let s: f64 = (0..v)
                        .map(|j| (p[r * v + j] * teacher_lp.data()[r * v + j]).as_f64())
                        .sum();
                    T::of(s)
                })
                .collect();
            let p = g.constant(Tensor::new(teacher_lp.shape().to_vec(), p)?);
            let neg_h = g.constant(Tensor::new(vec![n], entropy_term)?);
            let lq = g.log_softmax(q, 1)?;
            let cross = g.mul(lq, p)?;
            let cross = g.sum_axis(cross, 1)?;
            g.sub(neg_h, cross)
        }
        DivergenceKind::ReverseKl => {
            let lp = g.constant(teacher_lp);
            let lq = g.log_softmax(q, 1)?;
            let sq = g.softmax(q, 1)?;
            let diff = g.sub(lq, lp)?;
            let w = g.mul(sq, diff)?;
            g.sum_axis(w, 1)
        }
        DivergenceKind::Tvd => {
            let p: Vec<T> = teacher_lp.data().iter().map(|x| x.exp()).collect();
            let p = g.constant(Tensor::new(teacher_lp.shape().to_vec(), p)?);
            let sq = g.softmax(q, 1)?;
            let diff = g.sub(sq, p)?;
            let a = g.abs(diff);
            let s = g.sum_axis(a, 1)?;
            Ok(g.scale(s, 0.5))
        }
    }
}

/// Per-row negative log-likelihood of `labels` under logits `q`, as `[n]`.
pub fn cross_entropy_graph<T: Real>(g: &mut Graph<T>, q: Var, labels: &[usize]) -> Result<Var> {
    let lq = g.log_softmax(q, 1)?;
    let picked = g.gather(lq, labels)?;
    Ok(g.scale(picked, -1.0))
}
