//! Pairwise logistic ranking loss over sign labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ScoreVector;

/// Antisymmetric `N × N` matrix of pairwise preferences in `{-1, 0, +1}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseLabels {
    n: usize,
    t: Vec<i8>,
}

impl PairwiseLabels {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.t[i * self.n + j]
    }

    pub fn rows(&self) -> Vec<Vec<i8>> {
        self.t.chunks(self.n.max(1)).map(<[i8]>::to_vec).collect()
    }

    /// Pairs `i < j` that are not tied.
    pub fn informative_pairs(&self) -> usize {
        (0..self.n)
            .flat_map(|i| (i + 1..self.n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.get(i, j) != 0)
            .count()
    }
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// `t[i][j] = sign(s_i - s_j)` for the teacher scores `s`.
pub fn pairwise_labels(teacher: &ScoreVector) -> PairwiseLabels {
    let s = teacher.as_slice();
    let n = s.len();
    let mut t = vec![0i8; n * n];
    for i in 0..n {
        for j in 0..n {
            t[i * n + j] = sign(s[i] - s[j]);
        }
    }
    PairwiseLabels { n, t }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Σ_{i<j} ln(1 + exp(-t_ij (y_i - y_j)))`; tied pairs contribute nothing.
pub fn ranknet_loss(predicted: &ScoreVector, labels: &PairwiseLabels) -> Result<f64> {
    ranknet_loss_grad(predicted.as_slice(), labels).map(|(v, _)| v)
}

/// Loss and its gradient with respect to the predicted scores.
pub fn ranknet_loss_grad(predicted: &[f64], labels: &PairwiseLabels) -> Result<(f64, Vec<f64>)> {
    let n = predicted.len();
    if n != labels.n {
        return Err(Error::Dimension {
            context: "ranknet predicted scores",
            expected: labels.n,
            actual: n,
        });
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let t = labels.get(i, j);
            if t == 0 {
                continue;
            }
            let t = f64::from(t);
            let z = -t * (predicted[i] - predicted[j]);
            loss += softplus(z);
            let dz = sigmoid(z);
            grad[i] -= t * dz;
            grad[j] += t * dz;
        }
    }
    Ok((loss, grad))
}
