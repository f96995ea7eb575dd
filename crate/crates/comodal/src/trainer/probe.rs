//! Test-only least-squares probe: pairwise ridge discriminants with majority
//! voting, fit on flattened views. An independent oracle for dataset
//! difficulty (how much label information a view carries) that involves
//! neither the model nor the autodiff stack.

use crate::model::Labels;
use crate::trainer::data::Split;

pub(crate) struct ProbeInput {
    /// Flattened features per example.
    pub xs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl ProbeInput {
    fn labels_of(split: &Split) -> Vec<usize> {
        match &split.labels {
            Labels::Class(v) => v.clone(),
            Labels::Value(_) => panic!("probe oracle is for classification"),
        }
    }

    /// One modality's flattened view.
    pub fn single(split: &Split, modality: usize) -> ProbeInput {
        let xs = split.views[modality].iter().map(|t| t.data().to_vec()).collect();
        ProbeInput { xs, labels: Self::labels_of(split) }
    }

    /// All modality views concatenated per example.
    pub fn fused(split: &Split) -> ProbeInput {
        let n = split.len();
        let xs = (0..n)
            .map(|e| {
                split
                    .views
                    .iter()
                    .flat_map(|vs| vs[e].data().iter().copied())
                    .collect()
            })
            .collect();
        ProbeInput { xs, labels: Self::labels_of(split) }
    }
}

/// Solve the symmetric system `a w = b` (multiple right-hand sides) by
/// Gauss-Jordan elimination with partial pivoting. `a` is `n x n` row-major,
/// `b` is `n x c`.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize, c: usize) -> Vec<f64> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            for j in 0..c {
                b.swap(col * c + j, pivot * c + j);
            }
        }
        let diag = a[col * n + col];
        assert!(diag.abs() > 1e-12, "ridge term keeps the system well-posed");
        for j in 0..n {
            a[col * n + j] /= diag;
        }
        for j in 0..c {
            b[col * c + j] /= diag;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = a[row * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                a[row * n + j] -= f * a[col * n + j];
            }
            for j in 0..c {
                b[row * c + j] -= f * b[col * c + j];
            }
        }
    }
    b
}

/// Fit one ridge least-squares discriminant per class pair (targets +1/-1 on
/// that pair's training examples) and return majority-vote argmax accuracy
/// on `eval`. Pairwise fitting avoids the masking that a one-vs-all
/// least-squares fit suffers with three or more classes; vote ties break to
/// the lower class index.
pub(crate) fn probe_accuracy(train: &ProbeInput, eval: &ProbeInput, classes: usize) -> f64 {
    let d = train.xs[0].len() + 1; // bias column
    let feat = |x: &[f64]| {
        let mut f = x.to_vec();
        f.push(1.0);
        f
    };

    let mut votes = vec![0usize; eval.xs.len() * classes];
    for i in 0..classes {
        for j in (i + 1)..classes {
            // normal equations over the pair's examples, small ridge
            let mut xtx = vec![0.0; d * d];
            let mut xty = vec![0.0; d];
            let mut n_pair = 0usize;
            for (x, &y) in train.xs.iter().zip(&train.labels) {
                if y != i && y != j {
                    continue;
                }
                n_pair += 1;
                let target = if y == i { 1.0 } else { -1.0 };
                let f = feat(x);
                for a in 0..d {
                    for b in 0..d {
                        xtx[a * d + b] += f[a] * f[b];
                    }
                    xty[a] += f[a] * target;
                }
            }
            let ridge = 1e-3 * n_pair.max(1) as f64 / d as f64;
            for a in 0..d {
                xtx[a * d + a] += ridge;
            }
            let w = solve(xtx, xty, d, 1);
            for (e, x) in eval.xs.iter().enumerate() {
                let f = feat(x);
                let score: f64 = (0..d).map(|a| f[a] * w[a]).sum();
                let winner = if score > 0.0 { i } else { j };
                votes[e * classes + winner] += 1;
            }
        }
    }

    let mut correct = 0usize;
    for (e, &y) in eval.labels.iter().enumerate() {
        let row = &votes[e * classes..(e + 1) * classes];
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(c, _)| c)
            .expect("at least one class");
        if best == y {
            correct += 1;
        }
    }
    correct as f64 / eval.xs.len() as f64
}
