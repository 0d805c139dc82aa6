//! External clustering metrics: accuracy under the best one-to-one label
//! mapping, normalized mutual information and macro F1.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TfecError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub acc: f64,
    pub nmi: f64,
    pub f1: f64,
}

/// Counts `table[pred][true]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contingency {
    pub table: Vec<Vec<usize>>,
    pub n: usize,
}

impl Contingency {
    pub fn new(predicted: &[usize], truth: &[usize]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(TfecError::Shape(format!(
                "{} predictions for {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        if predicted.is_empty() {
            return Err(TfecError::Shape("no labels to score".into()));
        }
        let kp = predicted.iter().max().unwrap() + 1;
        let kt = truth.iter().max().unwrap() + 1;
        let mut table = vec![vec![0usize; kt]; kp];
        for (&p, &t) in predicted.iter().zip(truth) {
            table[p][t] += 1;
        }
        Ok(Self {
            table,
            n: predicted.len(),
        })
    }

    pub fn pred_classes(&self) -> usize {
        self.table.len()
    }

    pub fn true_classes(&self) -> usize {
        self.table[0].len()
    }

    pub fn pred_totals(&self) -> Vec<usize> {
        self.table.iter().map(|row| row.iter().sum()).collect()
    }

    pub fn true_totals(&self) -> Vec<usize> {
        (0..self.true_classes())
            .map(|t| self.table.iter().map(|row| row[t]).sum())
            .collect()
    }
}

/// Maximum-weight assignment on a rectangular matrix. Returns, for every row,
/// the matched column or `None` when the row is left over.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = weights[0].len();
    let n = rows.max(cols);
    let max_w = weights
        .iter()
        .flatten()
        .copied()
        .fold(0.0f64, f64::max);
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            max_w - weights[i][j]
        } else {
            max_w
        }
    };

    // Shortest augmenting path formulation with potentials, 1-based.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = matched_row[j];
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

fn pair_f1(c: usize, pred_total: usize, true_total: usize) -> f64 {
    if c == 0 {
        0.0
    } else {
        2.0 * c as f64 / (pred_total + true_total) as f64
    }
}

/// Cluster-to-class mapping maximizing the number of matched samples; among
/// mappings with equal matches, the one with the highest summed per-class F1.
pub fn best_mapping(ct: &Contingency) -> Vec<Option<usize>> {
    let pt = ct.pred_totals();
    let tt = ct.true_totals();
    // per-class F1 sums to at most K, so one extra match always dominates
    let scale = (ct.pred_classes().max(ct.true_classes()) + 1) as f64;
    let weights: Vec<Vec<f64>> = ct
        .table
        .iter()
        .enumerate()
        .map(|(p, row)| {
            row.iter()
                .enumerate()
                .map(|(t, &c)| c as f64 * scale + pair_f1(c, pt[p], tt[t]))
                .collect()
        })
        .collect();
    max_weight_assignment(&weights)
}

pub fn clustering_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    let ct = Contingency::new(predicted, truth)?;
    Ok(acc_from(&ct, &best_mapping(&ct)))
}

fn acc_from(ct: &Contingency, mapping: &[Option<usize>]) -> f64 {
    let matched: usize = mapping
        .iter()
        .enumerate()
        .filter_map(|(p, t)| t.map(|t| ct.table[p][t]))
        .sum();
    matched as f64 / ct.n as f64
}

fn f1_from(ct: &Contingency, mapping: &[Option<usize>]) -> f64 {
    let pt = ct.pred_totals();
    let tt = ct.true_totals();
    let mut total = 0.0;
    for (p, t) in mapping.iter().enumerate() {
        if let Some(t) = *t {
            total += pair_f1(ct.table[p][t], pt[p], tt[t]);
        }
    }
    total / ct.true_classes() as f64
}

/// Macro F1 over the true classes after the best mapping; classes with no
/// mapped cluster score 0.
pub fn macro_f1(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    let ct = Contingency::new(predicted, truth)?;
    Ok(f1_from(&ct, &best_mapping(&ct)))
}

fn entropy(totals: &[usize], n: f64) -> f64 {
    totals
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `I(U;V) / sqrt(H(U) H(V))` with natural logarithms. When either partition
/// has zero entropy the score is 1 if both are single-cluster, else 0.
pub fn nmi(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    let ct = Contingency::new(predicted, truth)?;
    Ok(nmi_from(&ct))
}

fn nmi_from(ct: &Contingency) -> f64 {
    let n = ct.n as f64;
    let pt = ct.pred_totals();
    let tt = ct.true_totals();
    let hu = entropy(&pt, n);
    let hv = entropy(&tt, n);
    if hu == 0.0 || hv == 0.0 {
        return if hu == 0.0 && hv == 0.0 { 1.0 } else { 0.0 };
    }
    let mut mi = 0.0;
    for (p, row) in ct.table.iter().enumerate() {
        for (t, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let c = c as f64;
            mi += c / n * (n * c / (pt[p] as f64 * tt[t] as f64)).ln();
        }
    }
    (mi / (hu * hv).sqrt()).clamp(0.0, 1.0)
}

pub fn evaluate(predicted: &[usize], truth: &[usize]) -> Result<ClusterMetrics> {
    let ct = Contingency::new(predicted, truth)?;
    let mapping = best_mapping(&ct);
    Ok(ClusterMetrics {
        acc: acc_from(&ct, &mapping),
        nmi: nmi_from(&ct),
        f1: f1_from(&ct, &mapping),
    })
}
