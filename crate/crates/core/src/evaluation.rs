//! Accuracy and macro-F1 for joint IND + OOD classification, after mapping
//! predicted OOD clusters onto gold OOD classes by maximum-agreement matching.

use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, CostMatrix};
use crate::error::{validation, Result};

/// Which predicted classes are remapped before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MappingScope {
    /// IND ids are taken as-is; only the M OOD ids are matched.
    #[default]
    Ood,
    /// All N+M predicted ids are matched (for models that cluster IND too).
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ind_acc: f64,
    pub ind_f1: f64,
    pub ood_acc: f64,
    pub ood_f1: f64,
    pub all_acc: f64,
    pub all_f1: f64,
    pub n_ind_samples: usize,
    pub n_ood_samples: usize,
    pub scope: MappingScope,
    /// `mapping[p]` is the gold class assigned to predicted class `p`.
    pub mapping: Vec<usize>,
    /// Rows gold, columns mapped prediction.
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    /// `(name, value)` for the headline metrics, in report order.
    pub fn headline(&self) -> [(&'static str, f64); 5] {
        [
            ("ind_acc", self.ind_acc),
            ("ood_acc", self.ood_acc),
            ("ood_f1", self.ood_f1),
            ("all_acc", self.all_acc),
            ("all_f1", self.all_f1),
        ]
    }

    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len();
        let mut out = String::from("gold");
        for c in 0..k {
            out.push_str(&format!(",pred_{c}"));
        }
        out.push('\n');
        for (g, row) in self.confusion.iter().enumerate() {
            out.push_str(&g.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn evaluate_gid(predictions: &[usize], gold: &[usize], n_ind: usize, n_ood: usize) -> Result<MetricsReport> {
    evaluate_gid_with(predictions, gold, n_ind, n_ood, MappingScope::Ood)
}

pub fn evaluate_gid_with(
    predictions: &[usize],
    gold: &[usize],
    n_ind: usize,
    n_ood: usize,
    scope: MappingScope,
) -> Result<MetricsReport> {
    if predictions.len() != gold.len() {
        return Err(validation!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        ));
    }
    let k = n_ind + n_ood;
    if let Some(bad) = predictions.iter().chain(gold).find(|&&c| c >= k) {
        return Err(validation!("class id {bad} outside [0, {k})"));
    }

    let mapping = match scope {
        MappingScope::Ood => {
            let mut mapping: Vec<usize> = (0..k).collect();
            // contingency over predicted-OOD x gold-OOD; an unused predicted
            // cluster is simply a zero row
            let mut counts = vec![0u64; n_ood * n_ood];
            for (&p, &g) in predictions.iter().zip(gold) {
                if p >= n_ind && g >= n_ind {
                    counts[(p - n_ind) * n_ood + (g - n_ind)] += 1;
                }
            }
            let pred_n = class_counts(predictions, k);
            let gold_n = class_counts(gold, k);
            let m = match_clusters(n_ood, &counts, &pred_n[n_ind..], &gold_n[n_ind..])?;
            for (p, &g) in m.iter().enumerate() {
                mapping[n_ind + p] = n_ind + g;
            }
            mapping
        }
        MappingScope::All => {
            let mut counts = vec![0u64; k * k];
            for (&p, &g) in predictions.iter().zip(gold) {
                counts[p * k + g] += 1;
            }
            match_clusters(k, &counts, &class_counts(predictions, k), &class_counts(gold, k))?
        }
    };

    let mut confusion = vec![vec![0u64; k]; k];
    for (&p, &g) in predictions.iter().zip(gold) {
        confusion[g][mapping[p]] += 1;
    }

    let (mut ind_n, mut ind_hit, mut ood_n, mut ood_hit) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in predictions.iter().zip(gold) {
        let hit = (mapping[p] == g) as usize;
        if g < n_ind {
            ind_n += 1;
            ind_hit += hit;
        } else {
            ood_n += 1;
            ood_hit += hit;
        }
    }
    let pct = |hit: usize, n: usize| if n == 0 { 0.0 } else { 100.0 * hit as f64 / n as f64 };

    let f1: Vec<f64> = (0..k)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let gold_n: u64 = confusion[c].iter().sum();
            let pred_n: u64 = confusion.iter().map(|r| r[c]).sum();
            if gold_n == 0 {
                log::warn!("class {c} has no gold test samples; its F1 counts as 0");
            }
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (gold_n as f64 + pred_n as f64)
            }
        })
        .collect();
    let macro_f1 = |r: std::ops::Range<usize>| {
        if r.is_empty() {
            0.0
        } else {
            let len = r.len() as f64;
            100.0 * f1[r].iter().sum::<f64>() / len
        }
    };

    Ok(MetricsReport {
        ind_acc: pct(ind_hit, ind_n),
        ind_f1: macro_f1(0..n_ind),
        ood_acc: pct(ood_hit, ood_n),
        ood_f1: macro_f1(n_ind..k),
        all_acc: pct(ind_hit + ood_hit, ind_n + ood_n),
        all_f1: macro_f1(0..k),
        n_ind_samples: ind_n,
        n_ood_samples: ood_n,
        scope,
        mapping,
        confusion,
    })
}

fn class_counts(ids: &[usize], k: usize) -> Vec<u64> {
    let mut c = vec![0u64; k];
    for &i in ids {
        c[i] += 1;
    }
    c
}

/// Maximum-agreement matching of predicted clusters (rows) to gold classes
/// (columns). Among matchings with equal agreement, the one with the larger
/// sum of per-class F1 wins; each matched pair fixes that class's F1, so this
/// is still a linear assignment. The F1 term is scaled below one count, so it
/// only ever separates ties, and it makes every headline metric independent of
/// how predicted clusters happen to be numbered.
fn match_clusters(size: usize, counts: &[u64], pred_n: &[u64], gold_n: &[u64]) -> Result<Vec<usize>> {
    let weight = 0.5 / (size as f64 + 1.0);
    let mut cost = Vec::with_capacity(size * size);
    for p in 0..size {
        for g in 0..size {
            let tp = counts[p * size + g] as f64;
            let denom = (pred_n[p] + gold_n[g]) as f64;
            let f1 = if tp > 0.0 { 2.0 * tp / denom } else { 0.0 };
            cost.push(-(tp + weight * f1));
        }
    }
    Ok(hungarian(&CostMatrix::from_flat(size, cost)?).perm)
}
