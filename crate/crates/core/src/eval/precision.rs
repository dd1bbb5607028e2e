//! Precision@10 of few-shot weights against the uniform-weight baseline.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fewshot::{draw_negatives, energies_from, optimize_weights};
use crate::index::DistanceTable;
use crate::style::LayerWeights;
use crate::synth::mix64;

pub const TOP: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionCell {
    pub num_positives: usize,
    pub num_negatives: usize,
    pub mean_precision: f64,
    /// Mean over trials of trial precision / baseline precision.
    pub gain: f64,
    pub trial_seeds: Vec<u64>,
    pub trial_precisions: Vec<f64>,
    pub trial_gains: Vec<f64>,
    pub trial_weights: Vec<LayerWeights>,
    /// Trials with gain above, below and equal to 1.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Two-sided sign test over trials, ties dropped. A stand-in for an
    /// unnamed significance test, not a reproduction of it.
    pub sign_test_p: f64,
}

impl PrecisionCell {
    pub fn win_fraction(&self) -> f64 {
        self.wins as f64 / self.trial_gains.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub style: String,
    pub members: usize,
    pub trials: usize,
    pub seed: u64,
    /// Precision@10 with uniform weights, i.e. the (1 positive, 0 negatives) cell.
    pub baseline_precision: f64,
    pub cells: Vec<PrecisionCell>,
}

impl PrecisionReport {
    pub fn cell(&self, num_positives: usize, num_negatives: usize) -> Option<&PrecisionCell> {
        self.cells
            .iter()
            .find(|c| c.num_positives == num_positives && c.num_negatives == num_negatives)
    }
}

/// Two-sided exact binomial sign test.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(losses);
    // log C(n, i) accumulated incrementally
    let mut log_c = 0.0f64;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            log_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (log_c - n as f64 * std::f64::consts::LN_2).exp();
    }
    (2.0 * tail).min(1.0)
}

/// Mean over class members of the fraction of their 10 nearest other entries
/// that share the label.
fn class_precision(table: &DistanceTable, ids: &[String], labels: &[String], members: &[usize], w: &LayerWeights) -> f64 {
    let total: f64 = members
        .iter()
        .map(|&i| {
            let nn = table.neighbours(i, w, TOP, ids);
            nn.iter().filter(|&&j| labels[j] == labels[i]).count() as f64 / TOP as f64
        })
        .sum();
    total / members.len() as f64
}

fn trial_seed(seed: u64, pos: usize, neg: usize, trial: usize) -> u64 {
    mix64(seed ^ mix64(((pos as u64) << 40) ^ ((neg as u64) << 20) ^ trial as u64))
}

/// Few-shot Precision@10 for one style over a grid of (positives, negatives) cells.
///
/// Each trial draws positives from the style and negatives from everything
/// else that is not a positive, fits weights, and averages the precision of
/// every style member's top-10 (self excluded).
pub fn precision_at_10(
    table: &DistanceTable,
    ids: &[String],
    labels: &[String],
    style: &str,
    cells: &[(usize, usize)],
    trials: usize,
    seed: u64,
) -> Result<PrecisionReport> {
    let n = table.len();
    if ids.len() != n || labels.len() != n {
        return Err(Error::Eval("ids and labels must match the distance table".into()));
    }
    if n < TOP + 1 {
        return Err(Error::Eval(format!("corpus of {n} is too small for top-{TOP}")));
    }
    let members: Vec<usize> = (0..n).filter(|&i| labels[i] == style).collect();
    let nl = table.num_layers();
    let mut cache: HashMap<Vec<u64>, f64> = HashMap::new();
    let mut precision_for = |w: &LayerWeights| -> f64 {
        let key: Vec<u64> = w.as_slice().iter().map(|v| v.to_bits()).collect();
        *cache
            .entry(key)
            .or_insert_with(|| class_precision(table, ids, labels, &members, w))
    };
    let baseline = precision_for(&LayerWeights::uniform(nl));
    if baseline == 0.0 {
        return Err(Error::Eval(format!("baseline precision of {style:?} is zero")));
    }
    let mut out = Vec::new();
    for &(np, nn) in cells {
        if np == 0 || members.len() < np + 1 {
            return Err(Error::Eval(format!(
                "style {style:?} has {} members; {np} positives need at least {}",
                members.len(),
                np + 1
            )));
        }
        let mut cell = PrecisionCell {
            num_positives: np,
            num_negatives: nn,
            mean_precision: 0.0,
            gain: 0.0,
            trial_seeds: Vec::new(),
            trial_precisions: Vec::new(),
            trial_gains: Vec::new(),
            trial_weights: Vec::new(),
            wins: 0,
            losses: 0,
            ties: 0,
            sign_test_p: 1.0,
        };
        for t in 0..trials {
            let s = trial_seed(seed, np, nn, t);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let pos: Vec<usize> = sample(&mut rng, members.len(), np).into_iter().map(|k| members[k]).collect();
            let neg = draw_negatives(n, &pos, &[], nn, mix64(s))?;
            let e = energies_from(&pos, &neg, nl, |i, j| Ok((0..nl).map(|l| table.layer(l, i, j)).collect()))?;
            let w = optimize_weights(&e.energies)?;
            let p = precision_for(&w);
            let gain = p / baseline;
            match gain.partial_cmp(&1.0) {
                Some(std::cmp::Ordering::Greater) => cell.wins += 1,
                Some(std::cmp::Ordering::Less) => cell.losses += 1,
                _ => cell.ties += 1,
            }
            cell.trial_seeds.push(s);
            cell.trial_precisions.push(p);
            cell.trial_gains.push(gain);
            cell.trial_weights.push(w);
        }
        let k = trials.max(1) as f64;
        cell.mean_precision = cell.trial_precisions.iter().sum::<f64>() / k;
        cell.gain = cell.trial_gains.iter().sum::<f64>() / k;
        cell.sign_test_p = sign_test(cell.wins, cell.losses);
        out.push(cell);
    }
    Ok(PrecisionReport {
        style: style.to_string(),
        members: members.len(),
        trials,
        seed,
        baseline_precision: baseline,
        cells: out,
    })
}
