//! Evaluation: per-level accuracy and macro-F1 over the full defined label
//! set, multi-level consistency rates, label-wise F1 tables, and the JSON
//! report document.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;

/// Fraction of instances whose prediction at 1-based level `m` is correct.
pub fn accuracy(preds: &[Vec<usize>], golds: &[Vec<usize>], m: usize) -> Result<f64> {
    check_paths(preds, golds, m)?;
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| p[m - 1] == g[m - 1])
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Per-label precision/recall/F1 at 1-based level `m`, zero-division giving 0.
pub fn labelwise_f1(
    preds: &[Vec<usize>],
    golds: &[Vec<usize>],
    m: usize,
    num_labels: usize,
) -> Result<Vec<LabelScore>> {
    check_paths(preds, golds, m)?;
    let mut tp = vec![0usize; num_labels];
    let mut fp = vec![0usize; num_labels];
    let mut fn_ = vec![0usize; num_labels];
    for (p, g) in preds.iter().zip(golds) {
        let (pi, gi) = (p[m - 1], g[m - 1]);
        if pi >= num_labels || gi >= num_labels {
            return Err(Error::Evaluation(format!(
                "label index out of range at level {m}: pred {pi}, gold {gi}, |C| {num_labels}"
            )));
        }
        if pi == gi {
            tp[pi] += 1;
        } else {
            fp[pi] += 1;
            fn_[gi] += 1;
        }
    }
    Ok((0..num_labels)
        .map(|l| {
            let precision = ratio(tp[l], tp[l] + fp[l]);
            let recall = ratio(tp[l], tp[l] + fn_[l]);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            LabelScore { label_index: l, precision, recall, f1 }
        })
        .collect())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Unweighted mean of per-label F1 over the full label set `C^m`; labels with
/// no predictions and no golds contribute zero.
pub fn macro_f1(
    preds: &[Vec<usize>],
    golds: &[Vec<usize>],
    m: usize,
    num_labels: usize,
) -> Result<f64> {
    let table = labelwise_f1(preds, golds, m, num_labels)?;
    Ok(table.iter().map(|s| s.f1).sum::<f64>() / num_labels as f64)
}

/// Macro-F1 averaged only over labels present in the gold paths (the
/// alternative convention, reported alongside the default).
pub fn macro_f1_gold_present(
    preds: &[Vec<usize>],
    golds: &[Vec<usize>],
    m: usize,
    num_labels: usize,
) -> Result<f64> {
    let table = labelwise_f1(preds, golds, m, num_labels)?;
    let present: Vec<&LabelScore> = table
        .iter()
        .filter(|s| golds.iter().any(|g| g[m - 1] == s.label_index))
        .collect();
    if present.is_empty() {
        return Ok(0.0);
    }
    Ok(present.iter().map(|s| s.f1).sum::<f64>() / present.len() as f64)
}

/// Fraction of instances correct at both of the first two levels.
pub fn top_sec(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<f64> {
    correct_through(preds, golds, 2)
}

/// Fraction of instances correct at every level.
pub fn top_sec_con(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<f64> {
    let levels = golds.first().map(|g| g.len()).unwrap_or(0);
    if levels < 3 {
        return Err(Error::Evaluation(format!(
            "full-path consistency needs at least 3 levels, got {levels}"
        )));
    }
    correct_through(preds, golds, levels)
}

fn correct_through(preds: &[Vec<usize>], golds: &[Vec<usize>], through: usize) -> Result<f64> {
    check_paths(preds, golds, through)?;
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| (0..through).all(|m| p[m] == g[m]))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

fn check_paths(preds: &[Vec<usize>], golds: &[Vec<usize>], m: usize) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Evaluation("empty prediction set".to_string()));
    }
    if preds.len() != golds.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions vs {} golds",
            preds.len(),
            golds.len()
        )));
    }
    if m == 0 {
        return Err(Error::Evaluation("level must be >= 1".to_string()));
    }
    for path in preds.iter().chain(golds) {
        if path.len() < m {
            return Err(Error::Evaluation(format!(
                "path of length {} has no level {m}",
                path.len()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabelScore {
    pub label_index: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NamedLabelScore {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LevelMetrics {
    pub level: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_f1_gold_present: f64,
}

/// The full evaluation report for one run (or a seed-aggregated family).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub scheme: String,
    pub instances: usize,
    pub levels: Vec<LevelMetrics>,
    pub mean_accuracy: f64,
    /// Correct at both of the first two levels (absent for 1-level tasks).
    pub top_sec: Option<f64>,
    /// Correct at every level (absent below 3 levels).
    pub top_sec_con: Option<f64>,
    pub path_validity_rate: f64,
    /// Per-label scores at the deepest level.
    pub labelwise: Vec<NamedLabelScore>,
    /// Six-decimal display strings for the headline numbers; raw values stay
    /// in the fields above.
    pub display: Vec<(String, String)>,
    pub seed: u64,
    pub config_echo: serde_json::Value,
}

/// Compute the full report from aligned prediction/gold paths.
pub fn build_report(
    scheme: &str,
    preds: &[Vec<usize>],
    golds: &[Vec<usize>],
    validity: &[bool],
    hierarchy: &LabelHierarchy,
    seed: u64,
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    let m_levels = hierarchy.num_levels();
    let mut levels = Vec::with_capacity(m_levels);
    for m in 1..=m_levels {
        let size = hierarchy.level_size(m);
        levels.push(LevelMetrics {
            level: m,
            accuracy: accuracy(preds, golds, m)?,
            macro_f1: macro_f1(preds, golds, m, size)?,
            macro_f1_gold_present: macro_f1_gold_present(preds, golds, m, size)?,
        });
    }
    let mean_accuracy =
        levels.iter().map(|l| l.accuracy).sum::<f64>() / m_levels as f64;
    let top_sec_value = if m_levels >= 2 { Some(top_sec(preds, golds)?) } else { None };
    let top_sec_con_value =
        if m_levels >= 3 { Some(top_sec_con(preds, golds)?) } else { None };
    let path_validity_rate =
        validity.iter().filter(|&&v| v).count() as f64 / validity.len().max(1) as f64;

    let deepest = m_levels;
    let labelwise = labelwise_f1(preds, golds, deepest, hierarchy.level_size(deepest))?
        .into_iter()
        .map(|s| NamedLabelScore {
            label: hierarchy.label_name(deepest, s.label_index).to_string(),
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
        })
        .collect();

    let mut display = Vec::new();
    for l in &levels {
        display.push((format!("level{}_accuracy", l.level), format!("{:.6}", l.accuracy)));
        display.push((format!("level{}_macro_f1", l.level), format!("{:.6}", l.macro_f1)));
    }
    display.push(("mean_accuracy".to_string(), format!("{mean_accuracy:.6}")));
    if let Some(v) = top_sec_value {
        display.push(("top_sec".to_string(), format!("{v:.6}")));
    }
    if let Some(v) = top_sec_con_value {
        display.push(("top_sec_con".to_string(), format!("{v:.6}")));
    }
    display.push(("path_validity_rate".to_string(), format!("{path_validity_rate:.6}")));

    Ok(EvalReport {
        scheme: scheme.to_string(),
        instances: preds.len(),
        levels,
        mean_accuracy,
        top_sec: top_sec_value,
        top_sec_con: top_sec_con_value,
        path_validity_rate,
        labelwise,
        display,
        seed,
        config_echo,
    })
}

pub fn write_report(report: &EvalReport, path: &std::path::Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_report(path: &std::path::Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
