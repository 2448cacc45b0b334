//! Prediction-quality metrics and activation-distribution reports.

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::{ModelShape, PromptTrace};

fn check_aligned(pred: usize, truth: usize) -> Result<()> {
    if pred != truth {
        return Err(Error::Dimension {
            expected: truth,
            got: pred,
        });
    }
    if truth == 0 {
        return Err(Error::config("metrics need at least one position"));
    }
    Ok(())
}

fn indicator(set: &[usize], num_experts: usize) -> Result<Vec<bool>> {
    let mut v = vec![false; num_experts];
    for &e in set {
        if e >= num_experts {
            return Err(Error::Range {
                what: "expert",
                index: e,
                bound: num_experts,
            });
        }
        v[e] = true;
    }
    Ok(v)
}

fn same_set(a: &[usize], b: &[usize]) -> bool {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    a.dedup();
    b.sort_unstable();
    b.dedup();
    a == b
}

/// Fraction of positions whose predicted set equals the true set exactly.
pub fn position_accuracy<P: AsRef<[usize]>, T: AsRef<[usize]>>(pred: &[P], truth: &[T]) -> Result<f64> {
    check_aligned(pred.len(), truth.len())?;
    let exact = pred
        .iter()
        .zip(truth)
        .filter(|(p, t)| same_set(p.as_ref(), t.as_ref()))
        .count();
    Ok(exact as f64 / truth.len() as f64)
}

/// Fraction of (position, expert) labels predicted correctly.
pub fn per_label_accuracy<P: AsRef<[usize]>, T: AsRef<[usize]>>(
    pred: &[P],
    truth: &[T],
    num_experts: usize,
) -> Result<f64> {
    check_aligned(pred.len(), truth.len())?;
    let mut correct = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        let p = indicator(p.as_ref(), num_experts)?;
        let t = indicator(t.as_ref(), num_experts)?;
        correct += p.iter().zip(&t).filter(|(a, b)| a == b).count();
    }
    Ok(correct as f64 / (truth.len() * num_experts) as f64)
}

/// Per-expert confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn is_absent(&self) -> bool {
        self.tp == 0 && self.fp == 0 && self.fn_ == 0
    }

    /// `TP / (TP + FP)`; with no predictions, 1 if the expert never occurs
    /// in the truth and 0 otherwise.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            if self.tp + self.fn_ == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            if self.tp + self.fp == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

pub fn confusion_per_expert<P: AsRef<[usize]>, T: AsRef<[usize]>>(
    pred: &[P],
    truth: &[T],
    num_experts: usize,
) -> Result<Vec<Confusion>> {
    check_aligned(pred.len(), truth.len())?;
    let mut c = vec![Confusion::default(); num_experts];
    for (p, t) in pred.iter().zip(truth) {
        let p = indicator(p.as_ref(), num_experts)?;
        let t = indicator(t.as_ref(), num_experts)?;
        for (e, (&pe, &te)) in p.iter().zip(&t).enumerate() {
            match (pe, te) {
                (true, true) => c[e].tp += 1,
                (true, false) => c[e].fp += 1,
                (false, true) => c[e].fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(c)
}

/// Macro-averaged F1 over experts, each treated as a binary classifier.
/// Experts that never occur in either predictions or truth are left out of
/// the average unless `include_absent` is set, in which case they score 1.
pub fn macro_f1<P: AsRef<[usize]>, T: AsRef<[usize]>>(
    pred: &[P],
    truth: &[T],
    num_experts: usize,
    include_absent: bool,
) -> Result<f64> {
    let confusion = confusion_per_expert(pred, truth, num_experts)?;
    let scores: Vec<f64> = confusion
        .iter()
        .filter(|c| include_absent || !c.is_absent())
        .map(Confusion::f1)
        .collect();
    if scores.is_empty() {
        return Ok(1.0);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Headline prediction-quality numbers for aligned prediction/truth sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionQuality {
    pub positions: usize,
    pub position_accuracy: f64,
    pub per_label_accuracy: f64,
    pub macro_f1: f64,
    pub macro_f1_all_experts: f64,
}

pub fn prediction_quality<P: AsRef<[usize]>, T: AsRef<[usize]>>(
    pred: &[P],
    truth: &[T],
    num_experts: usize,
) -> Result<PredictionQuality> {
    Ok(PredictionQuality {
        positions: truth.len(),
        position_accuracy: position_accuracy(pred, truth)?,
        per_label_accuracy: per_label_accuracy(pred, truth, num_experts)?,
        macro_f1: macro_f1(pred, truth, num_experts, false)?,
        macro_f1_all_experts: macro_f1(pred, truth, num_experts, true)?,
    })
}

/// Activation counts per layer and distinct-expert counts per prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationReport {
    pub shape: ModelShape,
    /// Row-major `L x E` activation counts over all prompts.
    pub layer_counts: Vec<u64>,
    /// `(prompt_id, layer_id, distinct experts activated)`.
    pub prompt_distinct: Vec<(u64, usize, usize)>,
    /// `(prompt_id, layer_id, expert_id, count)` for nonzero counts.
    pub prompt_counts: Vec<(u64, usize, usize, u64)>,
}

pub fn activation_report(traces: &[PromptTrace], shape: &ModelShape) -> Result<ActivationReport> {
    let (l, e) = (shape.num_layers, shape.num_experts);
    let mut layer_counts = vec![0u64; l * e];
    let mut prompt_distinct = Vec::new();
    let mut prompt_counts = Vec::new();
    let mut ordered: Vec<&PromptTrace> = traces.iter().collect();
    ordered.sort_by_key(|t| t.prompt_id);
    for trace in ordered {
        let mut local = vec![0u64; l * e];
        for r in trace.records() {
            shape.check_layer(r.layer_id)?;
            for &x in &r.expert_ids {
                shape.check_expert(x)?;
                local[r.layer_id * e + x] += 1;
            }
        }
        for layer in 0..l {
            let row = &local[layer * e..(layer + 1) * e];
            prompt_distinct.push((trace.prompt_id, layer, row.iter().filter(|&&c| c > 0).count()));
            for (x, &c) in row.iter().enumerate() {
                if c > 0 {
                    prompt_counts.push((trace.prompt_id, layer, x, c));
                }
            }
        }
        for (a, b) in layer_counts.iter_mut().zip(&local) {
            *a += b;
        }
    }
    Ok(ActivationReport {
        shape: *shape,
        layer_counts,
        prompt_distinct,
        prompt_counts,
    })
}

impl ActivationReport {
    pub fn layer(&self, layer_id: usize) -> &[u64] {
        let e = self.shape.num_experts;
        &self.layer_counts[layer_id * e..(layer_id + 1) * e]
    }

    /// `layer_id,expert_id,count` for every cell.
    pub fn write_layer_counts<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "layer_id,expert_id,count")?;
        for layer in 0..self.shape.num_layers {
            for (e, c) in self.layer(layer).iter().enumerate() {
                writeln!(out, "{layer},{e},{c}")?;
            }
        }
        Ok(())
    }

    pub fn write_prompt_distinct<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "prompt_id,layer_id,distinct_experts")?;
        for (p, l, d) in &self.prompt_distinct {
            writeln!(out, "{p},{l},{d}")?;
        }
        Ok(())
    }

    pub fn write_prompt_counts<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "prompt_id,layer_id,expert_id,count")?;
        for (p, l, e, c) in &self.prompt_counts {
            writeln!(out, "{p},{l},{e},{c}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TokenRecord;
    use crate::trace_io::{generate_synthetic, GeneratorConfig};

    #[test]
    fn position_accuracy_examples() {
        let a = vec![vec![1, 2], vec![3, 4]];
        assert_eq!(position_accuracy(&a, &a).unwrap(), 1.0);
        assert_eq!(position_accuracy(&[vec![1, 2]], &[vec![1, 3]]).unwrap(), 0.0);
        let pred = vec![vec![1, 2], vec![4, 3], vec![0]];
        let truth = vec![vec![2, 1], vec![3, 4], vec![5]];
        assert_eq!(position_accuracy(&pred, &truth).unwrap(), 2.0 / 3.0);
        assert!(position_accuracy(&pred, &truth[..2]).is_err());
    }

    #[test]
    fn macro_f1_hand_case() {
        // expert 0: TP=1, FP=1, FN=0; expert 1: TP=1, FP=0, FN=1
        let pred = vec![vec![0, 1], vec![0]];
        let truth = vec![vec![0, 1], vec![1]];
        let c = confusion_per_expert(&pred, &truth, 2).unwrap();
        assert_eq!(c[0], Confusion { tp: 1, fp: 1, fn_: 0 });
        assert_eq!(c[1], Confusion { tp: 1, fp: 0, fn_: 1 });
        assert_eq!(macro_f1(&pred, &truth, 2, false).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn macro_f1_edge_cases() {
        let truth = vec![vec![1, 2], vec![3]];
        assert_eq!(macro_f1(&truth, &truth, 8, false).unwrap(), 1.0);
        let empty: Vec<Vec<usize>> = vec![vec![], vec![]];
        assert_eq!(macro_f1(&empty, &truth, 8, false).unwrap(), 0.0);
        // absent experts only change the all-experts variant
        let pred = vec![vec![1], vec![3]];
        let excluded = macro_f1(&pred, &truth, 8, false).unwrap();
        let included = macro_f1(&pred, &truth, 8, true).unwrap();
        assert!((excluded - (1.0 + 0.0 + 1.0) / 3.0).abs() < 1e-15);
        assert!((included - (1.0 + 0.0 + 1.0 + 5.0) / 8.0).abs() < 1e-15);
        assert!(macro_f1(&[vec![8]], &[vec![0]], 8, false).is_err());
    }

    #[test]
    fn per_label_accuracy_counts_cells() {
        let pred = vec![vec![0, 1]];
        let truth = vec![vec![0, 2]];
        assert_eq!(per_label_accuracy(&pred, &truth, 4).unwrap(), 0.5);
    }

    #[test]
    fn activation_report_single_record() {
        let shape = ModelShape::new(2, 4, 2).unwrap();
        let t = PromptTrace::new(
            0,
            vec![
                TokenRecord::new(0, 0, 0, vec![1, 2], 0),
                TokenRecord::new(0, 0, 1, vec![0, 3], 0),
            ],
            &shape,
        )
        .unwrap();
        let rep = activation_report(&[t], &shape).unwrap();
        assert_eq!(rep.layer(0), &[0, 1, 1, 0]);
        assert_eq!(rep.prompt_distinct, vec![(0, 0, 2), (0, 1, 2)]);
    }

    #[test]
    fn activation_report_on_generated_traces() {
        let cfg = GeneratorConfig {
            num_prompts: 4,
            tokens_per_prompt: 30,
            hot_set_size: 6,
            skew: 1.0,
            ..Default::default()
        };
        let traces = generate_synthetic(&cfg).unwrap();
        let rep = activation_report(&traces, &cfg.shape).unwrap();
        assert!(rep.prompt_distinct.iter().all(|&(_, _, d)| d == 6));
        let tokens = (cfg.num_prompts * cfg.tokens_per_prompt) as u64;
        for layer in 0..cfg.shape.num_layers {
            assert_eq!(rep.layer(layer).iter().sum::<u64>(), 6 * tokens);
        }
    }
}
