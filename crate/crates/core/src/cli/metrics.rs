use serde::Serialize;

use crate::data::LabelMap;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub count: usize,
    pub seconds: f64,
    pub classes: Vec<ClassMetrics>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    /// Scores predicted against gold label indices.
    pub fn compute(gold: &[usize], predicted: &[usize], labels: &LabelMap, seconds: f64) -> Self {
        assert_eq!(gold.len(), predicted.len());
        let c = labels.num_classes();
        let mut tp = vec![0usize; c];
        let mut pred_count = vec![0usize; c];
        let mut gold_count = vec![0usize; c];
        for (&g, &p) in gold.iter().zip(predicted) {
            gold_count[g] += 1;
            pred_count[p] += 1;
            if g == p {
                tp[g] += 1;
            }
        }
        let classes: Vec<ClassMetrics> = (0..c)
            .map(|k| {
                let precision = ratio(tp[k], pred_count[k]);
                let recall = ratio(tp[k], gold_count[k]);
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics {
                    label: labels.label(k).to_string(),
                    precision,
                    recall,
                    f1,
                    support: gold_count[k],
                }
            })
            .collect();
        MetricsReport {
            accuracy: ratio(tp.iter().sum(), gold.len()),
            macro_f1: classes.iter().map(|m| m.f1).sum::<f64>() / c.max(1) as f64,
            count: gold.len(),
            seconds,
            classes,
        }
    }

    pub fn table(&self) -> String {
        let width = self.classes.iter().map(|m| m.label.len()).max().unwrap_or(5).max(5);
        let mut s = format!(
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}\n",
            "label", "precision", "recall", "f1", "support"
        );
        for m in &self.classes {
            s.push_str(&format!(
                "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}\n",
                m.label, m.precision, m.recall, m.f1, m.support
            ));
        }
        s.push_str(&format!(
            "accuracy {:.4}  macro_f1 {:.4}  count {}  seconds {:.3}\n",
            self.accuracy, self.macro_f1, self.count, self.seconds
        ));
        s
    }

    pub fn json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialise")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_metrics() {
        let labels = LabelMap::from_labels(["neg", "pos"]).unwrap();
        let r = MetricsReport::compute(&[0, 0, 1, 1], &[0, 1, 1, 1], &labels, 0.0);
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.classes[0].precision, 1.0);
        assert_eq!(r.classes[0].recall, 0.5);
        assert!((r.classes[1].precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.classes[1].f1 - 0.8).abs() < 1e-15);
        assert!(r.json().contains("\"accuracy\":0.75"));
    }
}
