//! Object hallucination rates over caption records and binary classification scores.

use std::collections::BTreeSet;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{IkodError, Result};

/// Objects mentioned in one caption and the objects actually present.
/// Labels compare by exact string equality.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub mentioned: BTreeSet<String>,
    pub ground_truth: BTreeSet<String>,
}

impl CaptionRecord {
    pub fn new<I, J, S, T>(mentioned: I, ground_truth: J) -> Self
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: Into<String>,
        T: Into<String>,
    {
        Self {
            mentioned: mentioned.into_iter().map(Into::into).collect(),
            ground_truth: ground_truth.into_iter().map(Into::into).collect(),
        }
    }

    pub fn hallucinated(&self) -> impl Iterator<Item = &String> {
        self.mentioned.difference(&self.ground_truth)
    }
}

/// One record per non-blank line.
pub fn read_caption_records<R: BufRead>(input: R) -> Result<Vec<CaptionRecord>> {
    let mut records = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    pub chair_s: f64,
    pub chair_i: f64,
}

pub fn chair_scores(records: &[CaptionRecord]) -> Result<ChairScores> {
    if records.is_empty() {
        return Err(IkodError::Empty("caption records"));
    }
    let mut mentioned = 0usize;
    let mut hallucinated = 0usize;
    let mut bad_records = 0usize;
    for record in records {
        let h = record.hallucinated().count();
        mentioned += record.mentioned.len();
        hallucinated += h;
        bad_records += usize::from(h > 0);
    }
    if mentioned == 0 {
        return Err(IkodError::NoMentions);
    }
    Ok(ChairScores {
        chair_s: bad_records as f64 / records.len() as f64,
        chair_i: hallucinated as f64 / mentioned as f64,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryOutcomes {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision and recall are 0 when their denominator is 0, and so is F1
/// when both are.
pub fn binary_metrics(o: &BinaryOutcomes) -> Result<BinaryMetrics> {
    let total = o.tp + o.fp + o.fn_ + o.tn;
    if total == 0 {
        return Err(IkodError::Empty("binary outcomes"));
    }
    let precision = ratio(o.tp, o.tp + o.fp);
    let recall = ratio(o.tp, o.tp + o.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(BinaryMetrics {
        accuracy: ratio(o.tp + o.tn, total),
        precision,
        recall,
        f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chair_hand_case() {
        let records = [
            CaptionRecord::new(["dog", "frisbee", "tree"], ["dog", "frisbee"]),
            CaptionRecord::new(["cat"], ["cat"]),
        ];
        let s = chair_scores(&records).unwrap();
        assert_eq!(s.chair_i, 0.25);
        assert_eq!(s.chair_s, 0.5);
    }

    #[test]
    fn chair_extremes() {
        let clean = [CaptionRecord::new(["a", "b"], ["a", "b", "c"])];
        assert_eq!(
            chair_scores(&clean).unwrap(),
            ChairScores {
                chair_s: 0.0,
                chair_i: 0.0
            }
        );
        let dirty = [
            CaptionRecord::new(["x"], ["a"]),
            CaptionRecord::new(["y", "z"], Vec::<&str>::new()),
        ];
        assert_eq!(
            chair_scores(&dirty).unwrap(),
            ChairScores {
                chair_s: 1.0,
                chair_i: 1.0
            }
        );
    }

    #[test]
    fn chair_errors() {
        assert!(matches!(chair_scores(&[]), Err(IkodError::Empty(_))));
        let silent = [CaptionRecord::new(Vec::<&str>::new(), ["a"])];
        assert!(matches!(chair_scores(&silent), Err(IkodError::NoMentions)));
    }

    #[test]
    fn jsonl_records() {
        let text = "{\"mentioned\":[\"dog\",\"tree\"],\"ground_truth\":[\"dog\"]}\n\n{\"mentioned\":[],\"ground_truth\":[]}\n";
        let records = read_caption_records(text.as_bytes()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].hallucinated().collect::<Vec<_>>(), ["tree"]);
        assert!(read_caption_records("{bad".as_bytes()).is_err());
    }

    #[test]
    fn binary_hand_cases() {
        let m = binary_metrics(&BinaryOutcomes {
            tp: 1,
            fp: 0,
            fn_: 0,
            tn: 1,
        })
        .unwrap();
        assert_eq!(
            (m.accuracy, m.precision, m.recall, m.f1),
            (1.0, 1.0, 1.0, 1.0)
        );

        let m = binary_metrics(&BinaryOutcomes {
            tp: 3,
            fp: 1,
            fn_: 2,
            tn: 4,
        })
        .unwrap();
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.6);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.accuracy, 0.7);

        let m = binary_metrics(&BinaryOutcomes {
            tp: 0,
            fp: 0,
            fn_: 3,
            tn: 1,
        })
        .unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(binary_metrics(&BinaryOutcomes::default()).is_err());
    }

    #[test]
    fn outcome_json_uses_fn() {
        let o: BinaryOutcomes = serde_json::from_str(r#"{"tp":3,"fp":1,"fn":2,"tn":4}"#).unwrap();
        assert_eq!(o.fn_, 2);
        assert!(serde_json::to_string(&o).unwrap().contains("\"fn\":2"));
    }
}
