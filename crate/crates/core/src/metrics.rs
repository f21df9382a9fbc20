//! Correctness ratios for sender identification.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::TruthPair;

/// What the pipeline concluded about one sender at one tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenderPrediction {
    /// Identified as inside the front image.
    pub inside: bool,
    /// Front box the sender was paired with.
    pub paired: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TickPredictions {
    pub t: u64,
    pub senders: BTreeMap<u64, SenderPrediction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cr_ic: f64,
    pub cr_inside: f64,
    pub cr_outside: f64,
    pub cr_total: f64,
    pub p_correctly: u64,
    pub p_inside: u64,
    pub p_outside: u64,
    pub n_inside: u64,
    pub n_outside: u64,
}

/// `num / den`, or 0 when there is nothing to count.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_counts(p_correctly: u64, p_inside: u64, p_outside: u64, n_inside: u64, n_outside: u64) -> Self {
        Self {
            cr_ic: ratio(p_correctly, n_inside),
            cr_inside: ratio(p_inside, n_inside),
            cr_outside: ratio(p_outside, n_outside),
            cr_total: ratio(p_correctly + p_outside, n_inside + n_outside),
            p_correctly,
            p_inside,
            p_outside,
            n_inside,
            n_outside,
        }
    }

    pub fn senders(&self) -> u64 {
        self.n_inside + self.n_outside
    }
}

/// Scores predictions against ground truth. Both streams must cover the
/// same ticks and, per tick, the same senders.
pub fn compute_cr(
    predictions: &[TickPredictions],
    truth: &[(u64, &BTreeMap<u64, TruthPair>)],
) -> Result<MetricsReport> {
    if predictions.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} prediction ticks against {} truth ticks",
            predictions.len(),
            truth.len()
        )));
    }
    let (mut pc, mut pi, mut po, mut ni, mut no) = (0, 0, 0, 0, 0);
    for (pred, (t, tp)) in predictions.iter().zip(truth) {
        if pred.t != *t {
            return Err(Error::Dimension(format!("prediction tick {} aligned with truth tick {t}", pred.t)));
        }
        if pred.senders.len() != tp.len() || !pred.senders.keys().eq(tp.keys()) {
            return Err(Error::Dimension(format!("tick {t}: predicted senders differ from truth senders")));
        }
        for (id, truth) in tp.iter() {
            let p = pred.senders[id];
            if p.paired.is_some() && !p.inside {
                return Err(Error::Config(format!("tick {t}: sender {id} paired but not identified as inside")));
            }
            match truth {
                TruthPair::Outside => {
                    no += 1;
                    po += u64::from(!p.inside);
                }
                inside => {
                    ni += 1;
                    pi += u64::from(p.inside);
                    if let TruthPair::Box(b) = inside {
                        pc += u64::from(p.paired == Some(*b));
                    }
                }
            }
        }
    }
    Ok(MetricsReport::from_counts(pc, pi, po, ni, no))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth() -> BTreeMap<u64, TruthPair> {
        BTreeMap::from([
            (1, TruthPair::Box(0)),
            (2, TruthPair::Box(1)),
            (3, TruthPair::Undetected),
            (4, TruthPair::Outside),
            (5, TruthPair::Outside),
        ])
    }

    fn preds(f: impl Fn(u64, TruthPair) -> SenderPrediction) -> TickPredictions {
        TickPredictions { t: 0, senders: truth().into_iter().map(|(id, t)| (id, f(id, t))).collect() }
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let tr = truth();
        let p = preds(|_, t| SenderPrediction {
            inside: t.is_inside(),
            paired: match t {
                TruthPair::Box(b) => Some(b),
                _ => None,
            },
        });
        let r = compute_cr(&[p], &[(0, &tr)]).unwrap();
        assert_eq!((r.cr_ic, r.cr_inside, r.cr_outside, r.cr_total), (2.0 / 3.0, 1.0, 1.0, 0.8));
        // Undetected senders can never be paired; with none present all ratios reach 1.
        let mut tr2 = tr.clone();
        tr2.remove(&3);
        let mut p2 = preds(|_, t| SenderPrediction {
            inside: t.is_inside(),
            paired: if let TruthPair::Box(b) = t { Some(b) } else { None },
        });
        p2.senders.remove(&3);
        let r = compute_cr(&[p2], &[(0, &tr2)]).unwrap();
        assert_eq!((r.cr_ic, r.cr_inside, r.cr_outside, r.cr_total), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn all_outside_predictor() {
        let tr = truth();
        let p = preds(|_, _| SenderPrediction { inside: false, paired: None });
        let r = compute_cr(&[p], &[(0, &tr)]).unwrap();
        assert_eq!(r.cr_inside, 0.0);
        assert_eq!(r.cr_outside, 1.0);
        assert_eq!(r.senders(), 5);
    }

    #[test]
    fn counts_to_ratios() {
        let r = MetricsReport::from_counts(3, 4, 0, 4, 0);
        assert_eq!(r.cr_ic, 0.75);
    }

    #[test]
    fn misaligned_streams_are_rejected() {
        let tr = truth();
        let p = preds(|_, _| SenderPrediction { inside: false, paired: None });
        assert!(compute_cr(std::slice::from_ref(&p), &[]).is_err());
        assert!(compute_cr(std::slice::from_ref(&p), &[(1, &tr)]).is_err());
        let mut short = p;
        short.senders.remove(&1);
        assert!(compute_cr(&[short], &[(0, &tr)]).is_err());
    }
}
