//! Mapping decisions: score and confidence tables and the greedy
//! maximum-confidence pairing between senders and detected boxes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{LabelSource, PairingSet};
use crate::mdfnn::ModelOutput;

/// Scores at or below this are treated as zero.
pub const SCORE_EPS: f64 = 1e-9;
pub const DIAGONAL_LEN: f64 = std::f64::consts::SQRT_2;
/// Largest `min(rows, cols)` the exhaustive oracle accepts.
pub const ORACLE_LIMIT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MappingConfig {
    pub omega: f64,
    pub threshold_inside: f64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self { omega: 0.5, threshold_inside: 0.5 }
    }
}

/// Orders each axis so `[x_tl, y_tl, x_br, y_br]` holds. Network estimates
/// carry no ordering guarantee.
pub fn ordered_box(b: [f64; 4]) -> [f64; 4] {
    [b[0].min(b[2]), b[1].min(b[3]), b[0].max(b[2]), b[1].max(b[3])]
}

pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn center_distance(a: [f64; 4], b: [f64; 4]) -> f64 {
    let dx = (a[0] + a[2]) / 2.0 - (b[0] + b[2]) / 2.0;
    let dy = (a[1] + a[3]) / 2.0 - (b[1] + b[3]) / 2.0;
    dx.hypot(dy)
}

pub fn score_bbx(e: [f64; 4], v: [f64; 4], omega: f64) -> f64 {
    let (e, v) = (ordered_box(e), ordered_box(v));
    (1.0 - omega) * iou(e, v) + omega * (DIAGONAL_LEN - center_distance(e, v)) / DIAGONAL_LEN
}

/// Model estimates for one tick.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EstimateSet {
    pub entries: Vec<(u64, ModelOutput)>,
}

impl EstimateSet {
    pub fn new(entries: Vec<(u64, ModelOutput)>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for (id, _) in &entries {
            if !seen.insert(*id) {
                return Err(Error::Config(format!("duplicate estimate for message {id}")));
            }
        }
        Ok(Self { entries })
    }

    /// Entries whose inside probability exceeds the threshold.
    pub fn inside(&self, threshold: f64) -> Vec<(u64, [f64; 4])> {
        self.entries.iter().filter(|(_, o)| o.inside > threshold).map(|(id, o)| (*id, o.bbx)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub row_ids: Vec<u64>,
    pub col_ids: Vec<usize>,
    pub omega: f64,
    /// Row-major `row_ids.len() x col_ids.len()`.
    pub values: Vec<Vec<f64>>,
}

impl ScoreTable {
    /// A table from literal values; rows are numbered from 1, columns from 0.
    pub fn from_values(values: Vec<Vec<f64>>) -> Result<Self> {
        let cols = values.first().map_or(0, Vec::len);
        if values.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged score table".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("scores must be finite and non-negative".into()));
        }
        Ok(Self { row_ids: (1..=values.len() as u64).collect(), col_ids: (0..cols).collect(), omega: f64::NAN, values })
    }

    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn cols(&self) -> usize {
        self.col_ids.len()
    }

    pub fn to_csv(&self) -> String {
        table_csv(&self.row_ids, &self.col_ids, &self.values)
    }
}

pub fn build_score_table(inside: &[(u64, [f64; 4])], boxes: &[[f64; 4]], omega: f64) -> ScoreTable {
    ScoreTable {
        row_ids: inside.iter().map(|(id, _)| *id).collect(),
        col_ids: (0..boxes.len()).collect(),
        omega,
        values: inside.iter().map(|(_, e)| boxes.iter().map(|v| score_bbx(*e, *v, omega)).collect()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceTable {
    pub row_ids: Vec<u64>,
    pub col_ids: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl ConfidenceTable {
    pub fn to_csv(&self) -> String {
        table_csv(&self.row_ids, &self.col_ids, &self.values)
    }
}

/// Row-normalizes the scores; an all-zero row stays all-zero.
pub fn build_confidence_table(st: &ScoreTable) -> ConfidenceTable {
    ConfidenceTable {
        row_ids: st.row_ids.clone(),
        col_ids: st.col_ids.clone(),
        values: st
            .values
            .iter()
            .map(|row| {
                let sum: f64 = row.iter().sum();
                if sum > 0.0 {
                    row.iter().map(|v| v / sum).collect()
                } else {
                    vec![0.0; row.len()]
                }
            })
            .collect(),
    }
}

fn table_csv(rows: &[u64], cols: &[usize], values: &[Vec<f64>]) -> String {
    let mut s = String::from("message_id");
    for c in cols {
        let _ = write!(s, ",v{c}");
    }
    s.push('\n');
    for (id, row) in rows.iter().zip(values) {
        let _ = write!(s, "{id}");
        for v in row {
            let _ = write!(s, ",{v:.9}");
        }
        s.push('\n');
    }
    s
}

/// Pairs plus the feedback each estimated sender receives next tick.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MappingDecision {
    pub pairs: PairingSet,
    /// Matched box for every estimated sender, zeros when unpaired.
    pub feedback: BTreeMap<u64, [f64; 4]>,
    pub scores: Option<ScoreTable>,
    pub confidence: Option<ConfidenceTable>,
}

/// Greedy pairing over a score table: take the live cell of highest
/// confidence (first in row-major order on ties), accept it if its score is
/// nonzero, retire its row and column, repeat.
pub fn greedy_pairs(st: &ScoreTable, ct: &ConfidenceTable) -> Vec<(usize, usize)> {
    let (n, m) = (st.rows(), st.cols());
    let mut row_live = vec![true; n];
    let mut col_live = vec![true; m];
    let mut out = Vec::new();
    loop {
        let mut best: Option<(usize, usize)> = None;
        for r in (0..n).filter(|&r| row_live[r]) {
            for c in (0..m).filter(|&c| col_live[c]) {
                if best.is_none_or(|(br, bc)| ct.values[r][c] > ct.values[br][bc]) {
                    best = Some((r, c));
                }
            }
        }
        match best {
            Some((r, c)) if st.values[r][c] > SCORE_EPS => {
                out.push((r, c));
                row_live[r] = false;
                col_live[c] = false;
            }
            _ => break,
        }
    }
    out
}

pub fn decide_mapping(estimates: &EstimateSet, boxes: &[[f64; 4]], cfg: &MappingConfig) -> MappingDecision {
    let inside = estimates.inside(cfg.threshold_inside);
    let st = build_score_table(&inside, boxes, cfg.omega);
    let ct = build_confidence_table(&st);
    let mut pairs = PairingSet::new();
    let mut feedback: BTreeMap<u64, [f64; 4]> = estimates.entries.iter().map(|(id, _)| (*id, [0.0; 4])).collect();
    for (r, c) in greedy_pairs(&st, &ct) {
        let id = st.row_ids[r];
        pairs.insert(id, st.col_ids[c], LabelSource::Model);
        feedback.insert(id, boxes[c]);
    }
    MappingDecision { pairs, feedback, scores: Some(st), confidence: Some(ct) }
}

/// Summed confidence of a set of `(row, col)` cells.
pub fn summed_confidence(ct: &ConfidenceTable, cells: &[(usize, usize)]) -> f64 {
    cells.iter().map(|&(r, c)| ct.values[r][c]).sum()
}

/// Exhaustive search over injective assignments restricted to cells with a
/// nonzero score, maximizing summed confidence. Test oracle only.
pub fn optimal_assignment(st: &ScoreTable) -> Result<Vec<(usize, usize)>> {
    let (n, m) = (st.rows(), st.cols());
    if n.min(m) > ORACLE_LIMIT {
        return Err(Error::Capacity { requested: n.min(m), capacity: ORACLE_LIMIT });
    }
    let ct = build_confidence_table(st);
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut cur = Vec::new();
    let mut used = vec![false; m];
    search(st, &ct, 0, 0.0, &mut used, &mut cur, &mut best);
    Ok(best.1)
}

fn search(
    st: &ScoreTable,
    ct: &ConfidenceTable,
    row: usize,
    acc: f64,
    used: &mut [bool],
    cur: &mut Vec<(usize, usize)>,
    best: &mut (f64, Vec<(usize, usize)>),
) {
    if row == st.rows() {
        if acc > best.0 {
            *best = (acc, cur.clone());
        }
        return;
    }
    for c in 0..st.cols() {
        if !used[c] && st.values[row][c] > SCORE_EPS {
            used[c] = true;
            cur.push((row, c));
            search(st, ct, row + 1, acc + ct.values[row][c], used, cur, best);
            cur.pop();
            used[c] = false;
        }
    }
    search(st, ct, row + 1, acc, used, cur, best);
}
