//! Automatic labeling by plate matching, and augmentation with
//! outside-of-image negatives from the rear camera and the field-of-view
//! test over a persistence window.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::features::{build_feature_vector, FeatureConfig, FeatureVector};
use crate::geo::{self, LatLng};
use crate::plates::{canonicalize_plate, plate_id, ConversionTable};
use crate::scenario::{DetectedBox, Message, Observation, SensorRecord, TruthPair};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bearing {
    /// Clockwise from north, in [0, 360).
    pub degrees: f64,
    /// Set when the two points coincide; `degrees` is then 0.
    pub degenerate: bool,
}

/// Initial great-circle bearing from `from` to `to`.
pub fn bearing(from: LatLng, to: LatLng) -> Bearing {
    if from == to {
        return Bearing { degrees: 0.0, degenerate: true };
    }
    let (phi1, phi2) = (from.lat.to_radians(), to.lat.to_radians());
    let dl = (to.lng - from.lng).to_radians();
    let y = dl.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dl.cos();
    Bearing { degrees: geo::wrap_360(y.atan2(x).to_degrees()), degenerate: false }
}

/// Whether bearing `brg` lies within `hfov_deg / 2` of `ego_ori`, edges
/// inclusive.
pub fn fov_contains(ego_ori: f64, hfov_deg: f64, brg: f64) -> bool {
    geo::wrap_180(brg - ego_ori).abs() <= hfov_deg / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LabelSource {
    AutoFront,
    AutoRear,
    /// Negative from the field-of-view persistence test.
    AutoFov,
    Manual,
    /// Pair decided by the mapping module at inference.
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DatasetMode {
    Al,
    Alda,
    Manual,
}

impl DatasetMode {
    pub const ALL: [DatasetMode; 3] = [DatasetMode::Al, DatasetMode::Alda, DatasetMode::Manual];

    pub fn name(self) -> &'static str {
        match self {
            DatasetMode::Al => "AL",
            DatasetMode::Alda => "ALDA",
            DatasetMode::Manual => "MANUAL",
        }
    }
}

impl std::str::FromStr for DatasetMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AL" => Ok(DatasetMode::Al),
            "ALDA" => Ok(DatasetMode::Alda),
            "MANUAL" => Ok(DatasetMode::Manual),
            _ => Err(crate::Error::Config(format!("unknown dataset mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub message_id: u64,
    pub box_index: usize,
    pub source: LabelSource,
}

/// Message-to-box pairs, injective in both coordinates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairingSet {
    pairs: Vec<Pair>,
}

impl PairingSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a pair unless the message or the box is already used.
    pub fn insert(&mut self, message_id: u64, box_index: usize, source: LabelSource) -> bool {
        if self.pairs.iter().any(|p| p.message_id == message_id || p.box_index == box_index) {
            return false;
        }
        self.pairs.push(Pair { message_id, box_index, source });
        true
    }

    pub fn box_for(&self, message_id: u64) -> Option<usize> {
        self.pairs.iter().find(|p| p.message_id == message_id).map(|p| p.box_index)
    }

    pub fn contains_box(&self, box_index: usize) -> bool {
        self.pairs.iter().any(|p| p.box_index == box_index)
    }

    pub fn message_ids(&self) -> BTreeSet<u64> {
        self.pairs.iter().map(|p| p.message_id).collect()
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn extend(&mut self, other: &PairingSet) {
        for p in &other.pairs {
            self.insert(p.message_id, p.box_index, p.source);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AutoLabel {
    pub pairing: PairingSet,
    /// Messages or boxes dropped because their id was not unique.
    pub ambiguous: usize,
}

/// Matches OCR'd plates in `boxes` against message ids. Ids shared by more
/// than one message, or read from more than one box, are excluded.
pub fn auto_label_boxes(
    boxes: &[DetectedBox],
    messages: &[Message],
    cct: &ConversionTable,
    source: LabelSource,
) -> AutoLabel {
    let mut by_id: HashMap<u64, usize> = HashMap::new();
    for m in messages {
        *by_id.entry(m.id).or_insert(0) += 1;
    }
    let mut ambiguous: usize = by_id.values().filter(|&&n| n > 1).sum();

    let reads: Vec<(usize, u64)> = boxes
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.plate_text.as_deref().map(|text| (i, plate_id(&canonicalize_plate(text, cct)))))
        .collect();
    let mut read_counts: HashMap<u64, usize> = HashMap::new();
    for &(_, id) in &reads {
        *read_counts.entry(id).or_insert(0) += 1;
    }

    let mut pairing = PairingSet::new();
    for (i, id) in reads {
        match (by_id.get(&id), read_counts[&id]) {
            (Some(1), 1) => {
                pairing.insert(id, i, source);
            }
            (Some(_), n) if n > 1 => ambiguous += 1,
            _ => {}
        }
    }
    AutoLabel { pairing, ambiguous }
}

/// Front-camera plate matching for one tick.
pub fn auto_label_frame(obs: &Observation, cct: &ConversionTable) -> AutoLabel {
    auto_label_boxes(&obs.front_boxes, &obs.messages, cct, LabelSource::AutoFront)
}

#[derive(Debug, Clone)]
struct TickView {
    ego: SensorRecord,
    messages: HashMap<u64, Message>,
}

/// Per-tick message lookup over a contiguous observation stream.
#[derive(Debug, Clone)]
pub struct History {
    ticks: Vec<TickView>,
}

impl History {
    pub fn new(observations: &[Observation]) -> Self {
        Self {
            ticks: observations
                .iter()
                .map(|o| TickView {
                    ego: o.ego_sensors,
                    messages: o.messages.iter().map(|m| (m.id, m.clone())).collect(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ticks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ticks.is_empty()
    }

    /// Appends one tick; used when observations arrive one at a time.
    pub fn push(&mut self, obs: &Observation) {
        self.ticks.push(TickView {
            ego: obs.ego_sensors,
            messages: obs.messages.iter().map(|m| (m.id, m.clone())).collect(),
        });
    }

    /// `len` slots ending at tick index `at`, oldest first.
    pub fn window(&self, at: usize, id: u64, len: usize) -> Vec<Option<(&Message, &SensorRecord)>> {
        (0..len)
            .map(|k| {
                let back = len - 1 - k;
                let idx = at.checked_sub(back)?;
                let tick = self.ticks.get(idx)?;
                tick.messages.get(&id).map(|m| (m, &tick.ego))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OutsideSet {
    pub ids: BTreeSet<u64>,
    /// Members that came from rear-camera plate matches.
    pub rear: BTreeSet<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelingConfig {
    pub features: FeatureConfig,
    /// Front camera horizontal angle of view.
    pub hfov_deg: f64,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self { features: FeatureConfig::default(), hfov_deg: 90.0 }
    }
}

/// Whether every sample of `id`'s window at tick `at` places it outside the
/// front field of view. `None` when the window is incomplete.
pub fn consistently_outside(history: &History, at: usize, id: u64, window: usize, hfov_deg: f64) -> Option<bool> {
    let samples = history.window(at, id, window);
    let mut outside = true;
    for slot in samples {
        let (m, e) = slot?;
        let brg = bearing(e.position(), m.position()).degrees;
        outside &= !fov_contains(e.ori, hfov_deg, brg);
    }
    Some(outside)
}

/// Outside-of-image senders at tick `at`: senders whose full window stays
/// outside the front field of view, plus rear-camera matches, minus anything
/// paired in front.
pub fn build_outside_set(
    history: &History,
    at: usize,
    cfg: &LabelingConfig,
    front: &PairingSet,
    rear: &PairingSet,
) -> OutsideSet {
    let mut set = OutsideSet::default();
    let Some(tick) = history.ticks.get(at) else {
        return set;
    };
    let mut ids: Vec<u64> = tick.messages.keys().copied().collect();
    ids.sort_unstable();
    for id in ids {
        if consistently_outside(history, at, id, cfg.features.window, cfg.hfov_deg) == Some(true) {
            set.ids.insert(id);
        }
    }
    for id in rear.message_ids() {
        if tick.messages.contains_key(&id) {
            set.ids.insert(id);
            set.rear.insert(id);
        }
    }
    for id in front.message_ids() {
        set.ids.remove(&id);
        set.rear.remove(&id);
    }
    set
}

/// One observation stream with its automatic labels.
#[derive(Debug, Clone)]
pub struct LabeledRun {
    pub run: u32,
    pub observations: Vec<Observation>,
    pub history: History,
    pub front: Vec<PairingSet>,
    pub rear: Vec<PairingSet>,
    pub outside: Vec<OutsideSet>,
    pub ambiguous: usize,
    pub cfg: LabelingConfig,
}

pub fn label_run(run: u32, observations: Vec<Observation>, cct: &ConversionTable, cfg: &LabelingConfig) -> LabeledRun {
    let history = History::new(&observations);
    let mut ambiguous = 0;
    let mut front = Vec::with_capacity(observations.len());
    let mut rear = Vec::with_capacity(observations.len());
    let mut outside = Vec::with_capacity(observations.len());
    for (i, obs) in observations.iter().enumerate() {
        let f = auto_label_frame(obs, cct);
        let r = auto_label_boxes(&obs.rear_boxes, &obs.messages, cct, LabelSource::AutoRear);
        ambiguous += f.ambiguous + r.ambiguous;
        outside.push(build_outside_set(&history, i, cfg, &f.pairing, &r.pairing));
        front.push(f.pairing);
        rear.push(r.pairing);
    }
    LabeledRun { run, observations, history, front, rear, outside, ambiguous, cfg: *cfg }
}

impl LabeledRun {
    /// (auto-paired front senders, truly in-image senders) over the run.
    pub fn auto_pair_counts(&self) -> (usize, usize) {
        let paired = self.front.iter().map(PairingSet::len).sum();
        let inside = self.observations.iter().map(|o| o.truth_pairs.values().filter(|t| t.is_inside()).count()).sum();
        (paired, inside)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub run: u32,
    pub tick: u64,
    pub message_id: u64,
    pub features: FeatureVector,
    /// Previous tick's box for this sender, zeros when it was not paired.
    pub feedback: [f64; 4],
    /// Box corners then the inside flag.
    pub target: [f64; 5],
    pub source: LabelSource,
    pub dataset: DatasetMode,
}

impl LabeledExample {
    pub fn is_positive(&self) -> bool {
        self.target[4] == 1.0
    }
}

fn positive_target(b: &DetectedBox) -> [f64; 5] {
    [b.bb_norm[0], b.bb_norm[1], b.bb_norm[2], b.bb_norm[3], 1.0]
}

/// Builds the training rows for one dataset definition. Rows are ordered
/// by (tick, message id).
pub fn assemble_dataset(run: &LabeledRun, mode: DatasetMode) -> Vec<LabeledExample> {
    let mut out = Vec::new();
    let mut prev_boxes: HashMap<u64, [f64; 4]> = HashMap::new();
    for (i, obs) in run.observations.iter().enumerate() {
        // message id -> (target, source)
        let mut rows: BTreeMap<u64, ([f64; 5], LabelSource)> = BTreeMap::new();
        match mode {
            DatasetMode::Al | DatasetMode::Alda => {
                for p in run.front[i].pairs() {
                    rows.insert(p.message_id, (positive_target(&obs.front_boxes[p.box_index]), LabelSource::AutoFront));
                }
                let negatives = match mode {
                    DatasetMode::Al => &run.outside[i].rear,
                    _ => &run.outside[i].ids,
                };
                for &id in negatives {
                    let source =
                        if run.outside[i].rear.contains(&id) { LabelSource::AutoRear } else { LabelSource::AutoFov };
                    rows.entry(id).or_insert(([0.0; 5], source));
                }
            }
            DatasetMode::Manual => {
                for (&id, &truth) in &obs.truth_pairs {
                    match truth {
                        TruthPair::Box(b) => {
                            rows.insert(id, (positive_target(&obs.front_boxes[b]), LabelSource::Manual));
                        }
                        TruthPair::Outside => {
                            rows.insert(id, ([0.0; 5], LabelSource::Manual));
                        }
                        TruthPair::Undetected => {}
                    }
                }
            }
        }

        let mut next_prev = HashMap::new();
        for (id, (target, source)) in rows {
            let window = run.history.window(i, id, run.cfg.features.window);
            let Ok(features) = build_feature_vector(&window, &run.cfg.features) else {
                continue;
            };
            if target[4] == 1.0 {
                next_prev.insert(id, [target[0], target[1], target[2], target[3]]);
            }
            out.push(LabeledExample {
                run: run.run,
                tick: obs.t,
                message_id: id,
                features,
                feedback: prev_boxes.get(&id).copied().unwrap_or([0.0; 4]),
                target,
                source,
                dataset: mode,
            });
        }
        prev_boxes = next_prev;
    }
    out
}
