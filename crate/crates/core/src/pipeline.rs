//! Tick-by-tick identification over an observation stream.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::build_feature_vector;
use crate::labeling::{auto_label_frame, bearing, fov_contains, History, LabelingConfig};
use crate::mapping::{decide_mapping, EstimateSet, MappingConfig, MappingDecision};
use crate::mdfnn::{predict, FeedbackInput, ModelParams};
use crate::metrics::{SenderPrediction, TickPredictions};
use crate::plates::ConversionTable;
use crate::scenario::Observation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Every sender goes through the network and the mapping decision.
    #[default]
    ModelOnly,
    /// Plate matches are taken first, senders whose current position lies
    /// outside the field of view are declared outside, and only the rest go
    /// through the network.
    Full,
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" | "model_only" | "model-only" => Ok(Self::ModelOnly),
            "full" => Ok(Self::Full),
            _ => Err(Error::Config(format!("unknown inference mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    pub mapping: MappingConfig,
    pub labeling: LabelingConfig,
}

/// Per-tick hook receiving the tick and its mapping decision (for table
/// dumps).
pub type DecisionSink<'a> = &'a mut dyn FnMut(u64, &MappingDecision);

pub fn infer_run(
    params: &ModelParams,
    observations: &[Observation],
    cct: &ConversionTable,
    cfg: &InferenceConfig,
    mut sink: Option<DecisionSink<'_>>,
) -> Result<Vec<TickPredictions>> {
    let mut history = History::new(&[]);
    let mut feedback: BTreeMap<u64, [f64; 4]> = BTreeMap::new();
    let mut out = Vec::with_capacity(observations.len());
    for (i, obs) in observations.iter().enumerate() {
        history.push(obs);
        let mut senders = BTreeMap::new();
        let mut next_feedback = BTreeMap::new();
        let mut taken = vec![false; obs.front_boxes.len()];

        if cfg.mode == InferenceMode::Full {
            for p in auto_label_frame(obs, cct).pairing.pairs() {
                taken[p.box_index] = true;
                senders.insert(p.message_id, SenderPrediction { inside: true, paired: Some(p.box_index) });
                next_feedback.insert(p.message_id, obs.front_boxes[p.box_index].bb_norm);
            }
            let ego = obs.ego_sensors;
            for m in &obs.messages {
                if senders.contains_key(&m.id) {
                    continue;
                }
                let brg = bearing(ego.position(), m.position()).degrees;
                if !fov_contains(ego.ori, cfg.labeling.hfov_deg, brg) {
                    senders.insert(m.id, SenderPrediction { inside: false, paired: None });
                }
            }
        }

        let mut entries = Vec::new();
        let mut ids: Vec<u64> = obs.messages.iter().map(|m| m.id).filter(|id| !senders.contains_key(id)).collect();
        ids.sort_unstable();
        for id in ids {
            let window = history.window(i, id, cfg.labeling.features.window);
            let features = build_feature_vector(&window, &cfg.labeling.features)?;
            let fb = FeedbackInput(feedback.get(&id).copied().unwrap_or([0.0; 4]));
            entries.push((id, predict(params, &features, &fb)?));
        }
        let columns: Vec<usize> = (0..obs.front_boxes.len()).filter(|&b| !taken[b]).collect();
        let boxes: Vec<[f64; 4]> = columns.iter().map(|&b| obs.front_boxes[b].bb_norm).collect();
        let estimates = EstimateSet::new(entries)?;
        let mut decision = decide_mapping(&estimates, &boxes, &cfg.mapping);
        if let Some(st) = decision.scores.as_mut() {
            st.col_ids = columns.clone();
        }
        if let Some(ct) = decision.confidence.as_mut() {
            ct.col_ids = columns.clone();
        }
        for (id, o) in &estimates.entries {
            let paired = decision.pairs.box_for(*id).map(|c| columns[c]);
            if let Some(b) = paired {
                next_feedback.insert(*id, obs.front_boxes[b].bb_norm);
            }
            senders.insert(*id, SenderPrediction { inside: o.inside > cfg.mapping.threshold_inside, paired });
        }
        if let Some(f) = sink.as_mut() {
            f(obs.t, &decision);
        }
        feedback = next_feedback;
        out.push(TickPredictions { t: obs.t, senders });
    }
    Ok(out)
}
