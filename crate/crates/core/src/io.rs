//! On-disk formats: per-tick JSONL streams, labeled datasets and the
//! character tables.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

use crate::error::{file_error, Error, Result};
use crate::features::FeatureVector;
use crate::labeling::{DatasetMode, LabelSource, LabeledExample};
use crate::plates::{ConfusionTable, ConversionTable};
use crate::scenario::{DetectedBox, Message, Observation, SensorRecord, TruthPair};

pub const SIGNIFICANT_DIGITS: usize = 9;
pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Field names of a `dataset.jsonl` row. None of them may appear on the
/// federated wire.
pub const DATASET_FIELDS: [&str; 8] =
    ["features", "validity_mask", "feedback", "target", "message_id", "tick", "source", "dataset"];

/// Rounds `x` to [`SIGNIFICANT_DIGITS`] significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x).parse().unwrap_or(x)
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(round_sig).and_then(Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_value),
        Value::Object(o) => o.values_mut().for_each(round_value),
        _ => {}
    }
}

/// One JSON line with floats rounded to 9 significant digits.
pub fn to_json_line<T: Serialize>(record: &T) -> Result<String> {
    let mut v = serde_json::to_value(record)?;
    round_value(&mut v);
    Ok(serde_json::to_string(&v)?)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(file_error(path))?);
    for r in records {
        writeln!(w, "{}", to_json_line(&r)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(file_error(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: u64,
    pub front_boxes: Vec<DetectedBox>,
    pub rear_boxes: Vec<DetectedBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub t: u64,
    #[serde(flatten)]
    pub message: Message,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorLine {
    pub t: u64,
    #[serde(flatten)]
    pub sensors: SensorRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub t: u64,
    pub truth_pairs: BTreeMap<u64, TruthPair>,
}

pub const FRAMES_FILE: &str = "frames.jsonl";
pub const MESSAGES_FILE: &str = "messages.jsonl";
pub const SENSORS_FILE: &str = "sensors.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";

/// Writes the four per-tick streams into `dir`.
pub fn write_observations(dir: &Path, observations: &[Observation]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(file_error(dir))?;
    write_jsonl(
        &dir.join(FRAMES_FILE),
        observations.iter().map(|o| FrameRecord {
            t: o.t,
            front_boxes: o.front_boxes.clone(),
            rear_boxes: o.rear_boxes.clone(),
        }),
    )?;
    write_jsonl(
        &dir.join(MESSAGES_FILE),
        observations.iter().flat_map(|o| o.messages.iter().map(move |m| MessageRecord { t: o.t, message: m.clone() })),
    )?;
    write_jsonl(&dir.join(SENSORS_FILE), observations.iter().map(|o| SensorLine { t: o.t, sensors: o.ego_sensors }))?;
    write_jsonl(
        &dir.join(TRUTH_FILE),
        observations.iter().map(|o| TruthRecord { t: o.t, truth_pairs: o.truth_pairs.clone() }),
    )
}

/// Reassembles observations from the four streams in `dir`.
pub fn read_observations(dir: &Path) -> Result<Vec<Observation>> {
    let frames: Vec<FrameRecord> = read_jsonl(&dir.join(FRAMES_FILE))?;
    let messages: Vec<MessageRecord> = read_jsonl(&dir.join(MESSAGES_FILE))?;
    let sensors: Vec<SensorLine> = read_jsonl(&dir.join(SENSORS_FILE))?;
    let truth: Vec<TruthRecord> = read_jsonl(&dir.join(TRUTH_FILE))?;
    if frames.len() != sensors.len() || frames.len() != truth.len() {
        return Err(Error::Config(format!(
            "{}: {} frames, {} sensor records and {} truth records",
            dir.display(),
            frames.len(),
            sensors.len(),
            truth.len()
        )));
    }
    let mut by_tick: BTreeMap<u64, Vec<Message>> = BTreeMap::new();
    for m in messages {
        by_tick.entry(m.t).or_default().push(m.message);
    }
    frames
        .into_iter()
        .zip(sensors)
        .zip(truth)
        .map(|((f, s), tr)| {
            if f.t != s.t || f.t != tr.t {
                return Err(Error::Config(format!("tick {} is misaligned across streams", f.t)));
            }
            Ok(Observation {
                t: f.t,
                front_boxes: f.front_boxes,
                rear_boxes: f.rear_boxes,
                messages: by_tick.remove(&f.t).unwrap_or_default(),
                ego_sensors: s.sensors,
                truth_pairs: tr.truth_pairs,
            })
        })
        .collect()
}

/// `dataset.jsonl` row; features are the flat network input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub schema_version: u32,
    pub run: u32,
    pub tick: u64,
    pub message_id: u64,
    pub features: Vec<f64>,
    pub validity_mask: Vec<bool>,
    pub feedback: [f64; 4],
    pub target: [f64; 5],
    pub source: LabelSource,
    pub dataset: DatasetMode,
}

impl From<&LabeledExample> for DatasetRecord {
    fn from(e: &LabeledExample) -> Self {
        Self {
            schema_version: DATASET_SCHEMA_VERSION,
            run: e.run,
            tick: e.tick,
            message_id: e.message_id,
            features: e.features.to_input(),
            validity_mask: e.features.validity_mask.clone(),
            feedback: e.feedback,
            target: e.target,
            source: e.source,
            dataset: e.dataset,
        }
    }
}

impl DatasetRecord {
    pub fn into_example(self) -> Result<LabeledExample> {
        if self.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported dataset schema version {}", self.schema_version)));
        }
        Ok(LabeledExample {
            run: self.run,
            tick: self.tick,
            message_id: self.message_id,
            features: FeatureVector::from_input(&self.features, self.validity_mask)?,
            feedback: self.feedback,
            target: self.target,
            source: self.source,
            dataset: self.dataset,
        })
    }
}

pub fn write_dataset(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    write_jsonl(path, examples.iter().map(DatasetRecord::from))
}

pub fn read_dataset(path: &Path) -> Result<Vec<LabeledExample>> {
    read_jsonl::<DatasetRecord>(path)?.into_iter().map(DatasetRecord::into_example).collect()
}

pub fn write_conversion_table(path: &Path, cct: &ConversionTable) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(&cct.to_json_map())? + "\n").map_err(file_error(path))
}

pub fn read_conversion_table(path: &Path) -> Result<ConversionTable> {
    let text = std::fs::read_to_string(path).map_err(file_error(path))?;
    let map: BTreeMap<String, String> =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    ConversionTable::from_json_map(&map)
}

pub fn write_confusion_table(path: &Path, table: &ConfusionTable) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(table)? + "\n").map_err(file_error(path))
}

/// Reads a JSON config file into `T`, filling unspecified fields with
/// defaults when `T` is `#[serde(default)]`.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(file_error(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
