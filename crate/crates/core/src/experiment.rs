//! End-to-end experiments: simulate training and held-out runs, build the
//! datasets, train centrally or federated, and score on the held-out run.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{file_error, Error, Result};
use crate::fed::{partition, run_federated, save_params, ClientState, FedConfig};
use crate::labeling::{assemble_dataset, label_run, DatasetMode, LabeledExample, LabeledRun};
use crate::mdfnn::{evaluate_loss, init_model, ModelConfig, ModelParams, OptimizerConfig, Trainer, TrainingRow};
use crate::metrics::{compute_cr, MetricsReport};
use crate::pipeline::{infer_run, InferenceConfig};
use crate::plates::ConversionTable;
use crate::scenario::{generate_scenario, RoadLayout, WeatherPreset, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TrainingMode {
    Central,
    Federated(usize),
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainingMode::Central => f.write_str("central"),
            TrainingMode::Federated(n) => write!(f, "federated-{n}"),
        }
    }
}

impl FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "central" {
            return Ok(Self::Central);
        }
        s.strip_prefix("federated-")
            .and_then(|n| n.parse().ok())
            .filter(|&n| n > 0)
            .map(Self::Federated)
            .ok_or_else(|| Error::Config(format!("unknown training mode {s:?}")))
    }
}

impl Serialize for TrainingMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TrainingMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Template for every run; the seed (and weather, when varied) is
    /// replaced per run.
    pub world: WorldConfig,
    pub train_seeds: Vec<u64>,
    pub eval_seed: u64,
    /// Cycle the weather presets across runs by seed.
    pub vary_weather: bool,
    /// Road layout of each training run, cycled by run index.
    pub train_layouts: Vec<RoadLayout>,
    pub eval_layout: RoadLayout,
    pub datasets: Vec<DatasetMode>,
    pub training: Vec<TrainingMode>,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    /// Central training epochs.
    pub epochs: u32,
    pub fed: FedConfig,
    pub inference: InferenceConfig,
    /// Seeds model initialization and shuffling.
    pub train_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig { duration: 200.0, ..WorldConfig::default() },
            train_seeds: vec![11, 12, 13, 14],
            eval_seed: 99,
            vary_weather: true,
            train_layouts: vec![RoadLayout::Grid, RoadLayout::Grid, RoadLayout::Straight, RoadLayout::Grid],
            eval_layout: RoadLayout::Grid,
            datasets: DatasetMode::ALL.to_vec(),
            training: vec![TrainingMode::Central],
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 200,
            fed: FedConfig::default(),
            inference: InferenceConfig::default(),
            train_seed: 7,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_seeds.is_empty() {
            return Err(Error::Config("at least one training seed is required".into()));
        }
        if self.train_seeds.contains(&self.eval_seed) {
            return Err(Error::Config(format!("held-out seed {} is also a training seed", self.eval_seed)));
        }
        let mut seen = self.train_seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.train_seeds.len() {
            return Err(Error::Config("training seeds must be distinct".into()));
        }
        if self.datasets.is_empty() || self.training.is_empty() {
            return Err(Error::Config("no dataset or training mode selected".into()));
        }
        if self.model.input_width != self.inference.labeling.features.input_width() {
            return Err(Error::Config(format!(
                "model input width {} does not match the feature width {}",
                self.model.input_width,
                self.inference.labeling.features.input_width()
            )));
        }
        self.world.validate()
    }

    /// World of run `index`; the held-out run comes after the training runs.
    pub fn world_for(&self, seed: u64, index: usize) -> WorldConfig {
        let mut w = self.world.clone();
        w.seed = seed;
        w.road_layout = match self.train_layouts.as_slice() {
            _ if index >= self.train_seeds.len() => self.eval_layout,
            [] => self.world.road_layout,
            layouts => layouts[index % layouts.len()],
        };
        if self.vary_weather {
            w.weather = WeatherPreset::ALL[(seed % WeatherPreset::ALL.len() as u64) as usize].weather();
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: DatasetMode,
    pub training_mode: TrainingMode,
    pub examples: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoLabelRow {
    pub seed: u64,
    pub held_out: bool,
    pub inside: usize,
    pub paired_canonical: usize,
    pub paired_exact: usize,
}

impl AutoLabelRow {
    pub fn rate_canonical(&self) -> f64 {
        rate(self.paired_canonical, self.inside)
    }

    pub fn rate_exact(&self) -> f64 {
        rate(self.paired_exact, self.inside)
    }
}

fn rate(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// Held-out loss by epoch (central) or round (federated); step 0 is the
/// initial model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub dataset: DatasetMode,
    pub training_mode: TrainingMode,
    pub points: Vec<(u32, f64)>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub autolabel: Vec<AutoLabelRow>,
    pub curves: Vec<LossCurve>,
    pub dataset_sizes: BTreeMap<DatasetMode, usize>,
    pub models: Vec<(DatasetMode, TrainingMode, ModelParams)>,
}

/// A simulated and labeled run.
pub struct PreparedRun {
    pub seed: u64,
    pub labeled: LabeledRun,
    pub autolabel: AutoLabelRow,
}

pub fn prepare_run(cfg: &ExperimentConfig, seed: u64, index: u32, held_out: bool) -> Result<PreparedRun> {
    let world = cfg.world_for(seed, index as usize);
    let mut state = generate_scenario(&world)?;
    let cct = state.conversion_table().clone();
    let labeled = label_run(index, state.run(), &cct, &cfg.inference.labeling);
    // Senders derive their id from their own plate, so the exact-match
    // baseline needs a world whose ids are raw plate hashes. The traffic is
    // the same for the same seed.
    let raw_world = WorldConfig { conversion_threshold: None, ..world };
    let exact =
        label_run(index, generate_scenario(&raw_world)?.run(), &ConversionTable::empty(), &cfg.inference.labeling);
    let (paired_canonical, inside) = labeled.auto_pair_counts();
    let (paired_exact, exact_inside) = exact.auto_pair_counts();
    debug_assert_eq!(inside, exact_inside);
    Ok(PreparedRun {
        seed,
        labeled,
        autolabel: AutoLabelRow { seed, held_out, inside, paired_canonical, paired_exact },
    })
}

pub fn training_rows(examples: &[LabeledExample]) -> Vec<TrainingRow> {
    examples.iter().map(TrainingRow::from).collect()
}

fn train_model(
    cfg: &ExperimentConfig,
    mode: TrainingMode,
    data: &[TrainingRow],
    held_out: &[TrainingRow],
) -> Result<(ModelParams, Vec<(u32, f64)>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train_seed);
    let init = init_model(&cfg.model, &mut rng)?;
    let mut curve = vec![(0, evaluate_loss(&init, held_out)?)];
    match mode {
        TrainingMode::Central => {
            let mut trainer = Trainer::new(init, cfg.optimizer);
            let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.train_seed.wrapping_add(1));
            for epoch in 1..=cfg.epochs {
                trainer.train_epoch(data, &mut shuffle)?;
                curve.push((epoch, evaluate_loss(&trainer.params, held_out)?));
            }
            Ok((trainer.params, curve))
        }
        TrainingMode::Federated(n) => {
            let mut clients: Vec<ClientState> = partition(data, n)
                .into_iter()
                .enumerate()
                .map(|(i, part)| {
                    ClientState::new(i as u32, part, cfg.optimizer, cfg.train_seed.wrapping_add(1 + i as u64))
                })
                .collect();
            let global = run_federated(&mut clients, init, &cfg.fed, |rec, global| {
                curve.push((rec.round + 1, evaluate_loss(global, held_out)?));
                Ok(())
            })?;
            Ok((global, curve))
        }
    }
}

/// Runs `f` over `items` on scoped threads, keeping input order.
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = items.iter().map(|it| s.spawn(|| f(it))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Config("worker thread panicked".into()))))
            .collect()
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut jobs: Vec<(u64, u32, bool)> =
        cfg.train_seeds.iter().enumerate().map(|(i, &s)| (s, i as u32, false)).collect();
    jobs.push((cfg.eval_seed, cfg.train_seeds.len() as u32, true));
    let mut runs = par_map(&jobs, |&(seed, index, held_out)| prepare_run(cfg, seed, index, held_out))?;
    let eval = runs.pop().expect("held-out run is always prepared");

    let held_out_rows = training_rows(&assemble_dataset(&eval.labeled, DatasetMode::Manual));
    let mut datasets = BTreeMap::new();
    for &mode in &cfg.datasets {
        let examples: Vec<LabeledExample> = runs.iter().flat_map(|r| assemble_dataset(&r.labeled, mode)).collect();
        if examples.is_empty() {
            return Err(Error::Config(format!("dataset {} is empty", mode.name())));
        }
        datasets.insert(mode, training_rows(&examples));
    }

    let mut combos = Vec::new();
    for &d in &cfg.datasets {
        for &t in &cfg.training {
            combos.push((d, t));
        }
    }
    let trained = par_map(&combos, |&(d, t)| train_model(cfg, t, &datasets[&d], &held_out_rows))?;

    let truth: Vec<_> = eval.labeled.observations.iter().map(|o| (o.t, &o.truth_pairs)).collect();
    let cct = cfg.world.conversion_table()?;
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut models = Vec::new();
    for (&(d, t), (params, points)) in combos.iter().zip(trained) {
        let preds = infer_run(&params, &eval.labeled.observations, &cct, &cfg.inference, None)?;
        rows.push(ReportRow {
            dataset: d,
            training_mode: t,
            examples: datasets[&d].len(),
            metrics: compute_cr(&preds, &truth)?,
        });
        curves.push(LossCurve { dataset: d, training_mode: t, points });
        models.push((d, t, params));
    }
    let mut autolabel: Vec<AutoLabelRow> = runs.iter().map(|r| r.autolabel.clone()).collect();
    autolabel.push(eval.autolabel);
    Ok(ExperimentReport {
        rows,
        autolabel,
        curves,
        dataset_sizes: datasets.iter().map(|(k, v)| (*k, v.len())).collect(),
        models,
    })
}

impl ExperimentReport {
    pub fn report_csv(&self) -> String {
        let mut s = String::from(
            "dataset,training_mode,cr_ic,cr_inside,cr_outside,cr_total,p_correctly,p_inside,p_outside,n_inside,n_outside,examples\n",
        );
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{}",
                r.dataset.name(),
                r.training_mode,
                m.cr_ic,
                m.cr_inside,
                m.cr_outside,
                m.cr_total,
                m.p_correctly,
                m.p_inside,
                m.p_outside,
                m.n_inside,
                m.n_outside,
                r.examples
            );
        }
        s
    }

    pub fn autolabel_csv(&self) -> String {
        let mut s = String::from("seed,held_out,inside,paired_canonical,paired_exact,rate_canonical,rate_exact\n");
        for a in &self.autolabel {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6},{:.6}",
                a.seed,
                a.held_out,
                a.inside,
                a.paired_canonical,
                a.paired_exact,
                a.rate_canonical(),
                a.rate_exact()
            );
        }
        s
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("dataset,training_mode,step,heldout_loss\n");
        for c in &self.curves {
            for (step, loss) in &c.points {
                let _ = writeln!(s, "{},{},{},{:.9}", c.dataset.name(), c.training_mode, step, loss);
            }
        }
        s
    }

    /// Fixed-width summary table in percent.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{:<8} {:<13} {:>8} {:>8} {:>10} {:>11} {:>9}\n",
            "dataset", "training", "examples", "CR_ic", "CR_inside", "CR_outside", "CR_total"
        );
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{:<8} {:<13} {:>8} {:>8.2} {:>10.2} {:>11.2} {:>9.2}",
                r.dataset.name(),
                r.training_mode.to_string(),
                r.examples,
                100.0 * m.cr_ic,
                100.0 * m.cr_inside,
                100.0 * m.cr_outside,
                100.0 * m.cr_total
            );
        }
        s
    }

    /// Writes the CSV reports, the summary and one model file per row.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(file_error(dir))?;
        for (name, text) in [
            ("report.csv", self.report_csv()),
            ("autolabel.csv", self.autolabel_csv()),
            ("loss.csv", self.loss_csv()),
            ("report.txt", self.summary()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(file_error(&path))?;
        }
        for (d, t, p) in &self.models {
            save_params(p, &dir.join(format!("model_{}_{}.fmdf", d.name().to_lowercase(), t)))?;
        }
        Ok(())
    }
}
