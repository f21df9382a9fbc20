//! Deterministic synthetic traffic world.
//!
//! One ego vehicle (index 0) carries a front and a rear camera and receives
//! V2V messages from every vehicle within communication range. Motion is
//! kinematic: each vehicle follows its lane at a piecewise-constant target
//! speed, capped so it never closes within a minimum gap of its leader.
//! Vehicles that drift beyond the spawn radius of the ego are recycled to
//! the far edge of the window, which keeps traffic density around the ego
//! stationary over long runs.
//!
//! Randomness is split into independent ChaCha streams (motion, GPS noise,
//! detection, OCR), so changing a sensor knob never perturbs trajectories.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{self, LatLng};
use crate::plates::{self, ConfusionTable, ConversionTable, OcrChannel};

pub const PLATE_LEN: usize = 7;
pub const VEHICLE_HEIGHT_M: f64 = 1.5;
const LANE_WIDTH_M: f64 = 3.5;
const MIN_GAP_M: f64 = 2.0;
const GRID_BLOCK_M: f64 = 80.0;
const NEAR_CLIP_M: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadLayout {
    Straight,
    Grid,
}

/// Degradation applied by a weather condition, both in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weather {
    pub ocr_degradation: f64,
    pub detection_degradation: f64,
}

/// The fourteen weather presets, mildest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeatherPreset {
    ClearNoon,
    CloudyNoon,
    ClearSunset,
    CloudySunset,
    WetNoon,
    WetSunset,
    WetCloudyNoon,
    WetCloudySunset,
    SoftRainNoon,
    SoftRainSunset,
    MidRainyNoon,
    MidRainSunset,
    HardRainNoon,
    HardRainSunset,
}

impl WeatherPreset {
    pub const ALL: [WeatherPreset; 14] = [
        Self::ClearNoon,
        Self::CloudyNoon,
        Self::ClearSunset,
        Self::CloudySunset,
        Self::WetNoon,
        Self::WetSunset,
        Self::WetCloudyNoon,
        Self::WetCloudySunset,
        Self::SoftRainNoon,
        Self::SoftRainSunset,
        Self::MidRainyNoon,
        Self::MidRainSunset,
        Self::HardRainNoon,
        Self::HardRainSunset,
    ];

    pub fn weather(self) -> Weather {
        let idx = Self::ALL.iter().position(|&p| p == self).unwrap_or(0);
        let d = 0.05 * idx as f64;
        Weather { ocr_degradation: d, detection_degradation: d }
    }
}

impl Weather {
    pub fn clear() -> Self {
        WeatherPreset::ClearNoon.weather()
    }

    pub fn preset(p: WeatherPreset) -> Self {
        p.weather()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Facing {
    Front,
    Rear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Horizontal angle of view in degrees.
    pub hfov_deg: f64,
    pub image_w: u32,
    pub image_h: u32,
    pub facing: Facing,
    pub max_range: f64,
    pub mount_height: f64,
}

impl CameraModel {
    pub fn dashcam(facing: Facing) -> Self {
        Self { hfov_deg: 90.0, image_w: 1280, image_h: 720, facing, max_range: 80.0, mount_height: 1.4 }
    }

    pub fn focal_px(&self) -> f64 {
        (self.image_w as f64 / 2.0) / (self.hfov_deg.to_radians() / 2.0).tan()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return Err(Error::Config(format!("hfov_deg {} outside (0, 180)", self.hfov_deg)));
        }
        if self.image_w == 0 || self.image_h == 0 {
            return Err(Error::Config("camera image dimensions must be positive".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::Config("camera max_range must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcrKind {
    /// Characters are confused per the reference confusion counts.
    Reference,
    /// Every character is read correctly.
    Identity,
}

/// Detector and plate-reader behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorProfile {
    pub miss_rate: f64,
    pub merge_threshold: f64,
    pub min_plate_px: f64,
    pub occlusion_blocks_plate: bool,
    pub ocr_distance_falloff: bool,
    pub ocr: OcrKind,
}

impl Default for SensorProfile {
    fn default() -> Self {
        Self {
            miss_rate: 0.10,
            merge_threshold: 0.7,
            min_plate_px: 20.0,
            occlusion_blocks_plate: true,
            ocr_distance_falloff: true,
            ocr: OcrKind::Reference,
        }
    }
}

impl SensorProfile {
    /// No misses, no merging, every plate readable and read correctly.
    pub fn lossless() -> Self {
        Self {
            miss_rate: 0.0,
            merge_threshold: 1.0,
            min_plate_px: 0.0,
            occlusion_blocks_plate: false,
            ocr_distance_falloff: false,
            ocr: OcrKind::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub num_vehicles: usize,
    pub tick_interval: f64,
    pub duration: f64,
    pub comm_range: f64,
    pub road_layout: RoadLayout,
    pub weather: Weather,
    pub gps_noise_sigma: f64,
    pub max_speed: f64,
    pub speed_resample_ticks: u32,
    /// Recycling radius around the ego; layout default when unset.
    pub spawn_radius: Option<f64>,
    /// Lane count for the straight layout; drawn from 2..=4 when unset.
    pub lanes: Option<usize>,
    pub origin: LatLng,
    pub front_camera: CameraModel,
    pub rear_camera: CameraModel,
    pub sensor: SensorProfile,
    /// Pair threshold for the plate conversion table; `None` hashes raw plates.
    pub conversion_threshold: Option<f64>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_vehicles: 100,
            tick_interval: 0.5,
            duration: 100.0,
            comm_range: 50.0,
            road_layout: RoadLayout::Straight,
            weather: Weather::clear(),
            gps_noise_sigma: 1.5,
            max_speed: 20.0,
            speed_resample_ticks: 10,
            spawn_radius: None,
            lanes: None,
            origin: LatLng::new(23.9738, 120.982),
            front_camera: CameraModel::dashcam(Facing::Front),
            rear_camera: CameraModel::dashcam(Facing::Rear),
            sensor: SensorProfile::default(),
            conversion_threshold: Some(plates::DEFAULT_PAIR_THRESHOLD),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_vehicles < 2 {
            return bad(format!("num_vehicles must be at least 2, got {}", self.num_vehicles));
        }
        if !(self.tick_interval > 0.0) {
            return bad("tick_interval must be positive".into());
        }
        if !(self.duration >= 0.0) {
            return bad("duration must be non-negative".into());
        }
        if !(self.comm_range > 0.0) {
            return bad("comm_range must be positive".into());
        }
        if !(self.gps_noise_sigma >= 0.0) || !(self.max_speed >= 0.0) {
            return bad("gps_noise_sigma and max_speed must be non-negative".into());
        }
        for (name, v) in [
            ("ocr_degradation", self.weather.ocr_degradation),
            ("detection_degradation", self.weather.detection_degradation),
            ("miss_rate", self.sensor.miss_rate),
            ("merge_threshold", self.sensor.merge_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if let Some(l) = self.lanes {
            if l == 0 {
                return bad("lanes must be positive".into());
            }
        }
        if let Some(r) = self.spawn_radius {
            if !(r > 0.0) {
                return bad("spawn_radius must be positive".into());
            }
        }
        self.front_camera.validate()?;
        self.rear_camera.validate()?;
        Ok(())
    }

    pub fn num_ticks(&self) -> u64 {
        (self.duration / self.tick_interval).round() as u64
    }

    pub fn effective_spawn_radius(&self) -> f64 {
        self.spawn_radius.unwrap_or(match self.road_layout {
            RoadLayout::Straight => 400.0,
            RoadLayout::Grid => 200.0,
        })
    }

    pub fn conversion_table(&self) -> Result<ConversionTable> {
        match self.conversion_threshold {
            Some(t) => ConversionTable::reference(t),
            None => Ok(ConversionTable::empty()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub length: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u64,
    pub plate: String,
    pub true_position: LatLng,
    pub noisy_position: LatLng,
    pub orientation: f64,
    pub speed: f64,
    pub dims: Dims,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedBox {
    /// Simulator-internal vehicle index; not used by the labeling pipeline.
    pub vehicle_ref: usize,
    /// `[x_tl/w, y_tl/h, x_br/w, y_br/h]`.
    pub bb_norm: [f64; 4],
    pub plate_readable: bool,
    /// OCR output for this box's plate, when a read succeeded.
    pub plate_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub lat: f64,
    pub lng: f64,
    pub ori: f64,
    pub spd: f64,
    pub id: u64,
    pub state: String,
}

impl Message {
    pub fn position(&self) -> LatLng {
        LatLng::new(self.lat, self.lng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub lat: f64,
    pub lng: f64,
    pub ori: f64,
    pub spd: f64,
}

impl SensorRecord {
    pub fn position(&self) -> LatLng {
        LatLng::new(self.lat, self.lng)
    }
}

/// Ground-truth placement of a message sender relative to the front image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TruthPair {
    /// Index into the tick's front boxes.
    Box(usize),
    /// Geometrically inside the front image but not detected.
    Undetected,
    Outside,
}

impl TruthPair {
    pub fn is_inside(self) -> bool {
        !matches!(self, TruthPair::Outside)
    }
}

impl Serialize for TruthPair {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TruthPair::Box(i) => s.serialize_u64(*i as u64),
            TruthPair::Undetected => s.serialize_str("UNDETECTED"),
            TruthPair::Outside => s.serialize_str("OUTSIDE"),
        }
    }
}

impl<'de> Deserialize<'de> for TruthPair {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Index(usize),
            Label(String),
        }
        match Repr::deserialize(d)? {
            Repr::Index(i) => Ok(TruthPair::Box(i)),
            Repr::Label(l) if l == "OUTSIDE" => Ok(TruthPair::Outside),
            Repr::Label(l) if l == "UNDETECTED" => Ok(TruthPair::Undetected),
            Repr::Label(l) => Err(serde::de::Error::custom(format!("unknown truth label {l:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: u64,
    pub front_boxes: Vec<DetectedBox>,
    pub rear_boxes: Vec<DetectedBox>,
    pub messages: Vec<Message>,
    pub ego_sensors: SensorRecord,
    /// Keyed by message id.
    pub truth_pairs: BTreeMap<u64, TruthPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Axis {
    NorthSouth,
    EastWest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum LaneRef {
    Straight {
        index: usize,
    },
    Grid {
        axis: Axis,
        street: i64,
        dir: i8,
    },
    /// Hand-placed vehicle moving in a straight line along its heading.
    Free,
}

#[derive(Debug, Clone)]
struct Track {
    lane: LaneRef,
    /// Coordinate along the lane axis in metres.
    s: f64,
    target_speed: f64,
    east: f64,
    north: f64,
}

#[derive(Debug, Clone)]
struct StraightLane {
    offset: f64,
    dir: f64,
}

#[derive(Debug, Clone)]
enum Layout {
    Straight { heading: f64, lanes: Vec<StraightLane> },
    Grid,
    Free,
}

/// A vehicle pose for hand-built scenes, in metres east/north of the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub east: f64,
    pub north: f64,
    pub heading: f64,
    pub speed: f64,
}

#[derive(Debug, Clone)]
pub struct ScenarioState {
    cfg: WorldConfig,
    vehicles: Vec<VehicleState>,
    tracks: Vec<Track>,
    layout: Layout,
    cct: ConversionTable,
    ocr: OcrChannel,
    tick: u64,
    motion_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    detect_rng: ChaCha8Rng,
    ocr_rng: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Draws `n` plates whose canonical ids are pairwise distinct. Characters
/// follow the reference table's ground-truth frequencies.
fn draw_plates(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let reference = ConfusionTable::reference();
    let weighted: Vec<(char, u64)> = reference.chars().map(|c| (c, reference.row_total(c))).collect();
    let total: u64 = weighted.iter().map(|w| w.1).sum();
    let standard = ConversionTable::reference(plates::DEFAULT_PAIR_THRESHOLD).expect("valid threshold");
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let plate: String = (0..PLATE_LEN)
            .map(|_| {
                let mut pick = rng.gen_range(0..total);
                for &(c, w) in &weighted {
                    if pick < w {
                        return c;
                    }
                    pick -= w;
                }
                unreachable!()
            })
            .collect();
        if seen.insert(plates::plate_id(&plates::canonicalize_plate(&plate, &standard))) {
            out.push(plate);
        }
    }
    out
}

fn draw_dims(rng: &mut ChaCha8Rng) -> Dims {
    Dims { length: rng.gen_range(4.0..5.0), width: rng.gen_range(1.7..2.0) }
}

/// Builds the initial world for `cfg`.
pub fn generate_scenario(cfg: &WorldConfig) -> Result<ScenarioState> {
    cfg.validate()?;
    let mut motion_rng = stream(cfg.seed, 0);
    let n = cfg.num_vehicles;
    let radius = cfg.effective_spawn_radius();
    let dims: Vec<Dims> = (0..n).map(|_| draw_dims(&mut motion_rng)).collect();
    let plate_strs = draw_plates(n, &mut motion_rng);
    let slot = 5.0 + MIN_GAP_M;

    let (layout, tracks) = match cfg.road_layout {
        RoadLayout::Straight => {
            let lane_count = cfg.lanes.unwrap_or_else(|| motion_rng.gen_range(2..=4));
            let capacity = lane_count * (2.0 * radius / slot).floor() as usize;
            if n > capacity {
                return Err(Error::Capacity { requested: n, capacity });
            }
            let heading = motion_rng.gen_range(0.0..360.0);
            let northbound = lane_count.div_ceil(2);
            let lanes: Vec<StraightLane> = (0..lane_count)
                .map(|j| StraightLane {
                    offset: (j as f64 - (lane_count as f64 - 1.0) / 2.0) * LANE_WIDTH_M,
                    dir: if j < northbound { 1.0 } else { -1.0 },
                })
                .collect();
            let mut tracks: Vec<Track> = Vec::with_capacity(n);
            for v in 0..n {
                let mut placed = false;
                for _ in 0..10_000 {
                    let lane = motion_rng.gen_range(0..lane_count);
                    let s = if v == 0 { 0.0 } else { motion_rng.gen_range(-radius..radius) };
                    let clear = tracks.iter().enumerate().all(|(u, t)| {
                        t.lane != (LaneRef::Straight { index: lane })
                            || (t.s - s).abs() >= (dims[u].length + dims[v].length) / 2.0 + MIN_GAP_M
                    });
                    if clear {
                        tracks.push(Track {
                            lane: LaneRef::Straight { index: lane },
                            s,
                            target_speed: motion_rng.gen_range(0.0..=cfg.max_speed),
                            east: 0.0,
                            north: 0.0,
                        });
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    return Err(Error::Capacity { requested: n, capacity: v });
                }
            }
            (Layout::Straight { heading, lanes }, tracks)
        }
        RoadLayout::Grid => {
            let streets = (2.0 * radius / GRID_BLOCK_M).floor() as usize + 1;
            let capacity = streets * 2 * 2 * (2.0 * radius / slot).floor() as usize;
            if n > capacity {
                return Err(Error::Capacity { requested: n, capacity });
            }
            let mut tracks: Vec<Track> = Vec::with_capacity(n);
            for v in 0..n {
                let mut placed = false;
                for _ in 0..10_000 {
                    let mut t = random_grid_track(&mut motion_rng, (0.0, 0.0), 0.0, radius, cfg.max_speed);
                    if v == 0 {
                        t = Track { s: 0.0, ..t };
                    }
                    set_grid_position(&mut t);
                    let clear = tracks.iter().enumerate().all(|(u, o)| {
                        (o.east - t.east).hypot(o.north - t.north)
                            >= (dims[u].length + dims[v].length) / 2.0 + MIN_GAP_M
                    });
                    if clear {
                        tracks.push(t);
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    return Err(Error::Capacity { requested: n, capacity: v });
                }
            }
            (Layout::Grid, tracks)
        }
    };

    let cct = cfg.conversion_table()?;
    let vehicles = plate_strs
        .into_iter()
        .zip(dims)
        .map(|(plate, dims)| VehicleState {
            id: plates::plate_id(&plates::canonicalize_plate(&plate, &cct)),
            plate,
            true_position: cfg.origin,
            noisy_position: cfg.origin,
            orientation: 0.0,
            speed: 0.0,
            dims,
        })
        .collect();
    let mut state = ScenarioState::assemble(cfg.clone(), vehicles, tracks, layout, cct, motion_rng);
    for i in 0..state.tracks.len() {
        state.sync_pose(i, 0.0);
    }
    Ok(state)
}

fn random_grid_track(rng: &mut ChaCha8Rng, centre: (f64, f64), r_min: f64, r_max: f64, vmax: f64) -> Track {
    loop {
        let axis = if rng.gen_bool(0.5) { Axis::NorthSouth } else { Axis::EastWest };
        let dir: i8 = if rng.gen_bool(0.5) { 1 } else { -1 };
        let (across_c, along_c) = match axis {
            Axis::NorthSouth => (centre.0, centre.1),
            Axis::EastWest => (centre.1, centre.0),
        };
        let lo = ((across_c - r_max) / GRID_BLOCK_M).ceil() as i64;
        let hi = ((across_c + r_max) / GRID_BLOCK_M).floor() as i64;
        if lo > hi {
            continue;
        }
        let street = rng.gen_range(lo..=hi);
        let s = along_c + rng.gen_range(-r_max..r_max);
        let mut t = Track {
            lane: LaneRef::Grid { axis, street, dir },
            s,
            target_speed: rng.gen_range(0.0..=vmax),
            east: 0.0,
            north: 0.0,
        };
        set_grid_position(&mut t);
        let d = (t.east - centre.0).hypot(t.north - centre.1);
        if d >= r_min && d <= r_max {
            return t;
        }
    }
}

fn set_grid_position(t: &mut Track) {
    if let LaneRef::Grid { axis, street, dir } = t.lane {
        let base = street as f64 * GRID_BLOCK_M;
        let half = LANE_WIDTH_M / 2.0;
        match axis {
            // Right-hand traffic: northbound on the east side of the street.
            Axis::NorthSouth => {
                t.east = base + f64::from(dir) * half;
                t.north = t.s;
            }
            Axis::EastWest => {
                t.east = t.s;
                t.north = base - f64::from(dir) * half;
            }
        }
    }
}

fn grid_heading(axis: Axis, dir: i8) -> f64 {
    match (axis, dir > 0) {
        (Axis::NorthSouth, true) => 0.0,
        (Axis::NorthSouth, false) => 180.0,
        (Axis::EastWest, true) => 90.0,
        (Axis::EastWest, false) => 270.0,
    }
}

fn normal_sample(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        // Keep the stream aligned with the noisy case.
        let _: f64 = rng.gen();
        let _: f64 = rng.gen();
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
}

/// Box in pixels with its source vehicle and range.
#[derive(Debug, Clone, Copy)]
struct Projected {
    vehicle: usize,
    px: [f64; 4],
    dist: f64,
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

fn intersection(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    area(&[a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])])
}

impl ScenarioState {
    fn assemble(
        cfg: WorldConfig,
        vehicles: Vec<VehicleState>,
        tracks: Vec<Track>,
        layout: Layout,
        cct: ConversionTable,
        motion_rng: ChaCha8Rng,
    ) -> Self {
        let ocr = match cfg.sensor.ocr {
            OcrKind::Reference => OcrChannel::reference(),
            OcrKind::Identity => OcrChannel::identity(plates::plate_alphabet()),
        };
        Self {
            noise_rng: stream(cfg.seed, 1),
            detect_rng: stream(cfg.seed, 2),
            ocr_rng: stream(cfg.seed, 3),
            cfg,
            vehicles,
            tracks,
            layout,
            cct,
            ocr,
            tick: 0,
            motion_rng,
        }
    }

    /// A scene with hand-placed vehicles (index 0 is the ego). Vehicles move
    /// in straight lines at their given speed and are never recycled.
    pub fn with_placements(cfg: &WorldConfig, placements: &[Placement], plates_in: &[&str]) -> Result<Self> {
        cfg.validate()?;
        if placements.len() != plates_in.len() || placements.len() < 2 {
            return Err(Error::Config("need at least two placements, one plate each".into()));
        }
        let cct = cfg.conversion_table()?;
        let mut motion_rng = stream(cfg.seed, 0);
        let mut vehicles = Vec::new();
        let mut tracks = Vec::new();
        for (p, plate) in placements.iter().zip(plates_in) {
            if plate.chars().count() != PLATE_LEN {
                return Err(Error::Config(format!("plate {plate:?} is not {PLATE_LEN} characters")));
            }
            vehicles.push(VehicleState {
                id: plates::plate_id(&plates::canonicalize_plate(plate, &cct)),
                plate: plate.to_string(),
                true_position: cfg.origin,
                noisy_position: cfg.origin,
                orientation: geo::wrap_360(p.heading),
                speed: p.speed,
                dims: draw_dims(&mut motion_rng),
            });
            tracks.push(Track { lane: LaneRef::Free, s: 0.0, target_speed: p.speed, east: p.east, north: p.north });
        }
        let mut state = Self::assemble(cfg.clone(), vehicles, tracks, Layout::Free, cct, motion_rng);
        for i in 0..state.tracks.len() {
            state.sync_pose(i, state.vehicles[i].speed);
        }
        Ok(state)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn vehicles(&self) -> &[VehicleState] {
        &self.vehicles
    }

    pub fn ego(&self) -> &VehicleState {
        &self.vehicles[0]
    }

    pub fn conversion_table(&self) -> &ConversionTable {
        &self.cct
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    /// Local (east, north) metres of vehicle `i`.
    pub fn local_position(&self, i: usize) -> (f64, f64) {
        (self.tracks[i].east, self.tracks[i].north)
    }

    fn sync_pose(&mut self, i: usize, speed: f64) {
        let t = &mut self.tracks[i];
        let heading = match (&self.layout, t.lane) {
            (Layout::Straight { heading, lanes }, LaneRef::Straight { index }) => {
                let lane = &lanes[index];
                let (ue, un) = geo::heading_vector(*heading);
                // Right-hand normal of the road axis.
                let (ne, nn) = (un, -ue);
                t.east = t.s * ue + lane.offset * ne;
                t.north = t.s * un + lane.offset * nn;
                if lane.dir > 0.0 {
                    *heading
                } else {
                    geo::wrap_360(heading + 180.0)
                }
            }
            (_, LaneRef::Grid { axis, dir, .. }) => {
                set_grid_position(t);
                grid_heading(axis, dir)
            }
            _ => self.vehicles[i].orientation,
        };
        let v = &mut self.vehicles[i];
        v.orientation = heading;
        v.speed = speed;
        v.true_position = geo::from_local(self.cfg.origin, t.east, t.north);
    }

    fn lane_key(&self, i: usize) -> Option<LaneRef> {
        match self.tracks[i].lane {
            LaneRef::Free => None,
            l => Some(l),
        }
    }

    fn lane_dir(&self, lane: LaneRef) -> f64 {
        match (&self.layout, lane) {
            (Layout::Straight { lanes, .. }, LaneRef::Straight { index }) => lanes[index].dir,
            (_, LaneRef::Grid { dir, .. }) => f64::from(dir),
            _ => 1.0,
        }
    }

    fn advance(&mut self) {
        let dt = self.cfg.tick_interval;
        let n = self.tracks.len();
        if self.cfg.speed_resample_ticks > 0
            && self.tick > 0
            && self.tick.is_multiple_of(u64::from(self.cfg.speed_resample_ticks))
        {
            for i in 0..n {
                if self.tracks[i].lane != LaneRef::Free {
                    self.tracks[i].target_speed = self.motion_rng.gen_range(0.0..=self.cfg.max_speed);
                }
            }
        }

        // Leader constraints from pre-move positions.
        let mut by_lane: HashMap<LaneRef, Vec<usize>> = HashMap::new();
        for i in 0..n {
            if let Some(k) = self.lane_key(i) {
                by_lane.entry(k).or_default().push(i);
            }
        }
        let mut max_advance = vec![f64::INFINITY; n];
        for (lane, members) in &by_lane {
            let dir = self.lane_dir(*lane);
            let mut order = members.clone();
            order.sort_by(|&a, &b| (self.tracks[a].s * dir).total_cmp(&(self.tracks[b].s * dir)).then(a.cmp(&b)));
            for w in order.windows(2) {
                let (follower, leader) = (w[0], w[1]);
                let gap = (self.tracks[leader].s - self.tracks[follower].s) * dir
                    - (self.vehicles[leader].dims.length + self.vehicles[follower].dims.length) / 2.0
                    - MIN_GAP_M;
                max_advance[follower] = gap.max(0.0);
            }
        }

        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            let step = (self.tracks[i].target_speed * dt).min(max_advance[i]).max(0.0);
            match self.tracks[i].lane {
                LaneRef::Free => {
                    let (he, hn) = geo::heading_vector(self.vehicles[i].orientation);
                    self.tracks[i].east += he * step;
                    self.tracks[i].north += hn * step;
                }
                LaneRef::Straight { .. } => {
                    let dir = self.lane_dir(self.tracks[i].lane);
                    self.tracks[i].s += dir * step;
                }
                LaneRef::Grid { axis, street, dir } => {
                    let old = self.tracks[i].s;
                    let new = old + f64::from(dir) * step;
                    let crossed = if dir > 0 {
                        (old / GRID_BLOCK_M).floor() < (new / GRID_BLOCK_M).floor()
                    } else {
                        (old / GRID_BLOCK_M).ceil() > (new / GRID_BLOCK_M).ceil()
                    };
                    self.tracks[i].s = new;
                    if crossed {
                        let m = if dir > 0 { (new / GRID_BLOCK_M).floor() } else { (new / GRID_BLOCK_M).ceil() };
                        let u: f64 = self.motion_rng.gen();
                        let turn = if u < 0.5 {
                            0
                        } else if u < 0.75 {
                            1
                        } else {
                            -1
                        };
                        if turn != 0 {
                            let remaining = (new - m * GRID_BLOCK_M).abs();
                            // right turn = 1, left = -1
                            let (new_axis, new_dir) = match axis {
                                Axis::NorthSouth => (Axis::EastWest, if turn == 1 { dir } else { -dir }),
                                Axis::EastWest => (Axis::NorthSouth, if turn == 1 { -dir } else { dir }),
                            };
                            self.tracks[i].lane = LaneRef::Grid { axis: new_axis, street: m as i64, dir: new_dir };
                            self.tracks[i].s = street as f64 * GRID_BLOCK_M + f64::from(new_dir) * remaining;
                        }
                    }
                }
            }
            self.sync_pose(i, step / dt);
        }
        self.recycle();
    }

    fn recycle(&mut self) {
        let radius = self.cfg.effective_spawn_radius();
        let (ego_e, ego_n) = self.local_position(0);
        let ego_s = self.tracks[0].s;
        for i in 1..self.tracks.len() {
            match self.tracks[i].lane {
                LaneRef::Free => {}
                LaneRef::Straight { .. } => {
                    let rel = self.tracks[i].s - ego_s;
                    if rel.abs() <= radius {
                        continue;
                    }
                    let sign = rel.signum();
                    let slot = self.vehicles[i].dims.length + MIN_GAP_M + 5.0;
                    for attempt in 0..50 {
                        let s = self.tracks[i].s - sign * 2.0 * radius + sign * attempt as f64 * slot;
                        if self.straight_slot_free(i, s) {
                            self.tracks[i].s = s;
                            self.tracks[i].target_speed = self.motion_rng.gen_range(0.0..=self.cfg.max_speed);
                            let speed = self.vehicles[i].speed;
                            self.sync_pose(i, speed);
                            break;
                        }
                    }
                }
                LaneRef::Grid { .. } => {
                    let (e, n) = self.local_position(i);
                    if (e - ego_e).hypot(n - ego_n) <= radius {
                        continue;
                    }
                    for _ in 0..100 {
                        let t = random_grid_track(
                            &mut self.motion_rng,
                            (ego_e, ego_n),
                            0.8 * radius,
                            radius,
                            self.cfg.max_speed,
                        );
                        let clear = (0..self.tracks.len()).filter(|&u| u != i).all(|u| {
                            (self.tracks[u].east - t.east).hypot(self.tracks[u].north - t.north)
                                >= (self.vehicles[u].dims.length + self.vehicles[i].dims.length) / 2.0 + MIN_GAP_M
                        });
                        if clear {
                            self.tracks[i] = t;
                            let speed = self.vehicles[i].speed;
                            self.sync_pose(i, speed);
                            break;
                        }
                    }
                }
            }
        }
    }

    fn straight_slot_free(&self, i: usize, s: f64) -> bool {
        let lane = self.tracks[i].lane;
        (0..self.tracks.len()).filter(|&u| u != i).all(|u| {
            self.tracks[u].lane != lane
                || (self.tracks[u].s - s).abs()
                    >= (self.vehicles[u].dims.length + self.vehicles[i].dims.length) / 2.0 + MIN_GAP_M
        })
    }

    fn refresh_noise(&mut self) {
        let sigma = self.cfg.gps_noise_sigma;
        for i in 0..self.tracks.len() {
            let de = normal_sample(&mut self.noise_rng, sigma);
            let dn = normal_sample(&mut self.noise_rng, sigma);
            let t = &self.tracks[i];
            self.vehicles[i].noisy_position = geo::from_local(self.cfg.origin, t.east + de, t.north + dn);
        }
    }

    /// Whether vehicle `i`'s centre lies inside `cam`'s frustum and range.
    pub fn in_frustum(&self, cam: &CameraModel, i: usize) -> bool {
        if i == 0 {
            return false;
        }
        let (ee, en) = self.local_position(0);
        let (ve, vn) = self.local_position(i);
        let (re, rn) = (ve - ee, vn - en);
        let dist = re.hypot(rn);
        if dist == 0.0 || dist > cam.max_range {
            return false;
        }
        let axis = self.camera_heading(cam);
        geo::wrap_180(geo::heading_of(re, rn) - axis).abs() <= cam.hfov_deg / 2.0
    }

    fn camera_heading(&self, cam: &CameraModel) -> f64 {
        match cam.facing {
            Facing::Front => self.vehicles[0].orientation,
            Facing::Rear => geo::wrap_360(self.vehicles[0].orientation + 180.0),
        }
    }

    fn project(&self, cam: &CameraModel, i: usize) -> Option<Projected> {
        if !self.in_frustum(cam, i) {
            return None;
        }
        let (ee, en) = self.local_position(0);
        let (ve, vn) = self.local_position(i);
        let (fe, fnn) = geo::heading_vector(self.camera_heading(cam));
        let (re, rn) = (fnn, -fe);
        let v = &self.vehicles[i];
        let (he, hn) = geo::heading_vector(v.orientation);
        let (se, sn) = (hn, -he);
        let f = cam.focal_px();
        let (cx, cy) = (cam.image_w as f64 / 2.0, cam.image_h as f64 / 2.0);
        let mut px = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for (a, b) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let ce = ve + a * he * v.dims.length / 2.0 + b * se * v.dims.width / 2.0 - ee;
            let cn = vn + a * hn * v.dims.length / 2.0 + b * sn * v.dims.width / 2.0 - en;
            let fwd = (ce * fe + cn * fnn).max(NEAR_CLIP_M);
            let right = ce * re + cn * rn;
            let u = cx + f * right / fwd;
            for z in [0.0, VEHICLE_HEIGHT_M] {
                let y = cy + f * (cam.mount_height - z) / fwd;
                px[0] = px[0].min(u);
                px[2] = px[2].max(u);
                px[1] = px[1].min(y);
                px[3] = px[3].max(y);
            }
        }
        let (w, h) = (cam.image_w as f64, cam.image_h as f64);
        let px = [px[0].clamp(0.0, w), px[1].clamp(0.0, h), px[2].clamp(0.0, w), px[3].clamp(0.0, h)];
        if px[2] <= px[0] || px[3] <= px[1] {
            return None;
        }
        Some(Projected { vehicle: i, px, dist: (ve - ee).hypot(vn - en) })
    }

    /// Probability that a readable plate at distance `d` is recognized.
    pub fn p_ocr(&self, cam: &CameraModel, d: f64, weather: &Weather) -> f64 {
        let range = if self.cfg.sensor.ocr_distance_falloff { (1.0 - d / cam.max_range).clamp(0.0, 1.0) } else { 1.0 };
        range * (1.0 - weather.ocr_degradation)
    }

    fn distance_to_ego(&self, i: usize) -> f64 {
        let (ee, en) = self.local_position(0);
        let (ve, vn) = self.local_position(i);
        (ve - ee).hypot(vn - en)
    }

    fn observe(&mut self) -> Observation {
        self.refresh_noise();
        let front_cam = self.cfg.front_camera;
        let rear_cam = self.cfg.rear_camera;
        let front_boxes = detect_vehicles(self, &front_cam);
        let rear_boxes = detect_vehicles(self, &rear_cam);
        let front_boxes = self.read_plates(&front_cam, front_boxes);
        let rear_boxes = self.read_plates(&rear_cam, rear_boxes);

        let ego = self.vehicles[0].clone();
        let mut messages = Vec::new();
        let mut truth_pairs = BTreeMap::new();
        for i in 1..self.vehicles.len() {
            let v = &self.vehicles[i];
            if geo::haversine_m(ego.true_position, v.true_position) > self.cfg.comm_range {
                continue;
            }
            messages.push(Message {
                lat: v.noisy_position.lat,
                lng: v.noisy_position.lng,
                ori: v.orientation,
                spd: v.speed,
                id: v.id,
                state: if v.speed > 0.0 { "moving" } else { "stopped" }.to_string(),
            });
            let truth = match front_boxes.iter().position(|b| b.vehicle_ref == i) {
                Some(idx) => TruthPair::Box(idx),
                None if self.in_frustum(&front_cam, i) => TruthPair::Undetected,
                None => TruthPair::Outside,
            };
            truth_pairs.insert(v.id, truth);
        }
        Observation {
            t: self.tick,
            front_boxes,
            rear_boxes,
            messages,
            ego_sensors: SensorRecord {
                lat: ego.noisy_position.lat,
                lng: ego.noisy_position.lng,
                ori: ego.orientation,
                spd: ego.speed,
            },
            truth_pairs,
        }
    }

    fn read_plates(&mut self, cam: &CameraModel, mut boxes: Vec<DetectedBox>) -> Vec<DetectedBox> {
        let weather = self.cfg.weather;
        let mut rng = std::mem::replace(&mut self.ocr_rng, ChaCha8Rng::seed_from_u64(0));
        for b in &mut boxes {
            b.plate_text = visible_plate(self, cam, b, &weather, &mut rng)
                .map(|p| plates::sample_ocr(&p, &self.ocr, &mut rng).expect("plates use the channel alphabet"));
        }
        self.ocr_rng = rng;
        boxes
    }

    /// Advances one tick and returns what the ego observes.
    pub fn simulate_tick(&mut self) -> Observation {
        self.advance();
        let obs = self.observe();
        self.tick += 1;
        obs
    }

    /// Runs the configured duration.
    pub fn run(&mut self) -> Vec<Observation> {
        (0..self.cfg.num_ticks()).map(|_| self.simulate_tick()).collect()
    }
}

pub fn simulate_tick(state: &mut ScenarioState) -> Observation {
    state.simulate_tick()
}

/// Projects every in-frustum vehicle into `cam`, merges heavily occluded
/// boxes into their occluder, and drops survivors at the miss rate. Boxes are
/// returned left to right. OCR text is left empty.
pub fn detect_vehicles(state: &mut ScenarioState, cam: &CameraModel) -> Vec<DetectedBox> {
    let profile = state.cfg.sensor;
    let weather = state.cfg.weather;
    let mut projected: Vec<Projected> = (1..state.vehicles.len()).filter_map(|i| state.project(cam, i)).collect();
    projected.sort_by(|a, b| a.dist.total_cmp(&b.dist).then(a.vehicle.cmp(&b.vehicle)));

    let mut out = Vec::new();
    for (k, p) in projected.iter().enumerate() {
        let own = area(&p.px);
        let coverage = projected[..k].iter().map(|near| intersection(&p.px, &near.px) / own).fold(0.0, f64::max);
        if coverage > profile.merge_threshold {
            continue;
        }
        let range_frac = (p.dist / cam.max_range).min(1.0);
        let p_miss =
            profile.miss_rate + (1.0 - profile.miss_rate) * weather.detection_degradation * range_frac * range_frac;
        let u: f64 = state.detect_rng.gen();
        if u < p_miss {
            continue;
        }
        let height_px = p.px[3] - p.px[1];
        let occluded = coverage > 0.0 && profile.occlusion_blocks_plate;
        let (w, h) = (cam.image_w as f64, cam.image_h as f64);
        out.push(DetectedBox {
            vehicle_ref: p.vehicle,
            bb_norm: [p.px[0] / w, p.px[1] / h, p.px[2] / w, p.px[3] / h],
            plate_readable: height_px >= profile.min_plate_px && !occluded,
            plate_text: None,
        });
    }
    out.sort_by(|a, b| a.bb_norm[0].total_cmp(&b.bb_norm[0]).then(a.vehicle_ref.cmp(&b.vehicle_ref)));
    out
}

/// The ground-truth plate of the boxed vehicle when its plate is readable
/// and the recognition draw succeeds.
pub fn visible_plate<R: Rng + ?Sized>(
    state: &ScenarioState,
    cam: &CameraModel,
    bx: &DetectedBox,
    weather: &Weather,
    rng: &mut R,
) -> Option<String> {
    if !bx.plate_readable {
        return None;
    }
    let p = state.p_ocr(cam, state.distance_to_ego(bx.vehicle_ref), weather);
    let u: f64 = rng.gen();
    (u < p).then(|| state.vehicles[bx.vehicle_ref].plate.clone())
}

/// Shuffles `items` with a stream derived from `seed`.
pub fn seeded_shuffle<T>(items: &mut [T], seed: u64) {
    items.shuffle(&mut stream(seed, 7));
}
