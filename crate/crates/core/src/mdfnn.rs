//! The bounding-box mapping network.
//!
//! A stack of ReLU hidden layers, inverted dropout on the last of them, a
//! feedback concatenation (the box the mapping module chose for this sender
//! on the previous tick) and a sigmoid output layer of width 5: four box
//! coordinates and the inside-image probability. Gradients are derived by
//! hand; the feedback input is treated as a constant.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVector;

pub const OUTPUT_WIDTH: usize = 5;
pub const FEEDBACK_WIDTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_width: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub dropout: f64,
    pub mu: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { input_width: 11, hidden_width: 64, hidden_layers: 10, dropout: 0.3, mu: 1.0 }
    }
}

/// Dense layer; `weights` is row-major `rows x cols` (out x in).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, weights: vec![0.0; rows * cols], bias: vec![0.0; rows] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Hidden layers followed by the output layer.
    pub layers: Vec<Layer>,
    pub dropout: f64,
    pub mu: f64,
}

impl ModelParams {
    /// All-zero parameters with the given shape.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Layer::zeros(l.rows, l.cols)).collect(),
            dropout: self.dropout,
            mu: self.mu,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.cols)
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Checks the layer chain: each hidden layer feeds the next, and the
    /// output layer reads the last hidden activation plus the feedback.
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::Dimension("need at least one hidden layer and an output layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.rows == 0 || l.cols == 0 {
                return Err(Error::Dimension(format!("layer {i} has a zero dimension")));
            }
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(Error::Dimension(format!("layer {i} storage does not match {}x{}", l.rows, l.cols)));
            }
        }
        for w in self.layers[..self.layers.len() - 1].windows(2) {
            if w[1].cols != w[0].rows {
                return Err(Error::Dimension(format!("hidden widths {} -> {} do not chain", w[0].rows, w[1].cols)));
            }
        }
        let n = self.layers.len();
        let (last_hidden, out) = (&self.layers[n - 2], &self.layers[n - 1]);
        if out.cols != last_hidden.rows + FEEDBACK_WIDTH || out.rows != OUTPUT_WIDTH {
            return Err(Error::Dimension(format!(
                "output layer is {}x{}, expected {}x{}",
                out.rows,
                out.cols,
                OUTPUT_WIDTH,
                last_hidden.rows + FEEDBACK_WIDTH
            )));
        }
        if !self.values().all(f64::is_finite) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(())
    }

    /// Every parameter in a fixed order: per layer, weights then bias.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.rows == b.rows && a.cols == b.cols)
    }

    /// Bitwise equality, distinguishing -0.0 from 0.0.
    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.same_shape(other)
            && self.mu.to_bits() == other.mu.to_bits()
            && self.dropout.to_bits() == other.dropout.to_bits()
            && self.values().zip(other.values()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// He-style uniform initialization: weights in `±sqrt(6 / fan_in)`, zero
/// biases.
pub fn init_model<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ModelParams> {
    if cfg.input_width == 0 || cfg.hidden_width == 0 || cfg.hidden_layers == 0 {
        return Err(Error::Config("layer widths and depth must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", cfg.dropout)));
    }
    let mut shapes = vec![(cfg.hidden_width, cfg.input_width)];
    shapes.extend((1..cfg.hidden_layers).map(|_| (cfg.hidden_width, cfg.hidden_width)));
    shapes.push((OUTPUT_WIDTH, cfg.hidden_width + FEEDBACK_WIDTH));
    let layers = shapes
        .into_iter()
        .map(|(rows, cols)| {
            let bound = (6.0 / cols as f64).sqrt();
            let mut l = Layer::zeros(rows, cols);
            for w in &mut l.weights {
                *w = rng.gen_range(-bound..bound);
            }
            l
        })
        .collect();
    Ok(ModelParams { layers, dropout: cfg.dropout, mu: cfg.mu })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub bbx: [f64; 4],
    pub inside: f64,
}

impl ModelOutput {
    pub fn as_array(&self) -> [f64; 5] {
        [self.bbx[0], self.bbx[1], self.bbx[2], self.bbx[3], self.inside]
    }

    fn from_slice(v: &[f64]) -> Self {
        Self { bbx: [v[0], v[1], v[2], v[3]], inside: v[4] }
    }
}

/// Previous tick's decided box; zeros when the sender went unpaired.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeedbackInput(pub [f64; 4]);

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-example activations kept for backpropagation.
#[derive(Debug, Clone)]
struct Trace {
    /// Input followed by each hidden layer's post-dropout activation.
    acts: Vec<Vec<f64>>,
    /// Hidden pre-activations.
    pre: Vec<Vec<f64>>,
    /// Dropout multipliers per hidden unit (0 or 1/(1-p)); only the last
    /// hidden layer is dropped out, the rest stay at 1.
    masks: Vec<Vec<f64>>,
    out: [f64; OUTPUT_WIDTH],
}

impl Trace {
    fn new(p: &ModelParams) -> Self {
        let h = p.hidden_layers();
        let mut acts = vec![vec![0.0; p.input_width()]];
        acts.extend(p.layers[..h].iter().map(|l| vec![0.0; l.rows]));
        Self {
            acts,
            pre: p.layers[..h].iter().map(|l| vec![0.0; l.rows]).collect(),
            masks: p.layers[..h].iter().map(|l| vec![1.0; l.rows]).collect(),
            out: [0.0; OUTPUT_WIDTH],
        }
    }
}

fn affine(l: &Layer, input: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        let row = &l.weights[r * l.cols..(r + 1) * l.cols];
        *o = l.bias[r] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
    }
}

fn run_forward<R: Rng + ?Sized>(
    p: &ModelParams,
    input: &[f64],
    fb: &FeedbackInput,
    dropout: Option<&mut R>,
    tr: &mut Trace,
) {
    let h = p.hidden_layers();
    tr.acts[0].copy_from_slice(input);
    let keep = 1.0 - p.dropout;
    let mut rng = dropout;
    for l in 0..h {
        let (prev, rest) = tr.acts.split_at_mut(l + 1);
        affine(&p.layers[l], &prev[l], &mut tr.pre[l]);
        let a = &mut rest[0];
        for (u, (&z, m)) in tr.pre[l].iter().zip(tr.masks[l].iter_mut()).enumerate() {
            *m = match rng.as_deref_mut() {
                Some(r) if p.dropout > 0.0 && l + 1 == h => {
                    if r.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                }
                _ => 1.0,
            };
            a[u] = z.max(0.0) * *m;
        }
    }
    let out = &p.layers[h];
    let last = &tr.acts[h];
    for r in 0..OUTPUT_WIDTH {
        let row = &out.weights[r * out.cols..(r + 1) * out.cols];
        let (wh, wf) = row.split_at(last.len());
        let z = out.bias[r]
            + wh.iter().zip(last).map(|(w, x)| w * x).sum::<f64>()
            + wf.iter().zip(&fb.0).map(|(w, x)| w * x).sum::<f64>();
        tr.out[r] = sigmoid(z);
    }
}

fn check_input(p: &ModelParams, input: &[f64], fb: &FeedbackInput) -> Result<()> {
    if input.len() != p.input_width() {
        return Err(Error::Dimension(format!("input has {} values, model expects {}", input.len(), p.input_width())));
    }
    if !input.iter().chain(&fb.0).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("model input"));
    }
    Ok(())
}

/// One forward pass over a flat input. Dropout is active only when
/// `training` is set.
pub fn forward_input<R: Rng + ?Sized>(
    params: &ModelParams,
    input: &[f64],
    fb: &FeedbackInput,
    training: bool,
    rng: &mut R,
) -> Result<ModelOutput> {
    check_input(params, input, fb)?;
    let mut tr = Trace::new(params);
    run_forward(params, input, fb, training.then_some(rng), &mut tr);
    Ok(ModelOutput::from_slice(&tr.out))
}

pub fn forward<R: Rng + ?Sized>(
    params: &ModelParams,
    features: &FeatureVector,
    fb: &FeedbackInput,
    training: bool,
    rng: &mut R,
) -> Result<ModelOutput> {
    forward_input(params, &features.to_input(), fb, training, rng)
}

/// Deterministic evaluation-mode forward pass.
pub fn predict(params: &ModelParams, features: &FeatureVector, fb: &FeedbackInput) -> Result<ModelOutput> {
    predict_input(params, &features.to_input(), fb)
}

pub fn predict_input(params: &ModelParams, input: &[f64], fb: &FeedbackInput) -> Result<ModelOutput> {
    check_input(params, input, fb)?;
    let mut tr = Trace::new(params);
    run_forward::<rand::rngs::ThreadRng>(params, input, fb, None, &mut tr);
    Ok(ModelOutput::from_slice(&tr.out))
}

/// Mean squared box error plus `mu` times the squared inside error.
pub fn loss_bbx(pred: &ModelOutput, target: &[f64; 5], mu: f64) -> f64 {
    let boxes: f64 = (0..4).map(|i| (target[i] - pred.bbx[i]).powi(2)).sum::<f64>() / 4.0;
    boxes + mu * (target[4] - pred.inside).powi(2)
}

/// Accumulates `scale * dLoss/dparam` for one traced example into `grad`.
fn backward(p: &ModelParams, fb: &FeedbackInput, target: &[f64; 5], tr: &Trace, scale: f64, grad: &mut ModelParams) {
    let h = p.hidden_layers();
    let mut dz_out = [0.0; OUTPUT_WIDTH];
    for i in 0..OUTPUT_WIDTH {
        let y = tr.out[i];
        let dl = if i < 4 { 0.5 * (y - target[i]) } else { 2.0 * p.mu * (y - target[i]) };
        dz_out[i] = scale * dl * y * (1.0 - y);
    }

    let out = &p.layers[h];
    let g_out = &mut grad.layers[h];
    let last = &tr.acts[h];
    let hw = last.len();
    let mut da = vec![0.0; hw];
    for (r, &dz) in dz_out.iter().enumerate() {
        let g_row = &mut g_out.weights[r * out.cols..(r + 1) * out.cols];
        for (g, x) in g_row[..hw].iter_mut().zip(last) {
            *g += dz * x;
        }
        for (g, x) in g_row[hw..].iter_mut().zip(&fb.0) {
            *g += dz * x;
        }
        g_out.bias[r] += dz;
        let w_row = &out.weights[r * out.cols..r * out.cols + hw];
        for (d, w) in da.iter_mut().zip(w_row) {
            *d += dz * w;
        }
    }

    for l in (0..h).rev() {
        let layer = &p.layers[l];
        let dz: Vec<f64> = da
            .iter()
            .zip(&tr.pre[l])
            .zip(&tr.masks[l])
            .map(|((&d, &z), &m)| if z > 0.0 { d * m } else { 0.0 })
            .collect();
        let input = &tr.acts[l];
        let g = &mut grad.layers[l];
        let mut da_prev = vec![0.0; layer.cols];
        for (r, &d) in dz.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let g_row = &mut g.weights[r * layer.cols..(r + 1) * layer.cols];
            for (gw, x) in g_row.iter_mut().zip(input) {
                *gw += d * x;
            }
            g.bias[r] += d;
            let w_row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
            for (dp, w) in da_prev.iter_mut().zip(w_row) {
                *dp += d * w;
            }
        }
        da = da_prev;
    }
}

/// Analytic gradient of the loss for one example with dropout disabled.
pub fn loss_gradient(
    params: &ModelParams,
    input: &[f64],
    fb: &FeedbackInput,
    target: &[f64; 5],
) -> Result<(f64, ModelParams)> {
    check_input(params, input, fb)?;
    let mut tr = Trace::new(params);
    run_forward::<rand::rngs::ThreadRng>(params, input, fb, None, &mut tr);
    let mut grad = params.zeros_like();
    backward(params, fb, target, &tr, 1.0, &mut grad);
    Ok((loss_bbx(&ModelOutput::from_slice(&tr.out), target, params.mu), grad))
}

/// One training row in network terms.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRow {
    pub input: Vec<f64>,
    pub feedback: FeedbackInput,
    pub target: [f64; 5],
}

impl From<&crate::labeling::LabeledExample> for TrainingRow {
    fn from(e: &crate::labeling::LabeledExample) -> Self {
        Self { input: e.features.to_input(), feedback: FeedbackInput(e.feedback), target: e.target }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, batch_size: 32 }
    }
}

/// Adam moment estimates, flattened in [`ModelParams::values`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let n = params.param_count();
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn apply(&mut self, params: &mut ModelParams, grad: &ModelParams, cfg: &OptimizerConfig) {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - cfg.beta1.powf(t);
        let c2 = 1.0 - cfg.beta2.powf(t);
        for (((p, g), m), v) in params.values_mut().zip(grad.values()).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let update = cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            *p -= update;
        }
    }
}

/// One pass over `data` in seeded shuffled mini-batches. Returns the mean
/// per-example training loss (with dropout active).
pub fn train_epoch<R: Rng + ?Sized>(
    params: &mut ModelParams,
    adam: &mut AdamState,
    data: &[TrainingRow],
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    for row in data {
        check_input(params, &row.input, &row.feedback)?;
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut tr = Trace::new(params);
    let mut grad = params.zeros_like();
    let mut total = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        for v in grad.values_mut() {
            *v = 0.0;
        }
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            let row = &data[i];
            run_forward(params, &row.input, &row.feedback, Some(&mut *rng), &mut tr);
            let loss = loss_bbx(&ModelOutput::from_slice(&tr.out), &row.target, params.mu);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss on example {i}")));
            }
            total += loss;
            backward(params, &row.feedback, &row.target, &tr, scale, &mut grad);
        }
        adam.apply(params, &grad, cfg);
    }
    let mean = total / data.len() as f64;
    if !params.values().all(f64::is_finite) {
        return Err(Error::Diverged("non-finite parameters after update".into()));
    }
    Ok(mean)
}

/// Mean evaluation-mode loss over `data`.
pub fn evaluate_loss(params: &ModelParams, data: &[TrainingRow]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for row in data {
        total += loss_bbx(&predict_input(params, &row.input, &row.feedback)?, &row.target, params.mu);
    }
    Ok(total / data.len() as f64)
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: ModelParams,
    pub adam: AdamState,
    pub opt: OptimizerConfig,
}

impl Trainer {
    pub fn new(params: ModelParams, opt: OptimizerConfig) -> Self {
        let adam = AdamState::new(&params);
        Self { params, adam, opt }
    }

    pub fn train_epoch<R: Rng + ?Sized>(&mut self, data: &[TrainingRow], rng: &mut R) -> Result<f64> {
        train_epoch(&mut self.params, &mut self.adam, data, &self.opt, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig { input_width: 3, hidden_width: 8, hidden_layers: 3, dropout: 0.3, mu: 1.0 }
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        let a = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(a.bit_eq(&b));
        a.validate().unwrap();
    }

    #[test]
    fn parameter_count_closed_form() {
        let p = init_model(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let expected = (11 * 64 + 64) + 9 * (64 * 64 + 64) + (68 * 5 + 5);
        assert_eq!(p.param_count(), expected);
        assert_eq!(p.layers.len(), 11);
    }

    #[test]
    fn zero_width_is_rejected() {
        let cfg = ModelConfig { hidden_width: 0, ..ModelConfig::default() };
        assert!(matches!(init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Config(_))));
    }

    struct ConstRng;

    impl rand::RngCore for ConstRng {
        fn next_u32(&mut self) -> u32 {
            0x8000_0000
        }
        fn next_u64(&mut self) -> u64 {
            0x8000_0000_0000_0000
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            dest.fill(0x80);
        }
        fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
            self.fill_bytes(dest);
            Ok(())
        }
    }

    #[test]
    fn degenerate_rng_gives_constant_layers() {
        let p = init_model(&small_cfg(), &mut ConstRng).unwrap();
        for l in &p.layers {
            assert!(l.weights.iter().all(|&w| w == l.weights[0]));
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_bounded() {
        let p = init_model(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = vec![0.3; 11];
        let fb = FeedbackInput([0.1, 0.2, 0.3, 0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = forward_input(&p, &x, &fb, false, &mut rng).unwrap();
        let b = forward_input(&p, &x, &fb, false, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, predict_input(&p, &x, &fb).unwrap());
        assert!(a.as_array().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = init_model(&small_cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let fb = FeedbackInput::default();
        assert!(matches!(predict_input(&p, &[0.0, f64::NAN, 0.0], &fb), Err(Error::NonFinite(_))));
        assert!(matches!(predict_input(&p, &[0.0; 4], &fb), Err(Error::Dimension(_))));
    }

    #[test]
    fn loss_values() {
        let t = [0.1, 0.2, 0.3, 0.4, 1.0];
        let exact = ModelOutput { bbx: [0.1, 0.2, 0.3, 0.4], inside: 1.0 };
        assert_eq!(loss_bbx(&exact, &t, 1.0), 0.0);
        let off = ModelOutput { bbx: [0.2, 0.3, 0.4, 0.5], inside: 1.0 };
        assert!((loss_bbx(&off, &t, 1.0) - 0.01).abs() < 1e-12);
        let inside_off = ModelOutput { inside: 0.0, ..exact };
        assert!((loss_bbx(&inside_off, &t, 2.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let mut p = init_model(&small_cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = p.clone();
        let mut adam = AdamState::new(&p);
        let data = vec![TrainingRow {
            input: vec![0.1, 0.2, 0.3],
            feedback: FeedbackInput::default(),
            target: [0.1, 0.1, 0.2, 0.2, 1.0],
        }];
        let opt = OptimizerConfig { lr: 0.0, ..OptimizerConfig::default() };
        train_epoch(&mut p, &mut adam, &data, &opt, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let mut p = init_model(&small_cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut adam = AdamState::new(&p);
        let r = train_epoch(&mut p, &mut adam, &[], &OptimizerConfig::default(), &mut ChaCha8Rng::seed_from_u64(2));
        assert!(r.is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut p = init_model(&small_cfg(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        // Positive biases keep every unit active so the kinks stay out of reach.
        for l in &mut p.layers {
            for b in &mut l.bias {
                *b = 0.5;
            }
        }
        p.mu = 1.7;
        let x = [0.2, -0.4, 0.7];
        let fb = FeedbackInput([0.3, 0.1, 0.6, 0.5]);
        let t = [0.2, 0.3, 0.5, 0.6, 1.0];
        let (_, grad) = loss_gradient(&p, &x, &fb, &t).unwrap();
        let analytic: Vec<f64> = grad.values().collect();
        let eps = 1e-5;
        let n = p.param_count();
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            let mut plus = p.clone();
            *plus.values_mut().nth(i).unwrap() += eps;
            let mut minus = p.clone();
            *minus.values_mut().nth(i).unwrap() -= eps;
            let lp = loss_bbx(&predict_input(&plus, &x, &fb).unwrap(), &t, p.mu);
            let lm = loss_bbx(&predict_input(&minus, &x, &fb).unwrap(), &t, p.mu);
            let numeric = (lp - lm) / (2.0 * eps);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-6);
            let rel = (numeric - analytic[i]).abs() / denom;
            assert!(rel < 1e-4, "param {i}: numeric {numeric} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn training_reduces_loss() {
        let cfg = ModelConfig { dropout: 0.0, ..small_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let opt = OptimizerConfig { lr: 5e-3, batch_size: 16, ..OptimizerConfig::default() };
        let mut trainer = Trainer::new(init_model(&cfg, &mut rng).unwrap(), opt);
        let data: Vec<TrainingRow> = (0..64)
            .map(|i| {
                let a = i as f64 / 64.0;
                TrainingRow {
                    input: vec![a, 1.0 - a, 0.5],
                    feedback: FeedbackInput::default(),
                    target: [a * 0.5, 0.2, a * 0.5 + 0.1, 0.4, if a > 0.5 { 1.0 } else { 0.0 }],
                }
            })
            .collect();
        let before = evaluate_loss(&trainer.params, &data).unwrap();
        for _ in 0..100 {
            trainer.train_epoch(&data, &mut rng).unwrap();
        }
        let after = evaluate_loss(&trainer.params, &data).unwrap();
        assert!(after < before * 0.5, "{before} -> {after}");
    }

    #[test]
    fn validate_catches_broken_chain() {
        let mut p = init_model(&small_cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        p.layers[1] = Layer::zeros(8, 7);
        assert!(p.validate().is_err());
    }

    #[test]
    fn dropout_mean_matches_eval_forward() {
        let p = init_model(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x: Vec<f64> = (0..11).map(|i| (i as f64 - 5.0) / 10.0).collect();
        let fb = FeedbackInput([0.2, 0.3, 0.4, 0.6]);
        // The dropped layer feeds the output affinely, so the identity holds
        // exactly for the logits; the sigmoid only bends it slightly.
        let logit = |v: f64| (v / (1.0 - v)).ln();
        let eval = predict_input(&p, &x, &fb).unwrap().as_array();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 10_000;
        let (mut mean, mut mean_logit) = ([0.0; 5], [0.0; 5]);
        for _ in 0..n {
            let o = forward_input(&p, &x, &fb, true, &mut rng).unwrap().as_array();
            for i in 0..5 {
                mean[i] += o[i] / n as f64;
                mean_logit[i] += logit(o[i]) / n as f64;
            }
        }
        for i in 0..5 {
            let e = logit(eval[i]);
            assert!((mean_logit[i] - e).abs() <= 0.02 * e.abs().max(1.0), "logit {} vs {e}", mean_logit[i]);
            assert!((mean[i] - eval[i]).abs() <= 0.02, "{} vs {}", mean[i], eval[i]);
        }
    }

    #[test]
    fn separable_toy_set_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data: Vec<TrainingRow> = (0..50)
            .map(|i| {
                let inside = i % 2 == 0;
                let a = (i / 2) as f64 / 25.0;
                let mut input = vec![0.0; 11];
                input[0] = if inside { 0.5 } else { -0.5 };
                input[1] = a - 0.5;
                let target = if inside { [0.2 + 0.4 * a, 0.3, 0.3 + 0.4 * a, 0.6, 1.0] } else { [0.0; 5] };
                TrainingRow { input, feedback: FeedbackInput::default(), target }
            })
            .collect();
        let mut trainer =
            Trainer::new(init_model(&ModelConfig::default(), &mut rng).unwrap(), OptimizerConfig::default());
        let mut losses = Vec::new();
        for _ in 0..200 {
            losses.push(trainer.train_epoch(&data, &mut rng).unwrap());
        }
        let (first, last) = (losses[0], losses[199]);
        assert!(last <= 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn small_step_does_not_increase_loss() {
        let p0 = init_model(&small_cfg(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let row = TrainingRow {
            input: vec![0.4, -0.1, 0.3],
            feedback: FeedbackInput([0.1, 0.1, 0.3, 0.3]),
            target: [0.2, 0.2, 0.5, 0.5, 1.0],
        };
        let cfg = ModelParams { dropout: 0.0, ..p0 };
        let before = evaluate_loss(&cfg, std::slice::from_ref(&row)).unwrap();
        let mut p = cfg.clone();
        let mut adam = AdamState::new(&p);
        let opt = OptimizerConfig { lr: 1e-5, batch_size: 1, ..OptimizerConfig::default() };
        train_epoch(&mut p, &mut adam, std::slice::from_ref(&row), &opt, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let after = evaluate_loss(&p, std::slice::from_ref(&row)).unwrap();
        assert!(after <= before, "{before} -> {after}");
        assert!(!p.bit_eq(&cfg));
    }
}
