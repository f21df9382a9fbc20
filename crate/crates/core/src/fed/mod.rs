//! Federated training: per-client local training and count-weighted
//! parameter averaging, either in process or over TCP.

pub mod codec;
pub mod net;
pub mod protocol;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdfnn::{train_epoch, AdamState, ModelParams, OptimizerConfig, TrainingRow};

pub use codec::{decode_params, digest, encode_params, load_params, save_params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    pub rounds: u32,
    pub local_epochs: u32,
    pub min_clients: usize,
    pub timeout_secs: f64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self { rounds: 50, local_epochs: 1, min_clients: 1, timeout_secs: 30.0 }
    }
}

/// One vehicle's training state. The rng and optimizer moments persist
/// across rounds; only the parameters are replaced by each broadcast.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: u32,
    pub data: Vec<TrainingRow>,
    pub params: Option<ModelParams>,
    pub round: u32,
    pub opt: OptimizerConfig,
    rng: ChaCha8Rng,
    adam: Option<AdamState>,
}

impl ClientState {
    pub fn new(id: u32, data: Vec<TrainingRow>, opt: OptimizerConfig, seed: u64) -> Self {
        Self { id, data, params: None, round: 0, opt, rng: ChaCha8Rng::seed_from_u64(seed), adam: None }
    }
}

/// Copies `global`, trains `epochs` passes over the local data and returns
/// the new parameters with the local example count.
pub fn local_train(client: &mut ClientState, global: &ModelParams, epochs: u32) -> Result<(ModelParams, usize)> {
    if client.data.is_empty() {
        return Err(Error::Config(format!("client {} has no training data", client.id)));
    }
    let mut params = global.clone();
    let adam = client.adam.get_or_insert_with(|| AdamState::new(global));
    for _ in 0..epochs {
        train_epoch(&mut params, adam, &client.data, &client.opt, &mut client.rng)?;
    }
    client.round += 1;
    client.params = Some(params.clone());
    Ok((params, client.data.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub params: ModelParams,
    pub examples: usize,
}

/// Example-count-weighted mean of the updates. Terms are summed in ascending
/// client id order and each result is clamped to the range spanned by the
/// inputs, so rounding can never step outside it.
pub fn fed_avg(updates: &[ClientUpdate]) -> Result<ModelParams> {
    let first = updates.first().ok_or_else(|| Error::Protocol("no updates to aggregate".into()))?;
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    if order.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Protocol("duplicate client id among updates".into()));
    }
    for u in &order {
        if !u.params.same_shape(&first.params) {
            return Err(Error::Protocol(format!("client {} sent parameters of a different shape", u.client_id)));
        }
        if u.examples == 0 {
            return Err(Error::Protocol(format!("client {} reported zero examples", u.client_id)));
        }
    }
    let total: usize = order.iter().map(|u| u.examples).sum();
    let mut out = first.params.zeros_like();
    let mut lo: Vec<f64> = first.params.values().collect();
    let mut hi = lo.clone();
    for u in &order {
        let w = u.examples as f64 / total as f64;
        for (((acc, v), l), h) in out.values_mut().zip(u.params.values()).zip(lo.iter_mut()).zip(hi.iter_mut()) {
            *acc += w * v;
            *l = l.min(v);
            *h = h.max(v);
        }
    }
    for ((acc, l), h) in out.values_mut().zip(&lo).zip(&hi) {
        *acc = acc.clamp(*l, *h);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub clients: Vec<u32>,
    pub examples: Vec<usize>,
    pub digest: u64,
}

/// Splits `data` into `n` contiguous, disjoint, near-equal parts.
pub fn partition<T: Clone>(data: &[T], n: usize) -> Vec<Vec<T>> {
    let n = n.max(1);
    let base = data.len() / n;
    let extra = data.len() % n;
    let mut out = Vec::with_capacity(n);
    let mut at = 0;
    for i in 0..n {
        let len = base + usize::from(i < extra);
        out.push(data[at..at + len].to_vec());
        at += len;
    }
    out
}

/// In-process federated training with full participation. `on_round` sees
/// each round's record and the freshly aggregated global model.
pub fn run_federated(
    clients: &mut [ClientState],
    initial: ModelParams,
    cfg: &FedConfig,
    mut on_round: impl FnMut(&RoundRecord, &ModelParams) -> Result<()>,
) -> Result<ModelParams> {
    if clients.len() < cfg.min_clients.max(1) {
        return Err(Error::Protocol(format!(
            "{} clients available, {} required",
            clients.len(),
            cfg.min_clients.max(1)
        )));
    }
    let mut global = initial;
    for round in 0..cfg.rounds {
        let mut updates = Vec::with_capacity(clients.len());
        for c in clients.iter_mut() {
            let (params, examples) = local_train(c, &global, cfg.local_epochs)?;
            updates.push(ClientUpdate { client_id: c.id, params, examples });
        }
        global = fed_avg(&updates)?;
        updates.sort_by_key(|u| u.client_id);
        let record = RoundRecord {
            round,
            clients: updates.iter().map(|u| u.client_id).collect(),
            examples: updates.iter().map(|u| u.examples).collect(),
            digest: digest(&global),
        };
        on_round(&record, &global)?;
    }
    Ok(global)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdfnn::{init_model, FeedbackInput, Layer, ModelConfig, Trainer};

    fn scalar(v: f64) -> ModelParams {
        let l = |rows, cols, w: f64| Layer { rows, cols, weights: vec![w; rows * cols], bias: vec![w; rows] };
        ModelParams { layers: vec![l(1, 1, v), l(5, 5, v)], dropout: 0.0, mu: 1.0 }
    }

    fn upd(id: u32, p: ModelParams, n: usize) -> ClientUpdate {
        ClientUpdate { client_id: id, params: p, examples: n }
    }

    #[test]
    fn weighted_mean_examples() {
        let avg = fed_avg(&[upd(0, scalar(0.0), 1), upd(1, scalar(4.0), 3)]).unwrap();
        assert!(avg.values().all(|v| v == 3.0));
        let avg = fed_avg(&[upd(0, scalar(0.7), 2), upd(1, scalar(-0.7), 2)]).unwrap();
        assert!(avg.values().all(|v| v == 0.0));
        let p = scalar(0.1);
        let avg = fed_avg(&[upd(2, p.clone(), 3), upd(0, p.clone(), 7), upd(1, p.clone(), 11)]).unwrap();
        assert!(avg.bit_eq(&p));
    }

    #[test]
    fn fed_avg_rejects_bad_input() {
        assert!(fed_avg(&[]).is_err());
        let mut odd = scalar(1.0);
        odd.layers.pop();
        assert!(matches!(fed_avg(&[upd(0, scalar(1.0), 1), upd(1, odd, 1)]), Err(Error::Protocol(_))));
        assert!(fed_avg(&[upd(0, scalar(1.0), 0)]).is_err());
    }

    #[test]
    fn partition_is_disjoint_and_complete() {
        let data: Vec<u32> = (0..11).collect();
        let parts = partition(&data, 2);
        assert_eq!(parts[0].len(), 6);
        assert_eq!(parts.concat(), data);
    }

    fn rows(n: usize) -> Vec<TrainingRow> {
        (0..n)
            .map(|i| {
                let a = i as f64 / n as f64;
                TrainingRow {
                    input: vec![a, 0.5 - a, 0.25],
                    feedback: FeedbackInput([a, a, 0.0, 0.0]),
                    target: [a, 0.1, a + 0.05, 0.3, (i % 2) as f64],
                }
            })
            .collect()
    }

    fn tiny() -> ModelParams {
        let cfg = ModelConfig { input_width: 3, hidden_width: 6, hidden_layers: 2, ..ModelConfig::default() };
        init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn zero_epochs_is_identity() {
        let mut c = ClientState::new(0, rows(10), OptimizerConfig::default(), 5);
        let g = tiny();
        let (p, n) = local_train(&mut c, &g, 0).unwrap();
        assert!(p.bit_eq(&g));
        assert_eq!(n, 10);
    }

    #[test]
    fn single_client_matches_central_training() {
        let data = rows(70);
        let init = tiny();
        let opt = OptimizerConfig::default();
        let mut central = Trainer::new(init.clone(), opt);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..6 {
            central.train_epoch(&data, &mut rng).unwrap();
        }
        let mut clients = vec![ClientState::new(0, data, opt, 9)];
        let cfg = FedConfig { rounds: 3, local_epochs: 2, ..FedConfig::default() };
        let fed = run_federated(&mut clients, init, &cfg, |_, _| Ok(())).unwrap();
        assert!(fed.bit_eq(&central.params));
    }
}
