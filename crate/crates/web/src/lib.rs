//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function has a plain Rust counterpart returning
//! `Result<_, String>` so that the logic is testable on the host.

use loco_core::evalsuite::{combined_eval_metric, EvalComponents, EVAL_WEIGHTS};
use loco_core::ppo::compute_gae;
use loco_core::repr::{triplet_loss_plain, TripletConfig};
use wasm_bindgen::prelude::*;

/// Loss and squared distances of one triplet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletView {
    pub loss: f64,
    pub anchor_positive: f64,
    pub anchor_negative: f64,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = (v.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
    v.iter().map(|x| x / n).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

pub fn triplet(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
    normalize: bool,
) -> Result<TripletView, String> {
    if anchor.is_empty() || anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(format!(
            "anchor, positive and negative need the same non-zero length, got {}, {}, {}",
            anchor.len(),
            positive.len(),
            negative.len()
        ));
    }
    let cfg = TripletConfig { margin, normalize, ..TripletConfig::default() };
    cfg.validate().map_err(|e| e.to_string())?;
    let loss = triplet_loss_plain(&[anchor.to_vec()], &[positive.to_vec()], &[negative.to_vec()], &cfg);
    let (a, p, n) = if normalize {
        (unit(anchor), unit(positive), unit(negative))
    } else {
        (anchor.to_vec(), positive.to_vec(), negative.to_vec())
    };
    Ok(TripletView { loss, anchor_positive: sq_dist(&a, &p), anchor_negative: sq_dist(&a, &n) })
}

/// Advantages followed by returns, both of length `rewards.len()`.
/// `values` holds one bootstrap value more than `rewards`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[u8], gamma: f64, lambda: f64) -> Result<Vec<f64>, String> {
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(format!("gamma and lambda must lie in [0, 1], got {gamma} and {lambda}"));
    }
    let d: Vec<bool> = dones.iter().map(|&x| x != 0).collect();
    let g = compute_gae(rewards, values, &d, gamma, lambda).map_err(|e| e.to_string())?;
    Ok(g.advantages.into_iter().chain(g.returns).collect())
}

/// Combined evaluation score of each method (lower is better) from its
/// raw linear error, angular error and fall rate.
pub fn scores(lin_err: &[f64], ang_err: &[f64], fall_rate: &[f64]) -> Result<Vec<f64>, String> {
    if lin_err.len() != ang_err.len() || lin_err.len() != fall_rate.len() {
        return Err("one linear error, angular error and fall rate per method".into());
    }
    let methods: Vec<EvalComponents> = (0..lin_err.len())
        .map(|i| EvalComponents { lin_err: lin_err[i], ang_err: ang_err[i], fall_rate: fall_rate[i] })
        .collect();
    combined_eval_metric(&methods).map(|(s, _)| s).map_err(|e| e.to_string())
}

/// `[loss, anchor-positive distance, anchor-negative distance]`.
#[wasm_bindgen(js_name = tripletLoss)]
pub fn triplet_loss_js(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
    normalize: bool,
) -> Result<Vec<f64>, JsError> {
    let t = triplet(anchor, positive, negative, margin, normalize).map_err(|e| JsError::new(&e))?;
    Ok(vec![t.loss, t.anchor_positive, t.anchor_negative])
}

#[wasm_bindgen(js_name = gae)]
pub fn gae_js(rewards: &[f64], values: &[f64], dones: &[u8], gamma: f64, lambda: f64) -> Result<Vec<f64>, JsError> {
    gae(rewards, values, dones, gamma, lambda).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = evalScores)]
pub fn scores_js(lin_err: &[f64], ang_err: &[f64], fall_rate: &[f64]) -> Result<Vec<f64>, JsError> {
    scores(lin_err, ang_err, fall_rate).map_err(|e| JsError::new(&e))
}

/// Weights of linear error, angular error and fall rate in the score.
#[wasm_bindgen(js_name = evalWeights)]
pub fn eval_weights() -> Vec<f64> {
    EVAL_WEIGHTS.to_vec()
}
