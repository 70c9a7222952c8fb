//! Teacher-anchored triplet alignment and negative sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Real};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Anchor from the teacher, negatives from other agents.
    TeacherAnchored,
    /// No teacher: anchor from the dynamics model, positive and negative
    /// from student encodings of the next step.
    PrivilegeFree,
    /// Teacher anchor, negatives drawn from the whole buffer.
    RandomNegative,
}

impl Strategy {
    pub fn cross_agent(self) -> bool {
        !matches!(self, Strategy::RandomNegative)
    }

    pub fn needs_teacher(self) -> bool {
        !matches!(self, Strategy::PrivilegeFree)
    }
}

/// Encoder producing the negatives of teacher-anchored triplets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeEncoder {
    /// Teacher latent of the donor's next privileged state, in the anchor's
    /// space.
    Teacher,
    /// Student latent of the donor's next history (stop-gradient).
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    pub margin: f64,
    pub coef: f64,
    pub strategy: Strategy,
    pub normalize: bool,
    /// Ignored by the privilege-free strategy, whose negatives are always
    /// student latents.
    pub negative_encoder: NegativeEncoder,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            coef: 1.0,
            strategy: Strategy::TeacherAnchored,
            normalize: true,
            negative_encoder: NegativeEncoder::Teacher,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("triplet margin must be positive, got {}", self.margin)));
        }
        if !(self.coef >= 0.0) {
            return Err(Error::Config(format!("triplet coefficient must be non-negative, got {}", self.coef)));
        }
        Ok(())
    }
}

/// A transition in the buffer, addressed by agent and time step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub agent: usize,
    pub step: usize,
}

/// Uniform draw from transitions of every agent except `anchor_agent`.
pub fn sample_cross_agent<R: Rng>(rng: &mut R, agents: usize, steps: usize, anchor_agent: usize) -> Result<Slot> {
    if agents < 2 {
        return Err(Error::Sampling(format!("cross-agent negatives need at least 2 agents, buffer holds {agents}")));
    }
    if steps == 0 {
        return Err(Error::Sampling("empty buffer".into()));
    }
    let mut j = rng.random_range(0..agents - 1);
    if j >= anchor_agent {
        j += 1;
    }
    Ok(Slot { agent: j, step: rng.random_range(0..steps) })
}

/// Uniform draw from every transition in the buffer, own agent included.
pub fn sample_random<R: Rng>(rng: &mut R, agents: usize, steps: usize) -> Result<Slot> {
    if agents == 0 || steps == 0 {
        return Err(Error::Sampling("empty buffer".into()));
    }
    Ok(Slot { agent: rng.random_range(0..agents), step: rng.random_range(0..steps) })
}

/// Negative slot for every anchor row under `strategy`.
pub fn sample_negatives<R: Rng>(
    rng: &mut R,
    strategy: Strategy,
    anchors: &[Slot],
    agents: usize,
    steps: usize,
) -> Result<Vec<Slot>> {
    anchors
        .iter()
        .map(|a| {
            if strategy.cross_agent() {
                sample_cross_agent(rng, agents, steps, a.agent)
            } else {
                sample_random(rng, agents, steps)
            }
        })
        .collect()
}

/// Latent triplets on a graph, with the agent of each anchor and negative.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub anchors: NodeId,
    pub positives: NodeId,
    pub negatives: NodeId,
    pub anchor_agents: Vec<usize>,
    pub negative_agents: Vec<usize>,
}

impl TripletBatch {
    pub fn validate<T: Real>(&self, g: &Graph<T>, cross_agent: bool) -> Result<()> {
        let sa = g.shape(self.anchors);
        let sp = g.shape(self.positives);
        let sn = g.shape(self.negatives);
        if sa != sp || sa != sn || sa[0] != self.anchor_agents.len() || sa[0] != self.negative_agents.len() {
            return Err(Error::Shape(format!(
                "triplet batch: anchors {sa:?}, positives {sp:?}, negatives {sn:?}, {} / {} agent tags",
                self.anchor_agents.len(),
                self.negative_agents.len()
            )));
        }
        if cross_agent {
            if let Some(r) = self.anchor_agents.iter().zip(&self.negative_agents).position(|(a, n)| a == n) {
                return Err(Error::Sampling(format!("row {r}: negative drawn from the anchor's own agent")));
            }
        }
        Ok(())
    }
}

fn l2_normalize<T: Real>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let n2 = g.sq_norm_rows(x);
    let n2 = g.add_scalar(n2, T::of(1e-12));
    let n = g.sqrt(n2);
    g.div(x, n)
}

/// Mean hinge `[|a-p|^2 - |a-n|^2 + margin]_+` over rows.
pub fn triplet_loss<T: Real>(g: &mut Graph<T>, batch: &TripletBatch, cfg: &TripletConfig) -> Result<NodeId> {
    let (mut a, mut p, mut n) = (batch.anchors, batch.positives, batch.negatives);
    if g.shape(a)[0] == 0 {
        return Err(Error::Shape("triplet loss of an empty batch".into()));
    }
    if cfg.normalize {
        a = l2_normalize(g, a)?;
        p = l2_normalize(g, p)?;
        n = l2_normalize(g, n)?;
    }
    let ap = g.sub(a, p)?;
    let an = g.sub(a, n)?;
    let dp = g.sq_norm_rows(ap);
    let dn = g.sq_norm_rows(an);
    let diff = g.sub(dp, dn)?;
    let shifted = g.add_scalar(diff, T::of(cfg.margin));
    let hinge = g.relu(shifted);
    Ok(g.mean(hinge))
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = (v.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Row-wise triplet hinge without a graph, summed then averaged.
pub fn triplet_loss_plain(
    anchors: &[Vec<f64>],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    cfg: &TripletConfig,
) -> f64 {
    let rows = anchors.len();
    let mut total = 0.0;
    for r in 0..rows {
        let (a, p, n) = if cfg.normalize {
            (normalized(&anchors[r]), normalized(&positives[r]), normalized(&negatives[r]))
        } else {
            (anchors[r].clone(), positives[r].clone(), negatives[r].clone())
        };
        let dp: f64 = a.iter().zip(&p).map(|(x, y)| (x - y).powi(2)).sum();
        let dn: f64 = a.iter().zip(&n).map(|(x, y)| (x - y).powi(2)).sum();
        total += (dp - dn + cfg.margin).max(0.0);
    }
    total / rows as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(g: &mut Graph<f64>, a: &[f64], p: &[f64], n: &[f64], cols: usize) -> TripletBatch {
        let rows = a.len() / cols;
        let anchors = g.leaf(Tensor::new(rows, cols, a.to_vec()).unwrap(), true);
        let positives = g.leaf(Tensor::new(rows, cols, p.to_vec()).unwrap(), true);
        let negatives = g.leaf(Tensor::new(rows, cols, n.to_vec()).unwrap(), true);
        TripletBatch {
            anchors,
            positives,
            negatives,
            anchor_agents: (0..rows).collect(),
            negative_agents: (0..rows).map(|r| r + 1).collect(),
        }
    }

    fn raw(margin: f64) -> TripletConfig {
        TripletConfig { margin, normalize: false, ..Default::default() }
    }

    #[test]
    fn hand_worked_hinge() {
        let mut g = Graph::new();
        let b = batch(&mut g, &[0.0, 0.0], &[0.0, 0.0], &[0.1, 0.0], 2);
        let l = triplet_loss(&mut g, &b, &raw(0.2)).unwrap();
        assert!((g.scalar_value(l) - 0.19).abs() < 1e-15);
    }

    #[test]
    fn coincident_points_give_margin() {
        let mut g = Graph::new();
        let b = batch(&mut g, &[0.3, 0.4], &[0.3, 0.4], &[0.3, 0.4], 2);
        let l = triplet_loss(&mut g, &b, &TripletConfig::default()).unwrap();
        assert_eq!(g.scalar_value(l), 0.2);
    }

    #[test]
    fn satisfied_margin_is_zero() {
        let mut g = Graph::new();
        let b = batch(&mut g, &[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 2);
        let l = triplet_loss(&mut g, &b, &raw(0.2)).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
    }

    #[test]
    fn cross_agent_excludes_anchor() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let s = sample_cross_agent(&mut r, 3, 5, 1).unwrap();
            assert!(s.agent == 0 || s.agent == 2);
            assert!(s.step < 5);
        }
        assert!(sample_cross_agent(&mut r, 1, 5, 0).is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let anchors: Vec<Slot> = (0..50).map(|i| Slot { agent: i % 4, step: i % 7 }).collect();
        let a = sample_negatives(&mut ChaCha8Rng::seed_from_u64(9), Strategy::TeacherAnchored, &anchors, 4, 7).unwrap();
        let b = sample_negatives(&mut ChaCha8Rng::seed_from_u64(9), Strategy::TeacherAnchored, &anchors, 4, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_negatives_may_hit_own_agent() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let hits = (0..1000).filter(|_| sample_random(&mut r, 4, 8).unwrap().agent == 0).count();
        assert!(hits > 0);
    }

    #[test]
    fn batch_validation_catches_own_agent() {
        let mut g = Graph::new();
        let mut b = batch(&mut g, &[0.0; 4], &[0.0; 4], &[0.0; 4], 2);
        assert!(b.validate(&g, true).is_ok());
        b.negative_agents[1] = 1;
        assert!(b.validate(&g, true).is_err());
        assert!(b.validate(&g, false).is_ok());
    }

    #[test]
    fn graph_matches_plain() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..3 * 8 * 4).map(|_| r.random_range(-1.0..1.0)).collect();
        let (a, rest) = v.split_at(32);
        let (p, n) = rest.split_at(32);
        for cfg in [raw(0.2), TripletConfig::default()] {
            let mut g = Graph::new();
            let b = batch(&mut g, a, p, n, 4);
            let node = triplet_loss(&mut g, &b, &cfg).unwrap();
            let l = g.scalar_value(node);
            let rows = |x: &[f64]| x.chunks(4).map(|c| c.to_vec()).collect::<Vec<_>>();
            let plain = triplet_loss_plain(&rows(a), &rows(p), &rows(n), &cfg);
            assert!((l - plain).abs() < 1e-12);
        }
    }
}
