//! Ordinality calibration. A tracker keeps, per training sample, the running
//! proportion of label decisions the info classifier has gotten right. Each
//! step builds three batch vectors: S (inverse norms of all standard
//! deviations of a sample), D (one minus the uncertainty gate), and R (the
//! tracked proportions). Softmaxing each over the batch gives distributions
//! whose pairwise bidirectional KL divergences form the loss, pushing the
//! model to rank its confidence signals consistently with observed
//! correctness. R is a constant in the graph; only S and D carry gradients.

use crate::autodiff::{Graph, NodeId};
use crate::config::OclCfg;
use crate::error::{EmorecError, Result};
use serde::{Deserialize, Serialize};

pub const KL_CLAMP: f64 = 1e-12;

/// Running per-sample correctness proportions with a 0.5 prior before the
/// first observation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectnessTracker {
    acc: Vec<f64>,
    count: Vec<u64>,
}

impl CorrectnessTracker {
    pub fn new(n: usize) -> Self {
        CorrectnessTracker {
            acc: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.acc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acc.is_empty()
    }

    /// Fraction of labels where the thresholded probability agrees with the
    /// target.
    pub fn step_correctness(probs: &[f64], labels: &[f64], threshold: f64) -> f64 {
        assert_eq!(probs.len(), labels.len());
        let hits = probs
            .iter()
            .zip(labels)
            .filter(|&(&p, &y)| (p >= threshold) == (y >= 0.5))
            .count();
        hits as f64 / probs.len() as f64
    }

    pub fn update(&mut self, idx: usize, correctness: f64) -> Result<()> {
        if idx >= self.acc.len() {
            return Err(EmorecError::Lookup(format!(
                "tracker index {idx} out of range (n = {})",
                self.acc.len()
            )));
        }
        assert!((0.0..=1.0).contains(&correctness));
        self.acc[idx] += correctness;
        self.count[idx] += 1;
        Ok(())
    }

    pub fn ratio(&self, idx: usize) -> Result<f64> {
        if idx >= self.acc.len() {
            return Err(EmorecError::Lookup(format!(
                "tracker index {idx} out of range (n = {})",
                self.acc.len()
            )));
        }
        Ok(if self.count[idx] == 0 {
            0.5
        } else {
            self.acc[idx] / self.count[idx] as f64
        })
    }
}

/// Inverse norm of a sample's standard deviations inside the graph: the
/// three `[q x d_h/2]` sigma blocks count as one concatenated vector.
pub fn inverse_sigma_norm(g: &mut Graph, sigmas: [NodeId; 3]) -> NodeId {
    let sq: Vec<NodeId> = sigmas
        .iter()
        .map(|&s| {
            let p = g.mul(s, s);
            g.sum(p)
        })
        .collect();
    let s01 = g.add(sq[0], sq[1]);
    let total = g.add(s01, sq[2]);
    let norm = g.sqrt(total);
    g.recip(norm)
}

fn kl_node(g: &mut Graph, p: NodeId, q: NodeId) -> NodeId {
    let lp = g.ln(p);
    let lq = g.ln(q);
    let diff = g.sub(lp, lq);
    let w = g.mul(p, diff);
    g.sum(w)
}

fn soft_dist(g: &mut Graph, x: NodeId, temperature: f64) -> NodeId {
    let scaled = g.scale(x, 1.0 / temperature);
    let sm = g.softmax_rows(scaled);
    g.clamp(sm, KL_CLAMP, 1.0)
}

/// The calibration loss over batch vectors S and D (graph nodes shaped
/// `[s_B]`) and constant R. Which bidirectional KL pairs participate is
/// driven by the config; the default couples D with R and S with R. Batches
/// of fewer than two samples yield a constant 0.
pub fn loss_ocl(g: &mut Graph, s: NodeId, d: NodeId, r: &[f64], cfg: &OclCfg) -> NodeId {
    let s_b = r.len();
    assert_eq!(g.value(s).len(), s_b, "S length");
    assert_eq!(g.value(d).len(), s_b, "D length");
    if s_b < 2 {
        return g.scalar_const(0.0);
    }
    let rc = g.constant(ndarray::Array1::from_vec(r.to_vec()).into_dyn());
    let ps = soft_dist(g, s, cfg.temperature);
    let pd = soft_dist(g, d, cfg.temperature);
    let pr = soft_dist(g, rc, cfg.temperature);

    let pairs: Vec<(NodeId, NodeId)> = if cfg.only_sr {
        vec![(ps, pr)]
    } else if cfg.only_dr {
        vec![(pd, pr)]
    } else if cfg.only_ds {
        vec![(pd, ps)]
    } else {
        vec![(pd, pr), (ps, pr)]
    };
    let mut total = None;
    for (a, b) in pairs {
        let k1 = kl_node(g, a, b);
        let k2 = kl_node(g, b, a);
        let pair = g.add(k1, k2);
        total = Some(match total {
            None => pair,
            Some(t) => g.add(t, pair),
        });
    }
    total.unwrap()
}

/// Loop-based reference for [`loss_ocl`].
pub fn loss_ocl_reference(s: &[f64], d: &[f64], r: &[f64], cfg: &OclCfg) -> f64 {
    if r.len() < 2 {
        return 0.0;
    }
    let soft = |x: &[f64]| {
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / cfg.temperature;
        let e: Vec<f64> = x.iter().map(|&v| (v / cfg.temperature - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| (v / z).max(KL_CLAMP)).collect::<Vec<f64>>()
    };
    let kl = |p: &[f64], q: &[f64]| {
        p.iter()
            .zip(q)
            .map(|(&a, &b)| a * (a.ln() - b.ln()))
            .sum::<f64>()
    };
    let ps = soft(s);
    let pd = soft(d);
    let pr = soft(r);
    let pairs: Vec<(&[f64], &[f64])> = if cfg.only_sr {
        vec![(&ps, &pr)]
    } else if cfg.only_dr {
        vec![(&pd, &pr)]
    } else if cfg.only_ds {
        vec![(&pd, &ps)]
    } else {
        vec![(&pd, &pr), (&ps, &pr)]
    };
    pairs.iter().map(|(a, b)| kl(a, b) + kl(b, a)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::metrics::spearman;
    use crate::optim;
    use ndarray::Array1;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_ocl() -> OclCfg {
        OclCfg {
            enabled: true,
            temperature: 1.0,
            only_sr: false,
            only_dr: false,
            only_ds: false,
        }
    }

    #[test]
    fn tracker_runs_a_mean() {
        let mut t = CorrectnessTracker::new(3);
        assert_eq!(t.ratio(0).unwrap(), 0.5); // prior
        for c in [1.0, 0.0, 1.0, 1.0] {
            t.update(0, c).unwrap();
        }
        assert!((t.ratio(0).unwrap() - 0.75).abs() < 1e-12);
        t.update(1, 1.0).unwrap();
        assert_eq!(t.ratio(1).unwrap(), 1.0);
        assert!(t.update(7, 0.5).is_err());
        assert!(t.ratio(7).is_err());
    }

    #[test]
    fn step_correctness_counts_label_agreements() {
        let c = CorrectnessTracker::step_correctness(
            &[0.9, 0.2, 0.6, 0.1],
            &[1.0, 0.0, 0.0, 0.0],
            0.5,
        );
        assert!((c - 0.75).abs() < 1e-12);
        let all = CorrectnessTracker::step_correctness(&[0.7, 0.1], &[1.0, 0.0], 0.5);
        assert_eq!(all, 1.0);
    }

    #[test]
    fn inverse_norm_of_constant_sigmas() {
        // all components equal c over K total components: 1 / (c sqrt(K))
        let mut g = Graph::new();
        let c = 0.7;
        let blocks: [NodeId; 3] = std::array::from_fn(|_| {
            g.constant(ndarray::Array2::from_elem((2, 3), c).into_dyn())
        });
        let s = inverse_sigma_norm(&mut g, blocks);
        let k = (3 * 2 * 3) as f64;
        assert!((g.scalar(s) - 1.0 / (c * k.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn identical_distributions_give_zero() {
        let cfg = default_ocl();
        let mut g = Graph::new();
        let s = g.constant(Array1::from_vec(vec![0.3, 0.3, 0.3]).into_dyn());
        let d = g.constant(Array1::from_vec(vec![0.9, 0.9, 0.9]).into_dyn());
        let loss = loss_ocl(&mut g, s, d, &[0.1, 0.1, 0.1], &cfg);
        assert!(g.scalar(loss).abs() < 1e-12);

        // equal vectors (not merely constant) also cancel
        let mut g = Graph::new();
        let v = vec![0.2, 0.8, 0.5];
        let s = g.constant(Array1::from_vec(v.clone()).into_dyn());
        let d = g.constant(Array1::from_vec(v.clone()).into_dyn());
        let loss = loss_ocl(&mut g, s, d, &v, &cfg);
        assert!(g.scalar(loss).abs() < 1e-12);
    }

    #[test]
    fn mismatched_rankings_cost_something() {
        let cfg = default_ocl();
        let mut g = Graph::new();
        let s = g.constant(Array1::from_vec(vec![2.0, 1.0]).into_dyn());
        let d = g.constant(Array1::from_vec(vec![0.1, 0.9]).into_dyn());
        let loss = loss_ocl(&mut g, s, d, &[0.9, 0.1], &cfg);
        assert!(g.scalar(loss) > 0.0);
    }

    #[test]
    fn two_sample_hand_value() {
        // S = [ln 2 + r, r] puts P_S at (2/3, 1/3); D and R constant give
        // uniform distributions, so only the S-R pair contributes:
        //   KL((2/3,1/3)||(1/2,1/2)) = 2/3 ln(4/3) + 1/3 ln(2/3) = 0.056633
        //   KL((1/2,1/2)||(2/3,1/3)) = 1/2 ln(3/4) + 1/2 ln(3/2) = 0.058892
        let cfg = default_ocl();
        let base = 1.3;
        let s_vals = vec![std::f64::consts::LN_2 + base, base];
        let mut g = Graph::new();
        let s = g.constant(Array1::from_vec(s_vals.clone()).into_dyn());
        let d = g.constant(Array1::from_vec(vec![0.4, 0.4]).into_dyn());
        let r = [0.7, 0.7];
        let loss = loss_ocl(&mut g, s, d, &r, &cfg);
        let got = g.scalar(loss);

        let kl1 = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
        let kl2 = 0.5 * (3.0f64 / 4.0).ln() + 0.5 * (3.0f64 / 2.0).ln();
        assert!((got - (kl1 + kl2)).abs() < 1e-12);
        assert!((got - 0.115_524_530_093).abs() < 1e-9, "{got}");
        assert!((got - loss_ocl_reference(&s_vals, &[0.4, 0.4], &r, &cfg)).abs() < 1e-12);
    }

    #[test]
    fn graph_matches_reference_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..50 {
            let n = rng.gen_range(2..9);
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..4.0)).collect();
            let d: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut cfg = default_ocl();
            match rng.gen_range(0..4) {
                0 => cfg.only_sr = true,
                1 => cfg.only_dr = true,
                2 => cfg.only_ds = true,
                _ => {}
            }
            cfg.temperature = rng.gen_range(0.3..2.0);
            let mut g = Graph::new();
            let sn = g.constant(Array1::from_vec(s.clone()).into_dyn());
            let dn = g.constant(Array1::from_vec(d.clone()).into_dyn());
            let loss = loss_ocl(&mut g, sn, dn, &r, &cfg);
            let want = loss_ocl_reference(&s, &d, &r, &cfg);
            assert!((g.scalar(loss) - want).abs() < 1e-10);
            assert!(want >= -1e-12);
        }
    }

    #[test]
    fn shifting_any_vector_changes_nothing() {
        let cfg = default_ocl();
        let s = vec![0.5, 1.5, 0.9];
        let d = vec![0.2, 0.8, 0.4];
        let r = vec![0.9, 0.3, 0.6];
        let base = loss_ocl_reference(&s, &d, &r, &cfg);
        let shift = |v: &[f64], c: f64| v.iter().map(|x| x + c).collect::<Vec<f64>>();
        for c in [1.0, -3.0, 0.25] {
            assert!((loss_ocl_reference(&shift(&s, c), &d, &r, &cfg) - base).abs() < 1e-10);
            assert!((loss_ocl_reference(&s, &shift(&d, c), &r, &cfg) - base).abs() < 1e-10);
            assert!((loss_ocl_reference(&s, &d, &shift(&r, c), &cfg) - base).abs() < 1e-10);
        }
    }

    #[test]
    fn single_sample_batch_is_free() {
        let cfg = default_ocl();
        let mut g = Graph::new();
        let s = g.constant(Array1::from_vec(vec![3.0]).into_dyn());
        let d = g.constant(Array1::from_vec(vec![0.2]).into_dyn());
        let loss = loss_ocl(&mut g, s, d, &[0.8], &cfg);
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn gradients_reach_s_and_d_but_never_r() {
        let cfg = default_ocl();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        store.insert("toy.s", optim::normal(&mut rng, &[4], 1.0));
        store.insert("toy.d", optim::normal(&mut rng, &[4], 1.0));
        store.insert("toy.r", optim::normal(&mut rng, &[4], 1.0));
        let r_vals: Vec<f64> = store.get("toy.r").iter().copied().collect();
        let mut g = Graph::new();
        let s = g.param(&store, "toy.s");
        let d = g.param(&store, "toy.d");
        let loss = loss_ocl(&mut g, s, d, &r_vals, &cfg);
        let bw = g.backward(loss);
        let sg = bw.params.get("toy.s").expect("S gradient missing");
        assert!(sg.iter().any(|&v| v.abs() > 1e-12));
        assert!(bw.params.get("toy.d").is_some());
        assert!(bw.params.get("toy.r").is_none());

        let report = crate::autodiff::check_gradients(&store, &bw.params, 1e-6, 1e-8, |st| {
            let mut g = Graph::new();
            let s = g.param(st, "toy.s");
            let d = g.param(st, "toy.d");
            let l = loss_ocl(&mut g, s, d, &r_vals, &cfg);
            g.scalar(l)
        });
        assert!(report.worst_rel < 1e-5, "worst rel {}", report.worst_rel);
    }

    #[test]
    fn minimizing_the_loss_raises_rank_agreement() {
        for seed in [1u64, 2, 3] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 8;
            let r_vals: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut store = ParamStore::new();
            store.insert("toy.s", optim::normal(&mut rng, &[n], 1.0));
            store.insert("toy.d", optim::normal(&mut rng, &[n], 1.0));
            let cfg = default_ocl();
            let sp = |store: &ParamStore, name: &str| {
                let v: Vec<f64> = store.get(name).iter().copied().collect();
                spearman(&v, &r_vals)
            };
            let before = (sp(&store, "toy.s"), sp(&store, "toy.d"));
            let mut adam = optim::Adam::new(&store);
            for _ in 0..400 {
                let mut g = Graph::new();
                let s = g.param(&store, "toy.s");
                let d = g.param(&store, "toy.d");
                let loss = loss_ocl(&mut g, s, d, &r_vals, &cfg);
                let bw = g.backward(loss);
                adam.step(&mut store, &bw.params, 0.05);
            }
            let after = (sp(&store, "toy.s"), sp(&store, "toy.d"));
            assert!(
                after.0 > before.0 && after.1 > before.1,
                "seed {seed}: spearman S {} -> {}, D {} -> {}",
                before.0,
                after.0,
                before.1,
                after.1
            );
            assert!(after.0 > 0.95 && after.1 > 0.95, "seed {seed}: {after:?}");
        }
    }
}
