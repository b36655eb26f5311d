//! Contrastive loss over five-sub-clip windows.
//!
//! For an anchor sub-clip `a` at offset `t`, each window `w` contributes its
//! best-matching sub-clip similarity `max_n s(a_t, w_n)` with
//! `s(x, y) = exp(-||x - y||^2)`. Windows with the anchor's driving identity
//! form the pull sum `N`, windows driven by others the push sum `Q`, and the
//! anchor contributes `-ln(N / (N + Q))`. All sums are carried as
//! log-sum-exp so far-apart embeddings never underflow to `0 / 0`.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::IdentityId;
use crate::engine::{Real, Tape, Tensor};
use crate::error::{Error, Result};
use crate::network::{forward, NetworkConfig, SUBCLIPS};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `exp(-||a - b||^2)`
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    (-sq_dist(a, b)).exp()
}

/// `ln s(a, b) = -||a - b||^2`, exact where `similarity` underflows.
pub fn log_similarity(a: &[f64], b: &[f64]) -> f64 {
    -sq_dist(a, b)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `ln(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sums in a fixed binary tree so the result does not depend on scheduling.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let (l, r) = values.split_at(n / 2);
            pairwise_sum(l) + pairwise_sum(r)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowEmbeddings {
    /// One vector per sub-clip offset `0..5`.
    pub embeddings: Vec<Vec<f64>>,
    pub driving_id: IdentityId,
    pub target_id: IdentityId,
    pub video_id: String,
    pub start_frame: usize,
}

impl WindowEmbeddings {
    fn same_window(&self, other: &WindowEmbeddings) -> bool {
        self.video_id == other.video_id && self.start_frame == other.start_frame
    }
}

/// Best log-similarity of `anchor` against the sub-clips of `w`, and its offset.
fn best_match(anchor: &[f64], w: &[Vec<f64>]) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for (n, e) in w.iter().enumerate() {
        let ls = log_similarity(anchor, e);
        if ls > best.0 {
            best = (ls, n);
        }
    }
    best
}

fn log_term(anchor: &WindowEmbeddings, t: usize, set: &[&WindowEmbeddings]) -> f64 {
    let a = &anchor.embeddings[t];
    log_sum_exp(set.iter().map(|w| best_match(a, &w.embeddings).0))
}

/// Pull sum `N` for sub-clip `t` of `anchor`.
pub fn pull_term(anchor: &WindowEmbeddings, t: usize, pull_set: &[&WindowEmbeddings]) -> Result<f64> {
    if pull_set.is_empty() {
        return Err(Error::EmptyPullSet(anchor.driving_id.to_string()));
    }
    for w in pull_set {
        if w.driving_id != anchor.driving_id {
            return Err(Error::Validation(format!(
                "pull window `{}` is driven by `{}`, anchor by `{}`",
                w.video_id, w.driving_id, anchor.driving_id
            )));
        }
        if w.same_window(anchor) {
            return Err(Error::Validation("anchor window inside its own pull set".into()));
        }
    }
    Ok(log_term(anchor, t, pull_set).exp())
}

/// Push sum `Q` for sub-clip `t` of `anchor`.
pub fn push_term(anchor: &WindowEmbeddings, t: usize, push_set: &[&WindowEmbeddings]) -> Result<f64> {
    if push_set.is_empty() {
        return Err(Error::EmptyPushSet(anchor.driving_id.to_string()));
    }
    if let Some(w) = push_set.iter().find(|w| w.driving_id == anchor.driving_id) {
        return Err(Error::Validation(format!(
            "push window `{}` shares the anchor's driving identity",
            w.video_id
        )));
    }
    Ok(log_term(anchor, t, push_set).exp())
}

/// `p = N / (N + Q)`
pub fn clip_probability(n: f64, q: f64) -> Result<f64> {
    if !(n >= 0.0 && q >= 0.0) || !n.is_finite() || !q.is_finite() {
        return Err(Error::Validation(format!("invalid pull/push terms N={n}, Q={q}")));
    }
    if n == 0.0 && q == 0.0 {
        return Err(Error::Degenerate);
    }
    Ok(n / (n + q))
}

/// `p` from `ln N` and `ln Q`, valid when both terms underflow.
pub fn clip_probability_log(log_n: f64, log_q: f64) -> Result<f64> {
    if log_n == f64::NEG_INFINITY && log_q == f64::NEG_INFINITY {
        return Err(Error::Degenerate);
    }
    Ok(sigmoid(log_n - log_q))
}

/// Which windows each batch identity pulls and pushes. Every pull window of a
/// group is also an anchor; its own window is left out of its pull set.
#[derive(Clone, Debug, PartialEq)]
pub struct LossLayout {
    pub driving: Vec<IdentityId>,
    pub target: Vec<IdentityId>,
    pub groups: Vec<LossGroup>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGroup {
    pub identity: IdentityId,
    pub pull: Vec<usize>,
    pub push: Vec<usize>,
}

impl LossLayout {
    pub fn num_windows(&self) -> usize {
        self.driving.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_windows();
        if self.target.len() != n {
            return Err(Error::Shape("driving/target label count mismatch".into()));
        }
        if self.groups.is_empty() {
            return Err(Error::Validation("loss layout has no groups".into()));
        }
        for g in &self.groups {
            if g.pull.len() < 2 {
                return Err(Error::EmptyPullSet(g.identity.to_string()));
            }
            if g.push.is_empty() {
                return Err(Error::EmptyPushSet(g.identity.to_string()));
            }
            if let Some(&w) = g.pull.iter().chain(&g.push).find(|&&w| w >= n) {
                return Err(Error::Shape(format!("window index {w} out of range")));
            }
            if g.pull.iter().any(|&w| self.driving[w] != g.identity) {
                return Err(Error::Validation(format!(
                    "pull set of `{}` contains a window driven by someone else",
                    g.identity
                )));
            }
            if g.push.iter().any(|&w| self.driving[w] == g.identity) {
                return Err(Error::Validation(format!(
                    "push set of `{}` contains a window it drives",
                    g.identity
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTerm {
    pub identity: IdentityId,
    pub window: usize,
    pub t: usize,
    pub n: f64,
    pub q: f64,
    pub log_n: f64,
    pub log_q: f64,
    pub p: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_anchor: Vec<AnchorTerm>,
}

impl LossBreakdown {
    pub fn mean_per_anchor(&self) -> f64 {
        self.total / self.per_anchor.len().max(1) as f64
    }
}

struct AnchorWork {
    term: AnchorTerm,
    /// (window, matched offset, dL/d m_w)
    matches: Vec<(usize, usize, f64)>,
}

/// Loss and its gradient with respect to every embedding. `emb[w][n]` is the
/// sub-clip `n` embedding of window `w`; the gradient has the same layout.
pub fn contrastive_loss(
    emb: &[Vec<Vec<f64>>],
    layout: &LossLayout,
) -> Result<(LossBreakdown, Vec<Vec<Vec<f64>>>)> {
    layout.validate()?;
    if emb.len() != layout.num_windows() {
        return Err(Error::Shape(format!(
            "{} windows of embeddings for a layout of {}",
            emb.len(),
            layout.num_windows()
        )));
    }
    let jobs: Vec<(usize, usize, usize)> = layout
        .groups
        .iter()
        .enumerate()
        .flat_map(|(g, group)| {
            group
                .pull
                .iter()
                .flat_map(move |&a| (0..SUBCLIPS).map(move |t| (g, a, t)))
        })
        .collect();

    let work: Vec<AnchorWork> = jobs
        .par_iter()
        .map(|&(g, a, t)| {
            let group = &layout.groups[g];
            let anchor = &emb[a][t];
            let pull: Vec<(usize, f64, usize)> = group
                .pull
                .iter()
                .filter(|&&w| w != a)
                .map(|&w| {
                    let (m, n) = best_match(anchor, &emb[w]);
                    (w, m, n)
                })
                .collect();
            let push: Vec<(usize, f64, usize)> = group
                .push
                .iter()
                .map(|&w| {
                    let (m, n) = best_match(anchor, &emb[w]);
                    (w, m, n)
                })
                .collect();
            let log_n = log_sum_exp(pull.iter().map(|x| x.1));
            let log_q = log_sum_exp(push.iter().map(|x| x.1));
            let p = sigmoid(log_n - log_q);
            let one_minus_p = sigmoid(log_q - log_n);
            let loss = softplus(log_q - log_n);
            let mut matches = Vec::with_capacity(pull.len() + push.len());
            for &(w, m, n) in &pull {
                matches.push((w, n, -(m - log_n).exp() * one_minus_p));
            }
            for &(w, m, n) in &push {
                matches.push((w, n, (m - log_q).exp() * one_minus_p));
            }
            AnchorWork {
                term: AnchorTerm {
                    identity: group.identity.clone(),
                    window: a,
                    t,
                    n: log_n.exp(),
                    q: log_q.exp(),
                    log_n,
                    log_q,
                    p,
                    loss,
                },
                matches,
            }
        })
        .collect();

    let dim = emb.first().and_then(|w| w.first()).map_or(0, Vec::len);
    let mut grad: Vec<Vec<Vec<f64>>> = emb
        .iter()
        .map(|w| vec![vec![0.0; dim]; w.len()])
        .collect();
    for job in &work {
        let (a, t) = (job.term.window, job.term.t);
        for &(w, n, coef) in &job.matches {
            if coef == 0.0 {
                continue;
            }
            // d m_w / d anchor = -2 (anchor - e_w), d m_w / d e_w = +2 (anchor - e_w)
            for k in 0..dim {
                let diff = emb[a][t][k] - emb[w][n][k];
                grad[a][t][k] -= 2.0 * coef * diff;
                grad[w][n][k] += 2.0 * coef * diff;
            }
        }
    }
    let losses: Vec<f64> = work.iter().map(|w| w.term.loss).collect();
    let breakdown = LossBreakdown {
        total: pairwise_sum(&losses),
        per_anchor: work.into_iter().map(|w| w.term).collect(),
    };
    Ok((breakdown, grad))
}

/// Network input for one step: `[input_dim, W, F + 4]` plus the window layout.
pub struct LossBatch<T: Real = f32> {
    pub input: Tensor<T>,
    pub layout: LossLayout,
}

/// Converts a `[E, W, 5]` network output into `emb[w][n]`.
pub fn unpack_embeddings<T: Real>(out: &Tensor<T>) -> Result<Vec<Vec<Vec<f64>>>> {
    let [e, w, l] = out.shape()[..] else {
        return Err(Error::Shape(format!("expected [E, W, L], got {:?}", out.shape())));
    };
    let d = out.data();
    Ok((0..w)
        .map(|wi| {
            (0..l)
                .map(|n| (0..e).map(|k| d[(k * w + wi) * l + n].f64()).collect())
                .collect()
        })
        .collect())
}

fn pack_gradient<T: Real>(grad: &[Vec<Vec<f64>>], shape: &[usize]) -> Result<Tensor<T>> {
    let (e, w, l) = (shape[0], shape[1], shape[2]);
    let mut data = vec![T::zero(); e * w * l];
    for (wi, win) in grad.iter().enumerate() {
        for (n, v) in win.iter().enumerate() {
            for (k, g) in v.iter().enumerate() {
                data[(k * w + wi) * l + n] = T::of(*g);
            }
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Forward pass, loss, and parameter gradients for one batch.
pub fn batch_loss<T: Real>(
    config: &NetworkConfig,
    params: &BTreeMap<String, Tensor<T>>,
    batch: &LossBatch<T>,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor<T>>)> {
    let (input, layout) = (&batch.input, &batch.layout);
    let (_, w, len) = input.as_cbl()?;
    if len != config.clip_frames + SUBCLIPS - 1 {
        return Err(Error::Shape(format!(
            "batch windows have {len} frames, expected {}",
            config.clip_frames + SUBCLIPS - 1
        )));
    }
    if w != layout.num_windows() {
        return Err(Error::Shape("batch input and layout disagree on window count".into()));
    }
    let mut tape = Tape::<T>::new();
    let x = tape.constant_ref(input);
    let fwd = forward(config, &mut tape, params, x, true)?;
    let out = tape.value(fwd.output);
    let emb = unpack_embeddings(out)?;
    let (breakdown, grad) = contrastive_loss(&emb, layout)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let seed = pack_gradient::<T>(&grad, out.shape())?;
    let mut grads = tape.backward_with(fwd.output, seed)?;
    let mut out_grads = BTreeMap::new();
    for (name, v) in fwd.params {
        let g = grads
            .take(v)
            .unwrap_or_else(|| Tensor::zeros(params[&name].shape()));
        out_grads.insert(name, g);
    }
    Ok((breakdown, out_grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn window(id: &str, video: &str, emb: Vec<Vec<f64>>) -> WindowEmbeddings {
        WindowEmbeddings {
            embeddings: emb,
            driving_id: IdentityId::new(id),
            target_id: IdentityId::new(id),
            video_id: video.into(),
            start_frame: 0,
        }
    }

    fn rand_vecs(rng: &mut ChaCha8Rng, n: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-scale..scale)).collect())
            .collect()
    }

    #[test]
    fn similarity_examples() {
        let a = vec![0.3, -1.0, 2.0];
        assert_eq!(similarity(&a, &a), 1.0);
        let b = vec![0.3 + 2f64.ln().sqrt(), -1.0, 2.0];
        assert!((similarity(&a, &b) - 0.5).abs() < 1e-12);
        let far = vec![10.3, -1.0, 2.0];
        assert_eq!(log_similarity(&a, &far), -100.0);
        // exp(-100) is representable; the log path keeps precision
        assert!((similarity(&a, &far) / (-100f64).exp() - 1.0).abs() < 1e-12);
        let very_far = vec![100.3, -1.0, 2.0];
        assert_eq!(log_similarity(&a, &very_far), -10000.0);
    }

    #[test]
    fn pull_push_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = rand_vecs(&mut rng, 5, 8, 1.0);
        let anchor = window("a", "v0", e.clone());
        let twin = window("a", "v1", e.clone());
        assert!((pull_term(&anchor, 2, &[&twin]).unwrap() - 1.0).abs() < 1e-12);
        let twins: Vec<WindowEmbeddings> =
            (0..15).map(|i| window("a", &format!("t{i}"), e.clone())).collect();
        let refs: Vec<&WindowEmbeddings> = twins.iter().collect();
        assert!((pull_term(&anchor, 0, &refs).unwrap() - 15.0).abs() < 1e-12);
        assert!(matches!(pull_term(&anchor, 0, &[]), Err(Error::EmptyPullSet(_))));
        assert!(pull_term(&anchor, 0, &[&anchor]).is_err());

        let other = window("b", "v2", e.clone());
        assert!((push_term(&anchor, 1, &[&other]).unwrap() - 1.0).abs() < 1e-12);
        let far = window("b", "v3", e.iter().map(|v| v.iter().map(|x| x + 100.0).collect()).collect());
        assert!(push_term(&anchor, 1, &[&far]).unwrap() < 1e-30);
        assert!(matches!(push_term(&anchor, 0, &[]), Err(Error::EmptyPushSet(_))));
        assert!(push_term(&anchor, 0, &[&twin]).is_err());
    }

    #[test]
    fn pull_push_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let anchor = window("a", "v0", rand_vecs(&mut rng, 5, 6, 0.5));
        let ws: Vec<WindowEmbeddings> = (0..3)
            .map(|i| window("a", &format!("p{i}"), rand_vecs(&mut rng, 5, 6, 0.5)))
            .collect();
        let refs: Vec<&WindowEmbeddings> = ws.iter().collect();
        for t in 0..5 {
            let mut expected = 0.0;
            for w in &ws {
                let mut best: f64 = 0.0;
                for n in 0..5 {
                    let d: f64 = anchor.embeddings[t]
                        .iter()
                        .zip(&w.embeddings[n])
                        .map(|(x, y)| (x - y).powi(2))
                        .sum();
                    best = best.max((-d).exp());
                }
                expected += best;
            }
            assert!((pull_term(&anchor, t, &refs).unwrap() - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn probability_examples() {
        assert_eq!(clip_probability(2.0, 2.0).unwrap(), 0.5);
        assert_eq!(clip_probability(3.0, 1.0).unwrap(), 0.75);
        let p = clip_probability(15.0, 1e-300).unwrap();
        assert!(p > 1.0 - 1e-15 && -p.ln() < 1e-15);
        assert!(matches!(clip_probability(0.0, 0.0), Err(Error::Degenerate)));
        assert!((clip_probability_log(-5000.0, -5000.0 + 3f64.ln()).unwrap() - 0.25).abs() < 1e-12);
    }

    fn layout_for(ids: &[&str], per_id: usize) -> (LossLayout, usize) {
        let mut driving = vec![];
        let mut groups = vec![];
        for id in ids {
            let start = driving.len();
            for _ in 0..per_id {
                driving.push(IdentityId::new(*id));
            }
            groups.push(LossGroup {
                identity: IdentityId::new(*id),
                pull: (start..start + per_id).collect(),
                push: vec![],
            });
        }
        for g in &mut groups {
            g.push = (0..driving.len()).filter(|&w| driving[w] != g.identity).collect();
        }
        let n = driving.len();
        (
            LossLayout {
                target: driving.clone(),
                driving,
                groups,
            },
            n,
        )
    }

    #[test]
    fn constructed_optimum_has_near_zero_loss() {
        let (layout, n) = layout_for(&["a", "b", "c"], 4);
        let emb: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|w| {
                let id = w / 4;
                let mut v = vec![0.0; 8];
                v[id] = 50.0;
                vec![v; 5]
            })
            .collect();
        let (b, _) = contrastive_loss(&emb, &layout).unwrap();
        assert!(b.total < 1e-12);
        assert!(b.per_anchor.iter().all(|a| a.p > 1.0 - 1e-12));
    }

    #[test]
    fn identical_embeddings_give_count_ratio() {
        let (layout, n) = layout_for(&["a", "b"], 3);
        let emb = vec![vec![vec![0.25; 4]; 5]; n];
        let (b, _) = contrastive_loss(&emb, &layout).unwrap();
        // pull 2 windows, push 3 windows
        for a in &b.per_anchor {
            assert!((a.loss + (2.0f64 / 5.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (layout, n) = layout_for(&["a", "b", "c"], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let emb: Vec<Vec<Vec<f64>>> = (0..n).map(|_| rand_vecs(&mut rng, 5, 3, 0.6)).collect();
        let (_, grad) = contrastive_loss(&emb, &layout).unwrap();
        let h = 1e-6;
        for w in 0..n {
            for s in 0..5 {
                for k in 0..3 {
                    let mut p = emb.clone();
                    p[w][s][k] += h;
                    let mut m = emb.clone();
                    m[w][s][k] -= h;
                    let fd = (contrastive_loss(&p, &layout).unwrap().0.total
                        - contrastive_loss(&m, &layout).unwrap().0.total)
                        / (2.0 * h);
                    assert!((fd - grad[w][s][k]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", grad[w][s][k]);
                }
            }
        }
    }

    #[test]
    fn target_labels_do_not_matter() {
        let (layout, n) = layout_for(&["a", "b"], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let emb: Vec<Vec<Vec<f64>>> = (0..n).map(|_| rand_vecs(&mut rng, 5, 4, 0.5)).collect();
        let mut permuted = layout.clone();
        permuted.target.reverse();
        permuted.target[0] = IdentityId::new("zzz");
        let a = contrastive_loss(&emb, &layout).unwrap().0.total;
        let b = contrastive_loss(&emb, &permuted).unwrap().0.total;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn push_window_moving_away_never_increases_loss() {
        let (layout, n) = layout_for(&["a", "b"], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut emb: Vec<Vec<Vec<f64>>> = (0..n).map(|_| rand_vecs(&mut rng, 5, 4, 0.4)).collect();
        let mut prev = contrastive_loss(&emb, &layout).unwrap().0.total;
        // window 2 is pushed by group "a": translate it away from everyone
        for _ in 0..10 {
            for w in 2..4 {
                for v in emb[w].iter_mut() {
                    v[0] += 0.3;
                }
            }
            let now = contrastive_loss(&emb, &layout).unwrap().0.total;
            assert!(now <= prev + 1e-12);
            prev = now;
        }
    }

    #[test]
    fn empty_sets_name_identity() {
        let (mut layout, n) = layout_for(&["a", "b"], 2);
        let emb = vec![vec![vec![0.0; 2]; 5]; n];
        layout.groups[1].push.clear();
        assert!(matches!(contrastive_loss(&emb, &layout), Err(Error::EmptyPushSet(ref s)) if s == "b"));
        let (mut layout, _) = layout_for(&["a", "b"], 2);
        layout.groups[0].pull.truncate(1);
        assert!(matches!(contrastive_loss(&emb, &layout), Err(Error::EmptyPullSet(ref s)) if s == "a"));
    }

    #[test]
    fn pairwise_sum_fixed_order() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin() * 1e3).collect();
        assert_eq!(pairwise_sum(&v).to_bits(), pairwise_sum(&v).to_bits());
        assert!((pairwise_sum(&v) - v.iter().sum::<f64>()).abs() < 1e-8);
    }
}
