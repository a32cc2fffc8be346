//! Convolutional feature extractor and attribute/object prototype layers.
//!
//! A feature map is handled as `[N, P, C]` patches (`P = H*W`). Each
//! prototype is compared with every patch by dot product; the per-prototype
//! maximum over patches is that class's logit.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Result};
use crate::numgrad::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Attribute,
    Object,
}

/// One learnable prototype per class, `[k, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Tensor,
    pub kind: PrimitiveKind,
}

impl PrototypeSet {
    /// I.i.d. normal entries with standard deviation `1/sqrt(C)`.
    pub fn init(k: usize, dim: usize, kind: PrimitiveKind, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        PrototypeSet { prototypes: Tensor::from_fn(&[k, dim], |_| normal.sample(rng)), kind }
    }

    pub fn len(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage {
    /// `[3, 3, cin, cout]`
    pub weight: Tensor,
    /// `[cout]`
    pub bias: Tensor,
}

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;

/// Three stride-2 3x3 conv stages with ReLU between them, none after the last.
/// A 32x32 image becomes a 4x4 grid of `C`-dimensional patches.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub stages: Vec<ConvStage>,
}

impl FeatureExtractor {
    /// He-normal weights, zero biases. `channels` lists the output width of each stage.
    pub fn init(in_channels: usize, channels: &[usize], rng: &mut impl Rng) -> Self {
        let mut cin = in_channels;
        let stages = channels
            .iter()
            .map(|&cout| {
                let fan_in = (KERNEL * KERNEL * cin) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                let stage = ConvStage {
                    weight: Tensor::from_fn(&[KERNEL, KERNEL, cin, cout], |_| normal.sample(rng)),
                    bias: Tensor::zeros(&[cout]),
                };
                cin = cout;
                stage
            })
            .collect();
        FeatureExtractor { stages }
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.weight.shape()[3])
    }

    /// Spatial side length of the output for a square input of side `size`.
    pub fn out_size(&self, size: usize) -> usize {
        self.stages.iter().fold(size, |s, _| (s + 2 * PAD - KERNEL) / STRIDE + 1)
    }

    /// Puts every stage on the tape, as parameters or constants.
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> Vec<(Var, Var)> {
        self.stages
            .iter()
            .map(|s| {
                if trainable {
                    (tape.param(s.weight.clone()), tape.param(s.bias.clone()))
                } else {
                    (tape.constant(s.weight.clone()), tape.constant(s.bias.clone()))
                }
            })
            .collect()
    }
}

/// `[N, 32, 32, 3]` images to a `[N, H, W, C]` feature map.
pub fn extract_features(tape: &mut Tape, images: Var, stages: &[(Var, Var)]) -> Result<Var> {
    let mut x = images;
    for (i, &(w, b)) in stages.iter().enumerate() {
        x = tape.conv2d(x, w, b, STRIDE, PAD)?;
        if i + 1 < stages.len() {
            x = tape.relu(x)?;
        }
    }
    let s = tape.shape(x);
    if s[1] < 2 || s[2] < 2 {
        return Err(shape_err!("feature map {s:?} is smaller than 2x2"));
    }
    Ok(x)
}

/// `[N, H, W, C]` to `[N, H*W, C]`.
pub fn patches(tape: &mut Tape, fm: Var) -> Result<Var> {
    let s = tape.shape(fm).to_vec();
    if s.len() != 4 {
        return Err(shape_err!("feature map must be [N,H,W,C], got {s:?}"));
    }
    tape.reshape(fm, &[s[0], s[1] * s[2], s[3]])
}

/// Dot products of every patch with every prototype: `[N,P,C] x [K,C] -> [N,P,K]`.
pub fn similarity_map(tape: &mut Tape, patches: Var, prototypes: Var) -> Result<Var> {
    let (ps, ks) = (tape.shape(patches).to_vec(), tape.shape(prototypes).to_vec());
    if ps.len() != 3 || ks.len() != 2 || ps[2] != ks[1] {
        return Err(shape_err!("similarity between patches {ps:?} and prototypes {ks:?}"));
    }
    let flat = tape.reshape(patches, &[ps[0] * ps[1], ps[2]])?;
    let pt = tape.transpose(prototypes)?;
    let s = tape.matmul(flat, pt)?;
    tape.reshape(s, &[ps[0], ps[1], ks[0]])
}

/// Max over patches: `[N,P,K] -> [N,K]`. Ties go to the first patch in row-major order.
pub fn compat_scores(tape: &mut Tape, sim: Var) -> Result<Var> {
    tape.max_axis(sim, 1)
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(shape_err!("{} labels for a batch of {n}", labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(contract_err!("label {bad} out of range for {k} classes"));
    }
    Ok(())
}

/// Mean cross-entropy of `[N,K]` logits against `labels`.
pub fn ce_loss(tape: &mut Tape, scores: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(scores).to_vec();
    if s.len() != 2 {
        return Err(shape_err!("ce_loss wants [N,K] scores, got {s:?}"));
    }
    check_labels(labels, s[0], s[1])?;
    let ls = tape.log_softmax(scores)?;
    let picked = tape.pick(ls, labels)?;
    let m = tape.mean(picked)?;
    tape.scale(m, -1.0)
}

/// `[N,K]` minimum over patches of squared distance to each prototype.
fn min_patch_distances(tape: &mut Tape, patches: Var, prototypes: Var) -> Result<Var> {
    let (ps, ks) = (tape.shape(patches).to_vec(), tape.shape(prototypes).to_vec());
    if ps.len() != 3 || ks.len() != 2 || ps[2] != ks[1] {
        return Err(shape_err!("distance between patches {ps:?} and prototypes {ks:?}"));
    }
    let flat = tape.reshape(patches, &[ps[0] * ps[1], ps[2]])?;
    let d = tape.sq_dist(flat, prototypes)?;
    let d = tape.reshape(d, &[ps[0], ps[1], ks[0]])?;
    tape.min_axis(d, 1)
}

/// Mean over the batch of the closest patch's squared distance to the own-class prototype.
pub fn cluster_cost(tape: &mut Tape, patches: Var, prototypes: Var, labels: &[usize]) -> Result<Var> {
    let d = min_patch_distances(tape, patches, prototypes)?;
    let s = tape.shape(d).to_vec();
    check_labels(labels, s[0], s[1])?;
    let own = tape.pick(d, labels)?;
    tape.mean(own)
}

/// Negated mean of the closest patch-to-wrong-prototype squared distance.
pub fn separation_cost(tape: &mut Tape, patches: Var, prototypes: Var, labels: &[usize]) -> Result<Var> {
    let k = tape.shape(prototypes).first().copied().unwrap_or(0);
    if k < 2 {
        return Err(contract_err!("separation cost needs at least two prototypes, got {k}"));
    }
    let d = min_patch_distances(tape, patches, prototypes)?;
    let s = tape.shape(d).to_vec();
    check_labels(labels, s[0], s[1])?;
    let other = tape.min_excluding(d, labels)?;
    let m = tape.mean(other)?;
    tape.scale(m, -1.0)
}

/// Softmax-weighted average of each item's patches, weighted by that item's
/// similarity to prototype `index[n]`: `[N,P,K], [N,P,C] -> [N,C]`.
pub fn softmax_pool(tape: &mut Tape, sim: Var, patches: Var, index: &[usize]) -> Result<Var> {
    let (ss, ps) = (tape.shape(sim).to_vec(), tape.shape(patches).to_vec());
    if ss.len() != 3 || ps.len() != 3 || ss[..2] != ps[..2] {
        return Err(shape_err!("softmax pool over {ss:?} and {ps:?}"));
    }
    check_labels(index, ss[0], ss[2])?;
    let col = tape.pick(sim, index)?;
    let w = tape.softmax(col, 1.0)?;
    let w = tape.reshape(w, &[ss[0], 1, ss[1]])?;
    let z = tape.batch_matmul(w, patches)?;
    tape.reshape(z, &[ss[0], ps[2]])
}

/// Spatial mean of the patches: `[N,P,C] -> [N,C]`.
pub fn mean_pool(tape: &mut Tape, patches: Var) -> Result<Var> {
    tape.mean_axis(patches, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::{fd_check, FD_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fe = FeatureExtractor::init(3, &[4, 5, 6], &mut rng);
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::zeros(&[1, 32, 32, 3]));
        let st = fe.to_tape(&mut tape, true);
        let fm = extract_features(&mut tape, img, &st).unwrap();
        assert_eq!(tape.shape(fm), &[1, 4, 4, 6]);
        assert!(tape.value(fm).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extractor_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let fe = FeatureExtractor::init(3, &[4, 5, 6], &mut rng);
            let img = rand_t(&mut rng, &[2, 32, 32, 3]);
            let mut tape = Tape::new();
            let img = tape.constant(img);
            let st = fe.to_tape(&mut tape, true);
            let fm = extract_features(&mut tape, img, &st).unwrap();
            tape.value(fm).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn extractor_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut fe = FeatureExtractor::init(3, &[2, 3, 3], &mut rng);
        // zero biases put dead receptive fields exactly on the ReLU kink
        for s in &mut fe.stages {
            s.bias = rand_t(&mut rng, s.bias.shape());
        }
        let img = Tensor::from_fn(&[1, 32, 32, 3], |_| rng.random_range(0.0..1.0));
        let proj = rand_t(&mut rng, &[1, 4, 4, 3]);
        let params: Vec<Tensor> = fe.stages.iter().flat_map(|s| [s.weight.clone(), s.bias.clone()]).collect();
        let err = fd_check(
            |t, p| {
                let img = t.constant(img);
                let st: Vec<(Var, Var)> = p.chunks(2).map(|c| (c[0], c[1])).collect();
                let fm = extract_features(t, img, &st)?;
                let w = t.constant(proj);
                let m = t.mul(fm, w)?;
                t.sum(m)
            },
            &params,
            FD_EPS,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    fn sim_of(patch_rows: &[Vec<f64>], n: usize, protos: &Tensor) -> Tensor {
        let p = patch_rows.len() / n;
        let c = patch_rows[0].len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[n, p, c], patch_rows.concat()).unwrap());
        let k = tape.constant(protos.clone());
        let s = similarity_map(&mut tape, x, k).unwrap();
        tape.value(s).clone()
    }

    #[test]
    fn similarity_basis_and_zero() {
        let basis = Tensor::eye(3);
        let s = sim_of(&[vec![1., 0., 0.], vec![0.3, 0.2, 0.1]], 1, &basis);
        assert_eq!(&s.data()[..3], &[1., 0., 0.]);
        let s = sim_of(&[vec![1., 2., 3.], vec![4., 5., 6.]], 1, &Tensor::zeros(&[2, 3]));
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn similarity_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fm = rand_t(&mut rng, &[1, 2, 2, 3]);
        let protos = rand_t(&mut rng, &[2, 3]);
        let mut tape = Tape::new();
        let f = tape.constant(fm.clone());
        let x = patches(&mut tape, f).unwrap();
        let k = tape.constant(protos.clone());
        let s = similarity_map(&mut tape, x, k).unwrap();
        let sv = tape.value(s);
        for p in 0..4 {
            for j in 0..2 {
                let mut dot = 0.0;
                for c in 0..3 {
                    dot += fm.data()[p * 3 + c] * protos.data()[j * 3 + c];
                }
                assert!((sv.data()[p * 2 + j] - dot).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn similarity_dimension_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 3]));
        let k = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(similarity_map(&mut tape, x, k), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn compat_scores_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // single patch
        let mut tape = Tape::new();
        let s1 = tape.constant(Tensor::new(&[1, 1, 3], vec![0.5, -1., 2.]).unwrap());
        let c = compat_scores(&mut tape, s1).unwrap();
        assert_eq!(tape.value(c).data(), &[0.5, -1., 2.]);
        // dominating first patch
        let mut d = rand_t(&mut rng, &[1, 4, 3]);
        d.data_mut()[..3].copy_from_slice(&[9., 9., 9.]);
        let s2 = tape.constant(d);
        let c = compat_scores(&mut tape, s2).unwrap();
        assert_eq!(tape.value(c).data(), &[9., 9., 9.]);
        // brute-force max
        let r = rand_t(&mut rng, &[1, 16, 5]);
        let s3 = tape.constant(r.clone());
        let c = compat_scores(&mut tape, s3).unwrap();
        for j in 0..5 {
            let m = (0..16).map(|p| r.data()[p * 5 + j]).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(tape.value(c).data()[j], m);
        }
    }

    #[test]
    fn ce_loss_cases() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::full(&[1, 8], 0.3));
        let l = ce_loss(&mut tape, u, &[5]).unwrap();
        assert!((tape.value(l).item().unwrap() - 8f64.ln()).abs() < 1e-12);

        let sat = tape.constant(Tensor::new(&[1, 3], vec![800., 0., 0.]).unwrap());
        let l = ce_loss(&mut tape, sat, &[0]).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-300);

        let s = tape.constant(Tensor::new(&[1, 2], vec![1., 2.]).unwrap());
        let l = ce_loss(&mut tape, s, &[0]).unwrap();
        let oracle = -(1f64.exp() / (1f64.exp() + 2f64.exp())).ln();
        assert!((tape.value(l).item().unwrap() - oracle).abs() < 1e-12);
        assert!((oracle - 1.31326).abs() < 1e-5);

        assert!(matches!(ce_loss(&mut tape, s, &[2]), Err(crate::Error::Contract(_))));
    }

    fn brute_min_dist(x: &Tensor, protos: &Tensor, n: usize, j: usize) -> f64 {
        let (p, c) = (x.shape()[1], x.shape()[2]);
        (0..p)
            .map(|q| {
                (0..c)
                    .map(|d| {
                        let diff = x.data()[(n * p + q) * c + d] - protos.data()[j * c + d];
                        diff * diff
                    })
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn cluster_cost_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&mut rng, &[3, 4, 2]);
        let mut protos = rand_t(&mut rng, &[2, 2]);
        // prototype 1 equals patch 2 of item 0
        protos.data_mut()[2..4].copy_from_slice(&x.data()[4..6]);
        let labels = [1, 0, 1];
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = tape.constant(protos.clone());
        let c = cluster_cost(&mut tape, xv, pv, &labels).unwrap();
        let oracle: f64 = (0..3).map(|n| brute_min_dist(&x, &protos, n, labels[n])).sum::<f64>() / 3.0;
        assert_eq!(brute_min_dist(&x, &protos, 0, 1), 0.0);
        assert!((tape.value(c).item().unwrap() - oracle).abs() < 1e-14);

        // batch of one, one patch
        let z = Tensor::new(&[1, 1, 2], vec![1., 2.]).unwrap();
        let zv = tape.constant(z);
        let c = cluster_cost(&mut tape, zv, pv, &[0]).unwrap();
        let want = (1. - protos.data()[0]).powi(2) + (2. - protos.data()[1]).powi(2);
        assert!((tape.value(c).item().unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn separation_cost_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_t(&mut rng, &[4, 3, 2]);
        let protos = rand_t(&mut rng, &[3, 2]);
        let labels = [0, 2, 1, 1];
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = tape.constant(protos.clone());
        let s = separation_cost(&mut tape, xv, pv, &labels).unwrap();
        let oracle = -(0..4)
            .map(|n| {
                (0..3)
                    .filter(|&j| j != labels[n])
                    .map(|j| brute_min_dist(&x, &protos, n, j))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / 4.0;
        assert!((tape.value(s).item().unwrap() - oracle).abs() < 1e-14);
        assert!(tape.value(s).item().unwrap() <= 0.0);

        // two far prototypes, patch sitting on its own prototype
        let far = Tensor::new(&[2, 2], vec![0., 0., 10., 0.]).unwrap();
        let at = Tensor::new(&[1, 1, 2], vec![0., 0.]).unwrap();
        let fv = tape.constant(far);
        let av = tape.constant(at);
        let s = separation_cost(&mut tape, av, fv, &[0]).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), -100.0);

        let one = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(separation_cost(&mut tape, av, one, &[0]), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn softmax_pool_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        // single patch
        let x1 = rand_t(&mut rng, &[1, 1, 4]);
        let xv = tape.constant(x1.clone());
        let s1 = tape.constant(rand_t(&mut rng, &[1, 1, 2]));
        let z = softmax_pool(&mut tape, s1, xv, &[1]).unwrap();
        assert_eq!(tape.value(z).data(), x1.data());
        // saturated
        let x = rand_t(&mut rng, &[1, 4, 3]);
        let mut s = Tensor::zeros(&[1, 4, 1]);
        s.data_mut()[2] = 60.0;
        let (xv, sv) = (tape.constant(x.clone()), tape.constant(s));
        let z = softmax_pool(&mut tape, sv, xv, &[0]).unwrap();
        for c in 0..3 {
            assert!((tape.value(z).data()[c] - x.data()[2 * 3 + c]).abs() < 1e-10);
        }
        // uniform scores
        let sv = tape.constant(Tensor::full(&[1, 4, 1], 0.7));
        let z = softmax_pool(&mut tape, sv, xv, &[0]).unwrap();
        for c in 0..3 {
            let mean = (0..4).map(|p| x.data()[p * 3 + c]).sum::<f64>() / 4.0;
            assert!((tape.value(z).data()[c] - mean).abs() < 1e-14);
        }
    }
}
