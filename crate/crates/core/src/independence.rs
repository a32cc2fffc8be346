//! Kernel independence (HSIC) between pooled embeddings and one-hot labels.
//!
//! The biased estimator is `(1/m²) trace(K H L H)`, evaluated as
//! `(1/m²) Σ_ij (HKH)_ij (HLH)_ij` (H is idempotent), which makes a constant
//! input give exactly zero. Embeddings use a Gaussian kernel
//! `exp(-‖u_i - u_j‖² / σ²)` with σ set to the median pairwise distance of the
//! batch; labels use a linear kernel on their one-hot codes.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Result};
use crate::numgrad::{double_center, ordered_sum, sq_dist, Tape, Tensor, Var};

/// Smallest bandwidth the median heuristic will return.
pub const BANDWIDTH_FLOOR: f64 = 1e-8;
/// Self-HSIC at or below this is treated as a constant input.
const DEGENERATE_HSIC: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    Median,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    Gaussian(Bandwidth),
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsicConfig {
    /// Weight of the independence term in the total loss.
    pub lambda: f64,
    pub normalize: bool,
}

impl Default for HsicConfig {
    fn default() -> Self {
        HsicConfig { lambda: 10.0, normalize: false }
    }
}

fn check_rows(u: &Tensor) -> Result<usize> {
    if u.rank() != 2 {
        return Err(shape_err!("expected an [m, d] matrix, got {:?}", u.shape()));
    }
    Ok(u.shape()[0])
}

/// Median of the `m(m-1)/2` pairwise Euclidean distances, floored at 1e-8.
pub fn median_heuristic(u: &Tensor) -> Result<f64> {
    let m = check_rows(u)?;
    if m < 2 {
        return Err(contract_err!("median heuristic needs at least 2 points, got {m}"));
    }
    let d2 = sq_dist(u, u);
    let mut dists: Vec<f64> =
        (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).map(|(i, j)| d2.at2(i, j).sqrt()).collect();
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    let median = if n % 2 == 1 { dists[n / 2] } else { 0.5 * (dists[n / 2 - 1] + dists[n / 2]) };
    Ok(median.max(BANDWIDTH_FLOOR))
}

/// `k_ij = exp(-‖u_i - u_j‖² / σ²)`.
pub fn gaussian_kernel(u: &Tensor, sigma: f64) -> Result<Tensor> {
    check_rows(u)?;
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(contract_err!("kernel bandwidth must be positive, got {sigma}"));
    }
    let s2 = sigma * sigma;
    Ok(sq_dist(u, u).map(|d| (-d / s2).exp()))
}

pub fn linear_kernel(v: &Tensor) -> Result<Tensor> {
    check_rows(v)?;
    let (m, d) = (v.shape()[0], v.shape()[1]);
    let vd = v.data();
    Ok(Tensor::from_fn(&[m, m], |idx| {
        let (i, j) = (idx / m, idx % m);
        (0..d).map(|c| vd[i * d + c] * vd[j * d + c]).sum()
    }))
}

pub fn kernel_matrix(x: &Tensor, kernel: Kernel) -> Result<Tensor> {
    match kernel {
        Kernel::Linear => linear_kernel(x),
        Kernel::Gaussian(Bandwidth::Fixed(s)) => gaussian_kernel(x, s),
        Kernel::Gaussian(Bandwidth::Median) => gaussian_kernel(x, median_heuristic(x)?),
    }
}

fn centered_inner(kc: &Tensor, lc: &Tensor, m: usize) -> f64 {
    ordered_sum(kc.data().iter().zip(lc.data()).map(|(a, b)| a * b).collect()) / (m * m) as f64
}

/// Biased empirical HSIC of paired samples `u` (`m×d_u`) and `v` (`m×d_v`).
pub fn hsic_biased(u: &Tensor, v: &Tensor, ku: Kernel, kv: Kernel) -> Result<f64> {
    let (m, mv) = (check_rows(u)?, check_rows(v)?);
    if m != mv {
        return Err(contract_err!("hsic sample counts differ: {m} vs {mv}"));
    }
    if m < 2 {
        return Err(contract_err!("hsic needs at least 2 samples, got {m}"));
    }
    let kc = double_center(&kernel_matrix(u, ku)?);
    let lc = double_center(&kernel_matrix(v, kv)?);
    Ok(centered_inner(&kc, &lc, m))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedHsic {
    pub value: f64,
    /// One side had zero self-HSIC (a constant input); `value` is then 0.
    pub degenerate: bool,
}

/// `HSIC(U,V) / sqrt(HSIC(U,U) HSIC(V,V))`, in `[0, 1]`.
pub fn hsic_normalized(u: &Tensor, v: &Tensor, ku: Kernel, kv: Kernel) -> Result<NormalizedHsic> {
    let (m, mv) = (check_rows(u)?, check_rows(v)?);
    if m != mv {
        return Err(contract_err!("hsic sample counts differ: {m} vs {mv}"));
    }
    if m < 2 {
        return Err(contract_err!("hsic needs at least 2 samples, got {m}"));
    }
    let kc = double_center(&kernel_matrix(u, ku)?);
    let lc = double_center(&kernel_matrix(v, kv)?);
    let (uu, vv) = (centered_inner(&kc, &kc, m), centered_inner(&lc, &lc, m));
    if uu <= DEGENERATE_HSIC || vv <= DEGENERATE_HSIC {
        return Ok(NormalizedHsic { value: 0.0, degenerate: true });
    }
    Ok(NormalizedHsic { value: centered_inner(&kc, &lc, m) / (uu * vv).sqrt(), degenerate: false })
}

/// HSIC between a batch of embeddings on the tape and fixed one-hot labels.
///
/// The bandwidth is read from the current embedding values and enters the
/// tape as a constant, so no gradient flows through the median.
pub fn hsic_term(tape: &mut Tape, z: Var, onehot: &Tensor, normalize: bool) -> Result<Var> {
    let zs = tape.shape(z).to_vec();
    let m = check_rows(onehot)?;
    if zs.len() != 2 || zs[0] != m {
        return Err(contract_err!("embeddings {zs:?} and labels {:?} disagree", onehot.shape()));
    }
    if m < 2 {
        return Err(contract_err!("hsic needs at least 2 samples, got {m}"));
    }
    let sigma = median_heuristic(tape.value(z))?;
    let lc = double_center(&linear_kernel(onehot)?);
    let vv = centered_inner(&lc, &lc, m);
    let lc = tape.constant(lc);

    let d = tape.sq_dist(z, z)?;
    let scaled = tape.scale(d, -1.0 / (sigma * sigma))?;
    let k = tape.exp(scaled)?;
    let kc = tape.center(k)?;
    let prod = tape.mul(kc, lc)?;
    let cross = tape.sum(prod)?;
    let cross = tape.scale(cross, 1.0 / (m * m) as f64)?;
    if !normalize {
        return Ok(cross);
    }
    let kk = tape.mul(kc, kc)?;
    let uu = tape.sum(kk)?;
    let uu = tape.scale(uu, 1.0 / (m * m) as f64)?;
    if tape.value(uu).item()? <= DEGENERATE_HSIC || vv <= DEGENERATE_HSIC {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let root = tape.sqrt(uu)?;
    let denom = tape.scale(root, vv.sqrt())?;
    tape.div_scalar(cross, denom)
}

/// `λ (HSIC(z_a, O) + HSIC(z_o, A)) / 2`.
pub fn independence_loss(
    tape: &mut Tape,
    z_attr: Var,
    z_obj: Var,
    attr_onehot: &Tensor,
    obj_onehot: &Tensor,
    config: &HsicConfig,
) -> Result<Var> {
    if config.lambda < 0.0 {
        return Err(contract_err!("independence weight must be nonnegative"));
    }
    let a = hsic_term(tape, z_attr, obj_onehot, config.normalize)?;
    let o = hsic_term(tape, z_obj, attr_onehot, config.normalize)?;
    let s = tape.add(a, o)?;
    tape.scale(s, config.lambda / 2.0)
}

/// `[labels.len(), k]` one-hot rows.
pub fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(contract_err!("label {bad} out of range for {k} classes"));
    }
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * k + y] = 1.0;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::{fd_check, FD_EPS};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const G: Kernel = Kernel::Gaussian(Bandwidth::Median);

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn median_cases() {
        let two = Tensor::new(&[2, 1], vec![0., 3.]).unwrap();
        assert_eq!(median_heuristic(&two).unwrap(), 3.0);
        let same = Tensor::full(&[5, 2], 0.4);
        assert_eq!(median_heuristic(&same).unwrap(), 1e-8);
        assert!(median_heuristic(&Tensor::zeros(&[1, 2])).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = rand_t(&mut rng, &[4, 3]);
        let mut d = Vec::new();
        for i in 0..4 {
            for j in i + 1..4 {
                let s: f64 = (0..3).map(|c| (u.at2(i, c) - u.at2(j, c)).powi(2)).sum();
                d.push(s.sqrt());
            }
        }
        d.sort_by(f64::total_cmp);
        assert_eq!(d.len(), 6);
        assert_eq!(median_heuristic(&u).unwrap(), 0.5 * (d[2] + d[3]));
    }

    #[test]
    fn gaussian_kernel_cases() {
        let u = Tensor::new(&[2, 2], vec![0., 0., 3., 4.]).unwrap();
        let k = gaussian_kernel(&u, 5.0).unwrap();
        assert_eq!(k.at2(0, 0), 1.0);
        assert!((k.at2(0, 1) - (-1f64).exp()).abs() < 1e-15);
        assert!(gaussian_kernel(&u, 0.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = rand_t(&mut rng, &[3, 2]);
        let k = gaussian_kernel(&r, 0.7).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let d2: f64 = (0..2).map(|c| (r.at2(i, c) - r.at2(j, c)).powi(2)).sum();
                assert!((k.at2(i, j) - (-d2 / 0.49).exp()).abs() < 1e-12);
                assert_eq!(k.at2(i, j), k.at2(j, i));
            }
        }
    }

    #[test]
    fn constant_u_gives_zero() {
        let u = Tensor::full(&[6, 3], 1.7);
        let v = one_hot(&[0, 1, 2, 0, 1, 2], 3).unwrap();
        assert_eq!(hsic_biased(&u, &v, G, Kernel::Linear).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_under_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = rand_t(&mut rng, &[7, 3]);
        let v = one_hot(&[0, 1, 1, 2, 0, 2, 1], 3).unwrap();
        let a = hsic_biased(&u, &v, G, Kernel::Linear).unwrap();
        let b = hsic_biased(&v, &u, Kernel::Linear, G).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn nonnegative_and_permutation_invariant(seed in 0u64..100_000, m in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = rand_t(&mut rng, &[m, 3]);
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..3)).collect();
            let v = one_hot(&labels, 3).unwrap();
            let h = hsic_biased(&u, &v, G, Kernel::Linear).unwrap();
            prop_assert!(h >= -1e-15);

            let mut perm: Vec<usize> = (0..m).collect();
            for i in (1..m).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let up = Tensor::from_fn(&[m, 3], |i| u.at2(perm[i / 3], i % 3));
            let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let hp = hsic_biased(&up, &one_hot(&lp, 3).unwrap(), G, Kernel::Linear).unwrap();
            prop_assert_eq!(h, hp);
        }
    }

    #[test]
    fn two_point_hand_oracle() {
        // U = [[0],[1]], σ = 1 → K = [[1, e⁻¹],[e⁻¹, 1]]; V = I₂ → L = I₂.
        // HKH = (1-e⁻¹)/2 · [[1,-1],[-1,1]], HLH = 1/2 · [[1,-1],[-1,1]]
        // trace(KHLH) = Σ (HKH)(HLH) = 4 · (1-e⁻¹)/4 = 1 - e⁻¹; divided by m² = 4.
        let u = Tensor::new(&[2, 1], vec![0., 1.]).unwrap();
        let v = Tensor::eye(2);
        let want = (1.0 - (-1f64).exp()) / 4.0;
        let got = hsic_biased(&u, &v, G, Kernel::Linear).unwrap();
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn mismatched_rows_error() {
        let u = Tensor::zeros(&[3, 2]);
        let v = Tensor::zeros(&[4, 2]);
        assert!(matches!(hsic_biased(&u, &v, G, Kernel::Linear), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn normalized_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = rand_t(&mut rng, &[8, 2]);
        let same = hsic_normalized(&u, &u, G, G).unwrap();
        assert!((same.value - 1.0).abs() < 1e-12);

        let c = Tensor::full(&[8, 2], 0.5);
        let deg = hsic_normalized(&c, &u, G, G).unwrap();
        assert!(deg.degenerate);
        assert_eq!(deg.value, 0.0);

        let v = rand_t(&mut rng, &[8, 3]);
        let n = hsic_normalized(&u, &v, G, G).unwrap();
        let ratio = hsic_biased(&u, &v, G, G).unwrap()
            / (hsic_biased(&u, &u, G, G).unwrap() * hsic_biased(&v, &v, G, G).unwrap()).sqrt();
        assert!((n.value - ratio).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&n.value));
    }

    fn loss_value(za: &Tensor, zo: &Tensor, a: &[usize], o: &[usize], lambda: f64) -> f64 {
        let mut tape = Tape::new();
        let (zav, zov) = (tape.param(za.clone()), tape.param(zo.clone()));
        let cfg = HsicConfig { lambda, normalize: true };
        let l = independence_loss(&mut tape, zav, zov, &one_hot(a, 8).unwrap(), &one_hot(o, 3).unwrap(), &cfg).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<usize> = (0..16).map(|i| i % 8).collect();
        let o: Vec<usize> = (0..16).map(|i| i % 3).collect();
        let za = rand_t(&mut rng, &[16, 4]);
        let zo = rand_t(&mut rng, &[16, 4]);
        assert_eq!(loss_value(&za, &zo, &a, &o, 0.0), 0.0);
        let c = Tensor::full(&[16, 4], 0.2);
        assert_eq!(loss_value(&c, &c, &a, &o, 10.0), 0.0);

        // z_a carries the object label itself
        let za = one_hot(&o, 3).unwrap();
        let l = loss_value(&za, &zo, &a, &o, 1.0);
        assert!(l >= 0.4, "loss {l}");
    }

    #[test]
    fn independent_inputs_score_low_dependent_high() {
        let mut below = 0;
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let labels: Vec<usize> = (0..64).map(|_| rng.random_range(0..4)).collect();
            let v = one_hot(&labels, 4).unwrap();
            let u = rand_t(&mut rng, &[64, 3]);
            let indep = hsic_normalized(&u, &v, G, Kernel::Linear).unwrap().value;
            if indep < 0.2 {
                below += 1;
            }
            let f = Tensor::from_fn(&[64, 3], |i| (labels[i / 3] * 3 + i % 3) as f64 * 0.5);
            let dep = hsic_normalized(&f, &v, G, Kernel::Linear).unwrap().value;
            assert!(dep > indep, "trial {trial}: {dep} <= {indep}");
        }
        assert!(below >= 95, "{below} of 100 below 0.2");
    }

    #[test]
    fn loss_gradient_with_frozen_bandwidth() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<usize> = (0..10).map(|_| rng.random_range(0..4)).collect();
        let o: Vec<usize> = (0..10).map(|_| rng.random_range(0..3)).collect();
        let (ah, oh) = (one_hot(&a, 4).unwrap(), one_hot(&o, 3).unwrap());
        let za = rand_t(&mut rng, &[10, 3]);
        let zo = rand_t(&mut rng, &[10, 3]);
        for normalize in [true, false] {
            let cfg = HsicConfig { lambda: 10.0, normalize };
            let err =
                fd_check(|t, p| independence_loss(t, p[0], p[1], &ah, &oh, &cfg), &[za.clone(), zo.clone()], FD_EPS)
                    .unwrap();
            assert!(err < 1e-4, "normalize={normalize}: err {err}");
        }
    }
}
