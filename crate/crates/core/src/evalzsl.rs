//! Generalized zero-shot evaluation with a calibration bias on unseen columns.
//!
//! Sweeping the bias from `-∞` to `+∞` traces seen accuracy against unseen
//! accuracy; the area under that curve and the best harmonic mean summarise
//! the trade-off. The sentinels `∓1e9` stand in for the closed settings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::compgraph::classify;
use crate::error::{contract_err, shape_err, Result};
use crate::numgrad::Tensor;

/// Bias standing in for `±∞`.
pub const SENTINEL: f64 = 1e9;
pub const DEFAULT_GRID_STEPS: usize = 201;

/// Scores for `N` samples over all `|Y|` compositions.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub scores: Tensor,
    pub labels: Vec<usize>,
    pub unseen: Vec<bool>,
}

impl ScoreMatrix {
    pub fn new(scores: Tensor, labels: Vec<usize>, unseen: Vec<bool>) -> Result<Self> {
        if scores.rank() != 2 || scores.rows() != labels.len() || scores.cols() != unseen.len() {
            return Err(shape_err!(
                "score matrix {:?} with {} labels and {} mask entries",
                scores.shape(),
                labels.len(),
                unseen.len()
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= unseen.len()) {
            return Err(contract_err!("label {bad} out of range for {} classes", unseen.len()));
        }
        Ok(ScoreMatrix { scores, labels, unseen })
    }

    pub fn n_classes(&self) -> usize {
        self.unseen.len()
    }
}

/// Adds `b` to every unseen column.
pub fn biased_scores(sm: &ScoreMatrix, b: f64) -> Tensor {
    let k = sm.n_classes();
    let mut out = sm.scores.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if sm.unseen[i % k] {
            *v += b;
        }
    }
    out
}

/// `(Acc_s, Acc_u)` under bias `b`.
pub fn accuracy_pair(sm: &ScoreMatrix, b: f64) -> Result<(f64, f64)> {
    let k = sm.n_classes();
    let (mut hit, mut total) = ([0usize; 2], [0usize; 2]);
    let mut row = vec![0.0; k];
    for (n, &y) in sm.labels.iter().enumerate() {
        for (j, r) in row.iter_mut().enumerate() {
            let s = sm.scores.data()[n * k + j];
            *r = if sm.unseen[j] { s + b } else { s };
        }
        let side = sm.unseen[y] as usize;
        total[side] += 1;
        if classify(&row) == y {
            hit[side] += 1;
        }
    }
    if total[0] == 0 || total[1] == 0 {
        return Err(contract_err!("accuracy needs both seen and unseen samples, got {} and {}", total[0], total[1]));
    }
    Ok((hit[0] as f64 / total[0] as f64, hit[1] as f64 / total[1] as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GridSpec {
    /// `steps` uniform biases over `[min - max, max - min]` of the scores, plus both sentinels.
    Uniform {
        steps: usize,
    },
    Explicit(Vec<f64>),
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Uniform { steps: DEFAULT_GRID_STEPS }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bias: f64,
    pub acc_seen: f64,
    pub acc_unseen: f64,
}

/// Points ordered by increasing bias.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub points: Vec<CurvePoint>,
}

impl EvalCurve {
    /// Tab-separated `bias acc_seen acc_unseen` rows with a header.
    pub fn to_text(&self) -> String {
        let mut out = String::from("bias\tacc_seen\tacc_unseen\n");
        for p in &self.points {
            let _ = writeln!(out, "{}\t{}\t{}", p.bias, p.acc_seen, p.acc_unseen);
        }
        out
    }
}

pub fn grid(sm: &ScoreMatrix, spec: &GridSpec) -> Result<Vec<f64>> {
    let mut g = match spec {
        GridSpec::Explicit(v) => v.clone(),
        GridSpec::Uniform { steps } => {
            let lo = sm.scores.data().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = sm.scores.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            let mut g: Vec<f64> = match steps {
                0 => Vec::new(),
                1 => vec![0.0],
                s => (0..*s).map(|i| -span + 2.0 * span * i as f64 / (s - 1) as f64).collect(),
            };
            g.push(-SENTINEL);
            g.push(SENTINEL);
            g
        }
    };
    if g.is_empty() {
        return Err(contract_err!("bias grid is empty"));
    }
    if g.iter().any(|b| b.is_nan()) {
        return Err(contract_err!("bias grid contains NaN"));
    }
    g.sort_by(f64::total_cmp);
    g.dedup();
    Ok(g)
}

pub fn sweep(sm: &ScoreMatrix, spec: &GridSpec) -> Result<EvalCurve> {
    let points = grid(sm, spec)?
        .into_iter()
        .map(|bias| {
            let (acc_seen, acc_unseen) = accuracy_pair(sm, bias)?;
            Ok(CurvePoint { bias, acc_seen, acc_unseen })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalCurve { points })
}

/// Trapezoidal area of `Acc_u` over `Acc_s`, keeping the max `Acc_u` per `Acc_s`.
pub fn auc(curve: &EvalCurve) -> Result<f64> {
    if curve.points.len() < 2 {
        return Err(contract_err!("auc needs at least 2 curve points"));
    }
    let mut pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.acc_seen, p.acc_unseen)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup_by(|later, first| later.0 == first.0);
    Ok(pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum())
}

pub fn harmonic_mean(acc_s: f64, acc_u: f64) -> f64 {
    if acc_s + acc_u == 0.0 {
        0.0
    } else {
        2.0 * acc_s * acc_u / (acc_s + acc_u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub best_hm: f64,
    /// Seen and unseen accuracy at the bias achieving `best_hm` (first in grid order).
    pub best_seen: f64,
    pub best_unseen: f64,
    pub best_bias: f64,
    pub closed_seen: f64,
    pub closed_unseen: f64,
    pub curve: EvalCurve,
}

impl EvalReport {
    /// `name value` lines, curve omitted.
    pub fn to_record(&self) -> String {
        format!(
            "auc {}\nbest_hm {}\nbest_seen {}\nbest_unseen {}\nbest_bias {}\nclosed_seen {}\nclosed_unseen {}\n",
            self.auc,
            self.best_hm,
            self.best_seen,
            self.best_unseen,
            self.best_bias,
            self.closed_seen,
            self.closed_unseen
        )
    }
}

pub fn report(sm: &ScoreMatrix, spec: &GridSpec) -> Result<EvalReport> {
    let curve = sweep(sm, spec)?;
    let (closed_seen, _) = accuracy_pair(sm, -SENTINEL)?;
    let (_, closed_unseen) = accuracy_pair(sm, SENTINEL)?;
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0, 0.0);
    for p in &curve.points {
        let hm = harmonic_mean(p.acc_seen, p.acc_unseen);
        if hm > best.0 {
            best = (hm, p.acc_seen, p.acc_unseen, p.bias);
        }
    }
    Ok(EvalReport {
        auc: auc(&curve).unwrap_or(0.0),
        best_hm: best.0,
        best_seen: best.1,
        best_unseen: best.2,
        best_bias: best.3,
        closed_seen,
        closed_unseen,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sm(rng: &mut ChaCha8Rng, n: usize, k: usize) -> ScoreMatrix {
        let unseen: Vec<bool> = (0..k).map(|j| j % 3 == 0).collect();
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores = Tensor::from_fn(&[n, k], |_| rng.random_range(-2.0..2.0));
        ScoreMatrix::new(scores, labels, unseen).unwrap()
    }

    fn perfect() -> ScoreMatrix {
        let labels = vec![0, 1, 2, 3];
        let scores = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 5.0 } else { 0.0 });
        ScoreMatrix::new(scores, labels, vec![false, true, false, true]).unwrap()
    }

    /// Brute-force oracle: explicit argmax loop per sample.
    fn oracle_pair(sm: &ScoreMatrix, b: f64) -> (f64, f64) {
        let k = sm.n_classes();
        let mut c = [[0.0; 2]; 2];
        for (n, &y) in sm.labels.iter().enumerate() {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for j in 0..k {
                let s = sm.scores.at2(n, j) + if sm.unseen[j] { b } else { 0.0 };
                if s > best.0 {
                    best = (s, j);
                }
            }
            let u = sm.unseen[y] as usize;
            c[u][1] += 1.0;
            if best.1 == y {
                c[u][0] += 1.0;
            }
        }
        (c[0][0] / c[0][1], c[1][0] / c[1][1])
    }

    #[test]
    fn biased_scores_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sm = random_sm(&mut rng, 5, 6);
        assert_eq!(biased_scores(&sm, 0.0), sm.scores);
        let hi = biased_scores(&sm, SENTINEL);
        let lo = biased_scores(&sm, -SENTINEL);
        for n in 0..5 {
            assert!(sm.unseen[classify(hi.row(n))]);
            assert!(!sm.unseen[classify(lo.row(n))]);
        }
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy_pair(&perfect(), 0.0).unwrap(), (1.0, 1.0));
        assert_eq!(accuracy_pair(&perfect(), -SENTINEL).unwrap().1, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sm = random_sm(&mut rng, 6, 6);
        for b in [-1.0, 0.0, 0.3, 2.0] {
            assert_eq!(accuracy_pair(&sm, b).unwrap(), oracle_pair(&sm, b));
        }

        let only_seen = ScoreMatrix::new(Tensor::zeros(&[2, 2]), vec![0, 0], vec![false, true]).unwrap();
        assert!(matches!(accuracy_pair(&only_seen, 0.0), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn sweep_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sm = random_sm(&mut rng, 20, 6);
        let c = sweep(&sm, &GridSpec::Explicit(vec![SENTINEL, -SENTINEL])).unwrap();
        assert_eq!(c.points.len(), 2);
        assert_eq!(c.points[0].acc_seen, accuracy_pair(&sm, -SENTINEL).unwrap().0);
        assert_eq!(c.points[1].acc_unseen, accuracy_pair(&sm, SENTINEL).unwrap().1);

        let c = sweep(&sm, &GridSpec::default()).unwrap();
        assert_eq!(c.points.len(), 203);
        for p in &c.points {
            assert_eq!((p.acc_seen, p.acc_unseen), oracle_pair(&sm, p.bias));
        }

        let r = report(&perfect(), &GridSpec::default()).unwrap();
        assert!(r.curve.points.iter().filter(|p| p.bias == 0.0).all(|p| p.acc_seen == 1.0 && p.acc_unseen == 1.0));
        assert_eq!((r.auc, r.best_hm, r.closed_seen, r.closed_unseen), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn auc_cases() {
        let pt = |s, u| CurvePoint { bias: 0.0, acc_seen: s, acc_unseen: u };
        let tri = EvalCurve { points: vec![pt(0.0, 0.0), pt(1.0, 1.0)] };
        assert_eq!(auc(&tri).unwrap(), 0.5);
        let rect = EvalCurve { points: vec![pt(1.0, 1.0), pt(0.5, 1.0), pt(0.0, 1.0)] };
        assert_eq!(auc(&rect).unwrap(), 1.0);
        // duplicate Acc_s keeps the larger Acc_u
        let dup = EvalCurve { points: vec![pt(0.0, 0.8), pt(0.0, 0.2), pt(0.6, 0.4), pt(0.6, 0.1), pt(1.0, 0.0)] };
        let want = 0.6 * (0.8 + 0.4) / 2.0 + 0.4 * (0.4 + 0.0) / 2.0;
        assert!((auc(&dup).unwrap() - want).abs() < 1e-15);
        assert!(auc(&EvalCurve { points: vec![pt(0.5, 0.5)] }).is_err());
    }

    #[test]
    fn harmonic_mean_cases() {
        assert!((harmonic_mean(0.979, 0.955) - 0.967).abs() < 1e-3);
        assert_eq!(harmonic_mean(0.37, 0.37), 0.37);
        assert_eq!(harmonic_mean(1.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn ignoring_unseen_gives_zero_hm() {
        let scores = Tensor::from_fn(&[4, 4], |i| if i % 4 % 2 == 1 { -1e12 } else { (i / 4) as f64 });
        let sm = ScoreMatrix::new(scores, vec![0, 1, 2, 3], vec![false, true, false, true]).unwrap();
        let r = report(&sm, &GridSpec::default()).unwrap();
        assert_eq!(r.closed_unseen, 0.0);
        assert_eq!(r.best_hm, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn curve_is_monotone(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sm = random_sm(&mut rng, 30, 7);
            let r = report(&sm, &GridSpec::default()).unwrap();
            for w in r.curve.points.windows(2) {
                prop_assert!(w[1].acc_unseen >= w[0].acc_unseen);
                prop_assert!(w[1].acc_seen <= w[0].acc_seen);
            }
            let (first, last) = (r.curve.points[0], *r.curve.points.last().unwrap());
            prop_assert_eq!(first.acc_seen, r.closed_seen);
            prop_assert_eq!(last.acc_unseen, r.closed_unseen);
            let max_s = r.curve.points.iter().map(|p| p.acc_seen).fold(0.0, f64::max);
            let max_u = r.curve.points.iter().map(|p| p.acc_unseen).fold(0.0, f64::max);
            prop_assert!(r.auc >= 0.0 && r.auc <= max_s * max_u + 1e-12);
            let (s0, u0) = accuracy_pair(&sm, 0.0).unwrap();
            prop_assert!(r.best_hm >= harmonic_mean(s0, u0) - 1e-12);
        }

        #[test]
        fn report_invariant_to_global_shift(seed in 0u64..100_000, shift in -4i32..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sm = random_sm(&mut rng, 25, 6);
            // integer shifts keep float sums exact at these magnitudes
            let moved = ScoreMatrix::new(sm.scores.map(|x| x + shift as f64 * 0.5), sm.labels.clone(), sm.unseen.clone()).unwrap();
            let grid = GridSpec::Explicit(vec![-SENTINEL, -1.0, -0.25, 0.0, 0.5, 1.5, SENTINEL]);
            let (a, b) = (report(&sm, &grid).unwrap(), report(&moved, &grid).unwrap());
            prop_assert_eq!(a.auc, b.auc);
            prop_assert_eq!(a.best_hm, b.best_hm);
        }
    }
}
