//! Score prediction from learned user representations: least-squares
//! linear regression followed by isotonic regression on its output.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::mae;

/// Ridge added to the normal equations when they are rank deficient.
pub const RIDGE_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Whether the normal equations needed the ridge jitter.
    pub jittered: bool,
}

impl LinearFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

/// Least squares `min sum (x . w + b - y)^2`. Features are centred before
/// forming the normal equations, which leaves the minimizer unchanged and
/// keeps them well conditioned.
pub fn fit_linear(x: &[Vec<f64>], y: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if n == 0 {
        return Err(Error::Argument("linear regression on zero rows".into()));
    }
    if y.len() != n {
        return Err(Error::Argument(format!("{n} rows but {} targets", y.len())));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::shape("fit_linear", "ragged feature rows".to_string()));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression input".into()));
    }
    let mean_x: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mean_y = y.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, d, |i, j| x[i][j] - mean_x[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - mean_y));
    let gram = xc.transpose() * &xc;
    let rhs = xc.transpose() * yc;

    let max_diag = (0..d).map(|j| gram[(j, j)]).fold(0.0, f64::max);
    let well_posed = |l: &DMatrix<f64>| (0..d).all(|j| l[(j, j)] * l[(j, j)] > 1e-12 * max_diag);
    let (w, jittered) = match gram.clone().cholesky() {
        Some(c) if well_posed(&c.l()) => (c.solve(&rhs), false),
        _ => {
            let ridged = gram + DMatrix::identity(d, d) * RIDGE_JITTER;
            let c = ridged.cholesky().ok_or_else(|| Error::NonFinite("normal equations".into()))?;
            (c.solve(&rhs), true)
        }
    };
    let weights: Vec<f64> = w.iter().copied().collect();
    let intercept = mean_y - weights.iter().zip(&mean_x).map(|(w, m)| w * m).sum::<f64>();
    Ok(LinearFit { weights, intercept, jittered })
}

/// Pool-adjacent-violators: the non-decreasing sequence minimizing
/// `sum w_k (f_k - y_k)^2`, for `y` already ordered by the regressor.
pub fn pava(y: &[f64], w: &[f64]) -> Vec<f64> {
    // blocks of (weighted mean, weight, length)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (&v, &wt) in y.iter().zip(w) {
        blocks.push((v, wt, 1));
        while blocks.len() > 1 {
            let (m2, w2, n2) = blocks[blocks.len() - 1];
            let (m1, w1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let merged = blocks.last_mut().unwrap();
            *merged = ((m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2, n1 + n2);
        }
    }
    blocks.into_iter().flat_map(|(m, _, n)| std::iter::repeat_n(m, n)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub input: f64,
    pub fitted: f64,
}

/// Behaviour of the isotonic stage outside its knot range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extrapolation {
    /// Constant at the end knot's fitted value.
    Clamp,
    /// Slope one from the end knot: `x + (fitted_end - input_end)`, so a
    /// linear stage that is already calibrated passes through unchanged.
    #[default]
    HoldOffset,
}

/// Monotone step function with linear interpolation between knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicFit {
    pub knots: Vec<Knot>,
}

impl IsotonicFit {
    pub fn predict(&self, x: f64, extrapolation: Extrapolation) -> f64 {
        let first = self.knots[0];
        let last = self.knots[self.knots.len() - 1];
        if x <= first.input {
            return match extrapolation {
                Extrapolation::Clamp => first.fitted,
                Extrapolation::HoldOffset => x + (first.fitted - first.input),
            };
        }
        if x >= last.input {
            return match extrapolation {
                Extrapolation::Clamp => last.fitted,
                Extrapolation::HoldOffset => x + (last.fitted - last.input),
            };
        }
        let hi = self.knots.partition_point(|k| k.input < x);
        let (a, b) = (self.knots[hi - 1], self.knots[hi]);
        if b.input == x {
            return b.fitted;
        }
        let t = (x - a.input) / (b.input - a.input);
        a.fitted + t * (b.fitted - a.fitted)
    }
}

/// Isotonic regression of `actual` on `pred`. Equal `pred` values are
/// pooled to their mean first; each distinct `pred` becomes a knot.
pub fn fit_isotonic(pred: &[f64], actual: &[f64]) -> Result<IsotonicFit> {
    if pred.is_empty() {
        return Err(Error::Argument("isotonic regression of an empty set".into()));
    }
    if pred.len() != actual.len() {
        return Err(Error::Argument(format!("{} inputs but {} targets", pred.len(), actual.len())));
    }
    if pred.iter().chain(actual).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("isotonic input".into()));
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]).then(a.cmp(&b)));
    let mut inputs = Vec::new();
    let mut means = Vec::new();
    let mut weights = Vec::new();
    for &k in &order {
        if inputs.last() == Some(&pred[k]) {
            let n = weights.last_mut().unwrap();
            let m = means.last_mut().unwrap();
            *m = (*m * *n + actual[k]) / (*n + 1.0);
            *n += 1.0;
        } else {
            inputs.push(pred[k]);
            means.push(actual[k]);
            weights.push(1.0);
        }
    }
    let fitted = pava(&means, &weights);
    Ok(IsotonicFit { knots: inputs.into_iter().zip(fitted).map(|(input, fitted)| Knot { input, fitted }).collect() })
}

/// Linear stage, isotonic stage and extrapolation rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpModel {
    pub linear: LinearFit,
    pub isotonic: IsotonicFit,
    pub extrapolation: Extrapolation,
}

impl SpModel {
    /// Fits both stages on the same rows.
    pub fn fit(x: &[Vec<f64>], y: &[f64], extrapolation: Extrapolation) -> Result<SpModel> {
        let linear = fit_linear(x, y)?;
        let lin: Vec<f64> = x.iter().map(|r| linear.predict(r)).collect();
        let isotonic = fit_isotonic(&lin, y)?;
        Ok(SpModel { linear, isotonic, extrapolation })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path.display(), e))
    }

    pub fn load(path: &Path) -> Result<SpModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn predict_score(theta: &[f64], m: &SpModel) -> f64 {
    m.isotonic.predict(m.linear.predict(theta), m.extrapolation)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePrediction {
    pub user: usize,
    pub predicted: f64,
    pub actual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpReport {
    pub mae: f64,
    pub train_users: usize,
    pub test_users: usize,
    pub model: SpModel,
    pub predictions: Vec<ScorePrediction>,
}

/// Fits on `train_users` and reports MAE on `test_users`. Users without a
/// score are skipped.
pub fn sp_evaluate(
    representations: &[Vec<f64>],
    scores: &BTreeMap<usize, f64>,
    train_users: &[usize],
    test_users: &[usize],
    extrapolation: Extrapolation,
) -> Result<SpReport> {
    type Rows = (Vec<usize>, Vec<Vec<f64>>, Vec<f64>);
    let rows = |users: &[usize]| -> Result<Rows> {
        let mut ids = Vec::new();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for &u in users {
            let Some(&s) = scores.get(&u) else { continue };
            let rep = representations.get(u).ok_or_else(|| {
                Error::Argument(format!("user {u} has no representation ({} available)", representations.len()))
            })?;
            ids.push(u);
            x.push(rep.clone());
            y.push(s);
        }
        Ok((ids, x, y))
    };
    let (_, x_train, y_train) = rows(train_users)?;
    let (test_ids, x_test, y_test) = rows(test_users)?;
    if x_test.is_empty() {
        return Err(Error::Argument("no scored test users".into()));
    }
    if x_train.is_empty() {
        return Err(Error::Argument("no scored training users".into()));
    }
    let model = SpModel::fit(&x_train, &y_train, extrapolation)?;
    let predicted: Vec<f64> = x_test.iter().map(|r| predict_score(r, &model)).collect();
    let err = mae(&predicted, &y_test)?;
    let predictions = test_ids
        .iter()
        .zip(predicted.iter().zip(&y_test))
        .map(|(&user, (&predicted, &actual))| ScorePrediction { user, predicted, actual })
        .collect();
    Ok(SpReport { mae: err, train_users: x_train.len(), test_users: x_test.len(), model, predictions })
}

pub fn write_predictions_csv<W: Write>(predictions: &[ScorePrediction], mut w: W) -> std::io::Result<()> {
    writeln!(w, "user,predicted,actual")?;
    for p in predictions {
        writeln!(w, "{},{:.4},{:.4}", p.user, p.predicted, p.actual)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn line_through_two_points() {
        let f = fit_linear(&[vec![1.0], vec![2.0]], &[2.0, 4.0]).unwrap();
        assert!((f.weights[0] - 2.0).abs() < 1e-12);
        assert!(f.intercept.abs() < 1e-12);
        assert!(!f.jittered);
    }

    #[test]
    fn constant_scores_give_zero_weights() {
        let x = vec![vec![0.3, 1.0], vec![-2.0, 0.5], vec![1.1, -0.7]];
        let f = fit_linear(&x, &[7.0; 3]).unwrap();
        assert!(f.weights.iter().all(|w| w.abs() < 1e-12));
        assert!((f.intercept - 7.0).abs() < 1e-12);
    }

    #[test]
    fn residuals_are_orthogonal_to_regressors() {
        let mut r = rng::seeded(3);
        let x: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = (0..50).map(|_| r.random_range(-5.0..5.0)).collect();
        let f = fit_linear(&x, &y).unwrap();
        let res: Vec<f64> = x.iter().zip(&y).map(|(row, t)| t - f.predict(row)).collect();
        assert!(res.iter().sum::<f64>().abs() < 1e-8);
        for j in 0..4 {
            let dot: f64 = x.iter().zip(&res).map(|(row, e)| row[j] * e).sum();
            assert!(dot.abs() < 1e-8);
        }
    }

    #[test]
    fn rank_deficient_design_is_jittered() {
        // second feature duplicates the first
        let x: Vec<Vec<f64>> = (0..6).map(|k| vec![k as f64, k as f64]).collect();
        let y: Vec<f64> = (0..6).map(|k| 3.0 * k as f64 + 1.0).collect();
        let f = fit_linear(&x, &y).unwrap();
        assert!(f.jittered);
        for (row, t) in x.iter().zip(&y) {
            assert!((f.predict(row) - t).abs() < 1e-6);
        }
        assert!(fit_linear(&[], &[]).is_err());
    }

    #[test]
    fn isotonic_examples() {
        let id = fit_isotonic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(id.knots.iter().map(|k| k.fitted).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
        let pooled = fit_isotonic(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert_eq!(pooled.knots.iter().map(|k| k.fitted).collect::<Vec<_>>(), vec![1.0, 2.5, 2.5]);
        let flat = fit_isotonic(&[0.5, -1.0, 2.0], &[4.0; 3]).unwrap();
        assert!(flat.knots.iter().all(|k| k.fitted == 4.0));
        assert!(fit_isotonic(&[], &[]).is_err());
    }

    #[test]
    fn tied_inputs_are_pooled_first() {
        let f = fit_isotonic(&[1.0, 1.0, 2.0], &[0.0, 4.0, 3.0]).unwrap();
        assert_eq!(f.knots.len(), 2);
        assert_eq!(f.knots[0], Knot { input: 1.0, fitted: 2.0 });
        assert_eq!(f.knots[1], Knot { input: 2.0, fitted: 3.0 });
    }

    #[test]
    fn prediction_between_and_beyond_knots() {
        let f = IsotonicFit { knots: vec![Knot { input: 0.0, fitted: 100.0 }, Knot { input: 1.0, fitted: 200.0 }] };
        assert_eq!(f.predict(0.5, Extrapolation::Clamp), 150.0);
        assert_eq!(f.predict(-3.0, Extrapolation::Clamp), 100.0);
        assert_eq!(f.predict(9.0, Extrapolation::Clamp), 200.0);
        assert_eq!(f.predict(1.0, Extrapolation::Clamp), 200.0);
        assert_eq!(f.predict(-3.0, Extrapolation::HoldOffset), 97.0);
        assert_eq!(f.predict(3.0, Extrapolation::HoldOffset), 202.0);
    }

    #[test]
    fn training_point_recovers_its_fit() {
        let x: Vec<Vec<f64>> = (0..5).map(|k| vec![k as f64]).collect();
        let y = [1.0, 2.0, 2.0, 5.0, 9.0];
        let m = SpModel::fit(&x, &y, Extrapolation::Clamp).unwrap();
        let lin: Vec<f64> = x.iter().map(|r| m.linear.predict(r)).collect();
        let iso = fit_isotonic(&lin, &y).unwrap();
        for (r, k) in x.iter().zip(&iso.knots) {
            assert!((predict_score(r, &m) - k.fitted).abs() < 1e-12);
        }
    }

    fn synthetic(n: usize, d: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, BTreeMap<usize, f64>) {
        let mut r = rng::seeded(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let w: Vec<f64> = (0..d).map(|_| normal.sample(&mut r) * 20.0).collect();
        let reps: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| normal.sample(&mut r)).collect()).collect();
        let scores = reps
            .iter()
            .enumerate()
            .map(|(u, t)| {
                let s: f64 = 500.0 + t.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                (u, s + sigma * normal.sample(&mut r))
            })
            .collect();
        (reps, scores)
    }

    #[test]
    fn identical_train_and_test_users_give_zero_error() {
        let (reps, scores) = synthetic(30, 3, 0.0, 1);
        let users: Vec<usize> = (0..30).collect();
        let rep = sp_evaluate(&reps, &scores, &users, &users, Extrapolation::Clamp).unwrap();
        assert!(rep.mae < 1e-9);
    }

    #[test]
    fn noise_free_scores_are_recovered() {
        let (reps, scores) = synthetic(400, 4, 0.0, 2);
        let train: Vec<usize> = (0..320).collect();
        let test: Vec<usize> = (320..400).collect();
        let rep = sp_evaluate(&reps, &scores, &train, &test, Extrapolation::HoldOffset).unwrap();
        assert!(rep.mae < 1e-6, "{}", rep.mae);
    }

    #[test]
    fn shuffled_pairing_does_no_better_than_the_mean() {
        let (reps, scores) = synthetic(2000, 3, 5.0, 3);
        let mut vals: Vec<f64> = scores.values().copied().collect();
        let mut r = rng::seeded(8);
        for k in (1..vals.len()).rev() {
            vals.swap(k, r.random_range(0..=k));
        }
        let shuffled: BTreeMap<usize, f64> = vals.into_iter().enumerate().collect();
        let train: Vec<usize> = (0..1600).collect();
        let test: Vec<usize> = (1600..2000).collect();
        let rep = sp_evaluate(&reps, &shuffled, &train, &test, Extrapolation::Clamp).unwrap();
        let mean = train.iter().map(|u| shuffled[u]).sum::<f64>() / train.len() as f64;
        let null = test.iter().map(|u| (shuffled[u] - mean).abs()).sum::<f64>() / test.len() as f64;
        assert!((rep.mae - null).abs() / null < 0.1, "{} vs {}", rep.mae, null);
    }

    #[test]
    fn scaling_scores_scales_the_error() {
        let (reps, scores) = synthetic(300, 3, 10.0, 4);
        let train: Vec<usize> = (0..240).collect();
        let test: Vec<usize> = (240..300).collect();
        let base = sp_evaluate(&reps, &scores, &train, &test, Extrapolation::Clamp).unwrap().mae;
        let scaled: BTreeMap<usize, f64> = scores.iter().map(|(&u, &s)| (u, 2.5 * s)).collect();
        let m = sp_evaluate(&reps, &scaled, &train, &test, Extrapolation::Clamp).unwrap().mae;
        assert!((m - 2.5 * base).abs() < 1e-9 * m);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let (reps, scores) = synthetic(10, 2, 0.0, 5);
        assert!(sp_evaluate(&reps, &scores, &[0, 1, 2], &[], Extrapolation::Clamp).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let (reps, scores) = synthetic(20, 2, 1.0, 6);
        let y: Vec<f64> = scores.values().copied().collect();
        let m = SpModel::fit(&reps, &y, Extrapolation::HoldOffset).unwrap();
        let back: SpModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    /// Best monotone fit by trying every split of the sequence into blocks.
    fn exhaustive_isotonic(y: &[f64]) -> Vec<f64> {
        let n = y.len();
        let mut best = (f64::INFINITY, Vec::new());
        for mask in 0u32..(1 << (n - 1)) {
            let mut fit = Vec::with_capacity(n);
            let mut start = 0;
            let mut prev = f64::NEG_INFINITY;
            let mut ok = true;
            for end in 1..=n {
                if end == n || mask & (1 << (end - 1)) != 0 {
                    let m = y[start..end].iter().sum::<f64>() / (end - start) as f64;
                    ok &= m >= prev;
                    prev = m;
                    fit.extend(std::iter::repeat_n(m, end - start));
                    start = end;
                }
            }
            if ok {
                let sse: f64 = fit.iter().zip(y).map(|(f, v)| (f - v).powi(2)).sum();
                if sse < best.0 {
                    best = (sse, fit);
                }
            }
        }
        best.1
    }

    #[test]
    fn pava_matches_exhaustive_search_on_short_grids() {
        let grid = [0.0, 1.0, 2.0, 3.0, 4.0];
        for n in 1..=6usize {
            for code in 0..grid.len().pow(n as u32) {
                let mut c = code;
                let y: Vec<f64> = (0..n)
                    .map(|_| {
                        let v = grid[c % grid.len()];
                        c /= grid.len();
                        v
                    })
                    .collect();
                let fit = pava(&y, &vec![1.0; n]);
                for (a, b) in fit.iter().zip(exhaustive_isotonic(&y)) {
                    assert!((a - b).abs() < 1e-9, "{y:?}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn pava_is_monotone_and_mean_preserving(y in prop::collection::vec(-100.0f64..100.0, 1..60)) {
            let fit = pava(&y, &vec![1.0; y.len()]);
            prop_assert!(fit.windows(2).all(|w| w[0] <= w[1]));
            let (a, b): (f64, f64) = (fit.iter().sum(), y.iter().sum());
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }

        #[test]
        fn knots_are_strictly_increasing(pairs in prop::collection::vec((0u8..10, -5.0f64..5.0), 1..50)) {
            let (p, a): (Vec<f64>, Vec<f64>) = pairs.into_iter().map(|(x, y)| (x as f64, y)).unzip();
            let f = fit_isotonic(&p, &a).unwrap();
            prop_assert!(f.knots.windows(2).all(|w| w[0].input < w[1].input && w[0].fitted <= w[1].fitted));
        }
    }
}
