//! Trajectory analysis: ordinary least squares of surprise difference
//! against epoch per rule, standard errors and two-sided t-test p-values,
//! acquisition-order comparison across rules, and binned summaries for plots.

use crate::error::{Error, Result};
use crate::probes::{PhysicalRule, SurpriseRecord};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// One OLS fit of difference ~ epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub t_stat: f64,
    /// Two-sided p-value from the t distribution with n-2 degrees of freedom.
    pub p_value: f64,
    pub r2: f64,
    pub n: usize,
}

/// Closed-form OLS via centered sums; p-value through the regularized
/// incomplete beta function.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<RegressionFit> {
    let n = xs.len();
    if n != ys.len() {
        return Err(Error::Argument("xs and ys length mismatch".into()));
    }
    if n < 3 {
        return Err(Error::Argument(format!("need n >= 3 points, got {n}")));
    }
    let nf = n as f64;
    let mean_x = xs.iter().sum::<f64>() / nf;
    let mean_y = ys.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = xs[i] - mean_x;
        let dy = ys[i] - mean_y;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx <= 0.0 {
        return Err(Error::Argument("xs are all equal; slope undefined".into()));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ssr = (syy - slope * sxy).max(0.0); // residual sum of squares
    let df = nf - 2.0;
    let sigma2 = ssr / df;
    let slope_se = (sigma2 / sxx).sqrt();
    let t_stat = if slope_se > 0.0 {
        slope / slope_se
    } else if slope == 0.0 {
        0.0
    } else {
        f64::INFINITY * slope.signum()
    };
    let p_value = two_sided_t_pvalue(t_stat, df);
    let r2 = if syy > 0.0 { 1.0 - ssr / syy } else { 1.0 };
    Ok(RegressionFit { slope, intercept, slope_se, t_stat, p_value, r2, n })
}

/// Two-sided p-value of a t statistic with `df` degrees of freedom:
/// P(|T| >= |t|) = I_{df/(df+t^2)}(df/2, 1/2).
pub fn two_sided_t_pvalue(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    inc_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// ln Gamma(z) for z > 0 (Lanczos approximation).
pub fn ln_gamma(z: f64) -> f64 {
    // Coefficients from Numerical Recipes.
    const C: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut sum = 1.000000000190015;
    for (i, &c) in C.iter().enumerate() {
        sum += c / (z + i as f64 + 1.0);
    }
    let tmp = z + 5.5;
    (z + 0.5) * tmp.ln() - tmp + (2.5066282746310005 * sum / z).ln()
}

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
pub fn inc_beta(x: f64, a: f64, b: f64) -> f64 {
    if !(0.0..=1.0).contains(&x) || a <= 0.0 || b <= 0.0 {
        return f64::NAN;
    }
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    // Use the symmetry I_x(a,b) = 1 - I_{1-x}(b,a) where the fraction
    // converges fastest.
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - inc_beta(1.0 - x, b, a);
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b));
    let front = ln_front.exp();

    let tiny = 1e-300;
    let eps = 1e-15;
    let mut c = 1.0f64;
    let mut d = 0.0f64;
    let mut f = 1.0f64;
    for m in 0..200 {
        let mf = m as f64;
        // Odd step coefficient.
        let num1 = -(a + mf) * (a + b + mf) * x / ((a + 2.0 * mf) * (a + 2.0 * mf + 1.0));
        d = 1.0 + num1 * d;
        if d.abs() < tiny {
            d = tiny;
        }
        d = 1.0 / d;
        c = 1.0 + num1 / c;
        if c.abs() < tiny {
            c = tiny;
        }
        f *= c * d;
        // Even step coefficient.
        let num2 = (mf + 1.0) * (b - mf - 1.0) * x / ((a + 2.0 * mf + 1.0) * (a + 2.0 * mf + 2.0));
        d = 1.0 + num2 * d;
        if d.abs() < tiny {
            d = tiny;
        }
        d = 1.0 / d;
        c = 1.0 + num2 / c;
        if c.abs() < tiny {
            c = tiny;
        }
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < eps {
            break;
        }
    }
    front / (a * f)
}

/// Rules sorted by descending slope, with pairwise slope-difference z-scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcquisitionOrder {
    /// Permutation of the four rules, fastest-acquired first. Ties break on
    /// the canonical rule order.
    pub order: Vec<PhysicalRule>,
    /// z = (slope_i - slope_j) / sqrt(se_i^2 + se_j^2) for every ordered pair
    /// (i, j) with i before j in `order`.
    pub pairwise_z: Vec<(PhysicalRule, PhysicalRule, f64)>,
}

/// Orders the four rules by regression slope.
pub fn acquisition_order(fits: &BTreeMap<String, RegressionFit>) -> Result<AcquisitionOrder> {
    let mut entries = Vec::with_capacity(4);
    for rule in PhysicalRule::ALL {
        let fit = fits
            .get(rule.key())
            .ok_or_else(|| Error::Argument(format!("missing fit for rule {}", rule.key())))?;
        entries.push((rule, fit.slope, fit.slope_se));
    }
    if fits.len() != 4 {
        return Err(Error::Argument(format!("expected exactly 4 fits, got {}", fits.len())));
    }
    // Stable sort: ties keep the canonical (acquisition-age) order.
    entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let order: Vec<PhysicalRule> = entries.iter().map(|e| e.0).collect();
    let mut pairwise_z = Vec::new();
    for i in 0..entries.len() {
        for j in (i + 1)..entries.len() {
            let (ra, sa, ea) = entries[i];
            let (rb, sb, eb) = entries[j];
            let denom = (ea * ea + eb * eb).sqrt();
            let z = if denom > 0.0 { (sa - sb) / denom } else { 0.0 };
            pairwise_z.push((ra, rb, z));
        }
    }
    Ok(AcquisitionOrder { order, pairwise_z })
}

/// Mean and normal-approximation 95% interval for one epoch bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    /// First epoch covered by the bin.
    pub start: u32,
    pub mean: f64,
    pub half_width: f64,
    pub count: usize,
    /// True when the bin held a single point and the interval collapsed.
    pub degenerate: bool,
}

/// Bins records of one rule by epoch and summarizes each bin as
/// mean +/- 1.96 * sd / sqrt(k).
pub fn binned_summary(records: &[SurpriseRecord], bin_width: u32) -> Result<Vec<BinSummary>> {
    if bin_width < 1 {
        return Err(Error::Argument("bin width must be >= 1".into()));
    }
    let mut bins: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for r in records {
        bins.entry(r.epoch / bin_width * bin_width).or_default().push(r.difference);
    }
    Ok(bins
        .into_iter()
        .map(|(start, vals)| {
            let k = vals.len();
            let mean = vals.iter().sum::<f64>() / k as f64;
            if k < 2 {
                return BinSummary { start, mean, half_width: 0.0, count: k, degenerate: true };
            }
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k as f64 - 1.0);
            let half = 1.96 * (var / k as f64).sqrt();
            BinSummary { start, mean, half_width: half, count: k, degenerate: false }
        })
        .collect())
}

/// Fits one regression per rule from a probe table.
pub fn fit_all(records: &[SurpriseRecord]) -> Result<BTreeMap<String, RegressionFit>> {
    let mut fits = BTreeMap::new();
    for rule in PhysicalRule::ALL {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for r in records.iter().filter(|r| r.rule == rule) {
            xs.push(r.epoch as f64);
            ys.push(r.difference);
        }
        if xs.is_empty() {
            continue;
        }
        fits.insert(rule.key().to_string(), linear_fit(&xs, &ys)?);
    }
    Ok(fits)
}

/// Writes fits as CSV: `rule,slope,se,t,p,r2,n`.
pub fn write_fits_csv(fits: &BTreeMap<String, RegressionFit>, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "rule,slope,se,t,p,r2,n")?;
    // Canonical rule order, not map order.
    for rule in PhysicalRule::ALL {
        if let Some(fit) = fits.get(rule.key()) {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                rule.key(),
                fit.slope,
                fit.slope_se,
                fit.t_stat,
                fit.p_value,
                fit.r2,
                fit.n
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn exact_line_recovers_coefficients() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let fit = linear_fit(&xs, &ys).unwrap();
        assert_abs_diff_eq!(fit.slope, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.intercept, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.r2, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_ys_give_zero_slope_p_one() {
        let xs: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let ys = vec![3.5; 8];
        let fit = linear_fit(&xs, &ys).unwrap();
        assert_eq!(fit.slope, 0.0);
        assert_abs_diff_eq!(fit.p_value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_xs_rejected() {
        assert!(linear_fit(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(linear_fit(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn matches_reference_regression() {
        // 20-point fixture with frozen reference coefficients (scipy
        // linregress on the same data).
        let xs: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let ys = [
            2.0018452300362237,
            3.248118306262705,
            3.1887932169566735,
            3.064112241864089,
            4.517993822242416,
            4.5125301675053064,
            6.890215403896159,
            9.610322868331801,
            7.661690222173005,
            8.269287650270089,
            10.734763075277797,
            11.335330512240091,
            11.758121373496849,
            11.004297932937693,
            13.156122266305092,
            15.042954791687432,
            12.783678179072378,
            14.913576358439673,
            13.548165890298733,
            15.26569339032254,
        ];
        let fit = linear_fit(&xs, &ys).unwrap();
        assert_abs_diff_eq!(fit.slope, 0.7337826273364085, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.intercept, 2.1544456852849594, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.slope_se, 0.0439984555439794, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.r2, 0.9392174822046764, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.p_value, 2.1602540461553184e-12, epsilon = 1e-20);
    }

    #[test]
    fn grid_search_oracle_agrees_on_random_instances() {
        // Nested zoom grid search minimizing squared error over
        // (slope, intercept).
        let grid_search = |xs: &[f64], ys: &[f64]| -> (f64, f64) {
            let sse = |b: f64, a: f64| -> f64 {
                xs.iter().zip(ys).map(|(&x, &y)| (y - (a + b * x)) * (y - (a + b * x))).sum()
            };
            let (mut b0, mut a0) = (0.0f64, 0.0f64);
            let (mut span_b, mut span_a) = (8.0f64, 8.0f64);
            // Shrink gently so each refinement still brackets the previous
            // round's quantization error in both coupled coordinates.
            for _ in 0..26 {
                let mut best = (f64::INFINITY, b0, a0);
                for i in -20..=20 {
                    for j in -20..=20 {
                        let b = b0 + span_b * i as f64 / 20.0;
                        let a = a0 + span_a * j as f64 / 20.0;
                        let e = sse(b, a);
                        if e < best.0 {
                            best = (e, b, a);
                        }
                    }
                }
                b0 = best.1;
                a0 = best.2;
                span_b /= 4.0;
                span_a /= 4.0;
            }
            (b0, a0)
        };

        let mut stream = crate::rng::stream(31, &[1]);
        for case in 0..20 {
            let n = 12;
            let slope_true = crate::rng::uniform(&mut stream, -2.0, 2.0);
            let icept_true = crate::rng::uniform(&mut stream, -2.0, 2.0);
            let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let ys: Vec<f64> = xs
                .iter()
                .map(|&x| slope_true * x + icept_true + crate::rng::uniform(&mut stream, -0.5, 0.5))
                .collect();
            let fit = linear_fit(&xs, &ys).unwrap();
            let (b, a) = grid_search(&xs, &ys);
            assert!((fit.slope - b).abs() < 1e-6, "case {case}: slope {} vs {b}", fit.slope);
            assert!((fit.intercept - a).abs() < 1e-6, "case {case}: intercept {} vs {a}", fit.intercept);
        }
    }

    #[test]
    fn incomplete_beta_matches_reference() {
        let cases = [
            (0.5, 2.0, 3.0, 0.6875),
            (0.25, 0.5, 0.5, 0.33333333333333337),
            (0.9, 5.0, 1.5, 0.7761721343162159),
            (0.1, 3.0, 7.0, 0.052972138),
        ];
        for (x, a, b, want) in cases {
            assert_abs_diff_eq!(inc_beta(x, a, b), want, epsilon = 1e-9);
        }
    }

    #[test]
    fn t_pvalues_match_reference_and_are_monotone() {
        let cases = [
            (2.5, 10.0, 0.031446844236608776),
            (0.8, 5.0, 0.4600140669037371),
            (4.2, 18.0, 0.0005382186590030324),
            (1.96, 100.0, 0.052778901366229654),
            (0.0, 7.0, 1.0),
            (9.9, 3.0, 0.0021919913678591133),
        ];
        for (t, df, want) in cases {
            assert_abs_diff_eq!(two_sided_t_pvalue(t, df), want, epsilon = 1e-12);
        }
        let mut last = 1.1;
        for i in 0..60 {
            let t = i as f64 * 0.25;
            let p = two_sided_t_pvalue(t, 12.0);
            assert!((0.0..=1.0).contains(&p));
            assert!(p <= last + 1e-15, "p not monotone in |t|");
            last = p;
        }
    }

    #[test]
    fn scaling_equivariance_of_slope() {
        let xs: Vec<f64> = (0..15).map(|i| i as f64).collect();
        let mut stream = crate::rng::stream(77, &[2]);
        let ys: Vec<f64> = xs.iter().map(|&x| 0.4 * x + crate::rng::uniform(&mut stream, -1.0, 1.0)).collect();
        let scaled: Vec<f64> = ys.iter().map(|v| 3.7 * v).collect();
        let f1 = linear_fit(&xs, &ys).unwrap();
        let f2 = linear_fit(&xs, &scaled).unwrap();
        assert_abs_diff_eq!(f2.slope, 3.7 * f1.slope, epsilon = 1e-10);
    }

    fn fits_from_slopes(slopes: [f64; 4], se: f64) -> BTreeMap<String, RegressionFit> {
        let mut fits = BTreeMap::new();
        for (rule, slope) in PhysicalRule::ALL.into_iter().zip(slopes) {
            fits.insert(
                rule.key().to_string(),
                RegressionFit {
                    slope,
                    intercept: 0.0,
                    slope_se: se,
                    t_stat: slope / se,
                    p_value: 0.0001,
                    r2: 0.9,
                    n: 200,
                },
            );
        }
        fits
    }

    #[test]
    fn paper_slope_fixture_orders_contact_type_overlap_shape() {
        let fits = fits_from_slopes([0.390, 0.261, 0.170, 0.059], 0.02);
        let order = acquisition_order(&fits).unwrap();
        assert_eq!(
            order.order,
            vec![
                PhysicalRule::ContactOrNoContact,
                PhysicalRule::TypeOfContact,
                PhysicalRule::Overlap,
                PhysicalRule::Shape
            ]
        );
        for (_, _, z) in order.pairwise_z {
            assert!(z > 0.0);
        }
    }

    #[test]
    fn equal_slopes_tie_break_to_canonical_order_with_zero_z() {
        let fits = fits_from_slopes([0.2, 0.2, 0.2, 0.2], 0.05);
        let order = acquisition_order(&fits).unwrap();
        assert_eq!(order.order, PhysicalRule::ALL.to_vec());
        for (_, _, z) in order.pairwise_z {
            assert_eq!(z, 0.0);
        }
    }

    #[test]
    fn order_is_pure_function_of_slopes() {
        let a = acquisition_order(&fits_from_slopes([0.1, 0.4, 0.2, 0.3], 0.01)).unwrap();
        assert_eq!(
            a.order,
            vec![
                PhysicalRule::TypeOfContact,
                PhysicalRule::Shape,
                PhysicalRule::Overlap,
                PhysicalRule::ContactOrNoContact
            ]
        );
        let missing = {
            let mut f = fits_from_slopes([0.1, 0.4, 0.2, 0.3], 0.01);
            f.remove("shape");
            f
        };
        assert!(acquisition_order(&missing).is_err());
    }

    #[test]
    fn bins_cover_epochs_and_collapse_singletons() {
        use crate::probes::SurpriseRecord;
        let mut records = Vec::new();
        for epoch in 0..200u32 {
            records.push(SurpriseRecord {
                rule: PhysicalRule::Overlap,
                epoch,
                kl_expected: 0.0,
                kl_violated: 0.0,
                difference: epoch as f64 * 0.5,
            });
        }
        let bins = binned_summary(&records, 10).unwrap();
        assert_eq!(bins.len(), 20);
        // Bin means of a linear series are linear in the bin index.
        let d0 = bins[1].mean - bins[0].mean;
        for w in bins.windows(2) {
            assert_abs_diff_eq!(w[1].mean - w[0].mean, d0, epsilon = 1e-9);
        }

        let single = binned_summary(&records[..1], 10).unwrap();
        assert_eq!(single.len(), 1);
        assert!(single[0].degenerate);
        assert_eq!(single[0].half_width, 0.0);

        assert!(binned_summary(&records, 0).is_err());
    }
}
