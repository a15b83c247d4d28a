//! Residual-versus-domain independence test used to flag stable mechanisms.
//!
//! The statistic is the biased HSIC estimate `tr(K H L H) / n^2` with a
//! Gaussian kernel on residuals and a delta kernel on domain labels. Its
//! null distribution is approximated by a Gamma law whose shape and scale
//! match the null mean and variance of `n * HSIC_b`.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::error::{CicmeError, Result};
use crate::notears::ModelSet;

/// Residuals of one variable paired with the domain each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSample {
    residuals: Vec<f64>,
    domains: Vec<usize>,
}

impl ResidualSample {
    pub fn new(residuals: Vec<f64>, domains: Vec<usize>) -> Result<Self> {
        if residuals.len() != domains.len() {
            return Err(CicmeError::Argument(format!(
                "{} residuals but {} domain labels",
                residuals.len(),
                domains.len()
            )));
        }
        if residuals.len() < 4 {
            return Err(CicmeError::Argument("the test needs at least 4 samples".into()));
        }
        if residuals.iter().any(|r| !r.is_finite()) {
            return Err(CicmeError::Numeric("residuals contain non-finite values".into()));
        }
        if domains.iter().all(|&d| d == domains[0]) {
            return Err(CicmeError::Argument("need at least two distinct domains".into()));
        }
        Ok(Self { residuals, domains })
    }

    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn domains(&self) -> &[usize] {
        &self.domains
    }

    /// Domain labels mapped to `0..groups`, in order of first appearance.
    fn groups(&self) -> (Vec<usize>, usize) {
        let mut seen: Vec<usize> = Vec::new();
        let ids = self
            .domains
            .iter()
            .map(|d| match seen.iter().position(|s| s == d) {
                Some(p) => p,
                None => {
                    seen.push(*d);
                    seen.len() - 1
                }
            })
            .collect();
        (ids, seen.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PValueMethod {
    Gamma,
    /// Used when the Gamma moments are degenerate.
    Permutation,
}

/// Outcome of one independence test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsicTest {
    /// Biased estimate `tr(K H L H) / n^2`.
    pub statistic: f64,
    pub p_value: f64,
    pub method: PValueMethod,
    pub bandwidth: f64,
    pub gamma_shape: Option<f64>,
    pub gamma_scale: Option<f64>,
}

/// Permutation settings for the fallback path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOptions {
    pub permutations: usize,
    pub seed: u64,
}

impl Default for TestOptions {
    fn default() -> Self {
        Self { permutations: 1000, seed: 0 }
    }
}

/// k-th smallest (1-based) of `|r_i - r_j|` over pairs `i < j`, for sorted `r`.
fn kth_pairwise_gap(sorted: &[f64], k: usize) -> f64 {
    // pairs with gap <= t, by two pointers over the sorted sample
    let count = |t: f64| -> usize {
        let mut c = 0;
        let mut lo = 0;
        for (hi, &v) in sorted.iter().enumerate() {
            while v - sorted[lo] > t {
                lo += 1;
            }
            c += hi - lo;
        }
        c
    };
    // Non-negative floats order like their bit patterns, so bisect on bits.
    let mut lo: u64 = 0;
    let mut hi: u64 = (sorted[sorted.len() - 1] - sorted[0]).to_bits();
    if count(0.0) >= k {
        return 0.0;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if count(f64::from_bits(mid)) >= k {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    f64::from_bits(hi)
}

/// Median of pairwise absolute residual differences; 1.0 when that is 0.
pub fn median_bandwidth(residuals: &[f64]) -> f64 {
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pairs = sorted.len() * (sorted.len() - 1) / 2;
    let median = if pairs % 2 == 1 {
        kth_pairwise_gap(&sorted, pairs / 2 + 1)
    } else {
        0.5 * (kth_pairwise_gap(&sorted, pairs / 2) + kth_pairwise_gap(&sorted, pairs / 2 + 1))
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// `exp(x)` for `x <= 0`, written without branches or calls so that the
/// pairwise kernel loop vectorises. Arguments below -708 are clamped; the
/// kernel value there is under 1e-307 either way.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    const ROUND: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    let x = x.max(-708.0);
    let t = x * std::f64::consts::LOG2_E + ROUND;
    let k = t - ROUND;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series to r^13; |r| <= ln(2) / 2
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    // the low bits of t hold k in two's complement
    let scale = f64::from_bits(t.to_bits().wrapping_add(1023) << 52);
    p * scale
}

/// `(sum x, sum x^2)` with four interleaved accumulators.
fn sum_and_squares(x: &[f64]) -> (f64, f64) {
    let mut a = [0.0f64; 4];
    let mut q = [0.0f64; 4];
    let chunks = x.chunks_exact(4);
    let rest = chunks.remainder();
    for c in chunks {
        for l in 0..4 {
            a[l] += c[l];
            q[l] += c[l] * c[l];
        }
    }
    let (mut sa, mut sq) = ((a[0] + a[1]) + (a[2] + a[3]), (q[0] + q[1]) + (q[2] + q[3]));
    for v in rest {
        sa += v;
        sq += v * v;
    }
    (sa, sq)
}

/// Pairwise sums shared by the statistic and its null moments.
struct Moments {
    n: usize,
    bandwidth: f64,
    /// `sum_ij Kc_ij Lc_ij`
    trace: f64,
    /// `sum_{i != j} (Kc_ij Lc_ij)^2`
    off_diag_sq: f64,
    /// `sum_ij K_ij`
    k_sum: f64,
    /// `sum_ij L_ij`
    l_sum: f64,
}

fn moments(z: &ResidualSample) -> Result<Moments> {
    let n = z.len();
    let r = &z.residuals;
    let bandwidth = median_bandwidth(r);
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(CicmeError::Numeric(format!("kernel bandwidth {bandwidth} is not usable")));
    }
    let scale = -0.5 / (bandwidth * bandwidth);
    // Work in domain-sorted order (the statistic is invariant under joint
    // permutation) so every row's tail splits into contiguous segments.
    let (ids, ng) = z.groups();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| ids[i]);
    let r: Vec<f64> = order.iter().map(|&i| z.residuals[i]).collect();
    let groups: Vec<usize> = order.iter().map(|&i| ids[i]).collect();
    let mut sizes = vec![0usize; ng];
    for &g in &groups {
        sizes[g] += 1;
    }
    let mut starts = vec![0usize; ng + 1];
    for h in 0..ng {
        starts[h + 1] = starts[h] + sizes[h];
    }

    // s1[h][i] = sum of K_ij over j != i in domain h; s2 the same over K_ij^2.
    // One sweep over the pairs; everything centred follows from these sums.
    let mut s1 = vec![vec![0.0; n]; ng];
    let mut s2 = vec![vec![0.0; n]; ng];
    let mut buf = vec![0.0; n];
    for i in 0..n {
        let ri = r[i];
        for (b, &rj) in buf[i + 1..].iter_mut().zip(&r[i + 1..]) {
            let d = ri - rj;
            *b = exp_nonpositive(scale * d * d);
        }
        let gi = groups[i];
        for ((a, q), &k) in s1[gi][i + 1..].iter_mut().zip(s2[gi][i + 1..].iter_mut()).zip(&buf[i + 1..]) {
            *a += k;
            *q += k * k;
        }
        for h in gi..ng {
            let lo = starts[h].max(i + 1);
            let (a, q) = sum_and_squares(&buf[lo..starts[h + 1]]);
            s1[h][i] += a;
            s2[h][i] += q;
        }
    }

    let nf = n as f64;
    let k_row: Vec<f64> = (0..n).map(|i| (1.0 + (0..ng).map(|h| s1[h][i]).sum::<f64>()) / nf).collect();
    let k_sum = k_row.iter().sum::<f64>() * nf;
    let k_bar = k_sum / (nf * nf);
    let l_sum: f64 = sizes.iter().map(|&s| (s * s) as f64).sum();
    let q = l_sum / (nf * nf);
    let p: Vec<f64> = sizes.iter().map(|&s| s as f64 / nf).collect();
    let mut kr_group = vec![0.0; ng];
    for (i, &g) in groups.iter().enumerate() {
        kr_group[g] += k_row[i];
    }

    // sum_ij Kc_ij L_ij, which equals tr(K H L H)
    let mut trace = 0.0;
    for (i, &g) in groups.iter().enumerate() {
        let m = sizes[g] as f64;
        trace += (s1[g][i] + 1.0) - m * k_row[i] - kr_group[g] + m * k_bar;
    }

    // Off-diagonal Kc_ij = K_ij - a_i - a_j and Lc_ij = c[g_i][g_j].
    let w: Vec<Vec<f64>> = (0..ng)
        .map(|g| {
            (0..ng)
                .map(|h| {
                    let c = f64::from(u8::from(g == h)) - p[g] - p[h] + q;
                    c * c
                })
                .collect()
        })
        .collect();
    let a: Vec<f64> = k_row.iter().map(|kr| kr - 0.5 * k_bar).collect();
    let mut a_group = vec![0.0; ng];
    for (i, &g) in groups.iter().enumerate() {
        a_group[g] += a[i];
    }
    // sum_{i != j} w_ij (K_ij - a_i - a_j)^2, expanded term by term
    let (mut sq, mut cross, mut spread, mut diag) = (0.0, 0.0, 0.0, 0.0);
    for (i, &g) in groups.iter().enumerate() {
        let (mut wk2, mut wk, mut wm) = (0.0, 0.0, 0.0);
        for h in 0..ng {
            wk2 += w[g][h] * s2[h][i];
            wk += w[g][h] * s1[h][i];
            wm += w[g][h] * (sizes[h] - usize::from(h == g)) as f64;
        }
        sq += wk2;
        cross += a[i] * wk;
        spread += a[i] * a[i] * wm;
        diag += w[g][g] * a[i] * a[i];
    }
    let mut pair = 0.0;
    for g in 0..ng {
        for h in 0..ng {
            pair += w[g][h] * a_group[g] * a_group[h];
        }
    }
    let off_diag_sq = sq - 4.0 * cross + 2.0 * spread + 2.0 * (pair - diag);
    Ok(Moments { n, bandwidth, trace, off_diag_sq, k_sum, l_sum })
}

/// `tr(K H L H) / n^2`.
pub fn hsic_statistic(z: &ResidualSample) -> Result<f64> {
    let m = moments(z)?;
    Ok(m.trace / (m.n * m.n) as f64)
}

/// Gamma approximation of the null of `n * HSIC_b`: `(shape, scale)` or
/// `None` when the moment estimates are not positive.
fn gamma_parameters(m: &Moments) -> Option<(f64, f64)> {
    let n = m.n as f64;
    let var = m.off_diag_sq / 36.0 / n / (n - 1.0) * 72.0 * (n - 4.0) * (n - 5.0)
        / (n * (n - 1.0) * (n - 2.0) * (n - 3.0));
    let mu_x = (m.k_sum - n) / (n * (n - 1.0));
    let mu_y = (m.l_sum - n) / (n * (n - 1.0));
    let mean = (1.0 + mu_x * mu_y - mu_x - mu_y) / n;
    if !(var > 0.0 && mean > 0.0 && var.is_finite()) {
        return None;
    }
    Some((mean * mean / var, var * n / mean))
}

/// Gamma-approximated p-value, falling back to a permutation p-value when
/// the estimated null variance is not positive.
pub fn gamma_pvalue(z: &ResidualSample) -> Result<HsicTest> {
    gamma_pvalue_with(z, &TestOptions::default())
}

pub fn gamma_pvalue_with(z: &ResidualSample, options: &TestOptions) -> Result<HsicTest> {
    let m = moments(z)?;
    let n = m.n as f64;
    let statistic = m.trace / (n * n);
    match gamma_parameters(&m) {
        Some((shape, scale)) => {
            let dist = Gamma::new(shape, 1.0 / scale)
                .map_err(|e| CicmeError::Numeric(format!("gamma null: {e}")))?;
            let p_value = dist.sf((n * statistic).max(0.0)).clamp(0.0, 1.0);
            Ok(HsicTest {
                statistic,
                p_value,
                method: PValueMethod::Gamma,
                bandwidth: m.bandwidth,
                gamma_shape: Some(shape),
                gamma_scale: Some(scale),
            })
        }
        None => {
            log::debug!("degenerate gamma moments, using {} permutations", options.permutations);
            Ok(HsicTest {
                statistic,
                p_value: permutation_pvalue(z, options.permutations, options.seed)?,
                method: PValueMethod::Permutation,
                bandwidth: m.bandwidth,
                gamma_shape: None,
                gamma_scale: None,
            })
        }
    }
}

/// `(1 + #{T_perm >= T}) / (1 + permutations)` with domain labels shuffled.
pub fn permutation_pvalue(z: &ResidualSample, permutations: usize, seed: u64) -> Result<f64> {
    if permutations == 0 {
        return Err(CicmeError::Argument("need at least one permutation".into()));
    }
    let n = z.len();
    let bandwidth = median_bandwidth(&z.residuals);
    let scale = -0.5 / (bandwidth * bandwidth);
    let r = &z.residuals;
    let mut kc = DMatrix::from_fn(n, n, |i, j| {
        let d = r[i] - r[j];
        (scale * d * d).exp()
    });
    // double centring: tr(Kc L) = tr(K H L H)
    let col_means: Vec<f64> = (0..n).map(|j| kc.column(j).mean()).collect();
    let mean = col_means.iter().sum::<f64>() / n as f64;
    for j in 0..n {
        for i in 0..n {
            kc[(i, j)] += mean - col_means[i] - col_means[j];
        }
    }
    let (mut groups, num_groups) = z.groups();
    let mut sums = vec![0.0; num_groups];
    let mut stat = |labels: &[usize]| -> f64 {
        let mut t = 0.0;
        for j in 0..n {
            sums.iter_mut().for_each(|s| *s = 0.0);
            let col = kc.column(j);
            for (i, &g) in labels.iter().enumerate() {
                sums[g] += col[i];
            }
            t += sums[labels[j]];
        }
        t
    };
    let observed = stat(&groups);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = 0usize;
    // relative slack so ties from rounding count as exceedances
    let tol = 1e-12 * observed.abs().max(1e-300);
    for _ in 0..permutations {
        groups.shuffle(&mut rng);
        if stat(&groups) >= observed - tol {
            exceed += 1;
        }
    }
    Ok((1 + exceed) as f64 / (1 + permutations) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Stable,
    Unstable,
}

/// Per-variable entry of a [`StabilityReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableTest {
    pub variable: usize,
    /// `None` when the test itself failed; the verdict is then unstable.
    pub test: Option<HsicTest>,
    pub error: Option<String>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub alpha: f64,
    pub variables: Vec<VariableTest>,
}

impl StabilityReport {
    /// `stable[j]` iff variable `j`'s p-value exceeds alpha.
    pub fn stable(&self) -> Vec<bool> {
        self.variables.iter().map(|v| v.verdict == Verdict::Stable).collect()
    }

    pub fn p_values(&self) -> Vec<Option<f64>> {
        self.variables.iter().map(|v| v.test.as_ref().map(|t| t.p_value)).collect()
    }

    /// Same tests judged at a different level.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let mut out = self.clone();
        out.alpha = alpha;
        for v in &mut out.variables {
            v.verdict = verdict(v.test.as_ref(), alpha);
        }
        Ok(out)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CicmeError::Argument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn verdict(test: Option<&HsicTest>, alpha: f64) -> Verdict {
    match test {
        Some(t) if t.p_value > alpha => Verdict::Stable,
        _ => Verdict::Unstable,
    }
}

/// Test every variable's pooled-model residuals against the domain labels.
pub fn detect_stable(models: &ModelSet, x: &DMatrix<f64>, domains: &[usize], alpha: f64) -> Result<StabilityReport> {
    detect_stable_with(models, x, domains, alpha, &TestOptions::default())
}

pub fn detect_stable_with(
    models: &ModelSet,
    x: &DMatrix<f64>,
    domains: &[usize],
    alpha: f64,
    options: &TestOptions,
) -> Result<StabilityReport> {
    check_alpha(alpha)?;
    if domains.len() != x.nrows() {
        return Err(CicmeError::Argument(format!(
            "{} domain labels for {} rows",
            domains.len(),
            x.nrows()
        )));
    }
    let residuals = models.residuals(x)?;
    let variables = residuals
        .into_iter()
        .enumerate()
        .map(|(j, r)| {
            let outcome = ResidualSample::new(r, domains.to_vec()).and_then(|z| gamma_pvalue_with(&z, options));
            match outcome {
                Ok(t) => VariableTest { variable: j, verdict: verdict(Some(&t), alpha), test: Some(t), error: None },
                Err(e) => {
                    log::warn!("stability test for variable {j} failed: {e}");
                    VariableTest { variable: j, test: None, error: Some(e.to_string()), verdict: Verdict::Unstable }
                }
            }
        })
        .collect();
    Ok(StabilityReport { alpha, variables })
}
