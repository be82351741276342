//! Chain convergence diagnostics: split R-hat and effective sample size.
//!
//! Both statistics operate on scalar functionals of the draws. Chains are
//! split in half so that a single chain still yields a between/within
//! comparison, and the autocorrelation sum uses Geyer's initial positive
//! sequence: consecutive lag pairs are accumulated while their sum stays
//! positive and non-increasing.

/// Splits every chain in half, dropping the middle element of odd chains.
fn split(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    let mut halves = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let n = c.len() / 2;
        halves.push(&c[..n]);
        halves.push(&c[c.len() - n..]);
    }
    halves
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

/// Autocovariance at `lag`, normalized by `n` (the spectral convention).
fn autocovariance(x: &[f64], lag: usize) -> f64 {
    let m = mean(x);
    let n = x.len();
    (0..n - lag)
        .map(|i| (x[i] - m) * (x[i + lag] - m))
        .sum::<f64>()
        / n as f64
}

/// Near-constant functionals carry no convergence information; both
/// statistics treat them as perfectly mixed rather than dividing by ~0.
const DEGENERATE_VARIANCE: f64 = 1e-300;

/// Draws whose worst split R-hat reaches this are flagged as unconverged.
pub const RHAT_FLAG_THRESHOLD: f64 = 1.2;

struct Pooled {
    within: f64,
    var_plus: f64,
    m: usize,
    n: usize,
}

/// Within-half variance `W` and the pooled variance estimate
/// `var_plus = (n-1)/n W + B/n` shared by R-hat and ESS.
fn pooled(halves: &[&[f64]]) -> Option<Pooled> {
    let m = halves.len();
    let n = halves.iter().map(|h| h.len()).min()?;
    if m < 2 || n < 4 {
        return None;
    }
    let halves: Vec<&[f64]> = halves.iter().map(|h| &h[..n]).collect();
    let within = halves.iter().map(|h| variance(h)).sum::<f64>() / m as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let grand = mean(&means);
    let between_over_n = means
        .iter()
        .map(|mu| (mu - grand) * (mu - grand))
        .sum::<f64>()
        / (m - 1) as f64;
    let var_plus = (n - 1) as f64 / n as f64 * within + between_over_n;
    Some(Pooled {
        within,
        var_plus,
        m,
        n,
    })
}

/// Split R-hat: `sqrt(var_plus / W)` over the half-chains. Returns 1 for
/// degenerate (constant) functionals and `NaN` when there is too little
/// data to form half-chains of length 4.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let halves = split(chains);
    let Some(p) = pooled(&halves) else {
        return f64::NAN;
    };
    if p.var_plus < DEGENERATE_VARIANCE {
        return 1.0;
    }
    if p.within < DEGENERATE_VARIANCE {
        return f64::INFINITY;
    }
    (p.var_plus / p.within).sqrt()
}

/// Effective sample size of the pooled draws, via the multi-chain
/// autocorrelation estimate
///
/// ```text
///     rho_t = 1 - (W - mean_j acov_t^j) / var_plus,
/// ```
///
/// summed over Geyer pairs. Capped at the total draw count.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let halves = split(chains);
    let Some(p) = pooled(&halves) else {
        return f64::NAN;
    };
    let total = (p.m * p.n) as f64;
    if p.var_plus < DEGENERATE_VARIANCE {
        return total;
    }
    let halves: Vec<&[f64]> = halves.iter().map(|h| &h[..p.n]).collect();

    let rho = |t: usize| -> f64 {
        let acov = halves.iter().map(|h| autocovariance(h, t)).sum::<f64>() / p.m as f64;
        1.0 - (p.within - acov) / p.var_plus
    };

    let mut sum_pairs = 0.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while t + 1 < p.n {
        let pair = rho(t) + rho(t + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum_pairs += pair;
        prev = pair;
        t += 2;
    }
    let tau = (2.0 * sum_pairs - 1.0).max(1.0 / total);
    (total / tau).min(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn iid_chain(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn iid_chains_look_converged() {
        let chains = vec![iid_chain(1, 4000), iid_chain(2, 4000)];
        let r = split_rhat(&chains);
        assert!((r - 1.0).abs() < 0.02, "rhat = {r}");
        let e = ess(&chains);
        assert!(e > 4000.0, "ess = {e} for 8000 iid draws");
        assert!(e <= 8000.0);
    }

    #[test]
    fn shifted_chains_are_flagged() {
        let mut shifted = iid_chain(3, 2000);
        for v in &mut shifted {
            *v += 5.0;
        }
        let chains = vec![iid_chain(4, 2000), shifted];
        assert!(split_rhat(&chains) > 1.5);
    }

    #[test]
    fn drifting_chain_is_flagged_by_split() {
        // a within-chain trend is only visible after splitting
        let n = 2000;
        let drift: Vec<f64> = iid_chain(5, n)
            .into_iter()
            .enumerate()
            .map(|(i, v)| v + 4.0 * i as f64 / n as f64)
            .collect();
        assert!(split_rhat(&[drift]) > 1.2);
    }

    #[test]
    fn ar1_ess_matches_theory() {
        // AR(1) with coefficient phi has ESS ~ n (1 - phi) / (1 + phi)
        let phi: f64 = 0.9;
        let n = 40_000;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut x = vec![0.0; n];
        for i in 1..n {
            let e: f64 = rng.sample(StandardNormal);
            x[i] = phi * x[i - 1] + e * (1.0 - phi * phi).sqrt();
        }
        let e = ess(&[x]);
        let expected = n as f64 * (1.0 - phi) / (1.0 + phi);
        assert!(
            e / expected > 0.5 && e / expected < 2.0,
            "ess = {e}, theory = {expected}"
        );
    }

    #[test]
    fn constant_chains_are_degenerate_not_nan() {
        let chains = vec![vec![2.5; 100], vec![2.5; 100]];
        assert_eq!(split_rhat(&chains), 1.0);
        assert_eq!(ess(&chains), 200.0);
    }

    #[test]
    fn too_short_chains_give_nan() {
        assert!(split_rhat(&[vec![1.0, 2.0, 3.0]]).is_nan());
        assert!(ess(&[vec![1.0, 2.0]]).is_nan());
    }
}
