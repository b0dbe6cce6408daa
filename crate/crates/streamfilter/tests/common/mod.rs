//! Shared helpers for the integration tests: numerical quadrature moments for
//! checking full conditionals against an independent oracle, and a
//! Mann-Kendall trend statistic.
#![allow(dead_code)] // each test binary uses a different subset

/// Moments of an unnormalized density via composite Simpson on [lo, hi].
/// Returns (normalizing mass, mean, variance). `n` is the number of
/// subintervals (forced even).
pub fn quad_moments(log_density: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> (f64, f64, f64) {
    let n = if n % 2 == 0 { n } else { n + 1 };
    let h = (hi - lo) / n as f64;
    let xs: Vec<f64> = (0..=n).map(|i| lo + h * i as f64).collect();
    let logs: Vec<f64> = xs.iter().map(|&x| log_density(x)).collect();
    let shift = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ws: Vec<f64> = (0..=n)
        .map(|i| {
            if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            }
        })
        .collect();
    let mut m0 = 0.0;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for i in 0..=n {
        let f = (logs[i] - shift).exp() * ws[i];
        m0 += f;
        m1 += f * xs[i];
        m2 += f * xs[i] * xs[i];
    }
    let scale = h / 3.0 * shift.exp();
    let mass = m0 * scale;
    let mean = m1 / m0;
    let var = m2 / m0 - mean * mean;
    (mass, mean, var)
}

/// Same, but integrating over x = exp(u) on a log-spaced grid: moments of the
/// density in x for targets supported on (0, inf) with heavy tails.
pub fn quad_moments_log_grid(
    log_density: impl Fn(f64) -> f64,
    x_lo: f64,
    x_hi: f64,
    n: usize,
) -> (f64, f64, f64) {
    // substitute x = e^u; density in u picks up a factor x
    let f = |u: f64| log_density(u.exp()) + u;
    let (mass, _, _) = quad_moments(&f, x_lo.ln(), x_hi.ln(), n);
    // mean and second moment of x need their own integrals
    let (m1, _, _) = quad_moments(|u| f(u) + u, x_lo.ln(), x_hi.ln(), n);
    let (m2, _, _) = quad_moments(|u| f(u) + 2.0 * u, x_lo.ln(), x_hi.ln(), n);
    let mean = m1 / mass;
    let var = m2 / mass - mean * mean;
    (mass, mean, var)
}

/// Mann-Kendall trend z-statistic with the tie correction and continuity
/// correction; strongly negative values indicate a decreasing trend.
pub fn mann_kendall_z(values: &[f64]) -> f64 {
    let n = values.len();
    assert!(n >= 4, "trend test needs at least 4 points");
    let mut s: i64 = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = values[j] - values[i];
            s += if d > 0.0 {
                1
            } else if d < 0.0 {
                -1
            } else {
                0
            };
        }
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * (t - 1.0) * (2.0 * t + 5.0);
        i = j;
    }
    let nf = n as f64;
    let var = (nf * (nf - 1.0) * (2.0 * nf + 5.0) - tie_term) / 18.0;
    if var <= 0.0 {
        return 0.0;
    }
    let s = s as f64;
    let adj = if s > 0.0 {
        s - 1.0
    } else if s < 0.0 {
        s + 1.0
    } else {
        0.0
    };
    adj / var.sqrt()
}
