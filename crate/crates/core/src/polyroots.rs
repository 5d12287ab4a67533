//! Roots of complex polynomials from the eigenvalues of a balanced
//! companion matrix, followed by local Newton refinement.
//!
//! The Hessenberg QR iteration is hand-rolled: the generic complex Schur
//! solver is both slower and noticeably less accurate on the double roots
//! that exact-covariance root-MUSIC polynomials have on the unit circle.

use num_complex::Complex64;

use crate::error::{DoaError, Result};

const RADIX: f64 = 2.0;
const CLUSTER_TOL: f64 = 1e-5;
const RESIDUAL_TOL: f64 = 1e-6;

/// Value and first two derivatives of `sum c_k z^k` (coefficients ascending).
fn horner(coefficients: &[Complex64], z: Complex64) -> (Complex64, Complex64, Complex64) {
    let mut p = Complex64::new(0.0, 0.0);
    let mut dp = p;
    let mut ddp = p;
    for &c in coefficients.iter().rev() {
        ddp = ddp * z + dp * 2.0;
        dp = dp * z + p;
        p = p * z + c;
    }
    (p, dp, ddp)
}

/// `sum |c_k| |z|^k`, the natural scale for rounding in `p(z)`.
fn evaluation_scale(coefficients: &[Complex64], z: Complex64) -> f64 {
    let r = z.norm();
    coefficients.iter().rev().fold(0.0, |acc, c| acc * r + c.norm())
}

pub fn polynomial_value(coefficients: &[Complex64], z: Complex64) -> Complex64 {
    horner(coefficients, z).0
}

/// Relative residual `|p(z)| / sum |c_k||z|^k`.
pub fn relative_residual(coefficients: &[Complex64], z: Complex64) -> f64 {
    let scale = evaluation_scale(coefficients, z);
    if scale == 0.0 {
        0.0
    } else {
        horner(coefficients, z).0.norm() / scale
    }
}

fn l1(z: Complex64) -> f64 {
    z.re.abs() + z.im.abs()
}

/// Diagonal similarity scaling by powers of two so that row and column
/// norms are comparable. Preserves Hessenberg structure.
fn balance(h: &mut [Vec<Complex64>]) {
    let n = h.len();
    let sqrdx = RADIX * RADIX;
    loop {
        let mut done = true;
        for i in 0..n {
            let mut r = 0.0;
            let mut c = 0.0;
            for j in 0..n {
                if j != i {
                    c += l1(h[j][i]);
                    r += l1(h[i][j]);
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut g = r / RADIX;
            let mut f = 1.0;
            while c < g {
                f *= RADIX;
                c *= sqrdx;
            }
            g = r * RADIX;
            while c > g {
                f /= RADIX;
                c /= sqrdx;
            }
            if (c + r) / f < 0.95 * s {
                done = false;
                let g = 1.0 / f;
                for v in h[i].iter_mut() {
                    *v *= g;
                }
                for row in h.iter_mut() {
                    row[i] *= f;
                }
            }
        }
        if done {
            break;
        }
    }
}

/// Eigenvalue of the trailing 2x2 block closest to its last diagonal entry.
fn wilkinson_shift(a: Complex64, b: Complex64, c: Complex64, d: Complex64) -> Complex64 {
    let half = (a - d) * 0.5;
    let disc = (half * half + b * c).sqrt();
    let mid = (a + d) * 0.5;
    let mu1 = mid + disc;
    let mu2 = mid - disc;
    if (mu1 - d).norm() <= (mu2 - d).norm() {
        mu1
    } else {
        mu2
    }
}

/// Eigenvalues of an upper Hessenberg matrix by single-shift QR with
/// Givens rotations and deflation.
fn hessenberg_eigenvalues(mut h: Vec<Vec<Complex64>>) -> Result<Vec<Complex64>> {
    let n = h.len();
    let mut values = Vec::with_capacity(n);
    if n == 0 {
        return Ok(values);
    }
    let max_iterations = 30 * n.max(1);
    let mut total = 0usize;
    let mut since_deflation = 0usize;
    let mut hi = n - 1;
    let mut rotations: Vec<(Complex64, Complex64)> = Vec::with_capacity(n);
    loop {
        if hi == 0 {
            values.push(h[0][0]);
            break;
        }
        let mut l = hi;
        while l > 0 {
            let mut s = h[l - 1][l - 1].norm() + h[l][l].norm();
            if s == 0.0 {
                s = (l.saturating_sub(1)..=hi)
                    .flat_map(|i| h[i][l.saturating_sub(1)..=hi].iter())
                    .map(|v| v.norm())
                    .sum();
            }
            if h[l][l - 1].norm() <= f64::EPSILON * s {
                h[l][l - 1] = Complex64::new(0.0, 0.0);
                break;
            }
            l -= 1;
        }
        if l == hi {
            values.push(h[hi][hi]);
            hi -= 1;
            since_deflation = 0;
            continue;
        }

        total += 1;
        since_deflation += 1;
        if total > max_iterations {
            return Err(DoaError::RootFinder { degree: n });
        }
        let mu = if since_deflation % 11 == 0 {
            // Exceptional shift to break rare convergence cycles.
            let mut s = h[hi][hi - 1].re.abs() + h[hi][hi - 1].im.abs();
            if hi >= 2 {
                s += h[hi - 1][hi - 2].re.abs() + h[hi - 1][hi - 2].im.abs();
            }
            h[hi][hi] + Complex64::new(0.75 * s, -0.4375 * s)
        } else {
            wilkinson_shift(h[hi - 1][hi - 1], h[hi - 1][hi], h[hi][hi - 1], h[hi][hi])
        };

        for k in l..=hi {
            h[k][k] -= mu;
        }
        rotations.clear();
        for k in l..hi {
            let x = h[k][k];
            let y = h[k + 1][k];
            let r = x.norm().hypot(y.norm());
            let (c, s) = if r == 0.0 {
                (Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0))
            } else {
                (x / r, y / r)
            };
            for j in k..=hi {
                let u = h[k][j];
                let v = h[k + 1][j];
                h[k][j] = c.conj() * u + s.conj() * v;
                h[k + 1][j] = -s * u + c * v;
            }
            rotations.push((c, s));
        }
        for (offset, &(c, s)) in rotations.iter().enumerate() {
            let k = l + offset;
            for row in h.iter_mut().take(k + 2).skip(l) {
                let u = row[k];
                let v = row[k + 1];
                row[k] = u * c + v * s;
                row[k + 1] = -u * s.conj() + v * c.conj();
            }
        }
        for k in l..=hi {
            h[k][k] += mu;
        }
    }
    Ok(values)
}

/// Newton iteration on `f` from `z`, keeping a step only while `|f|`
/// decreases.
fn polish<F>(z: Complex64, steps: usize, f: F) -> Complex64
where
    F: Fn(Complex64) -> (Complex64, Complex64),
{
    let mut z = z;
    let (mut fz, mut dfz) = f(z);
    for _ in 0..steps {
        if dfz.norm() == 0.0 || fz.norm() == 0.0 {
            break;
        }
        let candidate = z - fz / dfz;
        let (fc, dfc) = f(candidate);
        if !(fc.norm() < fz.norm()) {
            break;
        }
        z = candidate;
        fz = fc;
        dfz = dfc;
    }
    z
}

fn derivative_coefficients(coefficients: &[Complex64]) -> Vec<Complex64> {
    coefficients
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, &c)| c * k as f64)
        .collect()
}

/// Replaces each tight pair of roots by a refined double root, or by two
/// refined simple roots when the pair is genuinely split.
fn refine_clusters(coefficients: &[Complex64], roots: &mut [Complex64]) {
    let derivative = derivative_coefficients(coefficients);
    let n = roots.len();
    let mut done = vec![false; n];
    for i in 0..n {
        if done[i] {
            continue;
        }
        let tol = CLUSTER_TOL * roots[i].norm().max(1.0);
        let partner = (i + 1..n)
            .filter(|&j| !done[j] && (roots[i] - roots[j]).norm() <= tol)
            .min_by(|&a, &b| {
                (roots[i] - roots[a])
                    .norm()
                    .total_cmp(&(roots[i] - roots[b]).norm())
            });
        let Some(j) = partner else { continue };
        done[i] = true;
        done[j] = true;

        let mean = (roots[i] + roots[j]) * 0.5;
        let centre = polish(mean, 8, |z| {
            let (_, dp, ddp) = horner(coefficients, z);
            (dp, ddp)
        });
        if (centre - mean).norm() > tol {
            continue;
        }
        let (p, _, ddp) = horner(coefficients, centre);
        let scale = evaluation_scale(coefficients, centre);
        let scale_d = evaluation_scale(&derivative, centre);
        if p.norm() <= 1e3 * f64::EPSILON * scale || ddp.norm() == 0.0 {
            roots[i] = centre;
            roots[j] = centre;
            continue;
        }
        let offset = (-p * 2.0 / ddp).sqrt();
        if offset.norm() > tol || scale_d == 0.0 {
            continue;
        }
        for (slot, start) in [(i, centre + offset), (j, centre - offset)] {
            let refined = polish(start, 4, |z| {
                let (p, dp, _) = horner(coefficients, z);
                (p, dp)
            });
            if relative_residual(coefficients, refined) <= relative_residual(coefficients, roots[slot]) {
                roots[slot] = refined;
            }
        }
    }
    for i in 0..n {
        if !done[i] {
            roots[i] = polish(roots[i], 3, |z| {
                let (p, dp, _) = horner(coefficients, z);
                (p, dp)
            });
        }
    }
}

/// All roots of `sum c_k z^k` (coefficients in ascending powers).
pub fn polynomial_roots(coefficients: &[Complex64]) -> Result<Vec<Complex64>> {
    if coefficients.iter().any(|c| !(c.re.is_finite() && c.im.is_finite())) {
        return Err(DoaError::NonFinite("polynomial coefficients"));
    }
    let max = coefficients.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let Some(&leading) = coefficients.last() else {
        return Ok(Vec::new());
    };
    if !(leading.norm() > 1e-14 * max) {
        return Err(DoaError::VanishingLeadingCoefficient {
            leading: leading.norm(),
            max,
        });
    }
    let n = coefficients.len() - 1;
    if n == 0 {
        return Ok(Vec::new());
    }

    let mut h = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for (j, slot) in h[0].iter_mut().enumerate() {
        *slot = -coefficients[n - 1 - j] / leading;
    }
    for i in 1..n {
        h[i][i - 1] = Complex64::new(1.0, 0.0);
    }
    balance(&mut h);
    let mut roots = hessenberg_eigenvalues(h)?;
    refine_clusters(coefficients, &mut roots);

    for &z in &roots {
        if !(z.re.is_finite() && z.im.is_finite()) || relative_residual(coefficients, z) > RESIDUAL_TOL {
            return Err(DoaError::RootFinder { degree: n });
        }
    }
    Ok(roots)
}
