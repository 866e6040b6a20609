//! Small fixed-size linear algebra helpers: 3-vectors, 5x5 matrices, complex
//! 5-vectors and closed-form polynomial root solvers.

use num_complex::Complex64;

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

/// Dense real 5x5 matrix over the state order `(dD, dn, d, P2, P3)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat5(pub [[f64; 5]; 5]);

impl Mat5 {
    pub fn zeros() -> Self {
        Mat5([[0.0; 5]; 5])
    }

    pub fn mul_vec(&self, v: &[f64; 5]) -> [f64; 5] {
        let mut out = [0.0; 5];
        for (i, row) in self.0.iter().enumerate() {
            out[i] = row.iter().zip(v.iter()).map(|(m, x)| m * x).sum();
        }
        out
    }

    pub fn matmul(&self, other: &Mat5) -> Mat5 {
        let mut out = Mat5::zeros();
        for i in 0..5 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += self.0[i][k] * other.0[k][j];
                }
                out.0[i][j] = acc;
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat5 {
        let mut out = Mat5::zeros();
        for i in 0..5 {
            for j in 0..5 {
                out.0[i][j] = self.0[j][i];
            }
        }
        out
    }

    pub fn add(&self, other: &Mat5) -> Mat5 {
        let mut out = *self;
        for i in 0..5 {
            for j in 0..5 {
                out.0[i][j] += other.0[i][j];
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Unconjugated dot product `sum_k a_k b_k` (the pairing used between left
/// and right eigenvectors of a real non-symmetric matrix).
pub fn cdot(a: &[Complex64; 5], b: &[Complex64; 5]) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Conjugated dot product `sum_k a_k conj(b_k)`.
pub fn cdot_conj(a: &[Complex64; 5], b: &[Complex64; 5]) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y.conj()).sum()
}

pub(crate) fn cvec_scale(a: &[Complex64; 5], s: Complex64) -> [Complex64; 5] {
    let mut out = *a;
    for x in &mut out {
        *x *= s;
    }
    out
}

pub(crate) fn cvec_norm(a: &[Complex64; 5]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Roots of `x^2 + b x + c = 0`, numerically stable against cancellation.
pub fn solve_quadratic_monic(b: f64, c: f64) -> [Complex64; 2] {
    let disc = b * b - 4.0 * c;
    if disc >= 0.0 {
        let sq = disc.sqrt();
        // Avoid subtracting nearly equal quantities.
        let q = -0.5 * (b + b.signum() * sq);
        let r0 = q;
        let r1 = if q != 0.0 { c / q } else { -b - q };
        [Complex64::new(r0, 0.0), Complex64::new(r1, 0.0)]
    } else {
        let sq = (-disc).sqrt();
        [
            Complex64::new(-0.5 * b, 0.5 * sq),
            Complex64::new(-0.5 * b, -0.5 * sq),
        ]
    }
}

/// Roots of the monic cubic `x^3 + c2 x^2 + c1 x + c0 = 0`.
///
/// Uses the trigonometric form when all roots are real and a
/// cancellation-safe Cardano branch otherwise, then polishes every root with
/// a few complex Newton steps on the original polynomial.
pub fn solve_cubic_monic(c2: f64, c1: f64, c0: f64) -> [Complex64; 3] {
    // Depressed cubic t^3 + p t + q with x = t - c2/3.
    let shift = c2 / 3.0;
    let p = c1 - c2 * c2 / 3.0;
    let q = c0 - c2 * c1 / 3.0 + 2.0 * c2 * c2 * c2 / 27.0;

    let half_q = 0.5 * q;
    let disc = half_q * half_q + p * p * p / 27.0;

    let mut roots = if disc > 0.0 {
        // One real root, one conjugate pair.
        let s = disc.sqrt();
        let u = if q >= 0.0 { -half_q - s } else { -half_q + s };
        let u = u.cbrt();
        let v = if u != 0.0 { -p / (3.0 * u) } else { 0.0 };
        let t_real = u + v;
        let re = -0.5 * t_real;
        let im = 0.5 * 3.0f64.sqrt() * (u - v).abs();
        [
            Complex64::new(t_real - shift, 0.0),
            Complex64::new(re - shift, im),
            Complex64::new(re - shift, -im),
        ]
    } else {
        // Three real roots: trigonometric method.
        let m = 2.0 * (-p / 3.0).max(0.0).sqrt();
        let arg = if m == 0.0 {
            0.0
        } else {
            (3.0 * q / (p * m)).clamp(-1.0, 1.0)
        };
        let phi = arg.acos() / 3.0;
        let mut out = [Complex64::new(0.0, 0.0); 3];
        for (k, slot) in out.iter_mut().enumerate() {
            let t = m * (phi - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos();
            *slot = Complex64::new(t - shift, 0.0);
        }
        out
    };

    let poly = |x: Complex64| ((x + c2) * x + c1) * x + c0;
    let dpoly = |x: Complex64| (3.0 * x + 2.0 * c2) * x + c1;
    for r in &mut roots {
        for _ in 0..5 {
            let f = poly(*r);
            let df = dpoly(*r);
            if df.norm() == 0.0 {
                break;
            }
            let step = f / df;
            *r -= step;
            if step.norm() <= 1e-16 * r.norm().max(1.0) {
                break;
            }
        }
        // Real roots computed through complex arithmetic keep a spurious
        // imaginary dust; snap it off.
        if r.im.abs() <= 1e-12 * r.norm().max(1e-300) {
            r.im = 0.0;
        }
    }
    roots
}

/// Solve a small dense linear system `a x = rhs` in place (partial pivoting).
/// Returns `None` when the matrix is numerically singular.
pub(crate) fn solve_small(a: &mut [Vec<f64>], rhs: &mut [f64]) -> Option<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col]
                .abs()
                .partial_cmp(&a[j][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for k in (row + 1)..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// FNV-1a over a byte stream; used for reproducible parameter fingerprints.
pub fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}
