//! Shared numeric helpers: adaptive quadrature, low-discrepancy grids,
//! damped Newton solves and the polar projection onto SO(m).

use nalgebra::{DMatrix, DVector};

/// Adaptive Simpson quadrature of `f` over `[a, b]` (signed if `b < a`).
///
/// Returns NaN if the integrand produces NaN anywhere the rule samples it;
/// callers treat that as a domain failure.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (lo, hi, sign) = if a <= b { (a, b, 1.0) } else { (b, a, -1.0) };
    let fa = f(lo);
    let fb = f(hi);
    let m = 0.5 * (lo + hi);
    let fm = f(m);
    let whole = simpson_rule(lo, hi, fa, fm, fb);
    sign * simpson_rec(f, lo, hi, fa, fm, fb, whole, tol.max(1e-15), 48)
}

fn simpson_rule(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson_rule(a, m, fa, flm, fm);
    let right = simpson_rule(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson_rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut result = 0.0;
    let mut frac = inv;
    while i > 0 {
        result += (i % base) as f64 * frac;
        i /= base;
        frac *= inv;
    }
    result
}

const HALTON_BASES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Deterministic low-discrepancy (Halton) grid of `count` points inside the
/// axis-aligned box given as per-coordinate `[lo, hi]` intervals.
pub fn halton_grid(bounds: &[[f64; 2]], count: usize) -> Vec<Vec<f64>> {
    assert!(
        bounds.len() <= HALTON_BASES.len(),
        "halton_grid supports up to {} dimensions",
        HALTON_BASES.len()
    );
    (1..=count as u64)
        .map(|i| {
            bounds
                .iter()
                .zip(HALTON_BASES.iter())
                .map(|([lo, hi], &b)| lo + (hi - lo) * radical_inverse(i, b))
                .collect()
        })
        .collect()
}

/// Outcome of a damped Newton solve.
#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub solution: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Damped Newton iteration for `F(x) = target` from `seed`.
///
/// `f` evaluates the map, `jac` its Jacobian. Steps are halved (up to 30
/// times) whenever the residual norm does not decrease.
pub fn damped_newton(
    f: &dyn Fn(&[f64]) -> Option<Vec<f64>>,
    jac: &dyn Fn(&[f64]) -> Option<DMatrix<f64>>,
    target: &[f64],
    seed: &[f64],
    tol: f64,
    max_iter: usize,
) -> Option<NewtonResult> {
    debug_assert_eq!(target.len(), seed.len());
    let mut x = DVector::from_column_slice(seed);
    let target = DVector::from_column_slice(target);
    let mut res = DVector::from_column_slice(&f(x.as_slice())?) - &target;
    let mut res_norm = res.norm();
    for it in 0..max_iter {
        if res_norm <= tol {
            return Some(NewtonResult {
                solution: x.as_slice().to_vec(),
                residual_norm: res_norm,
                iterations: it,
            });
        }
        let j = jac(x.as_slice())?;
        let step = j.lu().solve(&res)?;
        let mut damp = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &x - damp * &step;
            if let Some(fc) = f(cand.as_slice()) {
                let cand_res = DVector::from_column_slice(&fc) - &target;
                let cand_norm = cand_res.norm();
                if cand_norm < res_norm || cand_norm <= tol {
                    x = cand;
                    res = cand_res;
                    res_norm = cand_norm;
                    accepted = true;
                    break;
                }
            }
            damp *= 0.5;
        }
        if !accepted {
            return None;
        }
    }
    if res_norm <= tol {
        Some(NewtonResult {
            solution: x.as_slice().to_vec(),
            residual_norm: res_norm,
            iterations: max_iter,
        })
    } else {
        None
    }
}

/// Nearest special-orthogonal matrix to `m` (polar projection via SVD).
///
/// Keeps flows on SO(m) that plain Runge-Kutta steps would drift off of.
pub fn project_special_orthogonal(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let mut q = &u * &v_t;
    if q.determinant() < 0.0 {
        // Flip the column of U paired with the smallest singular value so the
        // projection lands in SO(m) rather than O(m) \ SO(m).
        let k = q.ncols() - 1;
        let mut u = u;
        for i in 0..u.nrows() {
            u[(i, k)] = -u[(i, k)];
        }
        q = &u * &v_t;
    }
    q
}

/// Max absolute entry of a matrix.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Classic fixed-step RK4 over a vector state.
pub fn rk4<F>(state: &mut [f64], t0: f64, t1: f64, steps: usize, rhs: F) -> Result<(), String>
where
    F: Fn(f64, &[f64], &mut [f64]) -> Result<(), String>,
{
    if steps == 0 {
        return Err("rk4 requires at least one step".into());
    }
    let h = (t1 - t0) / steps as f64;
    let n = state.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for s in 0..steps {
        let t = t0 + h * s as f64;
        rhs(t, state, &mut k1)?;
        for i in 0..n {
            tmp[i] = state[i] + 0.5 * h * k1[i];
        }
        rhs(t + 0.5 * h, &tmp, &mut k2)?;
        for i in 0..n {
            tmp[i] = state[i] + 0.5 * h * k2[i];
        }
        rhs(t + 0.5 * h, &tmp, &mut k3)?;
        for i in 0..n {
            tmp[i] = state[i] + h * k3[i];
        }
        rhs(t + h, &tmp, &mut k4)?;
        for i in 0..n {
            state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_integrates_polynomials_exactly() {
        let v = adaptive_simpson(&|x| 3.0 * x * x, 0.0, 2.0, 1e-12);
        assert!((v - 8.0).abs() < 1e-12);
        let v = adaptive_simpson(&|x| x.sin(), 0.0, std::f64::consts::PI, 1e-12);
        assert!((v - 2.0).abs() < 1e-10);
    }

    #[test]
    fn simpson_signed_orientation() {
        let v = adaptive_simpson(&|x| x, 1.0, 0.0, 1e-12);
        assert!((v + 0.5).abs() < 1e-12);
    }

    #[test]
    fn halton_points_stay_in_box() {
        let pts = halton_grid(&[[-1.0, 1.0], [0.0, 3.0]], 64);
        assert_eq!(pts.len(), 64);
        for p in &pts {
            assert!(p[0] >= -1.0 && p[0] <= 1.0);
            assert!(p[1] >= 0.0 && p[1] <= 3.0);
        }
        // Deterministic: same call, same points.
        assert_eq!(pts, halton_grid(&[[-1.0, 1.0], [0.0, 3.0]], 64));
    }

    #[test]
    fn polar_projection_orthogonalizes() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.05, 0.98]);
        let q = project_special_orthogonal(&m);
        let defect = max_abs(&(&q * q.transpose() - DMatrix::identity(2, 2)));
        assert!(defect < 1e-14);
        assert!((q.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rk4_solves_exponential() {
        let mut state = vec![1.0];
        rk4(&mut state, 0.0, 1.0, 200, |_, y, dy| {
            dy[0] = y[0];
            Ok(())
        })
        .unwrap();
        assert!((state[0] - std::f64::consts::E).abs() < 1e-9);
    }

    #[test]
    fn newton_inverts_quadratic_map() {
        let f = |x: &[f64]| Some(vec![x[0] * x[0] + x[1], x[1] * 3.0]);
        let jac = |x: &[f64]| {
            Some(DMatrix::from_row_slice(
                2,
                2,
                &[2.0 * x[0], 1.0, 0.0, 3.0],
            ))
        };
        let r = damped_newton(&f, &jac, &[5.0, 3.0], &[1.5, 0.5], 1e-12, 50).unwrap();
        assert!((r.solution[0] - 2.0).abs() < 1e-10);
        assert!((r.solution[1] - 1.0).abs() < 1e-10);
    }
}
