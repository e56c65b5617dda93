//! Independent brute-force reference routes.
//!
//! Everything in this module exists to check the production paths by a
//! different algorithm: finite differences instead of analytic gradients,
//! quadrature and bisection instead of the rational inverse normal CDF,
//! active-set enumeration and far-point projection instead of dual ascent.
//! The `oracle-check` command and the test suites are the only consumers;
//! nothing in the training path calls into here.

pub mod finite_diff {
    //! Central finite differences.

    /// Gradient of a scalar function by central differences with step `h`.
    pub fn gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut buf = x.to_vec();
        for i in 0..x.len() {
            let orig = buf[i];
            buf[i] = orig + h;
            let fp = f(&buf);
            buf[i] = orig - h;
            let fm = f(&buf);
            buf[i] = orig;
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    /// Directional derivative of a vector function along `v`.
    pub fn directional(
        x: &[f64],
        v: &[f64],
        h: f64,
        mut f: impl FnMut(&[f64]) -> Vec<f64>,
    ) -> Vec<f64> {
        let plus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
        let fp = f(&plus);
        let fm = f(&minus);
        fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    }

    /// Relative L2 error between an analytic vector and its reference.
    pub fn rel_error(got: &[f64], reference: &[f64]) -> f64 {
        let num: f64 = got
            .iter()
            .zip(reference)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
        num / den.max(1e-12)
    }
}

pub mod normal {
    //! Quadrature-grade standard normal CDF and its inverse.

    /// Standard normal pdf.
    pub fn pdf(x: f64) -> f64 {
        (-(x * x) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    /// CDF by composite Simpson quadrature of the pdf from 0 to |x|.
    /// Accurate to well below 1e-12 on the ranges used in tests.
    pub fn cdf(x: f64) -> f64 {
        if x < 0.0 {
            return 1.0 - cdf(-x);
        }
        if x > 40.0 {
            return 1.0;
        }
        let n = 4000; // even
        let h = x / n as f64;
        let mut acc = pdf(0.0) + pdf(x);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * pdf(k as f64 * h);
        }
        0.5 + acc * h / 3.0
    }

    /// Inverse CDF by bisection against the quadrature CDF.
    pub fn inverse_cdf(p: f64) -> f64 {
        assert!(p > 0.0 && p < 1.0);
        let mut lo = -12.0;
        let mut hi = 12.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Mean-std risk coefficient `pdf(inverse_cdf(alpha)) / alpha` computed
    /// entirely through the quadrature route.
    pub fn risk_coefficient(alpha: f64) -> f64 {
        if alpha >= 1.0 {
            return 0.0;
        }
        pdf(inverse_cdf(alpha)) / alpha
    }
}

pub mod dense_qp {
    //! Active-set enumeration for small dense convex programs.
    //!
    //! Exact on strictly convex problems with a handful of constraints: every
    //! subset of constraints is tried as the active set, the resulting
    //! equality-constrained system is solved densely, and the KKT conditions
    //! select the optimum.

    use crate::vecmath::{dot, solve_dense, symmetric_eigen};

    /// Minimize `1/2 x' Q x + c' x` subject to `A x <= b` (rows of `a` are the
    /// constraint normals). Returns `None` when no active set yields a KKT
    /// point (infeasible or degenerate beyond the oracle's scope).
    pub fn solve_qp(q: &[f64], c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
        let n = c.len();
        let k = a.len();
        assert_eq!(q.len(), n * n);
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 0..(1u32 << k) {
            let active: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
            let m = active.len();
            if m > n {
                continue;
            }
            // KKT system: [Q A_a'; A_a 0] [x; mu] = [-c; b_a]
            let dim = n + m;
            let mut mat = vec![0.0; dim * dim];
            let mut rhs = vec![0.0; dim];
            for i in 0..n {
                for j in 0..n {
                    mat[i * dim + j] = q[i * n + j];
                }
                rhs[i] = -c[i];
            }
            for (ai, &row) in active.iter().enumerate() {
                for j in 0..n {
                    mat[j * dim + n + ai] = a[row][j];
                    mat[(n + ai) * dim + j] = a[row][j];
                }
                rhs[n + ai] = b[row];
            }
            let Some(sol) = solve_dense(mat, rhs) else {
                continue;
            };
            let x = &sol[..n];
            let mu = &sol[n..];
            if mu.iter().any(|&m| m < -1e-9) {
                continue;
            }
            let feasible = (0..k).all(|i| dot(&a[i], x) - b[i] <= 1e-8 * (1.0 + b[i].abs()));
            if !feasible {
                continue;
            }
            let obj = 0.5 * quad_form(q, x) + dot(c, x);
            match &best {
                Some((bo, _)) if *bo <= obj => {}
                _ => best = Some((obj, x.to_vec())),
            }
        }
        best.map(|(_, x)| x)
    }

    fn quad_form(q: &[f64], x: &[f64]) -> f64 {
        let n = x.len();
        let mut acc = 0.0;
        for i in 0..n {
            acc += x[i] * dot(&q[i * n..(i + 1) * n], x);
        }
        acc
    }

    /// Maximize `g' x` subject to `1/2 x' H x <= eps` and `B x + c <= 0` by
    /// enumerating active sets of the linear constraints, with the
    /// trust-region boundary handled by a closed-form quadratic in the
    /// trust-region multiplier. Returns `None` when no KKT point is found.
    pub fn solve_trust_region(
        h: &[f64],
        g: &[f64],
        b_rows: &[Vec<f64>],
        c: &[f64],
        eps: f64,
    ) -> Option<Vec<f64>> {
        let n = g.len();
        let k = b_rows.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut consider = |x: &[f64], lam: &[f64], active: &[usize]| {
            // Primal feasibility.
            if 0.5 * quad_form(h, x) > eps * (1.0 + 1e-7) + 1e-12 {
                return;
            }
            for i in 0..k {
                if dot(&b_rows[i], x) + c[i] > 1e-7 * (1.0 + c[i].abs()) {
                    return;
                }
            }
            if lam.iter().any(|&l| l < -1e-8) {
                return;
            }
            let obj = dot(g, x);
            if active.len() <= n {
                match &best {
                    Some((bo, _)) if *bo >= obj => {}
                    _ => best = Some((obj, x.to_vec())),
                }
            }
        };

        for mask in 0..(1u32 << k) {
            let active: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
            let m = active.len();
            if m > n {
                continue;
            }

            // Case 1: trust region active (nu > 0).
            // x = H^{-1} (g - B_a' lam) / nu with B_a x + c_a = 0 and
            // 1/2 x' H x = eps. Substituting x gives lam(nu) affine in nu:
            // S_a lam = r_a + nu c_a, then a scalar quadratic for nu.
            if let Some(x) = tr_boundary_solution(h, g, b_rows, c, eps, &active) {
                let (xv, lam) = x;
                consider(&xv, &lam, &active);
            }

            // Case 2: trust region inactive; only possible when the active
            // rows pin x down (m == n) and g lies in their row space.
            if m == n && m > 0 {
                let mut mat = vec![0.0; n * n];
                let mut rhs = vec![0.0; n];
                for (ai, &row) in active.iter().enumerate() {
                    for j in 0..n {
                        mat[ai * n + j] = b_rows[row][j];
                    }
                    rhs[ai] = -c[row];
                }
                if let Some(x) = solve_dense(mat.clone(), rhs) {
                    // lam solves B_a' lam = g  (stationarity with nu = 0).
                    let mut bt = vec![0.0; n * n];
                    for (ai, &row) in active.iter().enumerate() {
                        for j in 0..n {
                            bt[j * n + ai] = b_rows[row][j];
                        }
                    }
                    if let Some(lam) = solve_dense(bt, g.to_vec()) {
                        // Verify stationarity held (row space check).
                        let mut resid = g.to_vec();
                        for (ai, &row) in active.iter().enumerate() {
                            for j in 0..n {
                                resid[j] -= lam[ai] * b_rows[row][j];
                            }
                        }
                        if resid.iter().all(|v| v.abs() < 1e-7) {
                            consider(&x, &lam, &active);
                        }
                    }
                }
            }
        }
        best.map(|(_, x)| x)
    }

    /// Trust-region-boundary KKT point for a fixed active set.
    fn tr_boundary_solution(
        h: &[f64],
        g: &[f64],
        b_rows: &[Vec<f64>],
        c: &[f64],
        eps: f64,
        active: &[usize],
    ) -> Option<(Vec<f64>, Vec<f64>)> {
        let n = g.len();
        let m = active.len();
        // Work in the eigenbasis of H for stable H^{-1} applications.
        let (vals, vecs) = symmetric_eigen(h, n);
        if vals.iter().any(|&v| v <= 1e-12) {
            return None;
        }
        let apply_hinv = |v: &[f64]| -> Vec<f64> {
            // H^{-1} v = V diag(1/vals) V' v
            let mut proj = vec![0.0; n];
            for i in 0..n {
                let mut p = 0.0;
                for r in 0..n {
                    p += vecs[r * n + i] * v[r];
                }
                proj[i] = p / vals[i];
            }
            let mut out = vec![0.0; n];
            for r in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += vecs[r * n + i] * proj[i];
                }
                out[r] = acc;
            }
            out
        };

        let hinv_g = apply_hinv(g);
        let q = dot(g, &hinv_g);
        if m == 0 {
            if q <= 1e-300 {
                return Some((vec![0.0; n], vec![]));
            }
            let nu = (q / (2.0 * eps)).sqrt();
            let x: Vec<f64> = hinv_g.iter().map(|v| v / nu).collect();
            return Some((x, vec![]));
        }

        let rows: Vec<&Vec<f64>> = active.iter().map(|&i| &b_rows[i]).collect();
        let hinv_b: Vec<Vec<f64>> = rows.iter().map(|r| apply_hinv(r)).collect();
        let mut s = vec![0.0; m * m];
        let mut r_vec = vec![0.0; m];
        let mut c_a = vec![0.0; m];
        for i in 0..m {
            r_vec[i] = dot(rows[i], &hinv_g);
            c_a[i] = c[active[i]];
            for j in 0..m {
                s[i * m + j] = dot(rows[i], &hinv_b[j]);
            }
        }
        // lam(nu) = S^{-1}(r + nu c_a); expand the TR equation
        // (g - B'lam)' H^{-1} (g - B'lam) = 2 eps nu^2 as a quadratic in nu.
        let s_inv_r = solve_dense(s.clone(), r_vec.clone())?;
        let s_inv_c = solve_dense(s.clone(), c_a.clone())?;
        // p(nu) = q - 2 r'lam + lam' S lam, with lam = s_inv_r + nu s_inv_c.
        // lam' S lam = (r + nu c)' S^{-1} (r + nu c)
        let rs_r = dot(&r_vec, &s_inv_r);
        let cs_c = dot(&c_a, &s_inv_c);
        // The cross terms in q - 2 r'lam + lam' S lam cancel, leaving
        // p(nu) = q - rs_r + nu^2 cs_c.
        let a2 = cs_c - 2.0 * eps;
        let a0 = q - rs_r;
        // a2 nu^2 + a0 = 0
        if a2.abs() < 1e-14 {
            return None;
        }
        let nu_sq = -a0 / a2;
        if nu_sq <= 0.0 {
            return None;
        }
        let nu = nu_sq.sqrt();
        let lam: Vec<f64> = s_inv_r
            .iter()
            .zip(&s_inv_c)
            .map(|(a, b)| a + nu * b)
            .collect();
        let mut gm = g.to_vec();
        for i in 0..m {
            for j in 0..n {
                gm[j] -= lam[i] * rows[i][j];
            }
        }
        let x: Vec<f64> = apply_hinv(&gm).iter().map(|v| v / nu).collect();
        Some((x, lam))
    }
}

pub mod projection {
    //! Projected-gradient primal route for the trust-region subproblem.
    //!
    //! The iteration `x <- Proj(x + eta g)` over a convex set has exactly the
    //! problem's KKT points as fixed points, so running it to a stall solves
    //! `max g' x` without step-size decay. The projection onto the
    //! intersection of the KL ellipsoid and the constraint halfspaces is
    //! computed exactly by enumerating active sets of its own KKT system,
    //! which is a different derivation from both the production dual solver
    //! and the trust-region active-set oracle.

    use crate::vecmath::{dot, solve_dense, symmetric_eigen};

    /// Exact Euclidean projection onto
    /// `{x : 1/2 x' H x <= eps, B x + c <= 0}`.
    pub struct SetProjector {
        vals: Vec<f64>,
        vecs: Vec<f64>,
        b_rows: Vec<Vec<f64>>,
        c: Vec<f64>,
        eps: f64,
        n: usize,
    }

    impl SetProjector {
        pub fn new(h: &[f64], n: usize, b_rows: &[Vec<f64>], c: &[f64], eps: f64) -> Self {
            let (vals, vecs) = symmetric_eigen(h, n);
            Self {
                vals,
                vecs,
                b_rows: b_rows.to_vec(),
                c: c.to_vec(),
                eps,
                n,
            }
        }

        fn to_eigen(&self, v: &[f64]) -> Vec<f64> {
            let n = self.n;
            (0..n)
                .map(|i| (0..n).map(|r| self.vecs[r * n + i] * v[r]).sum())
                .collect()
        }

        fn from_eigen(&self, v: &[f64]) -> Vec<f64> {
            let n = self.n;
            (0..n)
                .map(|r| (0..n).map(|i| self.vecs[r * n + i] * v[i]).sum())
                .collect()
        }

        fn quad_level(&self, x: &[f64]) -> f64 {
            let xe = self.to_eigen(x);
            0.5 * xe
                .iter()
                .zip(&self.vals)
                .map(|(v, l)| l * v * v)
                .sum::<f64>()
        }

        fn feasible(&self, x: &[f64], tol: f64) -> bool {
            if self.quad_level(x) > self.eps * (1.0 + tol) + 1e-14 {
                return false;
            }
            self.b_rows
                .iter()
                .zip(&self.c)
                .all(|(b, &ci)| dot(b, x) + ci <= tol * (1.0 + ci.abs()) + 1e-12)
        }

        /// KKT candidate with a fixed active set of halfspaces and the
        /// ellipsoid multiplier `nu` (possibly zero).
        ///
        /// Stationarity: `x - z + B_A' mu + nu H x = 0` with `B_A x = -c_A`.
        /// For fixed `nu`, `mu` solves a small dense system in the eigenbasis
        /// where `(I + nu H)` is diagonal.
        fn candidate(&self, z: &[f64], active: &[usize], nu: f64) -> Option<(Vec<f64>, Vec<f64>)> {
            let n = self.n;
            let m = active.len();
            let ze = self.to_eigen(z);
            let rows_e: Vec<Vec<f64>> = active
                .iter()
                .map(|&i| self.to_eigen(&self.b_rows[i]))
                .collect();
            let inv_diag: Vec<f64> = self.vals.iter().map(|l| 1.0 / (1.0 + nu * l)).collect();
            if m == 0 {
                let xe: Vec<f64> = ze.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
                return Some((self.from_eigen(&xe), vec![]));
            }
            // (B_A M B_A') mu = B_A M z + c_A, with M = (I + nu H)^{-1}.
            let mut mat = vec![0.0; m * m];
            let mut rhs = vec![0.0; m];
            for i in 0..m {
                rhs[i] = self.c[active[i]]
                    + rows_e[i]
                        .iter()
                        .zip(&ze)
                        .zip(&inv_diag)
                        .map(|((b, z), d)| b * z * d)
                        .sum::<f64>();
                for j in 0..m {
                    mat[i * m + j] = rows_e[i]
                        .iter()
                        .zip(&rows_e[j])
                        .zip(&inv_diag)
                        .map(|((a, b), d)| a * b * d)
                        .sum::<f64>();
                }
            }
            let mu = solve_dense(mat, rhs)?;
            let mut we = ze.clone();
            for i in 0..m {
                for k in 0..n {
                    we[k] -= mu[i] * rows_e[i][k];
                }
            }
            let xe: Vec<f64> = we.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
            Some((self.from_eigen(&xe), mu))
        }

        pub fn project(&self, z: &[f64]) -> Vec<f64> {
            let k = self.b_rows.len();
            let mut best: Option<(f64, Vec<f64>)> = None;
            let mut consider = |x: Vec<f64>, mu: &[f64]| {
                if mu.iter().any(|&m| m < -1e-9) || !self.feasible(&x, 1e-7) {
                    return;
                }
                let d2: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
                match &best {
                    Some((bd, _)) if *bd <= d2 => {}
                    _ => best = Some((d2, x)),
                }
            };
            for mask in 0..(1u32 << k) {
                let active: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
                if active.len() > self.n {
                    continue;
                }
                // Ellipsoid inactive.
                if let Some((x, mu)) = self.candidate(z, &active, 0.0) {
                    consider(x, &mu);
                }
                // Ellipsoid active: root-find nu > 0 with the quadratic level
                // pinned at eps. The level is decreasing in nu.
                let level = |nu: f64| -> Option<f64> {
                    self.candidate(z, &active, nu).map(|(x, _)| self.quad_level(&x))
                };
                let Some(l0) = level(0.0) else { continue };
                if l0 <= self.eps {
                    continue;
                }
                let mut hi = 1.0;
                let mut ok = true;
                for _ in 0..200 {
                    match level(hi) {
                        Some(l) if l > self.eps => hi *= 2.0,
                        Some(_) => break,
                        None => {
                            ok = false;
                            break;
                        }
                    }
                    if hi > 1e18 {
                        ok = false;
                        break;
                    }
                }
                if !ok {
                    continue;
                }
                let mut lo = 0.0;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    match level(mid) {
                        Some(l) if l > self.eps => lo = mid,
                        _ => hi = mid,
                    }
                }
                if let Some((x, mu)) = self.candidate(z, &active, 0.5 * (lo + hi)) {
                    consider(x, &mu);
                }
            }
            best.map(|(_, x)| x).unwrap_or_else(|| z.to_vec())
        }
    }

    /// Maximize `g' x` over `{1/2 x' H x <= eps, B x + c <= 0}` by fixed-step
    /// projected gradient ascent with exact projections.
    pub fn maximize_linear(
        h: &[f64],
        g: &[f64],
        b_rows: &[Vec<f64>],
        c: &[f64],
        eps: f64,
        max_iters: usize,
    ) -> Vec<f64> {
        let n = g.len();
        let proj = SetProjector::new(h, n, b_rows, c, eps);
        let gnorm = dot(g, g).sqrt().max(1e-12);
        let eta = 0.5 * (2.0 * eps).sqrt() / gnorm;
        let mut x = proj.project(&vec![0.0; n]);
        let mut stall = 0;
        for _ in 0..max_iters {
            let step: Vec<f64> = x.iter().zip(g).map(|(xi, gi)| xi + eta * gi).collect();
            let next = proj.project(&step);
            let delta: f64 = next
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            x = next;
            if delta < 1e-13 {
                stall += 1;
                if stall > 3 {
                    break;
                }
            } else {
                stall = 0;
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_cdf_hits_known_points() {
        assert!((normal::cdf(0.0) - 0.5).abs() < 1e-12);
        assert!((normal::cdf(1.0) - 0.8413447460685429).abs() < 1e-9);
        assert!((normal::cdf(-1.959963984540054) - 0.025).abs() < 1e-9);
    }

    #[test]
    fn inverse_cdf_round_trips() {
        for &p in &[0.01, 0.1, 0.25, 0.5, 0.9, 0.999] {
            let x = normal::inverse_cdf(p);
            assert!((normal::cdf(x) - p).abs() < 1e-10);
        }
    }

    #[test]
    fn dense_qp_separable_example() {
        // min 1/2 |x|^2 s.t. x0 <= -1, x1 <= -1  ->  (-1, -1)
        let q = vec![1.0, 0.0, 0.0, 1.0];
        let c = vec![0.0, 0.0];
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = vec![-1.0, -1.0];
        let x = dense_qp::solve_qp(&q, &c, &a, &b).unwrap();
        assert!((x[0] + 1.0).abs() < 1e-9);
        assert!((x[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn dense_tr_unconstrained_is_scaled_natural_gradient() {
        // max x0 over 1/2 |x|^2 <= 0.5  ->  (1, 0)
        let h = vec![1.0, 0.0, 0.0, 1.0];
        let g = vec![1.0, 0.0];
        let x = dense_qp::solve_trust_region(&h, &g, &[], &[], 0.5).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-9);
        assert!(x[1].abs() < 1e-9);
    }

    #[test]
    fn far_point_projection_matches_active_set_route() {
        let h = vec![2.0, 0.3, 0.3, 1.0];
        let g = vec![1.0, 0.5];
        let b = vec![vec![1.0, 1.0]];
        let c = vec![-0.2];
        let eps = 0.4;
        let x1 = dense_qp::solve_trust_region(&h, &g, &b, &c, eps).unwrap();
        let x2 = projection::maximize_linear(&h, &g, &b, &c, eps, 5000);
        for i in 0..2 {
            assert!((x1[i] - x2[i]).abs() < 1e-5, "{x1:?} vs {x2:?}");
        }
    }
}
