//! Two-phase tableau simplex with Bland's rule.
//!
//! Variables are shifted to a zero lower bound, finite upper bounds become
//! rows, and rows then columns are equilibrated by their largest entry. The
//! final basis is re-solved with an LU factorization to wash out drift from
//! the pivots.

use nalgebra::{DMatrix, DVector};

use super::{Cmp, LinearProgram, LpError, LpSolution, Status};

const PIVOT_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-8;

struct Tableau {
    rows: usize,
    cols: usize,
    /// `rows × (cols + 1)`, right-hand side last.
    t: Vec<f64>,
    /// Reduced costs, with `−z` last.
    obj: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn width(&self) -> usize {
        self.cols + 1
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.t[r * self.width() + c]
    }

    fn rhs(&self, r: usize) -> f64 {
        self.at(r, self.cols)
    }

    fn pivot(&mut self, p: usize, q: usize) {
        let w = self.width();
        let piv = self.t[p * w + q];
        for c in 0..w {
            self.t[p * w + c] /= piv;
        }
        self.t[p * w + q] = 1.0;
        let prow: Vec<f64> = self.t[p * w..(p + 1) * w].to_vec();
        for r in 0..self.rows {
            if r == p {
                continue;
            }
            let f = self.t[r * w + q];
            if f != 0.0 {
                let row = &mut self.t[r * w..(r + 1) * w];
                for (x, &pv) in row.iter_mut().zip(&prow) {
                    *x -= f * pv;
                }
                row[q] = 0.0;
            }
        }
        let f = self.obj[q];
        if f != 0.0 {
            for (x, &pv) in self.obj.iter_mut().zip(&prow) {
                *x -= f * pv;
            }
            self.obj[q] = 0.0;
        }
        self.basis[p] = q;
    }

    /// Runs Bland-rule pivots until optimal. Returns false when unbounded.
    fn optimize(&mut self, allowed: &[bool], iterations: &mut usize, cap: usize) -> Result<bool, LpError> {
        loop {
            let Some(q) = (0..self.cols).find(|&j| allowed[j] && self.obj[j] < -COST_TOL) else {
                return Ok(true);
            };
            let mut best: Option<(f64, usize)> = None;
            for r in 0..self.rows {
                let a = self.at(r, q);
                if a <= PIVOT_TOL {
                    continue;
                }
                let ratio = self.rhs(r).max(0.0) / a;
                best = match best {
                    None => Some((ratio, r)),
                    Some((b, br)) => {
                        let tie = (ratio - b).abs() <= 1e-12 * (1.0 + b.abs());
                        if ratio < b && !tie || tie && self.basis[r] < self.basis[br] {
                            Some((ratio, r))
                        } else {
                            Some((b, br))
                        }
                    }
                };
            }
            let Some((_, p)) = best else { return Ok(false) };
            self.pivot(p, q);
            *iterations += 1;
            if *iterations > cap {
                return Err(LpError::IterationLimit(cap));
            }
        }
    }
}

/// Standard-form row: `Σ a_j x'_j (≤ | =) b` in shifted, scaled variables.
struct Row {
    coeffs: Vec<(usize, f64)>,
    eq: bool,
    rhs: f64,
    /// Original constraint index and the multiplier mapping it to this row.
    origin: Option<(usize, f64)>,
}

pub(super) fn solve(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    let n = lp.num_vars();
    let lo = lp.lower();
    let hi = lp.upper();

    let mut rows: Vec<Row> = Vec::new();
    for (k, c) in lp.constraints().iter().enumerate() {
        let mut coeffs: Vec<(usize, f64)> = Vec::new();
        for &(j, a) in &c.terms {
            match coeffs.iter_mut().find(|e| e.0 == j) {
                Some(e) => e.1 += a,
                None => coeffs.push((j, a)),
            }
        }
        let shift: f64 = coeffs.iter().map(|&(j, a)| a * lo[j]).sum();
        let sign = if c.cmp == Cmp::Ge { -1.0 } else { 1.0 };
        for e in &mut coeffs {
            e.1 *= sign;
        }
        rows.push(Row { coeffs, eq: c.cmp == Cmp::Eq, rhs: sign * (c.rhs - shift), origin: Some((k, sign)) });
    }
    for j in 0..n {
        if hi[j].is_finite() {
            rows.push(Row { coeffs: vec![(j, 1.0)], eq: false, rhs: hi[j] - lo[j], origin: None });
        }
    }

    // equilibrate rows, then columns
    for row in &mut rows {
        let m = row.coeffs.iter().map(|e| e.1.abs()).fold(0.0, f64::max);
        if m > 0.0 {
            for e in &mut row.coeffs {
                e.1 /= m;
            }
            row.rhs /= m;
            if let Some(o) = row.origin.as_mut() {
                o.1 /= m;
            }
        }
    }
    let mut col_scale = vec![0.0f64; n];
    for row in &rows {
        for &(j, a) in &row.coeffs {
            col_scale[j] = col_scale[j].max(a.abs());
        }
    }
    let col_scale: Vec<f64> = col_scale.iter().map(|&m| if m > 0.0 { 1.0 / m } else { 1.0 }).collect();
    for row in &mut rows {
        for e in &mut row.coeffs {
            e.1 *= col_scale[e.0];
        }
    }
    let cost: Vec<f64> = (0..n).map(|j| lp.cost()[j] * col_scale[j]).collect();
    let cost_scale = cost.iter().map(|c| c.abs()).fold(0.0, f64::max).max(1e-300);
    let cost: Vec<f64> = cost.iter().map(|c| c / cost_scale).collect();

    // flip rows to a nonnegative right-hand side
    let mut flipped = vec![false; rows.len()];
    for (i, row) in rows.iter_mut().enumerate() {
        if row.rhs < 0.0 {
            row.rhs = -row.rhs;
            for e in &mut row.coeffs {
                e.1 = -e.1;
            }
            if let Some(o) = row.origin.as_mut() {
                o.1 = -o.1;
            }
            flipped[i] = true;
        }
    }

    let m = rows.len();
    let slack_of: Vec<Option<usize>> = {
        let mut next = n;
        rows.iter()
            .map(|r| {
                (!r.eq).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    };
    let n_slack = slack_of.iter().flatten().count();
    let needs_art: Vec<bool> = (0..m).map(|i| rows[i].eq || flipped[i]).collect();
    let n_art = needs_art.iter().filter(|&&b| b).count();
    let cols = n + n_slack + n_art;
    let w = cols + 1;

    let mut a0 = vec![0.0; m * w];
    let mut basis = vec![0; m];
    let mut art = n + n_slack;
    for (i, row) in rows.iter().enumerate() {
        for &(j, a) in &row.coeffs {
            a0[i * w + j] = a;
        }
        if let Some(s) = slack_of[i] {
            a0[i * w + s] = if flipped[i] { -1.0 } else { 1.0 };
            basis[i] = s;
        }
        if needs_art[i] {
            a0[i * w + art] = 1.0;
            basis[i] = art;
            art += 1;
        }
        a0[i * w + cols] = row.rhs;
    }

    let mut tab = Tableau { rows: m, cols, t: a0.clone(), obj: vec![0.0; w], basis };
    let cap = 50 * (m + cols) + 10_000;
    let mut iterations = 0;
    let is_art = |j: usize| j >= n + n_slack;
    let allowed: Vec<bool> = (0..cols).map(|j| !is_art(j)).collect();

    if n_art > 0 {
        for r in 0..m {
            if is_art(tab.basis[r]) {
                for c in 0..w {
                    tab.obj[c] -= tab.t[r * w + c];
                }
            }
        }
        for r in 0..m {
            let b = tab.basis[r];
            tab.obj[b] = 0.0;
        }
        tab.optimize(&allowed, &mut iterations, cap)?;
        let scale = 1.0 + rows.iter().map(|r| r.rhs).fold(0.0, f64::max);
        let infeas: f64 = (0..m).filter(|&r| is_art(tab.basis[r])).map(|r| tab.rhs(r).max(0.0)).sum();
        if infeas > FEAS_TOL * scale {
            return Ok(LpSolution::without_point(Status::Infeasible));
        }
        for r in 0..m {
            if is_art(tab.basis[r]) {
                let q = (0..n + n_slack)
                    .filter(|&j| tab.at(r, j).abs() > PIVOT_TOL)
                    .max_by(|&a, &b| tab.at(r, a).abs().total_cmp(&tab.at(r, b).abs()));
                if let Some(q) = q {
                    tab.pivot(r, q);
                }
            }
        }
    }

    tab.obj.iter_mut().for_each(|x| *x = 0.0);
    tab.obj[..n].copy_from_slice(&cost);
    for r in 0..m {
        let b = tab.basis[r];
        let cb = if b < n { cost[b] } else { 0.0 };
        if cb != 0.0 {
            for c in 0..w {
                tab.obj[c] -= cb * tab.t[r * w + c];
            }
        }
    }
    if !tab.optimize(&allowed, &mut iterations, cap)? {
        return Ok(LpSolution::without_point(Status::Unbounded));
    }

    let mut xb: Vec<f64> = (0..m).map(|r| tab.rhs(r)).collect();
    let mut duals_scaled: Option<Vec<f64>> = None;
    if m > 0 {
        let bmat = DMatrix::from_fn(m, m, |i, k| a0[i * w + tab.basis[k]]);
        let lu = bmat.lu();
        let b = DVector::from_fn(m, |i, _| a0[i * w + cols]);
        if let Some(sol) = lu.solve(&b) {
            if sol.iter().all(|&v| v > -1e-7 && v.is_finite()) {
                xb = sol.iter().copied().collect();
            }
        }
        let cb = DVector::from_fn(m, |k, _| if tab.basis[k] < n { cost[tab.basis[k]] } else { 0.0 });
        let bt = DMatrix::from_fn(m, m, |i, k| a0[k * w + tab.basis[i]]);
        duals_scaled = bt.lu().solve(&cb).map(|y| y.iter().copied().collect());
    }

    let mut xs = vec![0.0; n];
    for (r, &b) in tab.basis.iter().enumerate() {
        if b < n {
            xs[b] = xb[r].max(0.0);
        }
    }
    let x: Vec<f64> = (0..n).map(|j| (lo[j] + col_scale[j] * xs[j]).min(hi[j])).collect();

    let duals = duals_scaled.map(|y| {
        let mut out = vec![0.0; lp.num_constraints()];
        for (i, row) in rows.iter().enumerate() {
            if let Some((k, mult)) = row.origin {
                out[k] = cost_scale * y[i] * mult;
            }
        }
        out
    });
    Ok(LpSolution::optimal(lp, x, duals))
}
