//! Brute-force reference solver for tiny programs.
//!
//! Every choice of `n` constraints (rows or bounds) is made active, the
//! resulting square system solved, and the feasible points compared. An
//! unbounded objective is detected on the recession cone normalized to
//! `Σ d = 1`, whose vertices are enumerated the same way.

use super::{Cmp, LinearProgram, LpError, LpSolution, Status};

/// Largest number of structural variables the oracle accepts.
pub const ORACLE_MAX_VARS: usize = 10;

const TOL: f64 = 1e-9;

/// `a·x (cmp) b` in dense form.
struct Half {
    a: Vec<f64>,
    cmp: Cmp,
    b: f64,
}

impl Half {
    fn holds(&self, x: &[f64]) -> bool {
        let act: f64 = self.a.iter().zip(x).map(|(a, v)| a * v).sum();
        let tol = TOL * (1.0 + self.b.abs() + self.a.iter().map(|a| a.abs()).sum::<f64>());
        match self.cmp {
            Cmp::Le => act <= self.b + tol,
            Cmp::Ge => act >= self.b - tol,
            Cmp::Eq => (act - self.b).abs() <= tol,
        }
    }
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_square(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let p = (col..n).max_by(|&i, &k| a[i][col].abs().total_cmp(&a[k][col].abs()))?;
        if a[p][col].abs() < 1e-10 {
            return None;
        }
        a.swap(p, col);
        b.swap(p, col);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Feasible basic points of `{x : halves}` in `n` dimensions.
fn vertices(halves: &[Half], n: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let m = halves.len();
    if n == 0 {
        if halves.iter().all(|h| h.holds(&[])) {
            out.push(Vec::new());
        }
        return out;
    }
    if m < n {
        return out;
    }
    let mut pick: Vec<usize> = (0..n).collect();
    loop {
        let a = pick.iter().map(|&i| halves[i].a.clone()).collect();
        let b = pick.iter().map(|&i| halves[i].b).collect();
        if let Some(x) = solve_square(a, b) {
            if halves.iter().all(|h| h.holds(&x)) {
                out.push(x);
            }
        }
        // next combination in lexicographic order
        let mut k = n;
        while k > 0 && pick[k - 1] == m - n + k - 1 {
            k -= 1;
        }
        if k == 0 {
            return out;
        }
        pick[k - 1] += 1;
        for t in k..n {
            pick[t] = pick[t - 1] + 1;
        }
    }
}

fn dense_rows(lp: &LinearProgram) -> Vec<Half> {
    let n = lp.num_vars();
    lp.constraints()
        .iter()
        .map(|c| {
            let mut a = vec![0.0; n];
            for &(j, v) in &c.terms {
                a[j] += v;
            }
            Half { a, cmp: c.cmp, b: c.rhs }
        })
        .collect()
}

fn unit(n: usize, j: usize) -> Vec<f64> {
    let mut a = vec![0.0; n];
    a[j] = 1.0;
    a
}

/// Best basic feasible solution by exhaustive enumeration.
pub fn enumerate_vertices_oracle(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    lp.check()?;
    let n = lp.num_vars();
    if n > ORACLE_MAX_VARS {
        return Err(LpError::TooLarge { vars: n, limit: ORACLE_MAX_VARS });
    }
    let rows = dense_rows(lp);

    let mut halves: Vec<Half> = rows.iter().map(|h| Half { a: h.a.clone(), cmp: h.cmp, b: h.b }).collect();
    for j in 0..n {
        halves.push(Half { a: unit(n, j), cmp: Cmp::Ge, b: lp.lower()[j] });
        if lp.upper()[j].is_finite() {
            halves.push(Half { a: unit(n, j), cmp: Cmp::Le, b: lp.upper()[j] });
        }
    }
    let best = vertices(&halves, n)
        .into_iter()
        .min_by(|a, b| lp.objective(a).total_cmp(&lp.objective(b)));
    let Some(best) = best else {
        return Ok(LpSolution::without_point(Status::Infeasible));
    };

    // recession directions: rows homogenized, d ≥ 0, d_j = 0 on bounded vars
    let mut cone: Vec<Half> = rows
        .into_iter()
        .map(|h| Half { a: h.a, cmp: h.cmp, b: 0.0 })
        .collect();
    for j in 0..n {
        let cmp = if lp.upper()[j].is_finite() { Cmp::Eq } else { Cmp::Ge };
        cone.push(Half { a: unit(n, j), cmp, b: 0.0 });
    }
    cone.push(Half { a: vec![1.0; n], cmp: Cmp::Eq, b: 1.0 });
    let descending = vertices(&cone, n).iter().any(|d| lp.objective(d) < -TOL);
    if descending {
        return Ok(LpSolution::without_point(Status::Unbounded));
    }
    Ok(LpSolution::optimal(lp, best, None))
}
