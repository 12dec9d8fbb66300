//! Dense two-phase simplex for the small occupancy-measure programs used
//! throughout the crate.
//!
//! Problems are given in equality form: maximize `c·x` subject to `A x = b`,
//! `x >= 0`. Pivoting follows Bland's rule (smallest eligible entering index,
//! smallest basic index on ratio ties), so the returned basic solution is a
//! deterministic function of the input and cycling cannot occur on the highly
//! degenerate flow-balance systems.

const PIVOT_TOL: f64 = 1e-12;
const COST_TOL: f64 = 1e-11;
const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

/// An equality-form linear program. `a` is row-major with `b.len()` rows.
#[derive(Debug, Clone)]
pub struct EqualityLp {
    pub n_vars: usize,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn pivot(&mut self, r: usize, col: usize) {
        let p = self.rows[r][col];
        for v in self.rows[r].iter_mut() {
            *v /= p;
        }
        self.rhs[r] /= p;
        let pivot_row = self.rows[r].clone();
        let pivot_rhs = self.rhs[r];
        for i in 0..self.rows.len() {
            if i == r {
                continue;
            }
            let f = self.rows[i][col];
            if f != 0.0 {
                for (v, pv) in self.rows[i].iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                self.rhs[i] -= f * pivot_rhs;
                // Clamp accumulated drift so the basic solution stays feasible.
                if self.rhs[i].abs() < 1e-14 {
                    self.rhs[i] = 0.0;
                }
            }
        }
        self.basis[r] = col;
    }

    /// Runs Bland-rule simplex iterations maximizing `cost` over columns in `allowed`.
    fn optimize(&mut self, cost: &[f64], allowed: usize) -> bool {
        let max_iters = 50_000;
        for _ in 0..max_iters {
            let entering = (0..allowed).find(|&j| {
                if self.basis.contains(&j) {
                    return false;
                }
                let mut rc = cost[j];
                for (i, &bi) in self.basis.iter().enumerate() {
                    rc -= cost[bi] * self.rows[i][j];
                }
                rc > COST_TOL
            });
            let Some(col) = entering else {
                return true;
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows.len() {
                let aij = self.rows[i][col];
                if aij > PIVOT_TOL {
                    let ratio = self.rhs[i] / aij;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - 1e-14
                                || (ratio <= lr + 1e-14 && self.basis[i] < self.basis[li])
                            {
                                Some((i, ratio))
                            } else {
                                Some((li, lr))
                            }
                        }
                    };
                }
            }
            match leave {
                Some((r, _)) => self.pivot(r, col),
                None => return false,
            }
        }
        false
    }
}

impl EqualityLp {
    pub fn solve(&self) -> LpOutcome {
        let m = self.b.len();
        let n = self.n_vars;
        let total = n + m;
        let mut rows = Vec::with_capacity(m);
        let mut rhs = Vec::with_capacity(m);
        for (i, (row, &bi)) in self.a.iter().zip(&self.b).enumerate() {
            let sign = if bi < 0.0 { -1.0 } else { 1.0 };
            let mut r: Vec<f64> = row.iter().map(|v| sign * v).collect();
            r.resize(total, 0.0);
            r[n + i] = 1.0;
            rows.push(r);
            rhs.push(sign * bi);
        }
        let mut t = Tableau {
            rows,
            rhs,
            basis: (n..total).collect(),
        };

        // Phase 1: drive the artificial variables to zero.
        let mut phase1 = vec![0.0; total];
        for c in phase1.iter_mut().skip(n) {
            *c = -1.0;
        }
        t.optimize(&phase1, total);
        let infeas: f64 = t
            .basis
            .iter()
            .zip(&t.rhs)
            .filter(|(&bi, _)| bi >= n)
            .map(|(_, &v)| v)
            .sum();
        if infeas > FEAS_TOL {
            return LpOutcome::Infeasible;
        }

        // Pivot remaining (zero-level) artificials out, dropping redundant rows.
        let mut r = 0;
        while r < t.rows.len() {
            if t.basis[r] >= n {
                match (0..n).find(|&j| t.rows[r][j].abs() > 1e-9 && !t.basis.contains(&j)) {
                    Some(col) => {
                        t.pivot(r, col);
                        r += 1;
                    }
                    None => {
                        t.rows.remove(r);
                        t.rhs.remove(r);
                        t.basis.remove(r);
                    }
                }
            } else {
                r += 1;
            }
        }

        let mut cost = self.c.clone();
        cost.resize(total, 0.0);
        if !t.optimize(&cost, n) {
            return LpOutcome::Unbounded;
        }
        let mut x = vec![0.0; n];
        for (i, &bi) in t.basis.iter().enumerate() {
            if bi < n {
                x[bi] = t.rhs[i].max(0.0);
            }
        }
        let value = x.iter().zip(&self.c).map(|(a, b)| a * b).sum();
        LpOutcome::Optimal { x, value }
    }
}
