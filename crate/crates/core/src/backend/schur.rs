//! Normal equations with point blocks eliminated by the Schur complement.
//!
//! Free point variables are grouped into connected components (points that
//! share a residual, e.g. the two ends of a point-motion factor, must be
//! eliminated together). Each group's dense block is inverted independently;
//! the reduced system over the free poses is then solved by dense Cholesky.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::solver::{damped, LeastSquaresProblem, Layout, LinearizedBlock, VarId, Variable};

struct Group {
    /// Local offset of each member point inside the group block.
    members: Vec<(VarId, usize)>,
    hll: DMatrix<f64>,
    gl: DVector<f64>,
    /// Reduced-system pose offset -> coupling block (group rows x 6).
    coupling: BTreeMap<usize, DMatrix<f64>>,
}

pub(crate) struct SchurSystem {
    hpp: DMatrix<f64>,
    gp: DVector<f64>,
    groups: Vec<Group>,
    /// (variable, reduced offset) of every free pose.
    poses: Vec<(VarId, usize)>,
    full_offsets: Vec<Option<usize>>,
    full_size: usize,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

impl SchurSystem {
    pub(crate) fn build(problem: &LeastSquaresProblem, layout: &Layout, blocks: &[LinearizedBlock]) -> Self {
        let n = problem.num_variables();
        let is_free_point =
            |v: VarId| layout.offsets[v].is_some() && matches!(problem.variable(v), Variable::Point(_));

        // reduced offsets for free poses
        let mut reduced = vec![None; n];
        let mut poses = Vec::new();
        let mut np = 0;
        for v in 0..n {
            if layout.offsets[v].is_some() && !is_free_point(v) {
                reduced[v] = Some(np);
                poses.push((v, np));
                np += 6;
            }
        }

        // connected components of free points
        let mut parent: Vec<usize> = (0..n).collect();
        for b in blocks {
            let mut first = None;
            for &v in &b.vars {
                if !is_free_point(v) {
                    continue;
                }
                match first {
                    None => first = Some(v),
                    Some(f) => {
                        let (ra, rb) = (find(&mut parent, f), find(&mut parent, v));
                        if ra != rb {
                            parent[rb] = ra;
                        }
                    }
                }
            }
        }
        let mut group_of = vec![usize::MAX; n];
        let mut local = vec![0usize; n];
        let mut members: Vec<Vec<(VarId, usize)>> = Vec::new();
        let mut root_group: BTreeMap<usize, usize> = BTreeMap::new();
        for v in 0..n {
            if !is_free_point(v) {
                continue;
            }
            let root = find(&mut parent, v);
            let g = *root_group.entry(root).or_insert_with(|| {
                members.push(Vec::new());
                members.len() - 1
            });
            local[v] = members[g].len() * 3;
            members[g].push((v, local[v]));
            group_of[v] = g;
        }
        let mut groups: Vec<Group> = members
            .into_iter()
            .map(|m| {
                let size = m.len() * 3;
                Group {
                    members: m,
                    hll: DMatrix::zeros(size, size),
                    gl: DVector::zeros(size),
                    coupling: BTreeMap::new(),
                }
            })
            .collect();

        let mut hpp = DMatrix::zeros(np, np);
        let mut gp = DVector::zeros(np);
        for b in blocks {
            let w = b.weight;
            for (a, ja) in b.vars.iter().zip(&b.jacobians) {
                if layout.offsets[*a].is_none() {
                    continue;
                }
                let jat = ja.transpose();
                let grad = &jat * &b.residual * w;
                let a_point = is_free_point(*a);
                if a_point {
                    let g = &mut groups[group_of[*a]];
                    let mut rows = g.gl.rows_mut(local[*a], 3);
                    rows += &grad;
                } else {
                    let mut rows = gp.rows_mut(reduced[*a].unwrap(), 6);
                    rows += &grad;
                }
                for (c, jc) in b.vars.iter().zip(&b.jacobians) {
                    if layout.offsets[*c].is_none() {
                        continue;
                    }
                    let c_point = is_free_point(*c);
                    match (a_point, c_point) {
                        (false, false) => {
                            let blk = &jat * jc * w;
                            let mut view = hpp.view_mut((reduced[*a].unwrap(), reduced[*c].unwrap()), (6, 6));
                            view += &blk;
                        }
                        (true, true) => {
                            let blk = &jat * jc * w;
                            let g = &mut groups[group_of[*a]];
                            let mut view = g.hll.view_mut((local[*a], local[*c]), (3, 3));
                            view += &blk;
                        }
                        (true, false) => {
                            let blk = &jat * jc * w;
                            let g = &mut groups[group_of[*a]];
                            let rows = g.hll.nrows();
                            let entry = g
                                .coupling
                                .entry(reduced[*c].unwrap())
                                .or_insert_with(|| DMatrix::zeros(rows, 6));
                            let mut view = entry.view_mut((local[*a], 0), (3, 6));
                            view += &blk;
                        }
                        (false, true) => {}
                    }
                }
            }
        }
        Self {
            hpp,
            gp,
            groups,
            poses,
            full_offsets: layout.offsets.clone(),
            full_size: layout.size,
        }
    }

    pub(crate) fn gradient_norm(&self) -> f64 {
        let mut m = if self.gp.is_empty() { 0.0 } else { self.gp.amax() };
        for g in &self.groups {
            if !g.gl.is_empty() {
                m = m.max(g.gl.amax());
            }
        }
        m
    }

    pub(crate) fn solve(&self, lambda: f64) -> Option<DVector<f64>> {
        let np = self.hpp.nrows();
        let mut s = self.hpp.clone();
        for i in 0..np {
            s[(i, i)] = damped(self.hpp[(i, i)], lambda);
        }
        let mut rhs = -&self.gp;
        let mut factors = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            let mut hll = g.hll.clone();
            for i in 0..hll.nrows() {
                hll[(i, i)] = damped(g.hll[(i, i)], lambda);
            }
            let chol = hll.cholesky()?;
            let hinv_g = chol.solve(&g.gl);
            let solved: Vec<(usize, &DMatrix<f64>, DMatrix<f64>)> =
                g.coupling.iter().map(|(&o, c)| (o, c, chol.solve(c))).collect();
            for (oj, cj, _) in &solved {
                let mut r = rhs.rows_mut(*oj, 6);
                r += cj.transpose() * &hinv_g;
                for (oi, _, yi) in &solved {
                    let mut view = s.view_mut((*oj, *oi), (6, 6));
                    view -= cj.transpose() * yi;
                }
            }
            factors.push(chol);
        }
        let dp = if np > 0 { s.cholesky()?.solve(&rhs) } else { DVector::zeros(0) };
        if dp.iter().any(|x| !x.is_finite()) {
            return None;
        }

        let mut step = DVector::zeros(self.full_size);
        for &(v, o) in &self.poses {
            let full = self.full_offsets[v].unwrap();
            step.rows_mut(full, 6).copy_from(&dp.rows(o, 6));
        }
        for (g, chol) in self.groups.iter().zip(&factors) {
            let mut r = -&g.gl;
            for (o, c) in &g.coupling {
                r -= c * dp.rows(*o, 6);
            }
            let dl = chol.solve(&r);
            if dl.iter().any(|x| !x.is_finite()) {
                return None;
            }
            for &(v, off) in &g.members {
                let full = self.full_offsets[v].unwrap();
                step.rows_mut(full, 3).copy_from(&dl.rows(off, 3));
            }
        }
        Some(step)
    }
}
