//! Fully constrained least squares abundances and NMF blind unmixing.

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cube::HyperCube;
use crate::endmember::{default_names, EndmemberSet};
use crate::error::{Error, Result};
use crate::mixer::AbundanceMap;

const KKT_PINV_EPS: f64 = 1e-12;
const MULTIPLIER_TOL: f64 = 1e-12;
const NMF_DENOM_FLOOR: f64 = 1e-300;

/// Abundances of one spectrum against fixed endmembers.
///
/// Minimizes `||M^T a - x||` over the unit simplex with a primal active-set
/// method. Starts at the closest vertex; on each pass the equality
/// constrained problem on the free set is solved through its KKT system.
pub fn fcls(x: ArrayView1<'_, f64>, m: &EndmemberSet) -> Result<Vec<f64>> {
    let solver = FclsSolver::new(m.signatures.view())?;
    solver.solve(x)
}

/// Gram matrix of an endmember set, reusable across pixels.
pub struct FclsSolver {
    gram: DMatrix<f64>,
    sigs: Array2<f64>,
}

impl FclsSolver {
    pub fn new(signatures: ArrayView2<'_, f64>) -> Result<Self> {
        let (e, b) = signatures.dim();
        if e == 0 {
            return Err(Error::InvalidArgument("fcls needs at least one endmember".into()));
        }
        if b == 0 {
            return Err(Error::InvalidArgument("fcls needs at least one band".into()));
        }
        let gram = DMatrix::from_fn(e, e, |i, j| signatures.row(i).dot(&signatures.row(j)));
        Ok(Self {
            gram,
            sigs: signatures.to_owned(),
        })
    }

    pub fn solve(&self, x: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
        let (e, b) = self.sigs.dim();
        if x.len() != b {
            return Err(Error::Dimension(format!("spectrum has {} bands, endmembers {b}", x.len())));
        }
        let c = DVector::from_fn(e, |i, _| self.sigs.row(i).dot(&x));
        let g = &self.gram;

        let start = (0..e)
            .map(|i| {
                let d: f64 = self.sigs.row(i).iter().zip(x).map(|(m, v)| (m - v) * (m - v)).sum();
                (i, d)
            })
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
            .0;
        let mut a = DVector::<f64>::zeros(e);
        a[start] = 1.0;
        let mut free = vec![false; e];
        free[start] = true;

        let max_iter = 100 + 20 * e;
        for _ in 0..max_iter {
            let idx: Vec<usize> = (0..e).filter(|&i| free[i]).collect();
            let target = face_minimizer(g, &c, &idx);
            let step: Vec<f64> = idx.iter().zip(&target).map(|(&i, t)| t - a[i]).collect();
            let step_norm = step.iter().map(|v| v.abs()).fold(0.0, f64::max);

            if step_norm <= 1e-14 {
                let grad = g * &a - &c;
                let nu = idx.iter().map(|&i| grad[i]).sum::<f64>() / idx.len() as f64;
                let scale = grad.amax().max(1.0);
                let mut enter = None;
                let mut most = -MULTIPLIER_TOL * scale;
                for i in (0..e).filter(|&i| !free[i]) {
                    let lambda = grad[i] - nu;
                    if lambda < most {
                        most = lambda;
                        enter = Some(i);
                    }
                }
                match enter {
                    Some(i) => free[i] = true,
                    None => return Ok(finish(a)),
                }
                continue;
            }

            let mut alpha = 1.0;
            let mut blocking = None;
            for (k, &i) in idx.iter().enumerate() {
                if step[k] < 0.0 {
                    let lim = -a[i] / step[k];
                    if lim < alpha {
                        alpha = lim;
                        blocking = Some(i);
                    }
                }
            }
            for (k, &i) in idx.iter().enumerate() {
                a[i] += alpha * step[k];
            }
            if let Some(i) = blocking {
                a[i] = 0.0;
                free[i] = false;
                // keep the iterate exactly on the affine constraint
                let sum = a.sum();
                if sum > 0.0 {
                    a /= sum;
                }
            }
        }
        log::warn!("fcls active set did not settle in {max_iter} passes");
        Ok(finish(a))
    }
}

/// Minimizer of the quadratic on the affine face spanned by `idx`.
fn face_minimizer(g: &DMatrix<f64>, c: &DVector<f64>, idx: &[usize]) -> Vec<f64> {
    let k = idx.len();
    if k == 1 {
        return vec![1.0];
    }
    let mut kkt = DMatrix::<f64>::zeros(k + 1, k + 1);
    let mut rhs = DVector::<f64>::zeros(k + 1);
    for (r, &i) in idx.iter().enumerate() {
        for (q, &j) in idx.iter().enumerate() {
            kkt[(r, q)] = g[(i, j)];
        }
        kkt[(r, k)] = 1.0;
        kkt[(k, r)] = 1.0;
        rhs[r] = c[i];
    }
    rhs[k] = 1.0;
    let scale = kkt.amax().max(1.0);
    let sol = kkt
        .clone()
        .svd(true, true)
        .solve(&rhs, KKT_PINV_EPS * scale)
        .unwrap_or_else(|_| DVector::from_element(k + 1, 1.0 / k as f64));
    sol.iter().take(k).cloned().collect()
}

fn finish(a: DVector<f64>) -> Vec<f64> {
    let mut out: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// FCLS for every pixel of a cube.
pub fn fcls_cube(cube: &HyperCube, m: &EndmemberSet) -> Result<AbundanceMap> {
    if cube.bands() != m.bands() {
        return Err(Error::Dimension(format!("cube has {} bands, endmembers {}", cube.bands(), m.bands())));
    }
    let solver = FclsSolver::new(m.signatures.view())?;
    let (h, w) = (cube.lines(), cube.samples());
    let mut out = Array3::zeros((h, w, m.count()));
    for l in 0..h {
        for s in 0..w {
            let a = solver.solve(cube.pixel(l, s))?;
            for (e, v) in a.into_iter().enumerate() {
                out[[l, s, e]] = v;
            }
        }
    }
    AbundanceMap::new(out, m.names.clone())
}

/// Endmember matrix `M` (`E x B`), abundances `A` (`N x E`).
#[derive(Debug, Clone)]
pub struct FactorizationResult {
    pub endmembers: Array2<f64>,
    pub abundances: Array2<f64>,
    /// Frobenius residual of the sum-to-one augmented problem, one per iteration.
    pub objective_trace: Vec<f64>,
}

impl FactorizationResult {
    pub fn endmember_set(&self, wavelengths: Vec<f64>) -> Result<EndmemberSet> {
        EndmemberSet::new(default_names(self.endmembers.nrows()), wavelengths, self.endmembers.clone(), None)
    }

    pub fn abundance_map(&self, lines: usize, samples: usize) -> Result<AbundanceMap> {
        let e = self.abundances.ncols();
        let values = self
            .abundances
            .clone()
            .into_shape_with_order((lines, samples, e))
            .map_err(|err| Error::Dimension(err.to_string()))?;
        AbundanceMap::new(values, default_names(e))
    }
}

/// Multiplicative-update NMF of the `N x B` pixel matrix into `A M`.
///
/// The abundance update sees the data and endmembers extended by a constant
/// column of weight `delta`, which pulls each abundance row towards unit sum.
/// Rows are renormalized once more on output.
pub fn nmf_unmix(cube: &HyperCube, p: usize, iters: usize, seed: u64) -> Result<FactorizationResult> {
    let x = cube.pixels();
    let (n, b) = x.dim();
    if p == 0 {
        return Err(Error::InvalidArgument("p must be at least 1".into()));
    }
    if p > n.min(b) {
        return Err(Error::InvalidArgument(format!("p = {p} exceeds min(N, B) = {}", n.min(b))));
    }
    if iters == 0 {
        return Err(Error::InvalidArgument("iters must be at least 1".into()));
    }
    let x = DMatrix::from_fn(n, b, |i, j| x[[i, j]].max(0.0));
    let mean = x.mean();
    if !(mean > 0.0) {
        return Err(Error::DegenerateData("pixel matrix is all zero".into()));
    }
    let delta = x.max();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |scale: f64| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z.abs() * scale + 1e-3 * scale
    };
    let mut a = DMatrix::from_fn(n, p, |_, _| gauss(1.0));
    for mut row in a.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    let m_scale = mean / (2.0 / std::f64::consts::PI).sqrt();
    let mut m = DMatrix::from_fn(p, b, |_, _| gauss(m_scale));

    let mut x_aug = DMatrix::from_element(n, b + 1, delta);
    x_aug.view_mut((0, 0), (n, b)).copy_from(&x);

    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut m_aug = DMatrix::from_element(p, b + 1, delta);
        m_aug.view_mut((0, 0), (p, b)).copy_from(&m);
        let num = &x_aug * m_aug.transpose();
        let den = &a * (&m_aug * m_aug.transpose());
        a.zip_zip_apply(&num, &den, |v, nu, de| *v *= nu / de.max(NMF_DENOM_FLOOR));

        let at = a.transpose();
        let num = &at * &x;
        let den = (&at * &a) * &m;
        m.zip_zip_apply(&num, &den, |v, nu, de| *v *= nu / de.max(NMF_DENOM_FLOOR));

        m_aug.view_mut((0, 0), (p, b)).copy_from(&m);
        let resid = (&x_aug - &a * &m_aug).norm();
        if !resid.is_finite() {
            return Err(Error::NonFinite { component: "nmf residual" });
        }
        trace.push(resid);
    }

    let abundances = Array2::from_shape_fn((n, p), |(i, j)| {
        let s: f64 = a.row(i).sum();
        if s > 0.0 {
            a[(i, j)] / s
        } else {
            1.0 / p as f64
        }
    });
    let endmembers = Array2::from_shape_fn((p, b), |(i, j)| m[(i, j)]);
    Ok(FactorizationResult {
        endmembers,
        abundances,
        objective_trace: trace,
    })
}

/// `A M` as a cube with the source geometry.
pub fn reconstruct(abundances: &AbundanceMap, endmembers: &EndmemberSet, like: &HyperCube) -> Result<HyperCube> {
    let (h, w, e) = abundances.dim();
    if e != endmembers.count() || endmembers.bands() != like.bands() || (h, w) != (like.lines(), like.samples()) {
        return Err(Error::Dimension("abundances, endmembers and cube disagree".into()));
    }
    let mut out = Array3::zeros((h, w, like.bands()));
    for l in 0..h {
        for s_ in 0..w {
            let a = abundances.values.slice(s![l, s_, ..]);
            let mut px = out.slice_mut(s![l, s_, ..]);
            for (k, &v) in a.iter().enumerate() {
                px.scaled_add(v, &endmembers.signature(k));
            }
        }
    }
    like.with_data(out, like.units())
}
