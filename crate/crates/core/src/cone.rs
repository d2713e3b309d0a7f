//! Polyhedral control cones `C = C1 x C2` and Euclidean projection onto
//! them.
//!
//! `C1` is the sub-cone spanned by the signed coordinate axes of the first
//! `m1` control components (hence all of `R^m1`); `C2` is a pointed cone in
//! the remaining `m2` components, described by a finite generator list.
//! Projection onto `C2` is a nonnegative least-squares problem over the
//! generator matrix, solved by the Lawson-Hanson active-set method; the
//! induced Moreau decomposition `l = proj(l) + r`, with `r` in the polar
//! cone and orthogonal to `proj(l)`, is what the Hamiltonian maximization
//! relies on.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("degenerate cone: {0}")]
    Degenerate(String),
}

#[derive(Debug, Clone)]
pub struct Cone {
    m1: usize,
    m2: usize,
    /// Generators of `C2`, unit-normalized, zero generators dropped.
    generators: Vec<DVector<f64>>,
}

impl Cone {
    /// Build `C = R^m1 x cone(generators)`. Each generator must have
    /// length `m2`; zero generators are ignored.
    pub fn new(m1: usize, m2: usize, generators: Vec<Vec<f64>>) -> Result<Self, ConeError> {
        let mut gens = Vec::new();
        for (i, g) in generators.into_iter().enumerate() {
            if g.len() != m2 {
                return Err(ConeError::Dimension(format!(
                    "generator {i} has length {}, expected {m2}",
                    g.len()
                )));
            }
            let v = DVector::from_vec(g);
            let norm = v.norm();
            if norm > 0.0 {
                gens.push(v / norm);
            }
        }
        Ok(Cone {
            m1,
            m2,
            generators: gens,
        })
    }

    /// The full Euclidean space `R^m` (`m1 = m`, empty `C2`).
    pub fn full(m: usize) -> Self {
        Cone {
            m1: m,
            m2: 0,
            generators: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.m1 + self.m2
    }

    pub fn m1(&self) -> usize {
        self.m1
    }

    pub fn m2(&self) -> usize {
        self.m2
    }

    pub fn generator_count(&self) -> usize {
        self.generators.len()
    }

    /// True when `C = {0}` although controls exist.
    pub fn is_degenerate(&self) -> bool {
        self.dim() >= 1 && self.m1 == 0 && self.generators.is_empty()
    }

    /// Euclidean projection of `l` onto the cone. The `C1` block projects
    /// to itself; the `C2` block solves min |G a - l_2| over a >= 0.
    pub fn project(&self, l: &[f64]) -> Result<Vec<f64>, ConeError> {
        if l.len() != self.dim() {
            return Err(ConeError::Dimension(format!(
                "vector of length {} projected onto cone of dimension {}",
                l.len(),
                self.dim()
            )));
        }
        let mut out = vec![0.0; l.len()];
        out[..self.m1].copy_from_slice(&l[..self.m1]);
        if self.m2 > 0 && !self.generators.is_empty() {
            let target = DVector::from_column_slice(&l[self.m1..]);
            let coeffs = nnls(&self.generators, &target);
            let mut proj = DVector::zeros(self.m2);
            for (a, g) in coeffs.iter().zip(&self.generators) {
                proj += g * *a;
            }
            out[self.m1..].copy_from_slice(proj.as_slice());
        }
        Ok(out)
    }

    /// Distance from `w` to the cone.
    pub fn distance(&self, w: &[f64]) -> Result<f64, ConeError> {
        let p = self.project(w)?;
        Ok(w.iter()
            .zip(&p)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn contains(&self, w: &[f64], tol: f64) -> Result<bool, ConeError> {
        Ok(self.distance(w)? <= tol)
    }

    /// A pointed `C2` contains no line; by convexity this holds exactly when
    /// no generator's negation lies back in the cone.
    pub fn c2_is_pointed(&self, tol: f64) -> Result<bool, ConeError> {
        for g in &self.generators {
            let mut neg = vec![0.0; self.dim()];
            for (o, gi) in neg[self.m1..].iter_mut().zip(g.iter()) {
                *o = -gi;
            }
            if self.distance(&neg)? <= tol {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Deterministic set of unit directions inside the cone: the signed
    /// `C1` axes and the `C2` generators, plus `extra` sampled directions
    /// (rejection sampling on the sphere, falling back to nonnegative
    /// generator combinations for narrow cones).
    pub fn unit_directions<R: Rng>(&self, extra: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let m = self.dim();
        let mut dirs: Vec<Vec<f64>> = Vec::new();
        for i in 0..self.m1 {
            for sign in [1.0, -1.0] {
                let mut d = vec![0.0; m];
                d[i] = sign;
                dirs.push(d);
            }
        }
        for g in &self.generators {
            let mut d = vec![0.0; m];
            d[self.m1..].copy_from_slice(g.as_slice());
            dirs.push(d);
        }
        let mut accepted = 0;
        let mut attempts = 0;
        while accepted < extra && attempts < extra.saturating_mul(50) {
            attempts += 1;
            let mut d: Vec<f64> = (0..m).map(|_| normal_sample(rng)).collect();
            if self.m2 > 0 {
                let tail_ok = self
                    .distance(&embed_tail(self.m1, m, &d))
                    .map(|dist| dist <= 1e-9 * (1.0 + norm(&d)))
                    .unwrap_or(false);
                if !tail_ok {
                    continue;
                }
            }
            let nrm = norm(&d);
            if nrm < 1e-12 {
                continue;
            }
            for v in &mut d {
                *v /= nrm;
            }
            dirs.push(d);
            accepted += 1;
        }
        // Narrow cones reject most sphere samples; fill the quota with
        // nonnegative generator combinations, which always lie inside.
        while accepted < extra && (!self.generators.is_empty() || self.m1 > 0) {
            let mut d = vec![0.0; m];
            for v in d[..self.m1].iter_mut() {
                *v = normal_sample(rng);
            }
            for g in &self.generators {
                let a = normal_sample(rng).abs();
                for (o, gi) in d[self.m1..].iter_mut().zip(g.iter()) {
                    *o += a * gi;
                }
            }
            let nrm = norm(&d);
            if nrm < 1e-12 {
                accepted += 1;
                continue;
            }
            for v in &mut d {
                *v /= nrm;
            }
            dirs.push(d);
            accepted += 1;
        }
        dirs
    }
}

fn embed_tail(m1: usize, m: usize, d: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; m];
    v[m1..].copy_from_slice(&d[m1..]);
    v
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Standard normal via Box-Muller; keeps the crate independent of
/// rand_distr for one sampler.
fn normal_sample<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Lawson-Hanson nonnegative least squares: minimize |A a - b| over a >= 0,
/// where the columns of `A` are `cols`. Returns the coefficient vector.
pub fn nnls(cols: &[DVector<f64>], b: &DVector<f64>) -> DVector<f64> {
    let n = cols.len();
    let mut x = DVector::zeros(n);
    if n == 0 {
        return x;
    }
    let mut passive = vec![false; n];
    let mut resid = b.clone();
    let scale = b.norm().max(1.0);
    let tol = 1e-13 * scale;
    let max_outer = 10 * n + 20;

    for _ in 0..max_outer {
        // Dual vector; the most positive non-passive entry enters.
        let mut best = tol;
        let mut enter = None;
        for (i, c) in cols.iter().enumerate() {
            if !passive[i] {
                let wi = c.dot(&resid);
                if wi > best {
                    best = wi;
                    enter = Some(i);
                }
            }
        }
        let Some(enter) = enter else { break };
        passive[enter] = true;

        loop {
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let z = solve_passive(cols, b, &idx);
            if z.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (&i, &zi) in idx.iter().zip(z.iter()) {
                    x[i] = zi;
                }
                break;
            }
            // Step toward z until the first passive coefficient hits zero.
            let mut alpha = f64::INFINITY;
            for (&i, &zi) in idx.iter().zip(z.iter()) {
                if zi <= 0.0 {
                    let a = x[i] / (x[i] - zi);
                    if a < alpha {
                        alpha = a;
                    }
                }
            }
            if !alpha.is_finite() {
                break;
            }
            for (&i, &zi) in idx.iter().zip(z.iter()) {
                x[i] += alpha * (zi - x[i]);
                if x[i] <= 1e-14 * scale {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
        resid = b - assemble(cols, &x);
    }
    x
}

fn assemble(cols: &[DVector<f64>], x: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(cols[0].len());
    for (c, &xi) in cols.iter().zip(x.iter()) {
        if xi != 0.0 {
            out += c * xi;
        }
    }
    out
}

/// Least squares restricted to the passive set, rank-deficiency handled by
/// the SVD pseudo-inverse.
fn solve_passive(cols: &[DVector<f64>], b: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    let rows = b.len();
    let mut a = DMatrix::zeros(rows, idx.len());
    for (j, &i) in idx.iter().enumerate() {
        a.set_column(j, &cols[i]);
    }
    let svd = a.svd(true, true);
    svd.solve(b, 1e-12).unwrap_or_else(|_| DVector::zeros(idx.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cone(rng: &mut ChaCha8Rng) -> Cone {
        let m1 = rng.random_range(0..3);
        let m2 = rng.random_range(0..4);
        let k = if m2 == 0 { 0 } else { rng.random_range(1..6) };
        let gens: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..m2).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        Cone::new(m1, m2, gens).unwrap()
    }

    #[test]
    fn projection_onto_full_space_is_identity() {
        let c = Cone::full(3);
        let l = [1.0, -2.0, 0.5];
        assert_eq!(c.project(&l).unwrap(), l.to_vec());
    }

    #[test]
    fn projection_onto_half_line() {
        let c = Cone::new(0, 1, vec![vec![1.0]]).unwrap();
        assert_eq!(c.project(&[3.0]).unwrap(), vec![3.0]);
        assert_eq!(c.project(&[-3.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn pointedness_detects_lines() {
        let line = Cone::new(0, 1, vec![vec![1.0], vec![-1.0]]).unwrap();
        assert!(!line.c2_is_pointed(1e-9).unwrap());
        let half = Cone::new(0, 1, vec![vec![1.0]]).unwrap();
        assert!(half.c2_is_pointed(1e-9).unwrap());
        // Lineality hidden in a combination, not a single +/- pair.
        let hidden = Cone::new(
            0,
            2,
            vec![vec![1.0, 0.0], vec![-1.0, 1.0], vec![-1.0, -1.0]],
        )
        .unwrap();
        assert!(!hidden.c2_is_pointed(1e-8).unwrap());
    }

    #[test]
    fn moreau_decomposition_holds_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut tested = 0;
        while tested < 200 {
            let cone = random_cone(&mut rng);
            if cone.dim() == 0 {
                continue;
            }
            let l: Vec<f64> = (0..cone.dim())
                .map(|_| rng.random_range(-3.0..3.0))
                .collect();
            let p = cone.project(&l).unwrap();
            let r: Vec<f64> = l.iter().zip(&p).map(|(a, b)| a - b).collect();
            let inner: f64 = r.iter().zip(&p).map(|(a, b)| a * b).sum();
            assert!(
                inner.abs() <= 1e-9,
                "orthogonality violated: {inner} for cone {cone:?}"
            );
            // Residual in the polar cone: nonpositive against C1 axes
            // (identically zero there) and against every generator.
            for v in &r[..cone.m1()] {
                assert!(v.abs() <= 1e-9);
            }
            for g in &cone.generators {
                let dot: f64 = g.iter().zip(&r[cone.m1()..]).map(|(a, b)| a * b).sum();
                assert!(dot <= 1e-9, "polar membership violated: {dot}");
            }
            tested += 1;
        }
    }

    #[test]
    fn projection_is_idempotent_and_contractive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let cone = random_cone(&mut rng);
            if cone.dim() == 0 {
                continue;
            }
            let l: Vec<f64> = (0..cone.dim())
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            let p = cone.project(&l).unwrap();
            let pp = cone.project(&p).unwrap();
            for (a, b) in p.iter().zip(&pp) {
                assert!((a - b).abs() <= 1e-9);
            }
            assert!(norm(&p) <= norm(&l) + 1e-12);
        }
    }

    #[test]
    fn unit_directions_lie_in_the_cone() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cone = Cone::new(1, 2, vec![vec![1.0, 0.2], vec![0.3, 1.0]]).unwrap();
        let dirs = cone.unit_directions(16, &mut rng);
        assert!(dirs.len() >= 16);
        for d in &dirs {
            assert!((norm(d) - 1.0).abs() <= 1e-9);
            assert!(cone.distance(d).unwrap() <= 1e-8);
        }
    }

    #[test]
    fn degenerate_cone_is_flagged() {
        let c = Cone::new(0, 2, vec![]).unwrap();
        assert!(c.is_degenerate());
        let c = Cone::new(0, 2, vec![vec![0.0, 0.0]]).unwrap();
        assert!(c.is_degenerate());
        let c = Cone::new(1, 0, vec![]).unwrap();
        assert!(!c.is_degenerate());
    }
}
