//! Small dense square matrices and a cyclic Jacobi eigensolver.

#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), n, "matrix must be square");
            m.data[i * n..(i + 1) * n].copy_from_slice(r);
        }
        m
    }

    pub fn from_flat(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n);
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self[(i, i)]).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// (A + Aᵀ) / 2
    pub fn symmetric_part(&self) -> Self {
        let mut s = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                s[(i, j)] = 0.5 * (self[(i, j)] + self[(j, i)]);
            }
        }
        s
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    pub fn add_identity(&mut self, c: f64) {
        for i in 0..self.n {
            self[(i, i)] += c;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self[(i, j)] * v[j]).sum())
            .collect()
    }
}

impl std::ops::Index<(usize, usize)> for SquareMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for SquareMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }
}

/// Eigenvalues (ascending) and matching unit eigenvectors of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// `vectors[k]` belongs to `values[k]`.
    pub vectors: Vec<Vec<f64>>,
}

impl SymEigen {
    pub fn max(&self) -> (f64, &[f64]) {
        let k = self.values.len() - 1;
        (self.values[k], &self.vectors[k])
    }
}

/// Cyclic Jacobi rotations; only the upper triangle of `a` is read as the
/// symmetric input, so callers should symmetrize first.
pub fn sym_eigen(a: &SquareMatrix) -> SymEigen {
    let n = a.n();
    let mut m = a.symmetric_part();
    let mut v = SquareMatrix::identity(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        let scale: f64 = m.as_flat().iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    SymEigen {
        values: order.iter().map(|&i| m[(i, i)]).collect(),
        vectors: order.iter().map(|&i| (0..n).map(|k| v[(k, i)]).collect()).collect(),
    }
}

/// Largest eigenvalue of the symmetric part of `a`.
pub fn lambda_max(a: &SquareMatrix) -> f64 {
    if a.n() == 1 {
        return a[(0, 0)];
    }
    sym_eigen(a).max().0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalues_of_diagonal_case() {
        let a = SquareMatrix::from_rows(&[vec![-1.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(lambda_max(&a), 0.0);
    }

    #[test]
    fn reconstructs_random_symmetric_matrix() {
        let rows = vec![
            vec![4.0, 1.0, -2.0, 0.5],
            vec![1.0, 3.0, 0.0, 1.5],
            vec![-2.0, 0.0, 1.0, 0.2],
            vec![0.5, 1.5, 0.2, -1.0],
        ];
        let a = SquareMatrix::from_rows(&rows);
        let e = sym_eigen(&a);
        for (lam, vec) in e.values.iter().zip(&e.vectors) {
            let av = a.mul_vec(vec);
            for k in 0..4 {
                assert!((av[k] - lam * vec[k]).abs() < 1e-12);
            }
        }
        let sum: f64 = e.values.iter().sum();
        assert!((sum - a.trace()).abs() < 1e-12);
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn two_by_two_closed_form() {
        let a = SquareMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        assert!((lambda_max(&a) - 3.0).abs() < 1e-14);
    }
}
