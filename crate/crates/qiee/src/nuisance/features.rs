//! Raw feature matrices and polynomial basis expansion.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Dense row-major matrix of raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "feature buffer has wrong size");
        FeatureMatrix { rows, cols, data }
    }

    /// Builds from column slices, keeping the listed rows.
    pub fn from_columns(columns: &[&[f64]], rows: &[usize]) -> Self {
        let cols = columns.len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend(columns.iter().map(|c| c[r]));
        }
        FeatureMatrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select(&self, rows: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Polynomial expansion of the raw features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Basis {
    pub degree: u32,
    /// Include cross terms up to `degree`; otherwise pure powers only.
    pub interactions: bool,
}

impl Default for Basis {
    fn default() -> Self {
        Basis {
            degree: 1,
            interactions: false,
        }
    }
}

impl Basis {
    /// Exponent vectors of all non-constant terms.
    pub fn terms(&self, p: usize) -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        if self.interactions {
            let mut cur = vec![0u32; p];
            collect_monomials(&mut cur, 0, self.degree, &mut out);
            out.retain(|e| e.iter().sum::<u32>() > 0);
            out.sort_by_key(|e| e.iter().sum::<u32>());
        } else {
            for d in 1..=self.degree {
                for j in 0..p {
                    let mut e = vec![0; p];
                    e[j] = d;
                    out.push(e);
                }
            }
        }
        out
    }
}

fn collect_monomials(cur: &mut Vec<u32>, j: usize, left: u32, out: &mut Vec<Vec<u32>>) {
    if j == cur.len() {
        out.push(cur.clone());
        return;
    }
    for d in 0..=left {
        cur[j] = d;
        collect_monomials(cur, j + 1, left - d, out);
    }
    cur[j] = 0;
}

/// Expanded and standardized design, learned on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Expander {
    terms: Vec<Vec<u32>>,
    center: Vec<f64>,
    scale: Vec<f64>,
}

impl Expander {
    pub fn fit(basis: &Basis, x: &FeatureMatrix) -> Self {
        let all = basis.terms(x.cols());
        let n = x.rows() as f64;
        let mut terms = Vec::new();
        let mut center = Vec::new();
        let mut scale = Vec::new();
        for t in all {
            let vals: Vec<f64> = (0..x.rows()).map(|i| monomial(x.row(i), &t)).collect();
            let m = vals.iter().sum::<f64>() / n;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
            // constant columns are collinear with the intercept
            if v.sqrt() <= 1e-12 * (1.0 + m.abs()) {
                continue;
            }
            terms.push(t);
            center.push(m);
            scale.push(v.sqrt());
        }
        Expander {
            terms,
            center,
            scale,
        }
    }

    pub fn intercept_only() -> Self {
        Expander {
            terms: Vec::new(),
            center: Vec::new(),
            scale: Vec::new(),
        }
    }

    /// Number of columns including the intercept.
    pub fn width(&self) -> usize {
        self.terms.len() + 1
    }

    pub fn expand_row(&self, raw: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        for (k, t) in self.terms.iter().enumerate() {
            out[k + 1] = (monomial(raw, t) - self.center[k]) / self.scale[k];
        }
    }

    pub fn design(&self, x: &FeatureMatrix) -> DMatrix<f64> {
        let p = self.width();
        let mut buf = vec![0.0; p];
        let mut m = DMatrix::zeros(x.rows(), p);
        for i in 0..x.rows() {
            self.expand_row(x.row(i), &mut buf);
            for j in 0..p {
                m[(i, j)] = buf[j];
            }
        }
        m
    }
}

fn monomial(x: &[f64], e: &[u32]) -> f64 {
    x.iter()
        .zip(e)
        .filter(|(_, &d)| d > 0)
        .map(|(v, &d)| v.powi(d as i32))
        .product()
}
