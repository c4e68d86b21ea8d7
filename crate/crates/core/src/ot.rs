//! Cross-modal alignment by entropy-regularized optimal transport.
//!
//! The text sequence `Z` (T_t x d_t) and the projected acoustic sequence `H`
//! (T_a x d_t) are treated as two discrete distributions. [`cosine_cost`]
//! builds the pairwise cost, [`sinkhorn`] finds the entropic coupling,
//! [`project`] maps `H` onto the text positions through the coupling and
//! [`alignment_loss`] compares the result with `Z`.
//!
//! The coupling is solved on plain values and enters the graph as a
//! constant; gradients reach the encoder only through the cost matrix and
//! through `H` in the projection.

use ndarray::Axis;
use thiserror::Error;

use crate::autodiff::{Array, Graph, GraphError, Var};
use crate::probe;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OtError {
    #[error("{input} row {row} has zero norm; cosine is undefined")]
    ZeroNorm { input: &'static str, row: usize },
    #[error("cost entry ({row}, {col}) is not finite")]
    NonFiniteCost { row: usize, col: usize },
    #[error("invalid sinkhorn setting: {0}")]
    InvalidSetting(String),
    #[error("invalid marginals: {0}")]
    InvalidMarginals(String),
    #[error("alignment loss needs at least 3 text positions, got {0}")]
    TooShort(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, OtError>;

/// T_t x T_a matrix of cosine distances, every entry in [0, 2].
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(pub Array);

impl CostMatrix {
    /// Evaluates the cosine cost on plain values.
    pub fn from_features(z: &Array, h: &Array) -> Result<Self> {
        let g = Graph::new();
        let (zv, hv) = (g.constant(z.clone()), g.constant(h.clone()));
        let c = cosine_cost(&g, zv, hv)?;
        Ok(CostMatrix(g.value(c).mapv(|v| v.clamp(0.0, 2.0))))
    }

    pub fn values(&self) -> &Array {
        &self.0
    }
}

fn check_norms(input: &'static str, a: &Array) -> Result<()> {
    for (row, r) in a.rows().into_iter().enumerate() {
        if r.dot(&r) == 0.0 {
            return Err(OtError::ZeroNorm { input, row });
        }
    }
    Ok(())
}

/// `C[i][j] = 1 - cos(z_i, h_j)`, differentiable in both inputs.
pub fn cosine_cost(g: &Graph, z: Var, h: Var) -> Result<Var> {
    let (zs, hs) = (g.shape(z), g.shape(h));
    if zs.1 != hs.1 {
        return Err(GraphError::Shape {
            op: "cosine_cost",
            lhs: zs,
            rhs: hs,
        }
        .into());
    }
    check_norms("Z", &g.value(z))?;
    check_norms("H", &g.value(h))?;
    let zn = g.row_normalize(z)?;
    let hn = g.row_normalize(h)?;
    let cos = g.matmul(zn, g.transpose(hn))?;
    Ok(g.add_scalar(g.scale(cos, -1.0), 1.0))
}

/// Entropy `-sum g (ln g - 1)`, with `0 ln 0 = 0`.
pub fn entropy(gamma: &Array) -> f64 {
    -gamma
        .iter()
        .map(|&v| if v > 0.0 { v * (v.ln() - 1.0) } else { 0.0 })
        .sum::<f64>()
}

/// Row and column mass of a coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub row: Vec<f64>,
    pub col: Vec<f64>,
}

impl Marginals {
    pub fn uniform(rows: usize, cols: usize) -> Self {
        Self {
            row: vec![1.0 / rows as f64; rows],
            col: vec![1.0 / cols as f64; cols],
        }
    }

    fn validate(&self, shape: (usize, usize)) -> Result<()> {
        if self.row.len() != shape.0 || self.col.len() != shape.1 {
            return Err(OtError::InvalidMarginals(format!(
                "lengths {}x{} for a {}x{} cost",
                self.row.len(),
                self.col.len(),
                shape.0,
                shape.1
            )));
        }
        for (name, m) in [("row", &self.row), ("column", &self.col)] {
            if m.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(OtError::InvalidMarginals(format!(
                    "{name} marginal must be strictly positive"
                )));
            }
            let total: f64 = m.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(OtError::InvalidMarginals(format!(
                    "{name} marginal sums to {total}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub gamma: Array,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
}

impl Coupling {
    /// Largest deviation of any row or column sum from its marginal.
    pub fn max_violation(&self) -> f64 {
        let rows = self.gamma.sum_axis(Axis(1));
        let cols = self.gamma.sum_axis(Axis(0));
        let r = rows
            .iter()
            .zip(&self.row_marginal)
            .map(|(s, m)| (s - m).abs());
        let c = cols
            .iter()
            .zip(&self.col_marginal)
            .map(|(s, m)| (s - m).abs());
        r.chain(c).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub alpha: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            max_iter: 1000,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EotResult {
    pub coupling: Coupling,
    /// `<gamma, C>`
    pub transport_cost: f64,
    pub entropy: f64,
    /// `transport_cost - alpha * entropy`
    pub eot_loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn iterations for the entropic coupling.
///
/// Each iteration rescales rows then columns through the dual potentials
/// `f`, `g`, so after an iteration the column sums are exact and
/// convergence is judged on the row sums. An exhausted budget is not an
/// error: the result carries `converged = false`.
pub fn sinkhorn(cost: &CostMatrix, marginals: &Marginals, cfg: &SinkhornConfig) -> Result<EotResult> {
    let c = cost.values();
    let (rows, cols) = c.dim();
    if !(cfg.alpha > 0.0) || !cfg.alpha.is_finite() {
        return Err(OtError::InvalidSetting(format!("alpha must be positive, got {}", cfg.alpha)));
    }
    if !(cfg.tol > 0.0) {
        return Err(OtError::InvalidSetting(format!("tol must be positive, got {}", cfg.tol)));
    }
    if rows == 0 || cols == 0 {
        return Err(OtError::InvalidSetting(format!("empty {rows}x{cols} cost")));
    }
    if let Some(((row, col), _)) = c.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(OtError::NonFiniteCost { row, col });
    }
    marginals.validate((rows, cols))?;

    let alpha = cfg.alpha;
    let log_a: Vec<f64> = marginals.row.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = marginals.col.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; rows];
    let mut g = vec![0.0; cols];

    let plan = |f: &[f64], g: &[f64]| {
        Array::from_shape_fn((rows, cols), |(i, j)| ((f[i] + g[j] - c[[i, j]]) / alpha).exp())
    };

    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        iterations += 1;
        for i in 0..rows {
            let lse = log_sum_exp((0..cols).map(|j| (g[j] - c[[i, j]]) / alpha));
            f[i] = alpha * (log_a[i] - lse);
        }
        for j in 0..cols {
            let lse = log_sum_exp((0..rows).map(|i| (f[i] - c[[i, j]]) / alpha));
            g[j] = alpha * (log_b[j] - lse);
        }
        let violation = (0..rows)
            .map(|i| {
                let s: f64 = (0..cols)
                    .map(|j| ((f[i] + g[j] - c[[i, j]]) / alpha).exp())
                    .sum();
                (s - marginals.row[i]).abs()
            })
            .fold(0.0, f64::max);
        if violation <= cfg.tol {
            converged = true;
            break;
        }
    }
    probe::record_sinkhorn(iterations);

    let gamma = plan(&f, &g);
    let transport_cost = (&gamma * c).sum();
    let h = entropy(&gamma);
    Ok(EotResult {
        coupling: Coupling {
            gamma,
            row_marginal: marginals.row.clone(),
            col_marginal: marginals.col.clone(),
        },
        transport_cost,
        entropy: h,
        eot_loss: transport_cost - alpha * h,
        iterations,
        converged,
    })
}

/// `gamma * H`: each text position receives the coupling-weighted sum of
/// acoustic rows. The coupling is held constant.
pub fn project(g: &Graph, coupling: &Coupling, h: Var) -> Result<Var> {
    let gamma = g.constant(coupling.gamma.clone());
    g.matmul(gamma, h).map_err(|e| match e {
        GraphError::Shape { lhs, rhs, .. } => GraphError::Shape {
            op: "project",
            lhs,
            rhs,
        }
        .into(),
        other => other.into(),
    })
}

/// `<gamma, C>` with the coupling held constant, minus the constant
/// entropy term: the EOT loss as a differentiable function of the cost.
pub fn eot_term(g: &Graph, cost: Var, result: &EotResult, alpha: f64) -> Result<Var> {
    let gamma = g.constant(result.coupling.gamma.clone());
    let transport = g.sum(g.mul(gamma, cost)?);
    Ok(g.add_scalar(transport, -alpha * result.entropy))
}

/// `sum over interior positions i of (1 - cos(z_i, z~_i))`; the first and
/// last rows (the sequence delimiters) are excluded.
pub fn alignment_loss(g: &Graph, z: Var, z_tilde: Var) -> Result<Var> {
    let (zs, ts) = (g.shape(z), g.shape(z_tilde));
    if zs != ts {
        return Err(GraphError::Shape {
            op: "alignment_loss",
            lhs: zs,
            rhs: ts,
        }
        .into());
    }
    let n = zs.0;
    if n < 3 {
        return Err(OtError::TooShort(n));
    }
    let zi = g.row_slice(z, 1, n - 2)?;
    let ti = g.row_slice(z_tilde, 1, n - 2)?;
    check_norms("Z", &g.value(zi))?;
    check_norms("Z_tilde", &g.value(ti))?;
    let cos = g.row_sum(g.mul(g.row_normalize(zi)?, g.row_normalize(ti)?)?);
    Ok(g.add_scalar(g.scale(g.sum(cos), -1.0), (n - 2) as f64))
}
