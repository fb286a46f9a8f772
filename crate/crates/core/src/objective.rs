//! Covariance-weighted geodesic loss on SE(3).
//!
//! The residual between a predicted twist and a ground-truth relative pose is
//! `g = log(exp(xi) * T*^-1)` and the loss is `0.5 * g^T Sigma^-1 g`, with
//! `Sigma` the empirical covariance of the ground-truth twists.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix6, Vector6};

use crate::error::{Error, Result};
use crate::se3::{self, Pose, Twist};

/// Empirical twist covariance plus the regularized inverse used for weighting.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceMatrix {
    sigma: Matrix6<f64>,
    sigma_inv: Matrix6<f64>,
    epsilon: f64,
    mean_twist: Twist,
}

impl CovarianceMatrix {
    /// Builds the weighting from a covariance, inverting `sigma + epsilon * I`.
    pub fn new(sigma: Matrix6<f64>, epsilon: f64, mean_twist: Twist) -> Result<Self> {
        if !(epsilon >= 0.0) || !sigma.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument(
                "covariance and epsilon must be finite, epsilon >= 0".into(),
            ));
        }
        if (sigma - sigma.transpose()).amax() > 1e-10 {
            return Err(Error::InvalidArgument("covariance is not symmetric".into()));
        }
        let regularized = sigma + Matrix6::identity() * epsilon;
        let chol = regularized.cholesky().ok_or_else(|| {
            Error::InvalidArgument("regularized covariance is not positive definite".into())
        })?;
        let inv = chol.inverse();
        let sigma_inv = 0.5 * (inv + inv.transpose());
        Ok(CovarianceMatrix {
            sigma,
            sigma_inv,
            epsilon,
            mean_twist,
        })
    }

    /// Unit weighting: `Sigma = I`, no regularization.
    pub fn identity() -> Self {
        CovarianceMatrix::new(Matrix6::identity(), 0.0, Twist::zero()).expect("identity is SPD")
    }

    pub fn sigma(&self) -> &Matrix6<f64> {
        &self.sigma
    }

    pub fn sigma_inv(&self) -> &Matrix6<f64> {
        &self.sigma_inv
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn mean_twist(&self) -> &Twist {
        &self.mean_twist
    }

    /// Plain-text form: epsilon, mean twist, then the 6x6 covariance row-major.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# twist covariance, ordering [vx vy vz wx wy wz]\n");
        let _ = writeln!(s, "epsilon {:e}", self.epsilon);
        let mean: Vec<String> = self.mean_twist.to_array().iter().map(|x| format!("{x:e}")).collect();
        let _ = writeln!(s, "mean {}", mean.join(" "));
        for r in 0..6 {
            let row: Vec<String> = (0..6).map(|c| format!("{:e}", self.sigma[(r, c)])).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, message: &str| Error::Parse {
            path: "<covariance>".into(),
            line,
            message: message.to_string(),
        };
        let mut epsilon = None;
        let mut mean = None;
        let mut rows: Vec<[f64; 6]> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut tokens = line.split_whitespace().peekable();
            let head = *tokens.peek().unwrap();
            let numbers = |it: &mut dyn Iterator<Item = &str>| -> Result<Vec<f64>> {
                it.map(|t| t.parse::<f64>().map_err(|_| bad(i + 1, "not a number")))
                    .collect()
            };
            match head {
                "epsilon" => {
                    tokens.next();
                    let v = numbers(&mut tokens)?;
                    if v.len() != 1 {
                        return Err(bad(i + 1, "epsilon takes one value"));
                    }
                    epsilon = Some(v[0]);
                }
                "mean" => {
                    tokens.next();
                    mean = Some(Twist::from_slice(&numbers(&mut tokens)?).map_err(|_| bad(i + 1, "mean needs 6 values"))?);
                }
                _ => {
                    let v = numbers(&mut tokens)?;
                    let row: [f64; 6] = v.try_into().map_err(|_| bad(i + 1, "row needs 6 values"))?;
                    rows.push(row);
                }
            }
        }
        if rows.len() != 6 {
            return Err(bad(0, "expected 6 covariance rows"));
        }
        let sigma = Matrix6::from_fn(|r, c| rows[r][c]);
        CovarianceMatrix::new(
            sigma,
            epsilon.ok_or_else(|| bad(0, "missing epsilon"))?,
            mean.ok_or_else(|| bad(0, "missing mean"))?,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        CovarianceMatrix::from_text(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }
}

/// Loss and the residual twist it was computed from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub residual: Twist,
}

/// `log(exp(xi) * inverse(target))`.
pub fn residual(xi: &Twist, target: &Pose) -> Result<Twist> {
    let estimate = se3::exp_map(xi)?;
    se3::log_map(&estimate.compose(&target.inverse()))
}

pub fn loss(xi: &Twist, target: &Pose, cov: &CovarianceMatrix) -> Result<LossValue> {
    let g = residual(xi, target)?;
    Ok(LossValue {
        value: quadratic(&g, cov),
        residual: g,
    })
}

fn quadratic(g: &Twist, cov: &CovarianceMatrix) -> f64 {
    let g = g.as_vector();
    0.5 * g.dot(&(cov.sigma_inv * g))
}

/// Loss together with its gradient with respect to the predicted twist.
///
/// With `g = log(exp(xi) C)`, a perturbation `d` of `xi` moves the residual by
/// `J_l(g)^-1 J_l(xi) d`, so the gradient is `(J_l(g)^-1 J_l(xi))^T Sigma^-1 g`.
pub fn loss_with_gradient(
    xi: &Twist,
    target: &Pose,
    cov: &CovarianceMatrix,
) -> Result<(LossValue, Vector6<f64>)> {
    let value = loss(xi, target, cov)?;
    let g = &value.residual;
    let jacobian = se3::left_jacobian_inverse(g) * se3::left_jacobian(xi);
    let grad = jacobian.transpose() * (cov.sigma_inv * g.as_vector());
    Ok((value, grad))
}

/// Regularization added to the covariance diagonal before inversion.
pub fn default_epsilon(sigma: &Matrix6<f64>) -> f64 {
    1e-6 * (sigma.trace() / 6.0).max(1e-12)
}

/// Unbiased sample covariance of the twists, regularized by `epsilon`.
pub fn fit_covariance(twists: &[Twist], epsilon: f64) -> Result<CovarianceMatrix> {
    let (sigma, mean) = sample_covariance(twists)?;
    CovarianceMatrix::new(sigma, epsilon, mean)
}

/// [`fit_covariance`] with the trace-scaled default regularization.
pub fn fit_covariance_default(twists: &[Twist]) -> Result<CovarianceMatrix> {
    let (sigma, mean) = sample_covariance(twists)?;
    CovarianceMatrix::new(sigma, default_epsilon(&sigma), mean)
}

fn sample_covariance(twists: &[Twist]) -> Result<(Matrix6<f64>, Twist)> {
    let n = twists.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "covariance needs at least 2 twists, got {n}"
        )));
    }
    if let Some(bad) = twists.iter().position(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument(format!("twist {bad} is not finite")));
    }
    // Sort so the accumulation order, and therefore the rounding, does not
    // depend on sample order.
    let mut sorted: Vec<[f64; 6]> = twists.iter().map(Twist::to_array).collect();
    sorted.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    // Work with offsets from the first sample so identical samples give an
    // exactly zero covariance.
    let origin = Vector6::from_column_slice(&sorted[0]);
    let mut shift = Vector6::zeros();
    for t in &sorted {
        shift += Vector6::from_column_slice(t) - origin;
    }
    shift /= n as f64;
    let mut sigma = Matrix6::zeros();
    for t in &sorted {
        let d = Vector6::from_column_slice(t) - origin - shift;
        sigma += d * d.transpose();
    }
    let mean = origin + shift;
    sigma /= (n - 1) as f64;
    // Outer products are symmetric term by term, so this only removes rounding.
    let sigma = 0.5 * (sigma + sigma.transpose());
    Ok((sigma, Twist::from_vector(mean)))
}
