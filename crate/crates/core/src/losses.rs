//! Pretraining objectives with analytic gradients.
//!
//! All losses work on `f64` feature matrices with one row per sample. Every
//! `*_grad` function returns the loss value together with its gradient with
//! respect to each input matrix.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};

/// Loss weights and VC regularization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Decomposition weight.
    pub alpha: f64,
    /// Composition weight.
    pub beta: f64,
    /// Weight of the variance term inside each VC regularizer.
    pub lambda: f64,
    /// Target standard deviation of the variance hinge.
    pub gamma: f64,
    /// Stabilizer inside the standard deviation.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda: 5.0,
            gamma: 1.0,
            epsilon: 1e-4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Temporal and spatial feature matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamPair {
    pub temporal: Array2<f64>,
    pub spatial: Array2<f64>,
}

impl StreamPair {
    pub fn zeros_like(other: &StreamPair) -> Self {
        Self {
            temporal: Array2::zeros(other.temporal.raw_dim()),
            spatial: Array2::zeros(other.spatial.raw_dim()),
        }
    }
}

/// Projector outputs of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityProjections {
    pub modality: Modality,
    /// `z^k`: the modality's own representation through its head.
    pub unimodal: StreamPair,
    /// `z~^k`: the fused representation through the modality's head.
    pub decomposed: StreamPair,
}

/// Every projected feature matrix of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedFeatures {
    pub modalities: Vec<ModalityProjections>,
    /// `z_t, z_s`: late-fused composition through the multimodal heads.
    pub composed: StreamPair,
    /// `z~_t, z~_s`: the fused representation through the multimodal heads.
    pub fused: StreamPair,
}

impl ProjectedFeatures {
    pub fn zeros_like(other: &ProjectedFeatures) -> Self {
        Self {
            modalities: other
                .modalities
                .iter()
                .map(|m| ModalityProjections {
                    modality: m.modality,
                    unimodal: StreamPair::zeros_like(&m.unimodal),
                    decomposed: StreamPair::zeros_like(&m.decomposed),
                })
                .collect(),
            composed: StreamPair::zeros_like(&other.composed),
            fused: StreamPair::zeros_like(&other.fused),
        }
    }

    /// Named references to all `4M + 4` matrices, in regularization order.
    pub fn matrices(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::with_capacity(4 * self.modalities.len() + 4);
        for m in &self.modalities {
            let k = m.modality.name();
            out.push((format!("Z_t[{k}]"), &m.unimodal.temporal));
            out.push((format!("Z~_t[{k}]"), &m.decomposed.temporal));
            out.push((format!("Z_s[{k}]"), &m.unimodal.spatial));
            out.push((format!("Z~_s[{k}]"), &m.decomposed.spatial));
        }
        out.push(("Z_t".into(), &self.composed.temporal));
        out.push(("Z_s".into(), &self.composed.spatial));
        out.push(("Z~_t".into(), &self.fused.temporal));
        out.push(("Z~_s".into(), &self.fused.spatial));
        out
    }

    /// Mutable references in the same order as [`Self::matrices`].
    pub fn matrices_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::with_capacity(4 * self.modalities.len() + 4);
        for m in &mut self.modalities {
            out.push(&mut m.unimodal.temporal);
            out.push(&mut m.decomposed.temporal);
            out.push(&mut m.unimodal.spatial);
            out.push(&mut m.decomposed.spatial);
        }
        out.push(&mut self.composed.temporal);
        out.push(&mut self.composed.spatial);
        out.push(&mut self.fused.temporal);
        out.push(&mut self.fused.spatial);
        out
    }

    fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::shape("projected features contain no modality"));
        }
        let mats = self.matrices();
        let dim = mats[0].1.dim();
        for (name, m) in &mats {
            if m.dim() != dim {
                return Err(Error::shape(format!("{name} has shape {:?}, expected {dim:?}", m.dim())));
            }
        }
        Ok(())
    }
}

/// One VC regularizer evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegTerm {
    pub name: String,
    pub variance: f64,
    pub covariance: f64,
    /// `lambda * variance + covariance`.
    pub value: f64,
}

/// Every term of the objective.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_d_t")]
    pub l_d_t: f64,
    #[serde(rename = "L_d_s")]
    pub l_d_s: f64,
    #[serde(rename = "L_d")]
    pub l_d: f64,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    #[serde(rename = "L_reg")]
    pub l_reg: f64,
    pub total: f64,
    pub reg_terms: Vec<RegTerm>,
}

impl LossBreakdown {
    /// Element-wise mean of several breakdowns with identical structure.
    pub fn mean(parts: &[LossBreakdown]) -> LossBreakdown {
        let n = parts.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
        let reg_terms = match parts.first() {
            Some(first) => (0..first.reg_terms.len())
                .map(|i| RegTerm {
                    name: first.reg_terms[i].name.clone(),
                    variance: parts.iter().map(|p| p.reg_terms[i].variance).sum::<f64>() / n,
                    covariance: parts.iter().map(|p| p.reg_terms[i].covariance).sum::<f64>() / n,
                    value: parts.iter().map(|p| p.reg_terms[i].value).sum::<f64>() / n,
                })
                .collect(),
            None => Vec::new(),
        };
        LossBreakdown {
            l_d_t: avg(|p| p.l_d_t),
            l_d_s: avg(|p| p.l_d_s),
            l_d: avg(|p| p.l_d),
            l_c: avg(|p| p.l_c),
            l_reg: avg(|p| p.l_reg),
            total: avg(|p| p.total),
            reg_terms,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_d_t, self.l_d_s, self.l_d, self.l_c, self.l_reg, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

fn check_same_shape(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Err(Error::shape("feature matrices need at least one row"));
    }
    Ok(())
}

fn check_rows(z: ArrayView2<f64>) -> Result<()> {
    if z.nrows() < 2 {
        return Err(Error::Numerical(format!(
            "variance is undefined for {} sample(s); need at least 2",
            z.nrows()
        )));
    }
    Ok(())
}

fn centered(z: ArrayView2<f64>) -> Array2<f64> {
    let mean = z.mean_axis(Axis(0)).expect("nonempty");
    &z - &mean
}

/// `(1/N) sum_i ||a_i - b_i||^2`.
pub fn mse_align(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.nrows() as f64;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Value and gradient with respect to `a`; the gradient for `b` is its negation.
pub fn mse_align_grad(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let v = mse_align(a, b)?;
    let n = a.nrows() as f64;
    Ok((v, (&a - &b) * (2.0 / n)))
}

/// Mean over columns of `max(0, gamma - sqrt(var_j + eps))`, unbiased variance.
pub fn variance_term(z: ArrayView2<f64>, gamma: f64, eps: f64) -> Result<f64> {
    variance_term_grad(z, gamma, eps).map(|(v, _)| v)
}

pub fn variance_term_grad(z: ArrayView2<f64>, gamma: f64, eps: f64) -> Result<(f64, Array2<f64>)> {
    check_rows(z)?;
    let (n, d) = z.dim();
    let zc = centered(z);
    let var = zc.mapv(|x| x * x).sum_axis(Axis(0)) / (n as f64 - 1.0);
    let std = var.mapv(|v| (v + eps).sqrt());
    let value = std.iter().map(|&s| (gamma - s).max(0.0)).sum::<f64>() / d as f64;
    // d/dz_ij of -(gamma - S_j)/D is -(z_ij - mean_j) / ((N-1) S_j D) when active.
    let coef = std.mapv(|s| {
        if gamma - s > 0.0 {
            -1.0 / ((n as f64 - 1.0) * s * d as f64)
        } else {
            0.0
        }
    });
    Ok((value, zc * &coef))
}

/// `(1/D) sum_{i != j} Cov(Z)_{ij}^2` with the `1/(N-1)` covariance estimator.
pub fn covariance_term(z: ArrayView2<f64>) -> Result<f64> {
    check_rows(z)?;
    let (n, d) = z.dim();
    let zc = centered(z);
    let cov = zc.t().dot(&zc) / (n as f64 - 1.0);
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                s += cov[[i, j]] * cov[[i, j]];
            }
        }
    }
    Ok(s / d as f64)
}

pub fn covariance_term_grad(z: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    check_rows(z)?;
    let (n, d) = z.dim();
    let zc = centered(z);
    let mut cov = zc.t().dot(&zc) / (n as f64 - 1.0);
    for i in 0..d {
        cov[[i, i]] = 0.0;
    }
    let value = cov.mapv(|x| x * x).sum() / d as f64;
    // Columns of zc sum to zero, so the mean-subtraction path contributes nothing.
    let grad = zc.dot(&cov) * (4.0 / (d as f64 * (n as f64 - 1.0)));
    Ok((value, grad))
}

/// `lambda * variance_term + covariance_term`.
pub fn vc_loss(z: ArrayView2<f64>, cfg: &LossConfig) -> Result<f64> {
    Ok(cfg.lambda * variance_term(z, cfg.gamma, cfg.epsilon)? + covariance_term(z)?)
}

fn vc_term_grad(name: String, z: ArrayView2<f64>, cfg: &LossConfig) -> Result<(RegTerm, Array2<f64>)> {
    let (v, gv) = variance_term_grad(z, cfg.gamma, cfg.epsilon)?;
    let (c, gc) = covariance_term_grad(z)?;
    let term = RegTerm {
        name,
        variance: v,
        covariance: c,
        value: cfg.lambda * v + c,
    };
    Ok((term, gv * cfg.lambda + gc))
}

/// `(L_d^t, L_d^s, L_d)`; modality terms are summed, not averaged.
pub fn decomposition_loss(p: &ProjectedFeatures) -> Result<(f64, f64, f64)> {
    p.validate()?;
    let mut t = 0.0;
    let mut s = 0.0;
    for m in &p.modalities {
        t += mse_align(m.unimodal.temporal.view(), m.decomposed.temporal.view())?;
        s += mse_align(m.unimodal.spatial.view(), m.decomposed.spatial.view())?;
    }
    Ok((t, s, t + s))
}

/// `L_c`: composed targets against fused projections, both streams.
pub fn composition_loss(p: &ProjectedFeatures) -> Result<f64> {
    p.validate()?;
    Ok(mse_align(p.composed.temporal.view(), p.fused.temporal.view())?
        + mse_align(p.composed.spatial.view(), p.fused.spatial.view())?)
}

/// Sum of VC regularizers over all `4M + 4` matrices.
pub fn regularization_loss(p: &ProjectedFeatures, cfg: &LossConfig) -> Result<f64> {
    p.validate()?;
    p.matrices()
        .into_iter()
        .map(|(_, z)| vc_loss(z.view(), cfg))
        .sum()
}

/// Assembles `total = alpha L_d + beta L_c + L_reg`.
pub fn total_loss(p: &ProjectedFeatures, cfg: &LossConfig) -> Result<LossBreakdown> {
    total_loss_grad(p, cfg).map(|(b, _)| b)
}

/// Breakdown plus the gradient of `total` with respect to every matrix.
pub fn total_loss_grad(p: &ProjectedFeatures, cfg: &LossConfig) -> Result<(LossBreakdown, ProjectedFeatures)> {
    p.validate()?;
    let mut g = ProjectedFeatures::zeros_like(p);
    let mut out = LossBreakdown::default();

    for (m, gm) in p.modalities.iter().zip(g.modalities.iter_mut()) {
        let (vt, dt) = mse_align_grad(m.unimodal.temporal.view(), m.decomposed.temporal.view())?;
        let (vs, ds) = mse_align_grad(m.unimodal.spatial.view(), m.decomposed.spatial.view())?;
        out.l_d_t += vt;
        out.l_d_s += vs;
        gm.unimodal.temporal.scaled_add(cfg.alpha, &dt);
        gm.decomposed.temporal.scaled_add(-cfg.alpha, &dt);
        gm.unimodal.spatial.scaled_add(cfg.alpha, &ds);
        gm.decomposed.spatial.scaled_add(-cfg.alpha, &ds);
    }
    out.l_d = out.l_d_t + out.l_d_s;

    let (ct, dct) = mse_align_grad(p.composed.temporal.view(), p.fused.temporal.view())?;
    let (cs, dcs) = mse_align_grad(p.composed.spatial.view(), p.fused.spatial.view())?;
    out.l_c = ct + cs;
    g.composed.temporal.scaled_add(cfg.beta, &dct);
    g.fused.temporal.scaled_add(-cfg.beta, &dct);
    g.composed.spatial.scaled_add(cfg.beta, &dcs);
    g.fused.spatial.scaled_add(-cfg.beta, &dcs);

    let named = p.matrices();
    let mut grads = g.matrices_mut();
    for ((name, z), gz) in named.into_iter().zip(grads.iter_mut()) {
        let (term, dz) = vc_term_grad(name, z.view(), cfg)?;
        out.l_reg += term.value;
        out.reg_terms.push(term);
        **gz += &dz;
    }
    out.total = cfg.alpha * out.l_d + cfg.beta * out.l_c + out.l_reg;
    Ok((out, g))
}

/// Global (stream-agnostic) projections used by the single-stream baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalProjection {
    pub modality: Modality,
    /// `z^k` from the modality's global feature.
    pub unimodal: Array2<f64>,
    /// `z~^k` from the fused global feature.
    pub decomposed: Array2<f64>,
}

/// Baseline objective: `alpha L_d + sum_k (L_vc(Z^k) + L_vc(Z~^k))` on
/// global features; there is no composition term.
pub fn baseline_loss_grad(p: &[GlobalProjection], cfg: &LossConfig) -> Result<(LossBreakdown, Vec<(Array2<f64>, Array2<f64>)>)> {
    if p.is_empty() {
        return Err(Error::shape("baseline projections contain no modality"));
    }
    let mut out = LossBreakdown::default();
    let mut grads = Vec::with_capacity(p.len());
    for m in p {
        let (v, d) = mse_align_grad(m.unimodal.view(), m.decomposed.view())?;
        out.l_d += v;
        let mut gu = d.clone() * cfg.alpha;
        let mut gd = d * (-cfg.alpha);
        let k = m.modality.name();
        let (tu, du) = vc_term_grad(format!("Z[{k}]"), m.unimodal.view(), cfg)?;
        let (td, dd) = vc_term_grad(format!("Z~[{k}]"), m.decomposed.view(), cfg)?;
        out.l_reg += tu.value + td.value;
        out.reg_terms.push(tu);
        out.reg_terms.push(td);
        gu += &du;
        gd += &dd;
        grads.push((gu, gd));
    }
    out.total = cfg.alpha * out.l_d + out.l_reg;
    Ok((out, grads))
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Scalar-loop reference implementations, independent of the
    //! vectorized code above.
    use ndarray::Array2;

    pub fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let (n, d) = a.dim();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..d {
                let diff = a[[i, j]] - b[[i, j]];
                s += diff * diff;
            }
        }
        s / n as f64
    }

    fn col_mean(z: &Array2<f64>, j: usize) -> f64 {
        let n = z.nrows();
        let mut s = 0.0;
        for i in 0..n {
            s += z[[i, j]];
        }
        s / n as f64
    }

    pub fn variance(z: &Array2<f64>, gamma: f64, eps: f64) -> f64 {
        let (n, d) = z.dim();
        let mut total = 0.0;
        for j in 0..d {
            let m = col_mean(z, j);
            let mut ss = 0.0;
            for i in 0..n {
                ss += (z[[i, j]] - m) * (z[[i, j]] - m);
            }
            let s = (ss / (n as f64 - 1.0) + eps).sqrt();
            if gamma - s > 0.0 {
                total += gamma - s;
            }
        }
        total / d as f64
    }

    pub fn covariance(z: &Array2<f64>) -> f64 {
        let (n, d) = z.dim();
        let means: Vec<f64> = (0..d).map(|j| col_mean(z, j)).collect();
        let mut total = 0.0;
        for a in 0..d {
            for b in 0..d {
                if a == b {
                    continue;
                }
                let mut cov = 0.0;
                for i in 0..n {
                    cov += (z[[i, a]] - means[a]) * (z[[i, b]] - means[b]);
                }
                cov /= n as f64 - 1.0;
                total += cov * cov;
            }
        }
        total / d as f64
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn rand_mat(n: usize, d: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5))
    }

    pub fn random_projected(n_mod: usize, n: usize, d: usize, seed: u64) -> ProjectedFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = |rng: &mut ChaCha8Rng| StreamPair {
            temporal: rand_mat(n, d, rng),
            spatial: rand_mat(n, d, rng),
        };
        ProjectedFeatures {
            modalities: Modality::ALL[..n_mod]
                .iter()
                .map(|&m| ModalityProjections {
                    modality: m,
                    unimodal: pair(&mut rng),
                    decomposed: pair(&mut rng),
                })
                .collect(),
            composed: pair(&mut rng),
            fused: pair(&mut rng),
        }
    }

    /// Rows with zero column means, orthogonal columns and unit sample sd.
    pub fn whitened(n: usize, d: usize, seed: u64) -> Array2<f64> {
        assert!(n > d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = rand_mat(n, d, &mut rng);
        // Gram-Schmidt against the ones vector and previous columns.
        let ones = Array2::from_elem((n, 1), 1.0 / (n as f64).sqrt());
        for j in 0..d {
            let mut col = z.column(j).to_owned();
            let dot = col.dot(&ones.column(0));
            col.scaled_add(-dot, &ones.column(0));
            for k in 0..j {
                let prev = z.column(k).to_owned();
                let dot = col.dot(&prev);
                col.scaled_add(-dot, &prev);
            }
            let norm = col.dot(&col).sqrt();
            z.column_mut(j).assign(&(col / norm));
        }
        z * (n as f64 - 1.0).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_examples() {
        let a = Array2::<f64>::zeros((1, 2));
        let b = array![[3.0, 4.0]];
        assert_eq!(mse_align(a.view(), b.view()).unwrap(), 25.0);
        assert_eq!(mse_align(b.view(), b.view()).unwrap(), 0.0);
        assert!(matches!(mse_align(a.view(), Array2::zeros((2, 2)).view()), Err(Error::Shape(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(8, 16, &mut rng);
        let b = rand_mat(8, 16, &mut rng);
        assert_relative_eq!(mse_align(a.view(), b.view()).unwrap(), oracle::mse(&a, &b), max_relative = 1e-9);
    }

    #[test]
    fn variance_examples() {
        let z = Array2::from_elem((6, 4), 0.3);
        assert_relative_eq!(variance_term(z.view(), 1.0, 1e-4).unwrap(), 0.99, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let wide = rand_mat(16, 8, &mut rng) * 20.0;
        assert_eq!(variance_term(wide.view(), 1.0, 1e-4).unwrap(), 0.0);

        let r = rand_mat(16, 8, &mut rng);
        assert_relative_eq!(
            variance_term(r.view(), 1.0, 1e-4).unwrap(),
            oracle::variance(&r, 1.0, 1e-4),
            max_relative = 1e-10
        );

        assert!(matches!(variance_term(Array2::zeros((1, 3)).view(), 1.0, 1e-4), Err(Error::Numerical(_))));
    }

    #[test]
    fn covariance_examples() {
        let w = whitened(12, 5, 3);
        assert!(covariance_term(w.view()).unwrap() < 1e-12);

        // Duplicate column with unit sample variance.
        let col = whitened(10, 1, 4);
        let mut z = Array2::zeros((10, 2));
        z.column_mut(0).assign(&col.column(0));
        z.column_mut(1).assign(&col.column(0));
        assert_relative_eq!(covariance_term(z.view()).unwrap(), 1.0, max_relative = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = rand_mat(16, 8, &mut rng);
        assert_relative_eq!(covariance_term(r.view()).unwrap(), oracle::covariance(&r), max_relative = 1e-10);
        assert!(covariance_term(Array2::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn vc_examples() {
        let cfg = LossConfig::default();
        let z = Array2::from_elem((5, 3), -1.0);
        assert_relative_eq!(vc_loss(z.view(), &cfg).unwrap(), 4.95, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = rand_mat(9, 4, &mut rng);
        let no_var = LossConfig { lambda: 0.0, ..cfg };
        assert_eq!(vc_loss(r.view(), &no_var).unwrap(), covariance_term(r.view()).unwrap());

        let w = whitened(20, 6, 7);
        assert!(vc_loss(w.view(), &cfg).unwrap() < 1e-8);
    }

    #[test]
    fn decomposition_examples() {
        let mut p = random_projected(3, 4, 8, 8);
        for m in &mut p.modalities {
            m.decomposed = m.unimodal.clone();
        }
        assert_eq!(decomposition_loss(&p).unwrap(), (0.0, 0.0, 0.0));

        // Only the temporal pairs differ.
        p.modalities[1].decomposed.temporal[[0, 0]] += 1.0;
        let (t, s, d) = decomposition_loss(&p).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(t, d);
        assert_relative_eq!(t, 0.25);

        let p = random_projected(3, 4, 8, 9);
        let (t, s, _) = decomposition_loss(&p).unwrap();
        let ot: f64 = p.modalities.iter().map(|m| oracle::mse(&m.unimodal.temporal, &m.decomposed.temporal)).sum();
        let os: f64 = p.modalities.iter().map(|m| oracle::mse(&m.unimodal.spatial, &m.decomposed.spatial)).sum();
        assert_relative_eq!(t, ot, max_relative = 1e-9);
        assert_relative_eq!(s, os, max_relative = 1e-9);
    }

    #[test]
    fn composition_examples() {
        let mut p = random_projected(3, 4, 8, 10);
        p.fused = p.composed.clone();
        assert_eq!(composition_loss(&p).unwrap(), 0.0);

        p.fused.temporal = p.composed.temporal.clone() + 0.5;
        assert_relative_eq!(
            composition_loss(&p).unwrap(),
            mse_align(p.composed.temporal.view(), p.fused.temporal.view()).unwrap()
        );

        let p = random_projected(3, 4, 8, 11);
        let want = oracle::mse(&p.composed.temporal, &p.fused.temporal) + oracle::mse(&p.composed.spatial, &p.fused.spatial);
        assert_relative_eq!(composition_loss(&p).unwrap(), want, max_relative = 1e-9);
    }

    #[test]
    fn regularization_examples() {
        let cfg = LossConfig::default();
        let mut p = random_projected(3, 20, 6, 12);
        for (i, z) in p.matrices_mut().into_iter().enumerate() {
            *z = whitened(20, 6, 100 + i as u64);
        }
        assert!(regularization_loss(&p, &cfg).unwrap() < 1e-7);

        for z in p.matrices_mut() {
            z.fill(0.25);
        }
        assert_relative_eq!(regularization_loss(&p, &cfg).unwrap(), 79.2, max_relative = 1e-12);

        let p1 = random_projected(1, 6, 4, 13);
        let (b, _) = total_loss_grad(&p1, &cfg).unwrap();
        assert_eq!(b.reg_terms.len(), 8);
        let p3 = random_projected(3, 6, 4, 13);
        assert_eq!(total_loss(&p3, &cfg).unwrap().reg_terms.len(), 16);
    }

    #[test]
    fn total_examples() {
        let p = random_projected(3, 6, 5, 14);
        let zero = LossConfig {
            alpha: 0.0,
            beta: 0.0,
            ..Default::default()
        };
        let b = total_loss(&p, &zero).unwrap();
        assert_eq!(b.total, b.l_reg);

        let cfg = LossConfig::default();
        let b = total_loss(&p, &cfg).unwrap();
        assert_relative_eq!(b.total, b.l_d + b.l_c + b.l_reg, max_relative = 1e-12);
        assert_relative_eq!(b.l_d, b.l_d_t + b.l_d_s);
        assert_relative_eq!(b.l_d, decomposition_loss(&p).unwrap().2, max_relative = 1e-12);
        assert_relative_eq!(b.l_c, composition_loss(&p).unwrap(), max_relative = 1e-12);
        assert_relative_eq!(b.l_reg, regularization_loss(&p, &cfg).unwrap(), max_relative = 1e-12);

        // Perfect alignment with whitened features.
        let mut p = random_projected(3, 20, 6, 15);
        let w = whitened(20, 6, 16);
        for z in p.matrices_mut() {
            *z = w.clone();
        }
        assert!(total_loss(&p, &cfg).unwrap().total <= 1e-6);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut p = random_projected(2, 5, 4, 17);
        p.fused.spatial = Array2::zeros((5, 3));
        assert!(matches!(total_loss(&p, &LossConfig::default()), Err(Error::Shape(_))));
    }

    fn numeric_grads(p: &ProjectedFeatures, cfg: &LossConfig, h: f64) -> ProjectedFeatures {
        let mut g = ProjectedFeatures::zeros_like(p);
        let n_mats = p.matrices().len();
        for m in 0..n_mats {
            let (rows, cols) = p.matrices()[m].1.dim();
            for i in 0..rows {
                for j in 0..cols {
                    let mut up = p.clone();
                    up.matrices_mut()[m][[i, j]] += h;
                    let mut down = p.clone();
                    down.matrices_mut()[m][[i, j]] -= h;
                    let d = (total_loss(&up, cfg).unwrap().total - total_loss(&down, cfg).unwrap().total) / (2.0 * h);
                    g.matrices_mut()[m][[i, j]] = d;
                }
            }
        }
        g
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let cfg = LossConfig {
            alpha: 0.7,
            beta: 1.3,
            ..Default::default()
        };
        let p = random_projected(3, 8, 6, 18);
        let (_, g) = total_loss_grad(&p, &cfg).unwrap();
        let num = numeric_grads(&p, &cfg, 1e-5);
        for ((name, a), (_, b)) in g.matrices().into_iter().zip(num.matrices()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(y.abs()).max(1.0), "{name}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn baseline_gradient_matches_finite_differences() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let p: Vec<GlobalProjection> = Modality::ALL
            .iter()
            .map(|&m| GlobalProjection {
                modality: m,
                unimodal: rand_mat(7, 5, &mut rng),
                decomposed: rand_mat(7, 5, &mut rng),
            })
            .collect();
        let (b, g) = baseline_loss_grad(&p, &cfg).unwrap();
        assert_eq!(b.reg_terms.len(), 6);
        assert_relative_eq!(b.total, b.l_d + b.l_reg, max_relative = 1e-12);
        let f = |p: &[GlobalProjection]| baseline_loss_grad(p, &cfg).unwrap().0.total;
        let h = 1e-5;
        for k in 0..3 {
            for which in 0..2 {
                for i in 0..7 {
                    for j in 0..5 {
                        let bump = |delta: f64| {
                            let mut q = p.clone();
                            let m = if which == 0 { &mut q[k].unimodal } else { &mut q[k].decomposed };
                            m[[i, j]] += delta;
                            f(&q)
                        };
                        let num = (bump(h) - bump(-h)) / (2.0 * h);
                        let ana = if which == 0 { g[k].0[[i, j]] } else { g[k].1[[i, j]] };
                        assert!((num - ana).abs() <= 1e-6 * num.abs().max(1.0), "{num} vs {ana}");
                    }
                }
            }
        }
    }

    fn permute_rows(z: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
        Array2::from_shape_fn(z.raw_dim(), |(i, j)| z[[perm[i], j]])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn terms_are_nonnegative(n in 2usize..10, d in 2usize..8, seed in any::<u64>()) {
            let p = random_projected(3, n, d, seed);
            let b = total_loss(&p, &LossConfig::default()).unwrap();
            prop_assert!(b.l_d_t >= 0.0 && b.l_d_s >= 0.0 && b.l_c >= 0.0 && b.l_reg >= 0.0);
            prop_assert!(b.reg_terms.iter().all(|t| t.variance >= 0.0 && t.covariance >= 0.0));
        }

        #[test]
        fn row_permutation_invariance(n in 2usize..10, d in 2usize..8, seed in any::<u64>()) {
            let p = random_projected(3, n, d, seed);
            let perm: Vec<usize> = (0..n).rev().collect();
            let mut q = p.clone();
            for z in q.matrices_mut() {
                *z = permute_rows(z, &perm);
            }
            let a = total_loss(&p, &LossConfig::default()).unwrap();
            let b = total_loss(&q, &LossConfig::default()).unwrap();
            prop_assert!((a.total - b.total).abs() <= 1e-10 * a.total.abs().max(1.0));
        }

        #[test]
        fn vc_translation_invariance(n in 2usize..12, d in 2usize..8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = rand_mat(n, d, &mut rng);
            let shift = rand_mat(1, d, &mut rng) * 10.0;
            let zs = &z + &shift.row(0);
            prop_assert!((variance_term(z.view(), 1.0, 1e-4).unwrap() - variance_term(zs.view(), 1.0, 1e-4).unwrap()).abs() <= 1e-10);
            prop_assert!((covariance_term(z.view()).unwrap() - covariance_term(zs.view()).unwrap()).abs() <= 1e-10);
        }

        #[test]
        fn covariance_scales_with_fourth_power(n in 2usize..12, d in 2usize..8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = centered(rand_mat(n, d, &mut rng).view());
            let base = covariance_term(z.view()).unwrap();
            let scaled = covariance_term((&z * 2.0).view()).unwrap();
            prop_assert!((scaled - 16.0 * base).abs() <= 1e-8 * scaled.abs().max(1e-12));
        }
    }
}
