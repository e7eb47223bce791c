//! Mapping between models and flat unconstrained parameter vectors.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::basis::{support_from_data, SplineBasis};
use crate::covariate::CovariateTransition;
use crate::emission::TensorEmission;
use crate::error::{Error, Result};
use crate::gaussian::{tri_len, GaussianEmission};
use crate::hmm::{Emission, HmmModel, InitialLaw, SequenceSet, Transition, TransitionMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum EmissionSpec {
    Spline { bases: Vec<SplineBasis> },
    Gaussian { dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransitionSpec {
    Homogeneous,
    Covariate { n_covariates: usize },
}

/// Structure of a model to be fitted: everything except the parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_states: usize,
    pub emission: EmissionSpec,
    pub transition: TransitionSpec,
}

impl ModelSpec {
    /// Spline emissions with bases on the data support (`margin` fraction of the range added per side).
    pub fn spline_for_data(data: &SequenceSet, n_states: usize, num_basis: &[usize], margin: f64) -> Result<Self> {
        let d = data.dim();
        if num_basis.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: num_basis.len(),
                context: "basis counts per dimension".into(),
            });
        }
        let pooled = data.pooled();
        let bases = (0..d)
            .map(|k| {
                let (lo, hi) = support_from_data(pooled.iter().map(|y| y[k]), margin)?;
                SplineBasis::build(k, num_basis[k], lo, hi)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::spline(n_states, bases)
    }

    pub fn spline(n_states: usize, bases: Vec<SplineBasis>) -> Result<Self> {
        if n_states == 0 || bases.is_empty() {
            return Err(Error::invalid("model needs at least one state and one dimension"));
        }
        Ok(ModelSpec {
            n_states,
            emission: EmissionSpec::Spline { bases },
            transition: TransitionSpec::Homogeneous,
        })
    }

    pub fn gaussian(n_states: usize, dim: usize) -> Result<Self> {
        if n_states == 0 || dim == 0 {
            return Err(Error::invalid("model needs at least one state and one dimension"));
        }
        Ok(ModelSpec {
            n_states,
            emission: EmissionSpec::Gaussian { dim },
            transition: TransitionSpec::Homogeneous,
        })
    }

    pub fn with_covariates(mut self, n_covariates: usize) -> Self {
        self.transition = TransitionSpec::Covariate { n_covariates };
        self
    }

    pub fn dim(&self) -> usize {
        match &self.emission {
            EmissionSpec::Spline { bases } => bases.len(),
            EmissionSpec::Gaussian { dim } => *dim,
        }
    }

    pub fn num_basis(&self) -> Option<Vec<usize>> {
        match &self.emission {
            EmissionSpec::Spline { bases } => Some(bases.iter().map(|b| b.num_basis()).collect()),
            EmissionSpec::Gaussian { .. } => None,
        }
    }

    fn emission_block_len(&self) -> usize {
        match &self.emission {
            EmissionSpec::Spline { bases } => bases.iter().map(|b| b.num_basis()).product::<usize>() - 1,
            EmissionSpec::Gaussian { dim } => dim + tri_len(*dim),
        }
    }

    fn tpm_block_len(&self) -> usize {
        let off = self.n_states * (self.n_states - 1);
        match self.transition {
            TransitionSpec::Homogeneous => off,
            TransitionSpec::Covariate { n_covariates } => off * (1 + n_covariates),
        }
    }

    pub fn layout(&self) -> Layout {
        let tpm = 0..self.tpm_block_len();
        let e = self.emission_block_len();
        let emissions = (0..self.n_states)
            .map(|i| tpm.end + i * e..tpm.end + (i + 1) * e)
            .collect();
        Layout { tpm, emissions }
    }

    pub fn n_params(&self) -> usize {
        self.tpm_block_len() + self.n_states * self.emission_block_len()
    }

    /// Checks that `data` can be evaluated under this structure.
    pub fn check_data(&self, data: &SequenceSet) -> Result<()> {
        if data.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: data.dim(),
                context: "observation dimension".into(),
            });
        }
        if let TransitionSpec::Covariate { n_covariates } = self.transition {
            if data.n_covariates() != n_covariates {
                return Err(Error::DimensionMismatch {
                    expected: n_covariates,
                    got: data.n_covariates(),
                    context: "number of covariates".into(),
                });
            }
        }
        Ok(())
    }
}

/// Location of each parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub tpm: Range<usize>,
    pub emissions: Vec<Range<usize>>,
}

/// Flat unconstrained parameters: off-diagonal t.p.m. logits (or covariate
/// coefficients) followed by one emission block per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

/// Off-diagonal logits `ln(gamma_ij / gamma_ii)`, row-major.
pub fn pack_tpm(gamma: &TransitionMatrix) -> Result<Vec<f64>> {
    let n = gamma.n_states();
    let mut out = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        let gii = gamma.get(i, i);
        for j in 0..n {
            if i == j {
                continue;
            }
            let gij = gamma.get(i, j);
            if gij <= 0.0 || gii <= 0.0 {
                return Err(Error::invalid(format!(
                    "cannot take logits of a t.p.m. with non-positive entries (row {i})"
                )));
            }
            out.push((gij / gii).ln());
        }
    }
    Ok(out)
}

/// Inverse of [`pack_tpm`]; rows are softmax of `(0, logits)` with the diagonal as reference.
pub fn unpack_tpm(n: usize, logits: &[f64]) -> Result<TransitionMatrix> {
    if logits.len() != n * (n - 1) {
        return Err(Error::DimensionMismatch {
            expected: n * (n - 1),
            got: logits.len(),
            context: "t.p.m. logit block".into(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite t.p.m. logit"));
    }
    Ok(TransitionMatrix::from_row_major(n, tpm_from_logits(n, logits))
        .expect("softmax rows are stochastic"))
}

pub(crate) fn tpm_from_logits(n: usize, logits: &[f64]) -> Vec<f64> {
    let mut data = vec![0.0; n * n];
    let mut k = 0;
    for i in 0..n {
        let row = &mut data[i * n..(i + 1) * n];
        for (j, r) in row.iter_mut().enumerate() {
            if i != j {
                *r = logits[k];
                k += 1;
            }
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            total += *r;
        }
        row.iter_mut().for_each(|r| *r /= total);
    }
    data
}

fn off_diagonal(n: usize, full: &[f64], out: &mut Vec<f64>) {
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out.push(full[i * n + j]);
            }
        }
    }
}

fn expand_off_diagonal(n: usize, off: &[f64]) -> Vec<f64> {
    let mut full = vec![0.0; n * n];
    let mut k = 0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                full[i * n + j] = off[k];
                k += 1;
            }
        }
    }
    full
}

/// Flattens `model` according to `spec`.
pub fn pack(model: &HmmModel, spec: &ModelSpec) -> Result<ParameterVector> {
    let n = spec.n_states;
    if model.n_states() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: model.n_states(),
            context: "number of states".into(),
        });
    }
    let layout = spec.layout();
    let mut values = Vec::with_capacity(spec.n_params());
    match (&model.transition, spec.transition) {
        (Transition::Homogeneous { matrix }, TransitionSpec::Homogeneous) => values.extend(pack_tpm(matrix)?),
        (Transition::Homogeneous { matrix }, TransitionSpec::Covariate { n_covariates }) => {
            let c = CovariateTransition::from_matrix(matrix, n_covariates)?;
            pack_covariate(&c, &mut values);
        }
        (Transition::Covariate { model: c }, TransitionSpec::Covariate { n_covariates }) if c.n_covariates() == n_covariates => {
            pack_covariate(c, &mut values);
        }
        _ => return Err(Error::invalid("model transition does not match the declared structure")),
    }
    for e in &model.emissions {
        match (e, &spec.emission) {
            (Emission::Spline(t), EmissionSpec::Spline { bases }) if t.bases() == bases.as_slice() => {
                values.extend_from_slice(t.free_beta());
            }
            (Emission::Gaussian(g), EmissionSpec::Gaussian { dim }) if g.dim() == *dim => {
                values.extend_from_slice(g.mean());
                values.extend_from_slice(g.unconstrained_factor());
            }
            _ => return Err(Error::invalid("model emissions do not match the declared structure")),
        }
    }
    debug_assert_eq!(values.len(), spec.n_params());
    Ok(ParameterVector { values, layout })
}

fn pack_covariate(c: &CovariateTransition, out: &mut Vec<f64>) {
    let n = c.n_states();
    let nn = n * n;
    off_diagonal(n, c.intercepts(), out);
    for l in 0..c.n_covariates() {
        off_diagonal(n, &c.slopes()[l * nn..(l + 1) * nn], out);
    }
}

/// Rebuilds a model (stationary initial law) from a flat vector.
pub fn unpack(values: &[f64], spec: &ModelSpec) -> Result<HmmModel> {
    if values.len() != spec.n_params() {
        return Err(Error::DimensionMismatch {
            expected: spec.n_params(),
            got: values.len(),
            context: "parameter vector".into(),
        });
    }
    let layout = spec.layout();
    let n = spec.n_states;
    let tpm = &values[layout.tpm.clone()];
    let transition = match spec.transition {
        TransitionSpec::Homogeneous => Transition::Homogeneous {
            matrix: unpack_tpm(n, tpm)?,
        },
        TransitionSpec::Covariate { n_covariates } => {
            let off = n * (n - 1);
            let intercepts = expand_off_diagonal(n, &tpm[..off]);
            let slopes = (0..n_covariates)
                .flat_map(|l| expand_off_diagonal(n, &tpm[off * (l + 1)..off * (l + 2)]))
                .collect();
            Transition::Covariate {
                model: CovariateTransition::new(n, n_covariates, intercepts, slopes)?,
            }
        }
    };
    let emissions = layout
        .emissions
        .iter()
        .map(|r| {
            let block = &values[r.clone()];
            Ok(match &spec.emission {
                EmissionSpec::Spline { bases } => {
                    let mut beta = Vec::with_capacity(block.len() + 1);
                    beta.push(0.0);
                    beta.extend_from_slice(block);
                    Emission::Spline(TensorEmission::from_beta(bases.clone(), beta)?)
                }
                EmissionSpec::Gaussian { dim } => Emission::Gaussian(GaussianEmission::from_unconstrained(
                    block[..*dim].to_vec(),
                    block[*dim..].to_vec(),
                )?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    HmmModel::new(transition, InitialLaw::Stationary, emissions)
}

impl ParameterVector {
    pub fn from_model(model: &HmmModel, spec: &ModelSpec) -> Result<Self> {
        pack(model, spec)
    }

    pub fn to_model(&self, spec: &ModelSpec) -> Result<HmmModel> {
        unpack(&self.values, spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::Sequence;

    #[test]
    fn zero_logits_are_uniform() {
        let g = unpack_tpm(2, &[0.0, 0.0]).unwrap();
        assert_eq!(g.rows(), vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
    }

    #[test]
    fn persistent_matrix_logits() {
        let g = TransitionMatrix::new(vec![vec![0.97, 0.03], vec![0.03, 0.97]]).unwrap();
        let l = pack_tpm(&g).unwrap();
        let expect = (0.03f64 / 0.97).ln();
        assert_eq!(l, vec![expect, expect]);
        let back = unpack_tpm(2, &l).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((back.get(i, j) - g.get(i, j)).abs() < 1e-15);
            }
        }
        assert!(pack_tpm(&TransitionMatrix::identity(2)).is_err());
    }

    #[test]
    fn model_round_trip_is_exact() {
        let rows: Vec<Vec<f64>> = (0..30).map(|k| vec![(k as f64 * 0.37).sin(), (k as f64 * 0.11).cos()]).collect();
        let data = SequenceSet::single(Sequence::from_rows("s", &rows).unwrap());
        for spec in [
            ModelSpec::spline_for_data(&data, 3, &[5, 6], 0.01).unwrap(),
            ModelSpec::gaussian(2, 2).unwrap(),
            ModelSpec::gaussian(2, 2).unwrap().with_covariates(2),
            ModelSpec::spline_for_data(&data, 1, &[4, 4], 0.01).unwrap(),
        ] {
            let theta: Vec<f64> = (0..spec.n_params()).map(|k| ((k * 7919) % 13) as f64 / 13.0 - 0.5).collect();
            let model = unpack(&theta, &spec).unwrap();
            let again = pack(&model, &spec).unwrap();
            if matches!(spec.transition, TransitionSpec::Covariate { .. }) || spec.n_states == 1 {
                assert_eq!(again.values, theta);
            } else {
                // emission blocks are copied, logits pass through exp/log
                let tpm = spec.layout().tpm;
                assert_eq!(again.values[tpm.end..], theta[tpm.end..]);
                for (a, b) in again.values[tpm.clone()].iter().zip(&theta[tpm]) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
            assert_eq!(again.layout, spec.layout());
        }
    }

    #[test]
    fn layout_excludes_reference_entries() {
        let b = vec![SplineBasis::build(0, 5, 0.0, 1.0).unwrap(), SplineBasis::build(1, 6, 0.0, 1.0).unwrap()];
        let spec = ModelSpec::spline(2, b).unwrap();
        assert_eq!(spec.n_params(), 2 + 2 * 29);
        assert_eq!(spec.layout().emissions[1], 31..60);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn tpm_round_trip(raw in prop::collection::vec(0.01f64..1.0, 16)) {
                let rows: Vec<Vec<f64>> = raw.chunks(4).map(|r| {
                    let s: f64 = r.iter().sum();
                    r.iter().map(|v| v / s).collect()
                }).collect();
                let g = TransitionMatrix::new(rows).unwrap();
                let back = unpack_tpm(4, &pack_tpm(&g).unwrap()).unwrap();
                for i in 0..4 {
                    for j in 0..4 {
                        prop_assert!((back.get(i, j) - g.get(i, j)).abs() < 1e-14);
                    }
                }
            }
        }
    }
}
