//! Central finite-difference verification of tape gradients.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::ParameterRegistry;
use crate::tape::{Tape, Var};

/// Denominator floor for relative errors, so that gradients that are zero up
/// to rounding are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub id: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub per_param: Vec<ParamCheck>,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    /// Parameters whose worst element exceeds the tolerance.
    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.per_param
            .iter()
            .filter(|p| !(p.max_rel_error <= self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// Compares `backward` against central differences for every element of
/// every parameter in `registry`.
///
/// `loss_fn` must build a fresh tape from the registry values and return it
/// with the scalar loss node; it is called once for the analytic gradient and
/// twice per parameter element.
pub fn finite_difference_check<F>(
    loss_fn: F,
    registry: &ParameterRegistry,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterRegistry) -> Result<(Tape, Var)> + Sync,
{
    let (tape, loss) = loss_fn(registry)?;
    let base = tape.value(loss).item();
    if !base.is_finite() {
        return Err(Error::NonFinite {
            context: "gradient check at unperturbed parameters".into(),
            loss: base,
        });
    }
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut jobs = Vec::new();
    for (pi, p) in registry.iter().enumerate() {
        for ei in 0..p.value.len() {
            jobs.push((pi, ei));
        }
    }
    let ids: Vec<String> = registry.ids().map(str::to_string).collect();

    let eval = |reg: &ParameterRegistry| -> Result<f64> {
        let (t, l) = loss_fn(reg)?;
        Ok(t.value(l).item())
    };

    let numeric: Vec<f64> = jobs
        .par_chunks(256)
        .map(|chunk| -> Result<Vec<f64>> {
            let mut reg = registry.clone();
            let mut out = Vec::with_capacity(chunk.len());
            for &(pi, ei) in chunk {
                let id = &ids[pi];
                let orig = reg.value(id)?.data()[ei];
                reg.get_mut(id).expect("id").value.data_mut()[ei] = orig + epsilon;
                let plus = eval(&reg)?;
                reg.get_mut(id).expect("id").value.data_mut()[ei] = orig - epsilon;
                let minus = eval(&reg)?;
                reg.get_mut(id).expect("id").value.data_mut()[ei] = orig;
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("gradient check perturbing {id}[{ei}]"),
                        loss: if plus.is_finite() { minus } else { plus },
                    });
                }
                out.push((plus - minus) / (2.0 * epsilon));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut per_param: Vec<ParamCheck> = ids
        .iter()
        .map(|id| ParamCheck {
            id: id.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        })
        .collect();
    for (&(pi, ei), &n) in jobs.iter().zip(&numeric) {
        let a = grads.get(&ids[pi]).map_or(0.0, |g| g.data()[ei]);
        let rel = relative_error(a, n);
        let entry = &mut per_param[pi];
        if rel > entry.max_rel_error || rel.is_nan() {
            *entry = ParamCheck {
                id: ids[pi].clone(),
                max_rel_error: rel,
                worst_index: ei,
                analytic: a,
                numeric: n,
            };
        }
    }
    Ok(GradCheckReport {
        epsilon,
        tolerance,
        per_param,
        elements_checked: jobs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Partition;
    use crate::tensor::Tensor;

    fn registry() -> ParameterRegistry {
        let mut r = ParameterRegistry::new();
        r.add("w", Tensor::vector(vec![0.3, -1.2, 2.5]), Partition::Pretrained).unwrap();
        r.add("a", Tensor::from_rows(&[vec![0.5, -0.25]]).unwrap(), Partition::Lightweight)
            .unwrap();
        r
    }

    fn quadratic(reg: &ParameterRegistry) -> Result<(Tape, Var)> {
        let mut t = Tape::new();
        let w = t.param("w", reg.value("w")?, true);
        let a = t.param("a", reg.value("a")?, true);
        let ww = t.mul(w, w)?;
        let aa = t.mul(a, a)?;
        let s1 = t.sum(ww);
        let s2 = t.sum(aa);
        let s2 = t.scale(s2, 3.0);
        let s = t.concat_rows(&[s1, s2])?;
        let s = t.sum(s);
        Ok((t, s))
    }

    #[test]
    fn quadratic_is_exact_for_any_epsilon() {
        for eps in [1e-6, 1e-5, 1e-4] {
            let report = finite_difference_check(quadratic, &registry(), eps, 1e-8).unwrap();
            assert!(report.max_rel_error() < 1e-8, "eps {eps}: {report:?}");
            assert_eq!(report.elements_checked, 5);
        }
    }

    #[test]
    fn constant_loss_passes_with_zero_gradients() {
        let report = finite_difference_check(
            |_| {
                let mut t = Tape::new();
                let c = t.constant(Tensor::scalar(4.2));
                Ok((t, c))
            },
            &registry(),
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.per_param.iter().all(|p| p.analytic == 0.0 && p.numeric == 0.0));
    }

    #[test]
    fn reports_wrong_gradients() {
        // Analytic gradient is computed for w², the loss value uses w³ behind a
        // constant, so the check must flag `w`.
        let report = finite_difference_check(
            |reg| {
                let mut t = Tape::new();
                let w = t.param("w", reg.value("w")?, true);
                let sq = t.mul(w, w)?;
                let s = t.sum(sq);
                let cube: f64 = reg.value("w")?.data().iter().map(|x| x * x * x).sum();
                let sq_val: f64 = reg.value("w")?.data().iter().map(|x| x * x).sum();
                let shift = t.constant(Tensor::scalar(cube - sq_val));
                let s2 = t.concat_rows(&[s, shift])?;
                let l = t.sum(s2);
                Ok((t, l))
            },
            &registry(),
            1e-5,
            1e-4,
        )
        .unwrap();
        let failed: Vec<_> = report.failures().iter().map(|p| p.id.clone()).collect();
        assert_eq!(failed, ["w"]);
    }

    #[test]
    fn non_finite_loss_is_diagnosed() {
        let err = finite_difference_check(
            |_| {
                let mut t = Tape::new();
                let c = t.constant(Tensor::scalar(f64::NAN));
                Ok((t, c))
            },
            &registry(),
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
