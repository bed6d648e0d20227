//! Diffusion MSE, the isometric text-embedding regularizer, the gradient
//! decoupling regularizer and the combined objective.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiseInput, Denoiser};
use crate::diffusion::NoisySample;
use crate::error::{Error, Result};
use crate::lora::ActiveLoras;
use crate::nn::Bound;
use crate::scalar::Scalar;
use crate::tensor::{cosine_similarity, Graph, Tensor, Var};
use crate::text::embedding_distance_var;

/// Which function of the branch-gradient cosine is minimized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoupleForm {
    /// The raw cosine. Its minimum is at −1 (antiparallel gradients).
    Cos,
    /// Squared cosine, minimized exactly at orthogonality.
    #[default]
    CosSq,
    CosAbs,
}

impl DecoupleForm {
    pub fn name(self) -> &'static str {
        match self {
            DecoupleForm::Cos => "cos",
            DecoupleForm::CosSq => "cos_sq",
            DecoupleForm::CosAbs => "cos_abs",
        }
    }

    pub fn apply(self, cos: f64) -> f64 {
        match self {
            DecoupleForm::Cos => cos,
            DecoupleForm::CosSq => cos * cos,
            DecoupleForm::CosAbs => cos.abs(),
        }
    }

    /// d form / d cos.
    pub fn slope(self, cos: f64) -> f64 {
        match self {
            DecoupleForm::Cos => 1.0,
            DecoupleForm::CosSq => 2.0 * cos,
            DecoupleForm::CosAbs => {
                if cos > 0.0 {
                    1.0
                } else if cos < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for DecoupleForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecoupleForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cos" => Ok(DecoupleForm::Cos),
            "cos_sq" => Ok(DecoupleForm::CosSq),
            "cos_abs" => Ok(DecoupleForm::CosAbs),
            other => Err(Error::Config(format!("unknown decouple form {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_iso: f64,
    pub lambda_dec: f64,
    pub decouple_form: DecoupleForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_iso: 1.0,
            lambda_dec: 1.0,
            decouple_form: DecoupleForm::CosSq,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda_iso", self.lambda_iso),
            ("lambda_dec", self.lambda_dec),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-step loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_o: f64,
    pub l_p: f64,
    pub l_iso: f64,
    pub l_dec: f64,
    pub cos_raw: f64,
    pub total: f64,
}

/// `L_o + L_p + λ_iso·L_iso + λ_dec·L_dec`.
pub fn total_objective(l_o: f64, l_p: f64, l_iso: f64, l_dec: f64, w: &LossWeights) -> Result<f64> {
    for (term, v) in [
        ("L_o", l_o),
        ("L_p", l_p),
        ("L_iso", l_iso),
        ("L_dec", l_dec),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { op: term.into() });
        }
    }
    Ok(l_o + l_p + w.lambda_iso * l_iso + w.lambda_dec * l_dec)
}

/// Mean over batch and pixels of `(pred − target)²`.
pub fn mse<T: Scalar>(g: &Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let t = g.constant(target);
    let t = g.reshape(t, &g.shape(pred))?;
    let d = g.sub(pred, t)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// Diffusion loss of a batch of noisy samples. `conds[i]` is the
/// conditioning node for `batch[i]`.
pub fn loss_mse<T: Scalar>(
    g: &Graph<T>,
    model: &Denoiser,
    batch: &[NoisySample<T>],
    conds: &[Var],
    base: &Bound,
    loras: &ActiveLoras<'_>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Empty("diffusion batch"));
    }
    if conds.len() != batch.len() {
        return Err(Error::LengthMismatch {
            expected: batch.len(),
            got: conds.len(),
        });
    }
    let inputs: Vec<DenoiseInput<'_, T>> = batch
        .iter()
        .zip(conds)
        .map(|(s, &cond)| DenoiseInput {
            z_t: s.z_t.data(),
            t: s.t,
            cond,
            tokens: &s.tokens,
        })
        .collect();
    let pred = model.forward(g, &inputs, base, loras, None)?;
    let mut eps = Vec::with_capacity(batch.len() * batch[0].eps.numel());
    for s in batch {
        eps.extend_from_slice(s.eps.data());
    }
    let target = Tensor::new(g.shape(pred).to_vec(), eps)?;
    mse(g, pred, &target)
}

/// Population variance of the distances from the anchor embedding to each
/// prompt embedding. Gradients reach both sides.
pub fn loss_isometric<T: Scalar>(g: &Graph<T>, anchor: Var, prompts: &[Var]) -> Result<Var> {
    if prompts.is_empty() {
        return Err(Error::Empty("isometric prompt set"));
    }
    let dists = prompts
        .iter()
        .map(|&p| embedding_distance_var(g, anchor, p))
        .collect::<Result<Vec<_>>>()?;
    let d = T::of(1.0 / prompts.len() as f64);
    let stacked = g.concat(
        &dists
            .iter()
            .map(|&x| g.reshape(x, &[1]))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let total = g.sum(stacked)?;
    let mean = g.scale(total, d)?;
    let centered = g.sub_bcast(stacked, mean)?;
    let sq = g.square(centered)?;
    let ss = g.sum(sq)?;
    g.scale(ss, d)
}

/// Value and cosine of the decoupling loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoupleValue {
    pub value: f64,
    pub cos_raw: f64,
}

pub fn loss_decouple<T: Scalar>(g_o: &[T], g_p: &[T], form: DecoupleForm) -> Result<DecoupleValue> {
    let cos = cosine_similarity(g_o, g_p)?;
    Ok(DecoupleValue {
        value: form.apply(cos),
        cos_raw: cos,
    })
}

/// Closed-form derivatives of the decoupling loss with respect to the two
/// gradient vectors:
/// `∂cos/∂u = v/(‖u‖‖v‖) − cos·u/‖u‖²`, times the form's slope.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoupleGrad {
    pub value: DecoupleValue,
    pub d_object: Vec<f64>,
    pub d_physics: Vec<f64>,
}

pub fn decouple_grad<T: Scalar>(g_o: &[T], g_p: &[T], form: DecoupleForm) -> Result<DecoupleGrad> {
    let value = loss_decouple(g_o, g_p, form)?;
    let u: Vec<f64> = g_o.iter().map(|x| x.as_f64()).collect();
    let v: Vec<f64> = g_p.iter().map(|x| x.as_f64()).collect();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = value.cos_raw;
    let k = form.slope(cos);
    let side = |a: &[f64], b: &[f64], na: f64, nb: f64| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(&ai, &bi)| k * (bi / (na * nb) - cos * ai / (na * na)))
            .collect()
    };
    Ok(DecoupleGrad {
        value,
        d_object: side(&u, &v, nu, nv),
        d_physics: side(&v, &u, nv, nu),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn objective_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(w.lambda_iso, 1.0);
        assert_eq!(w.lambda_dec, 1.0);
        assert_eq!(w.decouple_form, DecoupleForm::CosSq);
        let t = total_objective(0.5, 0.5, 0.1, 0.2, &w).unwrap();
        assert!((t - 1.3).abs() < 1e-12);
        let zero = LossWeights {
            lambda_iso: 0.0,
            lambda_dec: 0.0,
            ..w
        };
        assert_eq!(total_objective(0.5, 0.25, 9.0, 9.0, &zero).unwrap(), 0.75);
        assert!(total_objective(f64::NAN, 0.0, 0.0, 0.0, &w).is_err());
        assert!(LossWeights {
            lambda_iso: -1.0,
            ..w
        }
        .validate()
        .is_err());
    }

    #[test]
    fn mse_cases() {
        let g = Graph::<f64>::new();
        let eps = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let exact = g.constant(&eps);
        assert_eq!(g.item(mse(&g, exact, &eps).unwrap()).unwrap(), 0.0);
        let shifted = g.add_scalar(exact, 1.0).unwrap();
        assert_eq!(g.item(mse(&g, shifted, &eps).unwrap()).unwrap(), 1.0);
    }

    fn emb(g: &Graph<f64>, v: &[f64]) -> Var {
        g.param(&Tensor::new(vec![v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn isometric_cases() {
        let g = Graph::<f64>::new();
        let anchor = emb(&g, &[0.0, 0.0]);
        let one = emb(&g, &[1.0, 0.0]);
        let three = emb(&g, &[0.0, 3.0]);
        let single = loss_isometric(&g, anchor, &[three]).unwrap();
        assert_eq!(g.item(single).unwrap(), 0.0);
        // distances {1, 3}: mean 2, variance 1
        let l = loss_isometric(&g, anchor, &[one, three]).unwrap();
        assert!((g.item(l).unwrap() - 1.0).abs() < 1e-12);
        let sphere: Vec<Var> = [0.3f64, 1.1, 2.5]
            .iter()
            .map(|a| emb(&g, &[2.0 * a.cos(), 2.0 * a.sin()]))
            .collect();
        let l = loss_isometric(&g, anchor, &sphere).unwrap();
        assert!(g.item(l).unwrap().abs() < 1e-7);
        assert!(matches!(
            loss_isometric(&g, anchor, &[]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn isometric_gradients_reach_both_sides() {
        let g = Graph::<f64>::new();
        let anchor = emb(&g, &[0.1, 0.2]);
        let ps = [emb(&g, &[1.0, 0.0]), emb(&g, &[0.0, 3.0])];
        let l = loss_isometric(&g, anchor, &ps).unwrap();
        let grads = g.grad(l, &[anchor, ps[0], ps[1]]).unwrap();
        for gr in grads {
            assert!(g.value(gr).iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn decouple_forms() {
        let a = [1.0f64, 0.0];
        let b = [0.0f64, 1.0];
        let na = [-1.0f64, 0.0];
        for f in [DecoupleForm::Cos, DecoupleForm::CosSq, DecoupleForm::CosAbs] {
            assert_eq!(loss_decouple(&a, &b, f).unwrap().value, 0.0);
            assert_eq!(loss_decouple(&a, &a, f).unwrap().value, 1.0);
        }
        assert_eq!(
            loss_decouple(&a, &na, DecoupleForm::Cos).unwrap().value,
            -1.0
        );
        assert_eq!(
            loss_decouple(&a, &na, DecoupleForm::CosSq).unwrap().value,
            1.0
        );
        assert_eq!(
            loss_decouple(&a, &na, DecoupleForm::CosAbs).unwrap().value,
            1.0
        );
        assert_eq!(
            loss_decouple(&a, &na, DecoupleForm::CosSq).unwrap().cos_raw,
            -1.0
        );
        assert!(matches!(
            loss_decouple(&[0.0f64, 0.0], &a, DecoupleForm::Cos),
            Err(Error::DegenerateNorm { .. })
        ));
        assert_eq!(
            "cos_abs".parse::<DecoupleForm>().unwrap(),
            DecoupleForm::CosAbs
        );
        assert!("sin".parse::<DecoupleForm>().is_err());
    }

    #[test]
    fn decouple_grad_matches_finite_differences() {
        let u = [0.3f64, -1.2, 0.7, 0.05];
        let v = [1.0f64, 0.4, -0.2, 0.9];
        for form in [DecoupleForm::Cos, DecoupleForm::CosSq, DecoupleForm::CosAbs] {
            let dg = decouple_grad(&u, &v, form).unwrap();
            let h = 1e-6;
            for i in 0..4 {
                let mut up = u;
                let mut dn = u;
                up[i] += h;
                dn[i] -= h;
                let fd = (loss_decouple(&up, &v, form).unwrap().value
                    - loss_decouple(&dn, &v, form).unwrap().value)
                    / (2.0 * h);
                assert!((fd - dg.d_object[i]).abs() < 1e-7, "{form} {i}");
                let mut up = v;
                let mut dn = v;
                up[i] += h;
                dn[i] -= h;
                let fd = (loss_decouple(&u, &up, form).unwrap().value
                    - loss_decouple(&u, &dn, form).unwrap().value)
                    / (2.0 * h);
                assert!((fd - dg.d_physics[i]).abs() < 1e-7, "{form} {i}");
            }
        }
    }

    proptest! {
        #[test]
        fn isometric_permutation_invariant(
            pts in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2..5),
            rot in 0usize..5,
        ) {
            let g = Graph::<f64>::new();
            let anchor = emb(&g, &[0.1, -0.2, 0.3]);
            let vars: Vec<Var> = pts.iter().map(|p| emb(&g, p)).collect();
            let mut permuted = vars.clone();
            permuted.rotate_left(rot % vars.len());
            permuted.reverse();
            let a = g.item(loss_isometric(&g, anchor, &vars).unwrap()).unwrap();
            let b = g.item(loss_isometric(&g, anchor, &permuted).unwrap()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn cos_form_scale_invariant(
            u in prop::collection::vec(-1.0f64..1.0, 6),
            v in prop::collection::vec(-1.0f64..1.0, 6),
            k in 0.01f64..50.0,
        ) {
            prop_assume!(u.iter().map(|x| x * x).sum::<f64>() > 1e-4);
            prop_assume!(v.iter().map(|x| x * x).sum::<f64>() > 1e-4);
            let base = loss_decouple(&u, &v, DecoupleForm::Cos).unwrap().value;
            let su: Vec<f64> = u.iter().map(|x| x * k).collect();
            let sv: Vec<f64> = v.iter().map(|x| x * k * 0.5).collect();
            prop_assert!((loss_decouple(&su, &v, DecoupleForm::Cos).unwrap().value - base).abs() < 1e-9);
            prop_assert!((loss_decouple(&u, &sv, DecoupleForm::Cos).unwrap().value - base).abs() < 1e-9);
        }

        #[test]
        fn mse_nonnegative(
            p in prop::collection::vec(-2.0f64..2.0, 4),
            e in prop::collection::vec(-2.0f64..2.0, 4),
        ) {
            let g = Graph::<f64>::new();
            let pred = g.constant(&Tensor::new(vec![4], p.clone()).unwrap());
            let target = Tensor::new(vec![4], e.clone()).unwrap();
            let l = g.item(mse(&g, pred, &target).unwrap()).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, p == e);
        }
    }
}
