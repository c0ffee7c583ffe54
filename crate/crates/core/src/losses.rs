//! Weighted BCE defocus loss, depth distillation loss and their weighted
//! total over the fused output and every side output.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, BCE_EPS};
use crate::error::{Error, Result};
use crate::network::{ForwardVars, SideOutputs, LEVELS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Per-level defocus side weights, coarsest first.
    pub alpha: [f64; LEVELS],
    /// Per-level depth side weights, coarsest first.
    pub beta: [f64; LEVELS],
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: [1.0; LEVELS],
            beta: [1.0; LEVELS],
            gamma: 0.1,
        }
    }
}

impl LossWeights {
    pub fn with_gamma(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub defocus_final: f64,
    pub defocus_sides: Vec<f64>,
    pub depth_final: f64,
    pub depth_sides: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Fills `total` from the individual terms.
    pub fn from_terms(
        defocus_final: f64,
        defocus_sides: Vec<f64>,
        depth_final: f64,
        depth_sides: Vec<f64>,
        w: &LossWeights,
    ) -> Self {
        let side = |v: &[f64], k: &[f64]| v.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
        let defocus = defocus_final + side(&defocus_sides, &w.alpha);
        let depth = depth_final + side(&depth_sides, &w.beta);
        Self {
            total: defocus + w.gamma * depth,
            defocus_final,
            defocus_sides,
            depth_final,
            depth_sides,
        }
    }

    /// Sum of the depth terms before γ.
    pub fn depth_total(&self) -> f64 {
        self.depth_final + self.depth_sides.iter().sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.defocus_final.is_finite()
            && self.depth_final.is_finite()
            && self
                .defocus_sides
                .iter()
                .chain(&self.depth_sides)
                .all(|v| v.is_finite())
    }
}

/// Class weights of the weighted BCE, computed over the whole batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BceWeights {
    pub tp: usize,
    pub tn: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub w_pos: f64,
    pub w_neg: f64,
}

pub fn check_binary(mask: &Tensor) -> Result<()> {
    match mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::NonBinaryMask(format!("found value {v}"))),
        None => Ok(()),
    }
}

/// `w_pos = 1 − TP/N_p`, `w_neg = 1 − TN/N_n`, with TP/TN counted at the
/// 0.5 threshold on clamped predictions. An empty class gets weight 1.
pub fn bce_weights(mask: &Tensor, pred: &Tensor) -> Result<BceWeights> {
    pred.expect_shape(mask.shape(), "weighted_bce")?;
    check_binary(mask)?;
    let (mut tp, mut tn, mut n_pos, mut n_neg) = (0, 0, 0, 0);
    for (&m, &p) in mask.data().iter().zip(pred.data()) {
        let positive = p.clamp(BCE_EPS, 1.0 - BCE_EPS) > 0.5;
        if m == 1.0 {
            n_pos += 1;
            tp += positive as usize;
        } else {
            n_neg += 1;
            tn += !positive as usize;
        }
    }
    let weight = |hit: usize, n: usize| if n == 0 { 1.0 } else { 1.0 - hit as f64 / n as f64 };
    Ok(BceWeights {
        tp,
        tn,
        n_pos,
        n_neg,
        w_pos: weight(tp, n_pos),
        w_neg: weight(tn, n_neg),
    })
}

/// Graph version of [`weighted_bce`]; the class weights are constants.
pub fn weighted_bce_var(g: &mut Graph, pred: Var, mask: &Tensor) -> Result<Var> {
    let w = bce_weights(mask, g.value(pred))?;
    g.weighted_bce(pred, mask, w.w_pos, w.w_neg)
}

/// Pixel mean of the class-weighted binary cross-entropy.
pub fn weighted_bce(mask: &Tensor, pred: &Tensor) -> Result<f64> {
    let mut g = Graph::inference();
    let p = g.constant(pred.clone());
    let l = weighted_bce_var(&mut g, p, mask)?;
    Ok(g.value(l).data()[0])
}

/// Mean squared difference between predicted and teacher depth.
pub fn depth_l2(pred: &Tensor, teacher: &Tensor) -> Result<f64> {
    let mut g = Graph::inference();
    let p = g.constant(pred.clone());
    let l = g.mse(p, teacher)?;
    Ok(g.value(l).data()[0])
}

struct Heads<'a> {
    defocus_final: Var,
    defocus_sides: &'a [Var],
    depth_final: Option<Var>,
    depth_sides: &'a [Var],
}

fn build(
    g: &mut Graph,
    h: Heads<'_>,
    mask: &Tensor,
    teacher: Option<&Tensor>,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if h.defocus_sides.len() > LEVELS || h.depth_sides.len() > LEVELS {
        return Err(Error::InvalidArgument(format!(
            "at most {LEVELS} side outputs are supervised"
        )));
    }
    let mut terms = Vec::new();
    let df = weighted_bce_var(g, h.defocus_final, mask)?;
    terms.push(df);
    let mut df_sides = Vec::new();
    for (k, &s) in h.defocus_sides.iter().enumerate() {
        let l = weighted_bce_var(g, s, mask)?;
        df_sides.push(g.value(l).data()[0]);
        terms.push(g.scale(l, w.alpha[k]));
    }
    let mut dp_final = 0.0;
    let mut dp_sides = Vec::new();
    if let Some(final_depth) = h.depth_final {
        let teacher = teacher
            .ok_or_else(|| Error::InvalidArgument("teacher depth is required when the depth head is enabled".into()))?;
        let l = g.mse(final_depth, teacher)?;
        dp_final = g.value(l).data()[0];
        let mut depth_terms = vec![l];
        for (k, &s) in h.depth_sides.iter().enumerate() {
            let l = g.mse(s, teacher)?;
            dp_sides.push(g.value(l).data()[0]);
            depth_terms.push(g.scale(l, w.beta[k]));
        }
        let depth = g.sum_all(&depth_terms)?;
        terms.push(g.scale(depth, w.gamma));
    }
    let total = g.sum_all(&terms)?;
    let mut breakdown = LossBreakdown::from_terms(g.value(df).data()[0], df_sides, dp_final, dp_sides, w);
    breakdown.total = g.value(total).data()[0];
    Ok((total, breakdown))
}

/// Total objective over a forward pass whose outputs are at the mask's
/// resolution. Returns the scalar loss node and its breakdown.
pub fn total_loss_var(
    g: &mut Graph,
    out: &ForwardVars,
    mask: &Tensor,
    teacher: Option<&Tensor>,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let heads = Heads {
        defocus_final: out.defocus_final,
        defocus_sides: &out.defocus_sides_full,
        depth_final: out.depth_final,
        depth_sides: &out.depth_sides_full,
    };
    build(g, heads, mask, teacher, w)
}

pub fn total_loss(
    out: &SideOutputs,
    mask: &Tensor,
    teacher: Option<&Tensor>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let mut g = Graph::inference();
    let mut consts = |ts: &[Tensor]| ts.iter().map(|t| g.constant(t.clone())).collect::<Vec<_>>();
    let df_sides = consts(&out.defocus_sides_full);
    let dp_sides = consts(&out.depth_sides_full);
    let heads = Heads {
        defocus_final: g.constant(out.defocus_final.clone()),
        defocus_sides: &df_sides,
        depth_final: out.depth_final.as_ref().map(|t| g.constant(t.clone())),
        depth_sides: &dp_sides,
    };
    Ok(build(&mut g, heads, mask, teacher, w)?.1)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;

    use super::*;
    use crate::blocks::InitRng;
    use crate::params::normal;
    use crate::tensor::Shape;

    fn map2(v: [f64; 4]) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, 2, 2), v.to_vec()).unwrap()
    }

    /// Term-by-term evaluation of the weighted BCE with explicit loops.
    fn oracle(m: &[f64], p: &[f64]) -> f64 {
        let (mut tp, mut tn, mut np, mut nn) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..m.len() {
            let pc = p[i].clamp(1e-7, 1.0 - 1e-7);
            if m[i] == 1.0 {
                np += 1.0;
                if pc > 0.5 {
                    tp += 1.0;
                }
            } else {
                nn += 1.0;
                if pc <= 0.5 {
                    tn += 1.0;
                }
            }
        }
        let wp = if np == 0.0 { 1.0 } else { 1.0 - tp / np };
        let wn = if nn == 0.0 { 1.0 } else { 1.0 - tn / nn };
        let mut s = 0.0;
        for i in 0..m.len() {
            let pc = p[i].clamp(1e-7, 1.0 - 1e-7);
            s += -wp * m[i] * pc.ln() - wn * (1.0 - m[i]) * (1.0 - pc).ln();
        }
        s / m.len() as f64
    }

    #[test]
    fn hand_computed_two_by_two() {
        let m = map2([1.0, 0.0, 0.0, 0.0]);
        let w = bce_weights(&m, &map2([0.9, 0.4, 0.3, 0.2])).unwrap();
        assert_eq!((w.tp, w.n_pos, w.tn, w.n_neg), (1, 1, 3, 3));
        assert_eq!(weighted_bce(&m, &map2([0.9, 0.4, 0.3, 0.2])).unwrap(), 0.0);
        let l = weighted_bce(&m, &map2([0.4, 0.4, 0.3, 0.2])).unwrap();
        assert!((l - (-0.25 * 0.4f64.ln())).abs() < 1e-10, "{l}");
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let m = map2([1.0, 0.0, 1.0, 0.0]);
        assert_eq!(weighted_bce(&m, &m).unwrap(), 0.0);
    }

    #[test]
    fn all_wrong_reduces_to_plain_bce() {
        let m = map2([1.0, 0.0, 1.0, 0.0]);
        let p: [f64; 4] = [0.2, 0.7, 0.5, 0.9];
        let plain: f64 = (0..4)
            .map(|i| {
                if m.data()[i] == 1.0 {
                    -p[i].ln()
                } else {
                    -(1.0 - p[i]).ln()
                }
            })
            .sum::<f64>()
            / 4.0;
        let l = weighted_bce(&m, &map2(p)).unwrap();
        assert!((l - plain).abs() < 1e-10);
    }

    #[test]
    fn empty_class_gets_unit_weight() {
        let w = bce_weights(&map2([1.0; 4]), &map2([0.9, 0.2, 0.3, 0.4])).unwrap();
        assert_eq!(w.n_neg, 0);
        assert_eq!(w.w_neg, 1.0);
        assert!((w.w_pos - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_binary_mask() {
        let r = weighted_bce(&map2([1.0, 0.5, 0.0, 0.0]), &map2([0.5; 4]));
        assert!(matches!(r, Err(Error::NonBinaryMask(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = InitRng::seed_from_u64(11);
        let shape = Shape::new(2, 1, 4, 4);
        let mask = normal(shape, 1.0, &mut rng).map(|v| (v > 0.0) as u8 as f64);
        let pred = normal(shape, 1.5, &mut rng).map(crate::autograd::sigmoid);
        let w = bce_weights(&mask, &pred).unwrap();
        let value = |p: &Tensor| {
            let mut g = Graph::inference();
            let v = g.constant(p.clone());
            let l = g.weighted_bce(v, &mask, w.w_pos, w.w_neg).unwrap();
            g.value(l).data()[0]
        };
        let mut g = Graph::new();
        let v = g.variable(pred.clone());
        let l = weighted_bce_var(&mut g, v, &mask).unwrap();
        let grad = g.backward(l).unwrap().get(v).unwrap().clone();
        let h = 1e-6;
        for i in 0..pred.numel() {
            let (mut a, mut b) = (pred.clone(), pred.clone());
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let num = (value(&a) - value(&b)) / (2.0 * h);
            let an = grad.data()[i];
            let rel = (an - num).abs() / an.abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-5, "pixel {i}: {an} vs {num}");
        }
    }

    #[test]
    fn depth_l2_examples() {
        let mut rng = InitRng::seed_from_u64(3);
        let a = normal(Shape::new(1, 1, 3, 3), 1.0, &mut rng);
        let b = normal(Shape::new(1, 1, 3, 3), 1.0, &mut rng);
        assert_eq!(depth_l2(&a, &a).unwrap(), 0.0);
        assert!((depth_l2(&a.map(|v| v + 1.0), &a).unwrap() - 1.0).abs() < 1e-12);
        let brute: f64 = (0..9).map(|i| (a.data()[i] - b.data()[i]).powi(2)).sum::<f64>() / 9.0;
        assert!((depth_l2(&a, &b).unwrap() - brute).abs() < 1e-12);
        assert!(depth_l2(&a, &Tensor::zeros(Shape::new(1, 1, 2, 2))).is_err());
    }

    #[test]
    fn breakdown_toy_total() {
        let w = LossWeights {
            alpha: [1.0, 0.0, 0.0, 0.0, 0.0],
            ..LossWeights::default()
        };
        let b = LossBreakdown::from_terms(0.2, vec![0.3], 0.4, vec![0.1], &w);
        assert!((b.total - 0.55).abs() < 1e-12);
    }

    fn outputs(depth_offset: f64) -> (SideOutputs, Tensor, Tensor) {
        let mut rng = InitRng::seed_from_u64(8);
        let shape = Shape::new(1, 1, 4, 4);
        let mask = normal(shape, 1.0, &mut rng).map(|v| (v > 0.0) as u8 as f64);
        let teacher = normal(shape, 1.0, &mut rng);
        let prob = || normal(shape, 1.0, &mut InitRng::seed_from_u64(9)).map(crate::autograd::sigmoid);
        let depth = teacher.map(|v| v + depth_offset);
        let out = SideOutputs {
            defocus_sides: vec![],
            depth_sides: vec![],
            defocus_sides_full: vec![prob(); LEVELS],
            depth_sides_full: vec![depth.clone(); LEVELS],
            defocus_final: prob(),
            depth_final: Some(depth),
        };
        (out, mask, teacher)
    }

    #[test]
    fn perfect_outputs_give_zero_total() {
        let (mut out, mask, teacher) = outputs(0.0);
        out.defocus_final = mask.clone();
        out.defocus_sides_full = vec![mask.clone(); LEVELS];
        let b = total_loss(&out, &mask, Some(&teacher), &LossWeights::default()).unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn total_matches_breakdown_invariant_and_gamma_linearity() {
        let (out, mask, teacher) = outputs(0.7);
        let totals: Vec<f64> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&g| {
                let w = LossWeights::with_gamma(g);
                let b = total_loss(&out, &mask, Some(&teacher), &w).unwrap();
                let again = LossBreakdown::from_terms(
                    b.defocus_final,
                    b.defocus_sides.clone(),
                    b.depth_final,
                    b.depth_sides.clone(),
                    &w,
                );
                assert!((again.total - b.total).abs() < 1e-12);
                assert!((b.depth_final - 0.49).abs() < 1e-12);
                b.total
            })
            .collect();
        assert!(((totals[2] - totals[1]) - (totals[1] - totals[0])).abs() < 1e-12);
    }

    #[test]
    fn zero_gamma_ignores_depth() {
        let w = LossWeights::with_gamma(0.0);
        let (a, mask, teacher) = outputs(0.3);
        let (b, _, _) = outputs(-2.0);
        let la = total_loss(&a, &mask, Some(&teacher), &w).unwrap().total;
        let lb = total_loss(&b, &mask, Some(&teacher), &w).unwrap().total;
        assert_eq!(la, lb);
    }

    #[test]
    fn depth_head_requires_teacher() {
        let (out, mask, _) = outputs(0.0);
        assert!(total_loss(&out, &mask, None, &LossWeights::default()).is_err());
    }

    proptest! {
        #[test]
        fn matches_oracle_and_is_non_negative(
            m in prop::collection::vec(0u8..2, 16),
            p in prop::collection::vec(0.0f64..1.0, 16),
        ) {
            let mf: Vec<f64> = m.iter().map(|&v| v as f64).collect();
            let mask = Tensor::from_vec(Shape::new(1, 1, 4, 4), mf.clone()).unwrap();
            let pred = Tensor::from_vec(Shape::new(1, 1, 4, 4), p.clone()).unwrap();
            let l = weighted_bce(&mask, &pred).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!((l - oracle(&mf, &p)).abs() < 1e-12);
        }

        #[test]
        fn moving_toward_target_never_increases(
            m in prop::collection::vec(0u8..2, 16),
            p in prop::collection::vec(0.01f64..0.99, 16),
            idx in 0usize..16,
            frac in 0.0f64..1.0,
        ) {
            let mf: Vec<f64> = m.iter().map(|&v| v as f64).collect();
            let mask = Tensor::from_vec(Shape::new(1, 1, 4, 4), mf.clone()).unwrap();
            let pred = Tensor::from_vec(Shape::new(1, 1, 4, 4), p.clone()).unwrap();
            let w = bce_weights(&mask, &pred).unwrap();
            let frozen = |t: &Tensor| {
                let mut g = Graph::inference();
                let v = g.constant(t.clone());
                let l = g.weighted_bce(v, &mask, w.w_pos, w.w_neg).unwrap();
                g.value(l).data()[0]
            };
            let mut moved = pred.clone();
            let v = &mut moved.data_mut()[idx];
            *v += frac * (mf[idx] - *v);
            prop_assert!(frozen(&moved) <= frozen(&pred) + 1e-15);
        }
    }
}
