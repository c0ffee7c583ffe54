//! Reusable decoder blocks and the receptive-field calculator.

pub mod layers;
pub mod pyramid;
pub mod receptive_field;
pub mod sab;

pub use layers::{norm_groups, Conv, ConvBlock, GroupNorm, InitRng};
pub use pyramid::{rf_table, BlockKind, Rfb, SelectiveOutput, SkBlock, Srfb, SrfbConfig};
pub use receptive_field::{receptive_field, BranchSpec, Stage};
pub use sab::{Sab, SabOutput, SAB_HIDDEN};

#[cfg(test)]
mod gradient_tests {
    use rand::SeedableRng;

    use super::*;
    use crate::autograd::{Graph, Var};
    use crate::params::{normal, ParamStore};
    use crate::tensor::{Shape, Tensor};

    /// Largest relative error between the analytic input gradient of
    /// `sum(out ⊙ dir)` and central differences, over every input element.
    fn input_grad_error(
        store: &ParamStore,
        x: &Tensor,
        forward: impl Fn(&mut Graph, &crate::autograd::Bound, Var) -> Var,
    ) -> f64 {
        let dir_seed = 77;
        let scalar = |g: &mut Graph, out: Var| {
            let dir = g.constant(normal(g.shape(out), 1.0, &mut InitRng::seed_from_u64(dir_seed)));
            let prod = g.mul(out, dir).unwrap();
            g.sum(prod)
        };
        let eval = |xt: &Tensor| {
            let mut g = Graph::new();
            let p = g.bind(store);
            let xv = g.constant(xt.clone());
            let out = forward(&mut g, &p, xv);
            let s = scalar(&mut g, out);
            g.value(s).data()[0]
        };
        let mut g = Graph::new();
        let p = g.bind(store);
        let xv = g.variable(x.clone());
        let out = forward(&mut g, &p, xv);
        let s = scalar(&mut g, out);
        let grads = g.backward(s).unwrap();
        let analytic = grads.get(xv).unwrap().clone();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..x.numel() {
            let mut a = x.clone();
            a.data_mut()[i] += h;
            let mut b = x.clone();
            b.data_mut()[i] -= h;
            let numeric = (eval(&a) - eval(&b)) / (2.0 * h);
            let an = analytic.data()[i];
            worst = worst.max((an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-6));
        }
        worst
    }

    fn input() -> Tensor {
        normal(Shape::new(1, 4, 8, 8), 1.0, &mut InitRng::seed_from_u64(42))
    }

    #[test]
    fn srfb_input_gradient() {
        let block = Srfb::new("b", &SrfbConfig::srfb(4)).unwrap();
        let mut store = ParamStore::new();
        block.init(&mut store, &mut InitRng::seed_from_u64(1));
        let err = input_grad_error(&store, &input(), |g, p, x| block.forward(g, p, x).unwrap().output);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sk_input_gradient() {
        let block = SkBlock::new("b", &SrfbConfig::sk(4)).unwrap();
        let mut store = ParamStore::new();
        block.init(&mut store, &mut InitRng::seed_from_u64(2));
        let err = input_grad_error(&store, &input(), |g, p, x| block.forward(g, p, x).unwrap().output);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rfb_input_gradient() {
        let block = Rfb::new("b", &SrfbConfig::srfb(4)).unwrap();
        let mut store = ParamStore::new();
        block.init(&mut store, &mut InitRng::seed_from_u64(3));
        let err = input_grad_error(&store, &input(), |g, p, x| block.forward(g, p, x).unwrap());
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sab_input_gradient() {
        let sab = Sab::new("s", 2);
        let mut store = ParamStore::new();
        sab.init(&mut store, &mut InitRng::seed_from_u64(4));
        let mut rng = InitRng::seed_from_u64(5);
        let d = normal(Shape::new(1, 1, 8, 8), 1.0, &mut rng);
        let z = normal(Shape::new(1, 1, 8, 8), 1.0, &mut rng);
        let err = input_grad_error(&store, &input(), |g, p, x| {
            let dv = g.constant(d.clone());
            let zv = g.constant(z.clone());
            sab.forward(g, p, x, &[dv, zv]).unwrap().output
        });
        assert!(err < 1e-4, "{err}");
    }
}
