use std::rc::Rc;

use super::*;
use crate::oracle::{gradient_check, ParamSet};
use crate::param::Parameter;
use crate::rng::{sample_standard_normal, SeededRng};
use crate::tensor::Tensor;

fn p(name: &str, shape: &[usize], seed: u64) -> Parameter<f64> {
    Parameter::new(name, sample_standard_normal(&mut SeededRng::new(seed), shape).unwrap())
}

#[test]
fn mse_examples() {
    let tape = Tape::<f64>::new();
    let t = |v: &[f64]| Tensor::from_f64_slice(vec![v.len()], v).unwrap();
    let l = tape.constant(t(&[1.0, 2.0])).mse(&t(&[1.0, 2.0])).unwrap();
    assert_eq!(l.value().item(), 0.0);
    let l = tape.constant(t(&[0.0, 0.0])).mse(&t(&[1.0, 1.0])).unwrap();
    assert_eq!(l.value().item(), 1.0);
    let l = tape.constant(t(&[1.0, 2.0, 3.0])).mse(&t(&[2.0, 4.0, 6.0])).unwrap();
    assert!((l.value().item() - 14.0 / 3.0).abs() < 1e-15);
    let err = tape.constant(t(&[1.0])).mse(&t(&[1.0, 2.0])).unwrap_err();
    assert!(err.to_string().contains("[1]") && err.to_string().contains("[2]"));
}

#[test]
fn sum_gives_ones_and_square_gives_2x() {
    let mut x = Parameter::new("x", Tensor::<f64>::from_f64_slice(vec![2], &[1.0, 2.0]).unwrap());
    let tape = Tape::new();
    let v = tape.param(&x);
    let g = tape.backward(v.sum()).unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[1.0, 1.0]);

    let tape = Tape::new();
    let v = tape.param(&x);
    let g = tape.backward(v.mul(v).unwrap().sum()).unwrap();
    x.accumulate(&g).unwrap();
    assert_eq!(x.grad.data(), &[2.0, 4.0]);
}

#[test]
fn backward_errors() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(vec![3]));
    assert!(tape.backward(x).is_err(), "non-scalar loss");
    let mut empty = Tape::<f64>::new();
    let s = empty.constant(Tensor::scalar(1.0));
    let id = s.id;
    empty.clear();
    assert!(empty.is_empty());
    assert!(empty.backward(Var { tape: &empty, id }).is_err(), "empty tape");
}

#[test]
fn two_backward_passes_accumulate_exactly_twice() {
    let mut w = p("w", &[3, 4], 1);
    let x = sample_standard_normal::<f64>(&mut SeededRng::new(2), &[5, 3]).unwrap();
    for _ in 0..2 {
        let tape = Tape::new();
        let y = tape.constant(x.clone()).matmul(tape.param(&w)).unwrap().relu().sum();
        let g = tape.backward(y).unwrap();
        w.accumulate(&g).unwrap();
    }
    let tape = Tape::new();
    let y = tape.constant(x).matmul(tape.param(&w)).unwrap().relu().sum();
    let single = tape.backward(y).unwrap().get(&w).unwrap().clone();
    for (a, b) in w.grad.data().iter().zip(single.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut w = p("w", &[2, 2], 3);
    w.trainable = false;
    let tape = Tape::new();
    let y = tape.param(&w).sum();
    assert!(!y.requires_grad());
    let g = tape.backward(y).unwrap();
    assert!(g.get(&w).is_none());
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut set = ParamSet(vec![
        p("a", &[3, 4], 10),
        p("b", &[4, 5], 11),
        p("c", &[5, 4], 12),
        p("bias", &[5], 13),
        p("z", &[2, 4, 6], 14),
        Parameter::new("s", Tensor::scalar(1.7)),
    ]);
    let map = Rc::new(GatherMap::new(18, vec![3, 5], (0..15).map(|i| if i % 4 == 3 { GatherMap::ZERO } else { (i * 7 % 18) as u32 }).collect()));
    let pool = Rc::new(PoolMap::new(24, vec![6], 4, (0..24).map(|i| ((i * 5) % 24) as u32).collect()));
    let labels = [1usize, 4, 0];
    let checks = gradient_check(&mut set, 1e-5, 64, 0, |tape, m| {
        let [a, b, c, bias, z, s] = [0, 1, 2, 3, 4, 5].map(|i| tape.param(&m.0[i]));
        let ab = a.matmul(b)?.add_bias(bias, 1)?; // [3,5]
        let ac = a.matmul_nt(c)?; // [3,5]
        let mix = ab.mul(ac)?.relu().add(ab.scale(0.3))?;
        let logits = mix.sub(ac)?;
        let ce = logits.cross_entropy(&labels)?;
        let zz = a.reshape(&[12])?.reshape(&[3, 4])?.bmm(z)?; // shared left, [2, 3, 6]
        let a1 = a.reshape(&[1, 3, 4])?;
        let per_sample = Var::concat(&[a1, a1.scale(-0.5)], 0)?.bmm(z)?;
        let g = zz.add(per_sample)?.gather(&map, 1)?; // [2, 3, 5]
        let pooled = z.reshape(&[2, 24])?.max_pool(&pool, 1)?;
        let denom = s.broadcast(&pooled.shape())?;
        let ratio = pooled.mul(pooled)?.add_scalar(1.0).ln().div(denom)?;
        let gap = g.mean_trailing(1)?;
        let cat = Var::concat(&[ratio.reshape(&[12])?, gap.reshape(&[gap.value().len()])?], 0)?;
        ce.add(cat.sum())?.add(ab.mse(&Tensor::zeros(vec![3, 5]))?)
    })
    .unwrap();
    for c in checks {
        assert!(c.relative_error < 1e-6, "{c:?}");
    }
}
