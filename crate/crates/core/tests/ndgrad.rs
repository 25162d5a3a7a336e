mod common;

use chipnet_core::ndgrad::{Tape, Tensor};
use chipnet_core::Error;
use common::gradcheck::suite;

#[test]
fn primitive_gradients_match_finite_differences() {
    for seed in 0..10 {
        for (name, err) in suite(seed) {
            assert!(err < 1e-3, "seed {seed}: {name} relative error {err:e}");
        }
    }
}

#[test]
fn backward_consumes_the_tape() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]).with_requires_grad(true)).unwrap();
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    assert!(matches!(tape.sum(x), Err(Error::TapeConsumed)));
    assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    tape.reset();
    assert!(tape.is_empty());
}

#[test]
fn backward_needs_a_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]).with_requires_grad(true)).unwrap();
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]).with_requires_grad(true)).unwrap();
    let b = tape.constant(Tensor::from_vec(vec![3.0, 4.0])).unwrap();
    let m = tape.mul(a, b).unwrap();
    let s = tape.sum(m).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
    assert!(g.get(b).is_none());
}

#[test]
fn shared_inputs_accumulate() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::from_vec(vec![1.5, -2.0]).with_requires_grad(true)).unwrap();
    let m = tape.mul(a, a).unwrap();
    let s = tape.sum(m).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[3.0, -4.0]);
}

#[test]
fn non_finite_values_are_rejected() {
    let mut tape = Tape::new();
    assert!(matches!(tape.leaf(Tensor::from_vec(vec![f32::NAN])), Err(Error::NonFinite { .. })));
    let x = tape.leaf(Tensor::from_vec(vec![3e38])).unwrap();
    assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let b = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
    assert!(matches!(tape.mul(a, b), Err(Error::Shape { op: "mul", .. })));
    assert!(matches!(tape.conv2d(a, b, 1, 0), Err(Error::Shape { op: "conv2d", .. })));
    let logits = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap()).unwrap();
    assert!(matches!(tape.softmax_cross_entropy(logits, &[2]), Err(Error::LabelOutOfRange { label: 2, classes: 2 })));
}
