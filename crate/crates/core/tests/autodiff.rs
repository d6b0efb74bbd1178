mod common;

use std::sync::Arc;

use common::*;
use spair::autodiff::{gradcheck, op_suite, GradCheckOptions, Graph, SUITE_OPS};
use spair::synth::Rng;
use spair::tensor::{Mask, Shape, Tensor};

#[test]
fn every_op_passes_gradcheck() {
    let reports = op_suite(10, 99).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.op.as_str()).collect();
    assert_eq!(names, SUITE_OPS);
    for r in &reports {
        assert!(r.passes(1e-4), "{r}");
        assert!(r.checked > 0);
    }
}

#[test]
fn linear_conv_gradient_is_near_exact() {
    let mut rng = Rng::new(4);
    let x = rand_tensor(&mut rng, Shape::new(1, 2, 5, 5), 1.0);
    let w = rand_tensor(&mut rng, Shape::new(3, 2, 3, 3), 1.0);
    let r = gradcheck(
        "conv",
        &[x, w],
        |g, v| g.conv2d(v[0], v[1], None, 1, 1),
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.max_rel_err <= 1e-9, "{r}");
}

#[test]
fn l1_of_conv_matches_differences() {
    let mut rng = Rng::new(6);
    for _ in 0..5 {
        let x = rand_tensor(&mut rng, Shape::new(1, 2, 4, 5), 1.0);
        let w = rand_tensor(&mut rng, Shape::new(2, 2, 3, 3), 1.0);
        let target = Arc::new(rand_tensor(&mut rng, Shape::new(1, 2, 4, 5), 3.0));
        let r = gradcheck(
            "l1_conv",
            &[x, w],
            |g, v| {
                let y = g.conv2d(v[0], v[1], None, 1, 1)?;
                g.l1_loss(y, Arc::clone(&target))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passes(1e-4), "{r}");
    }
}

#[test]
fn l1_value_and_gradient_by_loops() {
    let mut rng = Rng::new(7);
    let p = rand_tensor(&mut rng, Shape::new(2, 3, 4, 4), 1.0);
    let t = rand_tensor(&mut rng, Shape::new(2, 3, 4, 4), 1.0);
    let mut g = Graph::new();
    let pv = g.param(p.clone());
    let l = g.l1_loss(pv, Arc::new(t.clone())).unwrap();
    let n = p.data().len() as f64;
    let want: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    assert!((g.value(l).data()[0] - want).abs() < 1e-14);
    let grads = g.backward(l).unwrap();
    let gp = grads.get(pv).unwrap();
    for ((a, b), d) in p.data().iter().zip(t.data()).zip(gp.data()) {
        assert!((d - (a - b).signum() / n).abs() < 1e-15);
    }
}

#[test]
fn bce_value_and_gradient_by_loops() {
    let mut rng = Rng::new(8);
    let p = Tensor::from_fn(Shape::new(2, 1, 4, 4), |_, _, _, _| rng.uniform_in(0.05, 0.95));
    let m = rand_mask(&mut rng, 2, 4, 4, 0.5);
    let mut g = Graph::new();
    let pv = g.param(p.clone());
    let l = g.bce_loss(pv, Arc::new(m.clone())).unwrap();
    let n = p.data().len() as f64;
    let mut want = 0.0;
    for (a, y) in p.data().iter().zip(m.data()) {
        want -= y * a.ln() + (1.0 - y) * (1.0 - a).ln();
    }
    want /= n;
    assert!((g.value(l).data()[0] - want).abs() < 1e-13);
    let grads = g.backward(l).unwrap();
    for ((a, y), d) in p.data().iter().zip(m.data()).zip(grads.get(pv).unwrap().data()) {
        let expect = (a - y) / (a * (1.0 - a) * n);
        assert!((d - expect).abs() < 1e-12);
    }
}

#[test]
fn bce_clamps_saturated_probabilities() {
    let p = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0f64, 1.0]).unwrap();
    let m = Mask::from_vec(1, 1, 2, vec![1.0, 0.0]).unwrap();
    let mut g = Graph::new();
    let pv = g.constant(p);
    let l = g.bce_loss(pv, Arc::new(m)).unwrap();
    let v = g.value(l).data()[0];
    assert!(v.is_finite());
    assert!((v + (1e-7f64).ln()).abs() < 1e-6);
}

#[test]
fn backward_can_run_twice() {
    let mut rng = Rng::new(9);
    let mut g = Graph::new();
    let x = g.param(rand_tensor(&mut rng, Shape::new(1, 1, 3, 3), 1.0));
    let w = g.param(rand_tensor(&mut rng, Shape::new(1, 1, 3, 3), 1.0));
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    let l = g.l1_loss(y, Arc::new(Tensor::zeros(Shape::new(1, 1, 3, 3)))).unwrap();
    let a = g.backward(l).unwrap();
    let b = g.backward(l).unwrap();
    assert_eq!(a.get(w), b.get(w));
}
