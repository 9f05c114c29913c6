mod common;

use common::{check_case, grad_cases, GRAD_TOL};

#[test]
fn every_operator_matches_central_differences() {
    for seed in 0..4 {
        for case in grad_cases(seed) {
            let err = check_case(&case);
            assert!(
                err < GRAD_TOL,
                "seed {seed} {}: relative error {err:.3e}",
                case.name
            );
        }
    }
}

#[test]
fn logvar_clamp_blocks_gradient_outside_range() {
    use dubcount::tensor::{Graph, Tensor};
    let mut g = Graph::new();
    let s = g.param(Tensor::new(vec![3], vec![-12.0, 0.0, 12.0]).unwrap());
    let c = g.clamp(s, -10.0, 10.0);
    let loss = g.sum(c);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(s).unwrap().data(), &[0.0, 1.0, 0.0]);
}
