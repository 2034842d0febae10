use clusterfx::learners::tree::*;
use nalgebra::DMatrix;

#[test]
fn constant_target_is_a_single_leaf() {
    let x = DMatrix::from_fn(10, 2, |i, j| (i * (j + 1)) as f64);
    let t = fit_tree(&x, &[3.0; 10], 5, 1);
    assert_eq!(t.root, Node::Leaf(3.0));
}

#[test]
fn min_leaf_equal_to_n_gives_root_only() {
    let x = DMatrix::from_fn(8, 1, |i, _| i as f64);
    let y: Vec<f64> = (0..8).map(|i| (i * i) as f64).collect();
    let t = fit_tree(&x, &y, 5, 8);
    assert_eq!(t.root, Node::Leaf(17.5));
}

#[test]
fn recovers_a_threshold() {
    let x = DMatrix::from_fn(20, 1, |i, _| i as f64);
    let y: Vec<f64> = (0..20).map(|i| if i < 7 { 1.0 } else { 4.0 }).collect();
    let t = fit_tree(&x, &y, 1, 1);
    match t.root {
        Node::Split { feature, threshold, .. } => {
            assert_eq!(feature, 0);
            assert_eq!(threshold, 6.5);
        }
        _ => panic!("expected a split"),
    }
    assert_eq!(t.predict(&[3.0]), 1.0);
    assert_eq!(t.predict(&[10.0]), 4.0);
}
