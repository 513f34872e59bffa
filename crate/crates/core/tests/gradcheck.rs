use lab_core::gradcheck::{check_op, OPS};

#[test]
fn every_op_matches_finite_differences() {
    for op in OPS {
        for seed in 0..25 {
            let r = check_op(op, seed).unwrap();
            assert!(r.rel_error < 1e-4, "{op} seed {seed}: {:e}", r.rel_error);
        }
    }
}
