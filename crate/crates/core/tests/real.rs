use s2dm_core::real::*;

#[test]
fn gemm_matches_naive() {
    let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
    let b = [1.0f64, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
    let mut c = [0.0f64; 4];
    f64::gemm(2, 3, 2, 1.0, &a, 3, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
    assert_eq!(c, [1.0 - 2.0 + 1.5, 4.0 + 3.0, 4.0 - 5.0 + 3.0, 10.0 + 6.0]);
}
